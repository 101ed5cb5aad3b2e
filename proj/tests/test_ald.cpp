#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rep/ald.hpp"
#include "rep/vit.hpp"

using namespace rep;

TEST(KeepProbability, StartsAtOneBelowThreshold) {
  const DropSchedule s{0.5, 0.1, 0.9, 4.0};
  EXPECT_EQ(keep_probability(0, s, 0.0), 1.0);
  EXPECT_EQ(keep_probability(0, s, 3.0), 1.0);
}

TEST(KeepProbability, LimitWithHeavyMerging) {
  const DropSchedule s{0.5, 0.1, 0.9, 4.0};
  EXPECT_NEAR(keep_probability(10000, s, 8.0), 0.45, 1e-15);
  EXPECT_NEAR(keep_probability(10000, s, 0.0), 0.5, 1e-15);
}

TEST(KeepProbability, ZeroDecayIsConstant) {
  const DropSchedule s{0.3, 0.0, 0.9, 4.0};
  for (std::uint64_t t : {0, 1, 50, 5000}) {
    EXPECT_EQ(keep_probability(t, s, 0.0), 1.0);
    EXPECT_EQ(keep_probability(t, s, 4.0), 0.9);
  }
}

TEST(KeepProbability, ThresholdIsInclusive) {
  const DropSchedule s{0.5, 0.0, 0.9, 4.0};
  EXPECT_EQ(keep_probability(0, s, 3.999), 1.0);
  EXPECT_EQ(keep_probability(0, s, 4.0), 0.9);
}

TEST(KeepProbability, RatioIsAlphaAtEveryStep) {
  const DropSchedule s{0.5, 5.0 / 300.0, 0.9, 4.0};
  for (std::uint64_t t = 0; t < 300; t += 7)
    EXPECT_NEAR(keep_probability(t, s, 10.0) / keep_probability(t, s, 0.0), 0.9, 1e-15);
}

TEST(KeepProbability, NonincreasingInTime) {
  const DropSchedule s{0.2, 0.05, 0.9, 4.0};
  for (double merged : {0.0, 9.0}) {
    double prev = 2.0;
    for (std::uint64_t t = 0; t < 200; ++t) {
      const double th = keep_probability(t, s, merged);
      EXPECT_LE(th, prev);
      EXPECT_GT(th, 0.0);
      EXPECT_LE(th, 1.0);
      prev = th;
    }
  }
}

TEST(KeepProbability, InfiniteThresholdNeverAdjusts) {
  const DropSchedule s{0.5, 0.1, 0.9, std::numeric_limits<double>::infinity()};
  EXPECT_EQ(keep_probability(0, s, 1e9), 1.0);
}

TEST(KeepProbability, BaselineStrategies) {
  const DropSchedule s{0.5, 0.1, 0.9, 4.0};
  EXPECT_EQ(keep_probability(DropStrategy::progressive, 0, 3, 6, s, 100.0), 1.0);
  EXPECT_DOUBLE_EQ(keep_probability(DropStrategy::stochastic_depth, 0, 6, 6, s, 0.0), 0.5);
  EXPECT_DOUBLE_EQ(keep_probability(DropStrategy::stochastic_depth, 99, 3, 6, s, 0.0), 0.75);
}

TEST(DropSchedule, ValidationBounds) {
  EXPECT_THROW((DropSchedule{0.0, 0.1, 0.9, 4}.validate()), ConfigError);
  EXPECT_THROW((DropSchedule{1.1, 0.1, 0.9, 4}.validate()), ConfigError);
  EXPECT_THROW((DropSchedule{0.5, -0.1, 0.9, 4}.validate()), ConfigError);
  EXPECT_THROW((DropSchedule{0.5, 0.1, 0.0, 4}.validate()), ConfigError);
  EXPECT_THROW((DropSchedule{0.5, 0.1, 0.9, -1}.validate()), ConfigError);
  EXPECT_NO_THROW((DropSchedule{1.0, 0.0, 1.0, 0}.validate()));
}

TEST(Defaults, PerSizeClass) {
  EXPECT_EQ(defaults_for("large").tau, 16.0);
  EXPECT_EQ(defaults_for("base").tau, 12.0);
  EXPECT_EQ(defaults_for("tiny").tau, 8.0);
  EXPECT_EQ(defaults_for("desk").tau, 4.0);
  for (auto c : {"large", "base", "tiny", "desk"}) EXPECT_EQ(defaults_for(c).alpha, 0.9);
  EXPECT_THROW(defaults_for("huge"), ConfigError);
}

TEST(Gate, CertainKeepRunsBlock) {
  const Tensor x({2}, {1.0, 2.0});
  const RngStream rng(1, "g");
  int calls = 0;
  auto block = [&](const Tensor& v) {
    ++calls;
    return scale(v, 3.0);
  };
  for (std::uint64_t i = 0; i < 100; ++i) EXPECT_EQ(gate_layer(block, x, 1.0, rng, i)[1], 6.0);
  EXPECT_EQ(calls, 100);
}

TEST(Gate, SkipReturnsInput) {
  const Tensor x({2}, {1.0, 2.0});
  const RngStream rng(1, "g");
  auto block = [](const Tensor& v) { return scale(v, 3.0); };
  for (std::uint64_t i = 0; i < 100; ++i) EXPECT_EQ(gate_layer(block, x, 1e-300, rng, i).node(), x.node());
  EXPECT_EQ(gate_layer(block, x, 1e-300, rng, 0, false)[0], 3.0);
}

TEST(Gate, EmpiricalKeepRate) {
  const RngStream rng(42, "gate");
  int kept = 0;
  for (std::uint64_t i = 0; i < 10000; ++i) kept += bernoulli_keep(0.5, rng, i);
  // binomial sd is 50; allow 4 sd
  EXPECT_GE(kept, 4800);
  EXPECT_LE(kept, 5200);
}

TEST(LayerDropper, FeedbackDrivesAlpha) {
  LayerDropper d(DropSchedule{0.5, 0.0, 0.9, 4.0}, 3, RngStream(1, "d"));
  d.begin_step(0, 0);
  EXPECT_EQ(d.theta(0), 1.0);
  MergeReport rep;
  rep.rows = {{0, 20, 0, 20, true}, {1, 20, 5, 15, true}, {2, 15, 5, 10, false}};
  d.update_feedback(rep);
  EXPECT_EQ(d.theta(0), 1.0);
  EXPECT_EQ(d.theta(1), 0.9);
  EXPECT_EQ(d.theta(2), 1.0);  // did not run: previous feedback kept
  d.reset_task();
  EXPECT_EQ(d.theta(1), 1.0);
}

TEST(LayerDropper, TraceRecordsEveryGate) {
  LayerDropper d(DropSchedule{0.5, 1.0, 0.9, 4.0}, 4, RngStream(2, "d"));
  for (std::uint64_t t = 0; t < 3; ++t) {
    d.begin_step(t, t);
    for (std::size_t l = 0; l < 4; ++l) d.gate(l);
  }
  ASSERT_EQ(d.trace().events.size(), 12u);
  for (std::size_t l = 0; l < 4; ++l) EXPECT_TRUE(d.trace().events[l].kept);  // theta = 1 at t = 0
  EXPECT_EQ(d.trace().events[11].step, 2u);
  EXPECT_EQ(d.trace().events[11].layer, 3u);
}

TEST(LayerDropper, SameSeedSameGates) {
  auto run = [](std::uint64_t seed) {
    LayerDropper d(DropSchedule{0.5, 0.5, 0.9, 4.0}, 6, RngStream(seed, "d"));
    std::vector<bool> out;
    for (std::uint64_t t = 0; t < 20; ++t) {
      d.begin_step(t, t);
      for (std::size_t l = 0; l < 6; ++l) out.push_back(d.gate(l));
    }
    return out;
  };
  EXPECT_EQ(run(3), run(3));
  EXPECT_NE(run(3), run(4));
}
