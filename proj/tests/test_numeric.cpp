#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "rep/grad_check.hpp"
#include "rep/ops.hpp"
#include "rep/profiler.hpp"
#include "rep/rng.hpp"
#include "rep/tensor.hpp"
#include "rep/vit.hpp"

using namespace rep;

namespace {

Tensor random_tensor(Shape s, RngStream& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST(Matmul, IdentityTimesColumn) {
  Tensor a({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 1}, {3, 4});
  Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c[0], 3.0);
  EXPECT_EQ(c[1], 4.0);
}

TEST(Matmul, RowTimesColumn) {
  EXPECT_EQ(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4})).item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  RngStream rng(3, "matmul");
  for (int trial = 0; trial < 20; ++trial) {
    Tensor a = random_tensor({3, 3}, rng), b = random_tensor({3, 3}, rng);
    Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
        EXPECT_NEAR(c[i * 3 + j], s, 1e-12);
      }
  }
}

TEST(Matmul, ShapeMismatchIsConfigError) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ConfigError);
}

TEST(Matmul, ProfilerCountsTwoMknFlops) {
  Profiler p;
  {
    ProfileScope scope(p);
    matmul(Tensor({3, 5}, 1.0), Tensor({5, 7}, 1.0));
  }
  EXPECT_EQ(p.flops(), 2u * 3 * 5 * 7);
}

TEST(Matmul, BackwardAccumulatesIntoBothOperands) {
  Tensor a({1, 2}, {1, 2});
  Tensor b({2, 1}, {3, 4});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  matmul(a, b).backward();
  EXPECT_EQ(a.grad()[0], 3.0);
  EXPECT_EQ(a.grad()[1], 4.0);
  EXPECT_EQ(b.grad()[0], 1.0);
  EXPECT_EQ(b.grad()[1], 2.0);
}

TEST(Softmax, Symmetric) {
  Tensor s = softmax(Tensor({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(s[0], 0.5);
  EXPECT_DOUBLE_EQ(s[1], 0.5);
}

TEST(Softmax, LargeLogitDoesNotOverflow) {
  Tensor s = softmax(Tensor({2}, {1000, 0}));
  EXPECT_NEAR(s[0], 1.0, 1e-12);
  EXPECT_NEAR(s[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesExtendedPrecision) {
  Tensor s = softmax(Tensor({3}, {1, 2, 3}));
  long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], static_cast<double>(std::exp(static_cast<long double>(i + 1)) / z), 1e-12);
}

TEST(Softmax, RowsSumToOneAlongAnyAxis) {
  RngStream rng(5, "softmax");
  Tensor x = random_tensor({3, 4, 5}, rng, 3.0);
  for (int axis : {0, 1, 2}) {
    Tensor s = softmax(x, axis);
    const std::size_t len = x.dim(axis);
    const std::size_t inner = axis == 2 ? 1 : axis == 1 ? 5 : 20;
    const std::size_t outer = x.numel() / (len * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          const double v = s[o * len * inner + j * inner + i];
          EXPECT_GE(v, 0.0);
          sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-12);
      }
  }
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  EXPECT_THROW(softmax(Tensor({2}, {NAN, 0.0})), NumericError);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tensor y = layer_norm(Tensor({4}, 3.5), Tensor(), Tensor(), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementClosedForm) {
  const double eps = 1e-5;
  Tensor y = layer_norm(Tensor({2}, {1, -1}), Tensor({2}, 1.0), Tensor({2}, 0.0), eps);
  const double c = 1.0 / std::sqrt(1.0 + eps);
  EXPECT_NEAR(y[0], c, 1e-15);
  EXPECT_NEAR(y[1], -c, 1e-15);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  RngStream rng(9, "ln");
  std::vector<Parameter> params{Parameter("x", random_tensor({3, 6}, rng), true),
                                Parameter("g", random_tensor({6}, rng), true),
                                Parameter("b", random_tensor({6}, rng), true)};
  const Tensor w = random_tensor({3, 6}, rng);
  auto f = [&] { return sum(mul(layer_norm(params[0].tensor, params[1].tensor, params[2].tensor, 1e-5), w)); };
  EXPECT_LE(grad_check(f, params).max_rel_error, 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  std::vector<int> labels{2};
  EXPECT_NEAR(cross_entropy(Tensor({1, 4}, 0.0), labels).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, ConfidentCorrectLogitTendsToZero) {
  std::vector<int> labels{1};
  double prev = 1e9;
  for (double scale : {1.0, 10.0, 100.0}) {
    const double l = cross_entropy(Tensor({1, 3}, {0, scale, 0}), labels).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-40);
}

TEST(CrossEntropy, MatchesExtendedPrecisionOracle) {
  RngStream rng(11, "ce");
  Tensor logits = random_tensor({2, 3}, rng, 2.0);
  std::vector<int> labels{2, 0};
  long double total = 0.0L;
  for (std::size_t b = 0; b < 2; ++b) {
    long double z = 0.0L;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(static_cast<long double>(logits[b * 3 + c]));
    total += std::log(z) - static_cast<long double>(logits[b * 3 + static_cast<std::size_t>(labels[b])]);
  }
  EXPECT_NEAR(cross_entropy(logits, labels).item(), static_cast<double>(total / 2.0L), 1e-10);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHotOverB) {
  RngStream rng(12, "ce");
  Tensor logits = random_tensor({2, 3}, rng);
  logits.set_requires_grad(true);
  std::vector<int> labels{1, 2};
  cross_entropy(logits, labels).backward();
  Tensor p = softmax(logits.detach());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      const double expect = (p[b * 3 + c] - (static_cast<int>(c) == labels[b] ? 1.0 : 0.0)) / 2.0;
      EXPECT_NEAR(logits.grad()[b * 3 + c], expect, 1e-15);
    }
}

TEST(CrossEntropy, OutOfRangeLabelIsInputError) {
  std::vector<int> labels{3};
  EXPECT_THROW(cross_entropy(Tensor({1, 3}), labels), InputError);
  std::vector<int> negative{-1};
  EXPECT_THROW(cross_entropy(Tensor({1, 3}), negative), InputError);
}

TEST(CrossEntropy, MaskedClassesGetNoGradient) {
  Tensor logits({1, 4}, {0.3, -0.2, 0.9, 0.1});
  logits.set_requires_grad(true);
  std::vector<int> labels{2};
  const bool active[] = {false, false, true, true};
  const double loss = cross_entropy(logits, labels, active).item();
  EXPECT_NEAR(loss, std::log(std::exp(0.9) + std::exp(0.1)) - 0.9, 1e-14);
  cross_entropy(logits, labels, active).backward();
  EXPECT_EQ(logits.grad()[0], 0.0);
  EXPECT_EQ(logits.grad()[1], 0.0);
}

TEST(GradCheck, Quadratic) {
  std::vector<Parameter> params{Parameter("w", Tensor({1}, {3.0}), true)};
  auto f = [&] { return sum(mul(params[0].tensor, params[0].tensor)); };
  const auto r = grad_check(f, params);
  EXPECT_NEAR(r.analytic[0][0], 6.0, 1e-12);
  EXPECT_LE(r.max_rel_error, 1e-8);
}

TEST(GradCheck, FrozenParameterReportsZero) {
  std::vector<Parameter> params{Parameter("w", Tensor({1}, {3.0}), false), Parameter("v", Tensor({1}, {2.0}), true)};
  auto f = [&] { return sum(mul(params[0].tensor, params[1].tensor)); };
  const auto r = grad_check(f, params);
  EXPECT_EQ(r.analytic[0][0], 0.0);
  EXPECT_NEAR(r.analytic[1][0], 3.0, 1e-12);
}

TEST(GradCheck, TransformerBlockSixteenTokens) {
  ViTConfig cfg;
  cfg.image_side = 16;
  cfg.patch_side = 4;  // 16 patches
  cfg.depth = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.n_classes = 3;
  VisionTransformer vit(cfg, RngStream(21, "init"));
  RngStream rng(22, "x");
  Tensor images = random_tensor({1, 16, 16}, rng);
  std::vector<Parameter> params;
  for (Parameter* p : vit.parameters()) params.push_back(*p);
  std::vector<int> labels{1};
  auto f = [&] { return cross_entropy(vit.forward(vit.embed(images)).logits, labels); };
  EXPECT_LE(grad_check(f, params, 1e-5).max_rel_error, 1e-4);
}

TEST(Gelu, MatchesErfForm) {
  Tensor y = gelu(Tensor({3}, {-1.0, 0.0, 2.0}));
  for (int i = 0; i < 3; ++i) {
    const double x = std::vector<double>{-1.0, 0.0, 2.0}[i];
    EXPECT_NEAR(y[i], 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(CompositeOps, GradientsMatchFiniteDifferences) {
  RngStream rng(31, "ops");
  std::vector<Parameter> params{Parameter("a", random_tensor({2, 3, 4}, rng), true),
                                Parameter("w", random_tensor({4, 5}, rng), true),
                                Parameter("b", random_tensor({5}, rng), true),
                                Parameter("qkv", random_tensor({2, 3, 12}, rng), true)};
  const std::vector<double> sizes{1, 2, 1, 3, 1, 1};
  auto f = [&] {
    Tensor h = gelu(linear(params[0].tensor, params[1].tensor, params[2].tensor));
    Tensor att = self_attention(params[3].tensor, 2, sizes);
    Tensor s = softmax(scale(h, 0.7), 1);
    return add(sum(mul(s, h)), sum(mul(att, att)));
  };
  EXPECT_LE(grad_check(f, params).max_rel_error, 1e-4);
}

TEST(TensorInvariant, NonFiniteForwardIsNumericError) {
  Tensor a({1}, {std::numeric_limits<double>::max()});
  EXPECT_THROW(scale(a, 10.0), NumericError);
}

TEST(NoGrad, GuardSuppressesTape) {
  Tensor a({2}, 1.0);
  a.set_requires_grad(true);
  {
    NoGradGuard g;
    EXPECT_FALSE(scale(a, 2.0).requires_grad());
  }
  EXPECT_TRUE(scale(a, 2.0).requires_grad());
}

TEST(Rng, SameSeedAndStreamRepeat) {
  RngStream a(42, "ald-gate"), b(42, "ald-gate"), c(42, "data");
  for (std::uint64_t i = 0; i < 100; ++i) {
    EXPECT_EQ(a.bits_at(i), b.bits_at(i));
    EXPECT_EQ(a.normal_at(i), b.normal_at(i));
  }
  int same = 0;
  for (std::uint64_t i = 0; i < 100; ++i) same += a.bits_at(i) == c.bits_at(i);
  EXPECT_EQ(same, 0);
}

TEST(Rng, UniformInUnitInterval) {
  RngStream r(1, "u");
  for (std::uint64_t i = 0; i < 10000; ++i) {
    const double u = r.uniform_at(i);
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
}

TEST(Rng, DrawsDependOnlyOnIndex) {
  RngStream r(7, "projection");
  const double late = r.normal_at(500);
  for (std::uint64_t i = 0; i < 500; ++i) r.normal_at(i);
  EXPECT_EQ(r.normal_at(500), late);
  EXPECT_NE(r.child("a").bits_at(0), r.child("b").bits_at(0));
}
