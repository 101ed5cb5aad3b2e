#include <gtest/gtest.h>

#include <cmath>

#include "rep/optim.hpp"
#include "rep/prompting.hpp"

using namespace rep;

namespace {

Tensor random_images(std::size_t B, std::size_t S, RngStream rng) {
  Tensor t({B, S, S});
  for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
  return t;
}

ViTConfig small_config(std::size_t width = 16) {
  ViTConfig c;
  c.image_side = 8;
  c.patch_side = 4;
  c.depth = 2;
  c.width = width;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.n_classes = 4;
  return c;
}

void set_key(PromptPool& pool, std::size_t k, std::vector<double> v) {
  auto d = pool.key(k).tensor.data();
  std::copy(v.begin(), v.end(), d.begin());
}

std::size_t scan_argmax(std::span<const double> q, const PromptPool& pool) {
  std::size_t best = 0;
  double best_s = -2.0;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const auto key = pool.key(k).tensor.data();
    long double dot = 0, qq = 0, kk = 0;
    for (std::size_t j = 0; j < q.size(); ++j) {
      dot += static_cast<long double>(q[j]) * key[j];
      qq += static_cast<long double>(q[j]) * q[j];
      kk += static_cast<long double>(key[j]) * key[j];
    }
    const double s = static_cast<double>(dot / std::sqrt(qq * kk));
    if (s > best_s) {
      best_s = s;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST(Projection, ZeroMapGivesZeroQueryAndFirstPrompt) {
  VisionTransformer sur(small_config(8), RngStream(1, "s"));
  const auto phi = RandomProjection::from_matrix(Tensor({16, 8}, 0.0));
  const Tensor q = query_surrogate(random_images(3, 8, RngStream(2, "i")), sur, phi);
  for (double v : q.data()) EXPECT_EQ(v, 0.0);
  PromptPool pool(5, 2, 16, RngStream(3, "p"));
  for (std::size_t s : select_prompts(q, pool)) EXPECT_EQ(s, 0u);
}

TEST(Projection, IdentityReducesToFullModelQuery) {
  VisionTransformer m(small_config(), RngStream(4, "m"));
  const Tensor imgs = random_images(4, 8, RngStream(5, "i"));
  const Tensor a = query_surrogate(imgs, m, RandomProjection::identity(16));
  const Tensor b = m.query_features(imgs);
  ASSERT_EQ(a.shape(), b.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Projection, GaussianNormConcentrates) {
  const std::size_t D = 64, d = 32;
  const double expect = std::sqrt(double(D) / double(d));
  RngStream qs(11, "q");
  int inside = 0;
  double mean_ratio = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const RandomProjection phi(D, d, 7 + static_cast<std::uint64_t>(trial));
    Tensor q({1, d});
    for (double& v : q.data()) v = qs.normal();
    const Tensor qh = phi.apply(q);
    double nq = 0, nh = 0;
    for (double v : q.data()) nq += v * v;
    for (double v : qh.data()) nh += v * v;
    const double ratio = std::sqrt(nh / nq) / expect;
    mean_ratio += ratio / 1000.0;
    inside += ratio > 0.7 && ratio < 1.3;
  }
  EXPECT_GE(inside, 990);
  EXPECT_NEAR(mean_ratio, 1.0, 0.02);
}

TEST(Projection, FixedBySeed) {
  const RandomProjection a(16, 8, 7), b(16, 8, 7), c(16, 8, 8);
  for (std::size_t i = 0; i < a.matrix().numel(); ++i) EXPECT_EQ(a.matrix()[i], b.matrix()[i]);
  EXPECT_NE(a.matrix()[0], c.matrix()[0]);
}

TEST(Projection, WidthMismatchIsConfigError) {
  VisionTransformer sur(small_config(8), RngStream(1, "s"));
  EXPECT_THROW(query_surrogate(random_images(1, 8, RngStream(2, "i")), sur, RandomProjection(16, 12, 7)), ConfigError);
}

TEST(Selection, DominantAxis) {
  PromptPool pool(2, 1, 2, RngStream(1, "p"));
  set_key(pool, 0, {1, 0});
  set_key(pool, 1, {0, 1});
  const std::vector<double> q{0.9, 0.1};
  EXPECT_EQ(select_prompt(q, pool).index, 0u);
  const std::vector<double> q10{9.0, 1.0};
  EXPECT_EQ(select_prompt(q10, pool).index, 0u);
  const std::vector<double> q2{0.1, 0.9};
  EXPECT_EQ(select_prompt(q2, pool).index, 1u);
}

TEST(Selection, TiesGoToLowestIndex) {
  PromptPool pool(3, 1, 2, RngStream(1, "p"));
  set_key(pool, 0, {0, 1});
  set_key(pool, 1, {1, 0});
  set_key(pool, 2, {2, 0});
  const std::vector<double> q{1.0, 0.0};
  EXPECT_EQ(select_prompt(q, pool).index, 1u);
}

TEST(Selection, MatchesExhaustiveScan) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    PromptPool pool(8, 1, 16, RngStream(seed, "pool"));
    Tensor q({4, 16});
    RngStream rng(seed, "query");
    for (double& v : q.data()) v = rng.normal();
    const auto got = select_prompts(q, pool);
    for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(got[b], scan_argmax(q.data().subspan(b * 16, 16), pool)) << seed;
  }
}

TEST(Selection, WidthMismatchIsConfigError) {
  PromptPool pool(2, 1, 4, RngStream(1, "p"));
  const std::vector<double> q{1.0, 2.0};
  EXPECT_THROW(select_prompt(q, pool), ConfigError);
}

TEST(Loss, ZeroWeightsIsClassificationOnly) {
  RngStream rng(1, "l");
  Tensor logits({3, 4});
  for (double& v : logits.data()) v = rng.normal();
  const std::vector<int> labels{0, 3, 1};
  PromptPool pool(4, 1, 4, RngStream(2, "p"));
  Tensor q({3, 4});
  for (double& v : q.data()) v = rng.normal();
  const std::vector<std::size_t> sel{0, 1, 2};
  const LossTerms t = total_loss(logits, labels, pool, sel, q, LossWeights{0.0, 0.0});
  EXPECT_EQ(t.total.item(), cross_entropy(logits, labels).item());
}

TEST(Loss, AlignedKeyHasNoPromptTerm) {
  PromptPool pool(2, 1, 3, RngStream(2, "p"));
  set_key(pool, 1, {1, 2, 3});
  Tensor q({1, 3}, {2, 4, 6});
  Tensor logits({1, 2}, {0.0, 0.0});
  const std::vector<int> labels{0};
  const std::vector<std::size_t> sel{1};
  const LossTerms t = total_loss(logits, labels, pool, sel, q, LossWeights{});
  EXPECT_NEAR(t.prompt, 0.0, 1e-15);
  EXPECT_NEAR(t.total.item(), std::log(2.0), 1e-15);
}

TEST(Loss, NegativeWeightIsConfigError) {
  EXPECT_THROW(LossWeights({-1.0, 0.0}).validate(), ConfigError);
}

TEST(PromptUpdate, OnlySelectedPromptKeyAndHeadLearn) {
  VisionTransformer m(small_config(), RngStream(4, "m"));
  m.set_body_trainable(false);
  VisionTransformer sur(small_config(8), RngStream(5, "s"));
  sur.set_body_trainable(false);
  for (Parameter* p : sur.head_parameters()) p->set_trainable(false);
  const RandomProjection phi(16, 8, 7);
  PromptPool pool(6, 2, 16, RngStream(6, "p"));
  std::vector<Parameter*> trainable = pool.parameters();
  for (Parameter* p : m.head_parameters()) trainable.push_back(p);
  Adam adam(trainable);

  const Tensor imgs = random_images(3, 8, RngStream(7, "i"));
  const Tensor q = query_surrogate(imgs, sur, phi);
  const auto sel = select_prompts(q, pool);
  const std::vector<int> labels{0, 1, 2};
  const Tensor logits = m.forward(prepend(m.embed(imgs), gather_prompts(pool, sel))).logits;
  const LossTerms loss = total_loss(logits, labels, pool, sel, q, LossWeights{});

  std::vector<std::vector<double>> before;
  for (Parameter* p : pool.parameters()) before.emplace_back(p->tensor.data().begin(), p->tensor.data().end());
  std::vector<double> body_vals;
  for (Parameter* p : m.body_parameters()) body_vals.insert(body_vals.end(), p->tensor.data().begin(), p->tensor.data().end());

  loss.total.backward();
  EXPECT_FALSE(phi.matrix().has_grad());
  for (Parameter* p : sur.parameters()) EXPECT_FALSE(p->tensor.has_grad()) << p->name;
  for (Parameter* p : m.body_parameters()) EXPECT_FALSE(p->tensor.has_grad()) << p->name;
  adam.step();

  auto params = pool.parameters();
  for (std::size_t k = 0; k < pool.size(); ++k) {
    const bool used = std::find(sel.begin(), sel.end(), k) != sel.end();
    for (std::size_t which = 0; which < 2; ++which) {
      const std::size_t i = 2 * k + which;
      const auto now = params[i]->tensor.data();
      const bool changed = !std::equal(now.begin(), now.end(), before[i].begin());
      EXPECT_EQ(changed, used) << params[i]->name;
    }
  }
  std::vector<double> body_after;
  for (Parameter* p : m.body_parameters()) body_after.insert(body_after.end(), p->tensor.data().begin(), p->tensor.data().end());
  EXPECT_EQ(body_vals, body_after);
}

TEST(PromptPool, EmptyPoolIsConfigError) {
  EXPECT_THROW(PromptPool(0, 5, 8, RngStream(1, "p")), ConfigError);
}

TEST(PromptPool, GatherStacksSelectedPrompts) {
  PromptPool pool(4, 3, 2, RngStream(9, "p"));
  const std::vector<std::size_t> sel{2, 0};
  const Tensor g = gather_prompts(pool, sel);
  ASSERT_EQ(g.shape(), (Shape{2, 3, 2}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(g[b * 6 + i], pool.prompt(sel[b]).tensor[i]);
}
