#pragma once

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rep/errors.hpp"
#include "rep/ops.hpp"
#include "rep/rng.hpp"
#include "rep/tensor.hpp"
#include "rep/vit.hpp"

namespace rep {

/// M learnable prompts [L_p x D], each addressed by a learnable key [D].
class PromptPool {
 public:
  PromptPool() = default;

  PromptPool(std::size_t pool_size, std::size_t prompt_length, std::size_t width, RngStream rng)
      : length_(prompt_length), width_(width) {
    if (pool_size == 0) throw ConfigError("prompt pool must not be empty");
    for (std::size_t k = 0; k < pool_size; ++k) {
      Tensor p({prompt_length, width});
      for (double& v : p.data()) v = rng.uniform(-1.0, 1.0);
      Tensor key({width});
      for (double& v : key.data()) v = rng.uniform(-1.0, 1.0);
      prompts_.emplace_back("prompt." + std::to_string(k), p, true);
      keys_.emplace_back("key." + std::to_string(k), key, true);
    }
    rng_ = rng.child("reinit");
    ensure_nonzero_keys();
  }

  std::size_t size() const { return prompts_.size(); }
  std::size_t prompt_length() const { return length_; }
  std::size_t width() const { return width_; }

  const Parameter& prompt(std::size_t k) const { return prompts_.at(k); }
  const Parameter& key(std::size_t k) const { return keys_.at(k); }
  Parameter& key(std::size_t k) { return keys_.at(k); }

  std::vector<Tensor> prompt_tensors() const {
    std::vector<Tensor> out;
    for (const auto& p : prompts_) out.push_back(p.tensor);
    return out;
  }
  std::vector<Tensor> key_tensors() const {
    std::vector<Tensor> out;
    for (const auto& k : keys_) out.push_back(k.tensor);
    return out;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (std::size_t k = 0; k < size(); ++k) {
      out.push_back(&prompts_[k]);
      out.push_back(&keys_[k]);
    }
    return out;
  }

  /// Re-draws any key whose norm fell below 1e-12.
  void ensure_nonzero_keys() {
    for (auto& k : keys_) {
      auto v = k.tensor.data();
      double n2 = 0.0;
      for (double x : v) n2 += x * x;
      while (std::sqrt(n2) < 1e-12) {
        n2 = 0.0;
        for (double& x : v) {
          x = rng_.uniform(-1.0, 1.0);
          n2 += x * x;
        }
      }
    }
  }

 private:
  std::size_t length_ = 0, width_ = 0;
  std::vector<Parameter> prompts_, keys_;
  RngStream rng_{0, "pool"};
};

/// Fixed Gaussian map R^d -> R^D with entries ~ N(0, 1/d). Never trained.
class RandomProjection {
 public:
  RandomProjection() = default;

  RandomProjection(std::size_t out_dim, std::size_t in_dim, std::uint64_t seed) : seed_(seed) {
    RngStream rng(seed, "projection");
    Tensor m({out_dim, in_dim});
    const double sd = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (double& v : m.data()) v = sd * rng.normal();
    set_matrix(std::move(m));
  }

  /// Wraps an explicit [D x d] matrix (identity/zero maps in tests).
  static RandomProjection from_matrix(Tensor m) {
    RandomProjection p;
    p.set_matrix(std::move(m));
    return p;
  }

  static RandomProjection identity(std::size_t dim) {
    Tensor m({dim, dim});
    for (std::size_t i = 0; i < dim; ++i) m[i * dim + i] = 1.0;
    return from_matrix(std::move(m));
  }

  const Tensor& matrix() const { return matrix_; }
  std::uint64_t seed() const { return seed_; }
  std::size_t out_dim() const { return matrix_.dim(0); }
  std::size_t in_dim() const { return matrix_.dim(1); }

  /// q[B x d] -> q_hat[B x D].
  Tensor apply(const Tensor& q) const {
    NoGradGuard no_grad;
    return matmul(q, transposed_);
  }

 private:
  void set_matrix(Tensor m) {
    if (m.rank() != 2) throw ConfigError("projection matrix must be 2-D");
    const std::size_t D = m.dim(0), d = m.dim(1);
    Tensor t({d, D});
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t j = 0; j < d; ++j) t[j * D + i] = m[i * d + j];
    matrix_ = std::move(m);
    transposed_ = std::move(t);
  }

  Tensor matrix_;      // [D x d]
  Tensor transposed_;  // [d x D]
  std::uint64_t seed_ = 0;
};

/// Query through the surrogate: q_hat = phi(q_efficient(x)). No tape.
inline Tensor query_surrogate(const Tensor& images, const VisionTransformer& surrogate, const RandomProjection& phi) {
  NoGradGuard no_grad;
  const Tensor q = surrogate.query_features(images);
  if (q.dim(1) != phi.in_dim()) throw ConfigError("projection input width does not match the surrogate");
  return phi.apply(q);
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

struct Selection {
  std::size_t index = 0;
  double similarity = 0.0;
};

/// argmax_k cos(query, key_k); ties resolve to the lowest index. A zero
/// query scores 0 against every key, so index 0 wins.
inline Selection select_prompt(std::span<const double> query, const PromptPool& pool) {
  if (pool.size() == 0) throw ConfigError("select_prompt over an empty pool");
  if (query.size() != pool.width()) throw ConfigError("query width does not match pool keys");
  Selection best{0, cosine(query, pool.key(0).tensor.data())};
  for (std::size_t k = 1; k < pool.size(); ++k) {
    const double s = cosine(query, pool.key(k).tensor.data());
    if (s > best.similarity) best = {k, s};
  }
  return best;
}

/// Per-row selection over queries[B x D].
inline std::vector<std::size_t> select_prompts(const Tensor& queries, const PromptPool& pool) {
  const std::size_t B = queries.dim(0), D = queries.dim(1);
  std::vector<std::size_t> out(B);
  for (std::size_t b = 0; b < B; ++b) out[b] = select_prompt(queries.data().subspan(b * D, D), pool).index;
  return out;
}

/// Stacks the selected prompts into [B, L_p, D].
inline Tensor gather_prompts(const PromptPool& pool, std::span<const std::size_t> indices) {
  const auto prompts = pool.prompt_tensors();
  return gather_stack(prompts, indices);
}

struct LossWeights {
  double prompt = 1.0;  // epsilon_1
  double aux = 0.0;     // epsilon_2

  void validate() const {
    if (prompt < 0.0 || aux < 0.0) throw ConfigError("loss weights must be non-negative");
  }
};

struct LossTerms {
  Tensor total;
  double classification = 0.0;
  double prompt = 0.0;
};

/// L = L_class + eps1 * (1 - cos(key_selected, q_hat)) + eps2 * L_aux.
/// `aux` may be undefined; it is only added when eps2 > 0.
inline LossTerms total_loss(const Tensor& logits, std::span<const int> labels, const PromptPool& pool,
                            std::span<const std::size_t> selected, const Tensor& queries, const LossWeights& w,
                            std::span<const bool> active_classes = {}, const Tensor& aux = Tensor()) {
  w.validate();
  LossTerms out;
  Tensor loss = cross_entropy(logits, labels, active_classes);
  out.classification = loss.item();
  if (w.prompt > 0.0) {
    const auto keys = pool.key_tensors();
    Tensor pull = key_pull_loss(keys, selected, queries);
    out.prompt = pull.item();
    loss = add(loss, scale(pull, w.prompt));
  }
  if (w.aux > 0.0 && aux.defined()) loss = add(loss, scale(aux, w.aux));
  out.total = loss;
  return out;
}

}  // namespace rep
