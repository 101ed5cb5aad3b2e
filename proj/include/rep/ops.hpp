#pragma once

// Closed op vocabulary of the desk-scale transformer. Every op computes its
// forward eagerly, charges matmul work to the active profiler, and (when a
// parent requires a gradient) records a hand-written backward closure.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <vector>

#include "rep/errors.hpp"
#include "rep/profiler.hpp"
#include "rep/tensor.hpp"

namespace rep {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

inline CMapMat cmat(const std::vector<double>& v, std::size_t r, std::size_t c) {
  return CMapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MapMat mmat(std::vector<double>& v, std::size_t r, std::size_t c) {
  return MapMat(v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace detail

/// [m x k] * [k x n] -> [m x n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ConfigError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  {
    const auto& av = a.node()->data;
    const auto& bv = b.node()->data;
    detail::mmat(out, m, n).noalias() = detail::cmat(av, m, k) * detail::cmat(bv, k, n);
  }
  record_macs(m * k * n);
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return Tensor::make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n, ga, gb](detail::Node& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    auto g = detail::cmat(self.grad, m, n);
    if (ga) {
      detail::mmat(pa.grad_buffer(), m, k).noalias() += g * detail::cmat(pb.data, k, n).transpose();
      record_macs(m * k * n);
    }
    if (gb) {
      detail::mmat(pb.grad_buffer(), k, n).noalias() += detail::cmat(pa.data, m, k).transpose() * g;
      record_macs(m * k * n);
    }
  });
}

/// Affine map over the last axis: x[..., k] * w[k x n] + bias[n].
/// `bias` may be an undefined Tensor.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0) ||
      (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(1)))) {
    throw ConfigError("linear shape mismatch: " + shape_str(x.shape()) + " x " +
                      shape_str(w.shape()));
  }
  const std::size_t k = w.dim(0), n = w.dim(1), rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(rows * n);
  {
    auto o = detail::mmat(out, rows, n);
    o.noalias() = detail::cmat(x.node()->data, rows, k) * detail::cmat(w.node()->data, k, n);
    if (bias.defined()) {
      o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.node()->data.data(), static_cast<Eigen::Index>(n));
    }
  }
  record_macs(rows * k * n);
  const bool gx = x.requires_grad(), gw = w.requires_grad();
  const bool gbias = bias.defined() && bias.requires_grad();
  std::vector<Tensor> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(std::move(out_shape), std::move(out), "linear", std::move(parents),
                             [rows, k, n, gx, gw, gbias](detail::Node& self) {
    auto g = detail::cmat(self.grad, rows, n);
    auto& px = detail::parent(self, 0);
    auto& pw = detail::parent(self, 1);
    if (gx) {
      detail::mmat(px.grad_buffer(), rows, k).noalias() += g * detail::cmat(pw.data, k, n).transpose();
      record_macs(rows * k * n);
    }
    if (gw) {
      detail::mmat(pw.grad_buffer(), k, n).noalias() += detail::cmat(px.data, rows, k).transpose() * g;
      record_macs(rows * k * n);
    }
    if (gbias) {
      auto& pb = detail::parent(self, 2);
      Eigen::Map<Eigen::RowVectorXd>(pb.grad_buffer().data(), static_cast<Eigen::Index>(n)) += g.colwise().sum();
    }
  });
}

/// Elementwise sum; `b` may have the shape of a trailing suffix of `a`
/// and is then broadcast over the leading axes.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ConfigError("add shape mismatch: " + shape_str(as) + " + " + shape_str(bs));
  }
  const std::size_t nb = b.numel(), na = a.numel();
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto& bv = b.node()->data;
  for (std::size_t i = 0; i < na; ++i) out[i] += bv[i % nb];
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return Tensor::make_result(as, std::move(out), "add", {a, b}, [na, nb, ga, gb](detail::Node& self) {
    if (ga) {
      auto& g = detail::parent(self, 0).grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
    }
    if (gb) {
      auto& g = detail::parent(self, 1).grad_buffer();
      for (std::size_t i = 0; i < na; ++i) g[i % nb] += self.grad[i];
    }
  });
}

/// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ConfigError("mul shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b}, [n, ga, gb](detail::Node& self) {
    auto& pa = detail::parent(self, 0);
    auto& pb = detail::parent(self, 1);
    if (ga) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (gb) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[i] * pa.data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (double& v : out) v *= c;
  return Tensor::make_result(a.shape(), std::move(out), "scale", {a}, [c](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
  });
}

/// Sum of all elements -> scalar.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return Tensor::make_result({}, {s}, "sum", {a}, [](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  }
  return Tensor::make_result(x.shape(), std::move(out), "gelu", {x}, [n](detail::Node& self) {
    auto& px = detail::parent(self, 0);
    auto& g = px.grad_buffer();
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < n; ++i) {
      const double v = px.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

/// Normalizes each row of the last axis. `gain`/`bias` may be undefined,
/// in which case the affine step is skipped.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() < 1 || x.shape().back() < 1) throw ConfigError("layer_norm needs a non-empty last axis");
  if (!(eps > 0.0)) throw ConfigError("layer_norm eps must be positive");
  const std::size_t n = x.shape().back(), rows = x.numel() / n;
  if ((gain.defined() && gain.numel() != n) || (bias.defined() && bias.numel() != n)) {
    throw ConfigError("layer_norm affine size mismatch");
  }
  std::vector<double> xhat(x.numel()), rstd(rows), out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mean) * rstd[r];
      xhat[r * n + j] = h;
      out[r * n + j] = h * (gain.defined() ? gain[j] : 1.0) + (bias.defined() ? bias[j] : 0.0);
    }
  }
  const bool gx = x.requires_grad();
  const bool gg = gain.defined() && gain.requires_grad();
  const bool gb = bias.defined() && bias.requires_grad();
  const bool has_gain = gain.defined(), has_bias = bias.defined();
  std::vector<Tensor> parents{x};
  if (has_gain) parents.push_back(gain);
  if (has_bias) parents.push_back(bias);
  const std::size_t saved = rows * sizeof(double);
  return Tensor::make_result(
      x.shape(), std::move(out), "layer_norm", std::move(parents),
      [n, rows, gx, gg, gb, has_gain, has_bias, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        const double* gain_v = has_gain ? detail::parent(self, 1).data.data() : nullptr;
        if (gg) {
          auto& g = detail::parent(self, 1).grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j] * xhat[r * n + j];
        }
        if (gb) {
          auto& g = detail::parent(self, has_gain ? 2 : 1).grad_buffer();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[r * n + j];
        }
        (void)has_bias;
        if (!gx) return;
        auto& g = detail::parent(self, 0).grad_buffer();
        std::vector<double> dh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dh[j] = self.grad[r * n + j] * (gain_v ? gain_v[j] : 1.0);
            m1 += dh[j];
            m2 += dh[j] * xhat[r * n + j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) g[r * n + j] += rstd[r] * (dh[j] - m1 - xhat[r * n + j] * m2);
        }
      },
      saved);
}

namespace detail {

// In-place max-subtracted softmax over `len` elements spaced by `stride`.
inline void softmax_strided(double* v, std::size_t len, std::size_t stride) {
  double mx = v[0];
  for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, v[i * stride]);
  double z = 0.0;
  for (std::size_t i = 0; i < len; ++i) {
    v[i * stride] = std::exp(v[i * stride] - mx);
    z += v[i * stride];
  }
  for (std::size_t i = 0; i < len; ++i) v[i * stride] /= z;
}

}  // namespace detail

/// Softmax along `axis` (negative counts from the back).
inline Tensor softmax(const Tensor& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  if (r == 0 || axis >= r || axis < -r) throw ConfigError("softmax axis out of range");
  const std::size_t ax = static_cast<std::size_t>(axis < 0 ? axis + r : axis);
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[ax];
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw NumericError("softmax input is not finite");
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) detail::softmax_strided(out.data() + o * len * inner + i, len, inner);
  return Tensor::make_result(s, std::move(out), "softmax", {x}, [outer, inner, len](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < len; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

/// Adds log(size) of each key token to a row of pre-softmax scores, so a
/// token standing for `size` merged tokens keeps their aggregate weight.
inline void proportional_attention(std::span<double> scores, std::span<const double> sizes) {
  if (scores.size() != sizes.size()) throw ConfigError("proportional_attention size mismatch");
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (sizes[j] < 1.0) throw ConfigError("token size must be >= 1");
    scores[j] += std::log(sizes[j]);
  }
}

/// Multi-head scaled dot-product self-attention over a packed projection
/// qkv[B, T, 3D] -> out[B, T, D].
///
/// `sizes` (B*T, may be empty) applies proportional attention. When
/// `probs_out` is non-null it receives the probabilities laid out [B, H, T, T].
inline Tensor self_attention(const Tensor& qkv, std::size_t heads, std::span<const double> sizes = {},
                             std::vector<double>* probs_out = nullptr) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0 || heads == 0 || (qkv.dim(2) / 3) % heads != 0) {
    throw ConfigError("self_attention expects [B,T,3D] with D divisible by heads, got " +
                      shape_str(qkv.shape()));
  }
  const std::size_t B = qkv.dim(0), T = qkv.dim(1), D = qkv.dim(2) / 3, hd = D / heads;
  if (!sizes.empty() && sizes.size() != B * T) throw ConfigError("self_attention sizes length mismatch");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto E = [](std::size_t v) { return static_cast<Eigen::Index>(v); };
  std::vector<double> probs(B * heads * T * T);
  std::vector<double> out(B * T * D);
  const double* src = qkv.data().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const double* base = src + b * T * 3 * D + h * hd;
      detail::CStridedMap q(base, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
      detail::CStridedMap k(base + D, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
      detail::CStridedMap v(base + 2 * D, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
      double* p = probs.data() + (b * heads + h) * T * T;
      auto pm = detail::MapMat(p, E(T), E(T));
      pm.noalias() = (q * k.transpose()) * inv_sqrt;
      for (std::size_t i = 0; i < T; ++i) {
        if (!sizes.empty()) proportional_attention({p + i * T, T}, sizes.subspan(b * T, T));
        detail::softmax_strided(p + i * T, T, 1);
      }
      detail::StridedMap o(out.data() + b * T * D + h * hd, E(T), E(hd), Eigen::OuterStride<>(E(D)));
      o.noalias() = pm * v;
    }
  }
  record_macs(2 * B * heads * T * T * hd);
  if (probs_out) *probs_out = probs;
  const std::size_t saved = probs.size() * sizeof(double);
  return Tensor::make_result(
      {B, T, D}, std::move(out), "self_attention", {qkv},
      [B, T, D, hd, heads, inv_sqrt, E, probs = std::move(probs)](detail::Node& self) {
        auto& pq = detail::parent(self, 0);
        auto& g = pq.grad_buffer();
        detail::RowMat dp(E(T), E(T));
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * T * 3 * D + h * hd;
            detail::CStridedMap q(pq.data.data() + off, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
            detail::CStridedMap k(pq.data.data() + off + D, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
            detail::CStridedMap v(pq.data.data() + off + 2 * D, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
            detail::StridedMap dq(g.data() + off, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
            detail::StridedMap dk(g.data() + off + D, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
            detail::StridedMap dv(g.data() + off + 2 * D, E(T), E(hd), Eigen::OuterStride<>(E(3 * D)));
            detail::CStridedMap dout(self.grad.data() + b * T * D + h * hd, E(T), E(hd), Eigen::OuterStride<>(E(D)));
            detail::CMapMat p(probs.data() + (b * heads + h) * T * T, E(T), E(T));
            dp.noalias() = dout * v.transpose();
            dv.noalias() += p.transpose() * dout;
            // softmax backward, then undo the 1/sqrt(hd) scaling
            for (std::size_t i = 0; i < T; ++i) {
              const double dot = dp.row(E(i)).dot(p.row(E(i)));
              for (std::size_t j = 0; j < T; ++j) dp(E(i), E(j)) = p(E(i), E(j)) * (dp(E(i), E(j)) - dot) * inv_sqrt;
            }
            dq.noalias() += dp * k;
            dk.noalias() += dp.transpose() * q;
          }
        }
        record_macs(4 * B * heads * T * T * hd);
      },
      saved);
}

/// Mean cross-entropy of logits[B x C] against integer labels. When
/// `active` is non-empty, classes with active[c] == false are excluded from
/// the softmax and receive no gradient.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, std::span<const bool> active = {}) {
  if (logits.rank() != 2) throw ConfigError("cross_entropy expects [B x C] logits");
  const std::size_t B = logits.dim(0), C = logits.dim(1);
  if (labels.size() != B) throw InputError("cross_entropy: label count does not match batch");
  if (!active.empty() && active.size() != C) throw ConfigError("cross_entropy: class mask size mismatch");
  auto on = [&](std::size_t c) { return active.empty() || active[c]; };
  std::vector<double> probs(B * C, 0.0);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= C || !on(static_cast<std::size_t>(y))) {
      throw InputError("cross_entropy: label " + std::to_string(y) + " out of range");
    }
    const double* row = logits.data().data() + b * C;
    double mx = -INFINITY;
    for (std::size_t c = 0; c < C; ++c)
      if (on(c)) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (on(c)) z += std::exp(row[c] - mx);
    const double logz = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c)
      if (on(c)) probs[b * C + c] = std::exp(row[c] - logz);
    loss += logz - row[y];
  }
  loss /= static_cast<double>(B);
  std::vector<int> ys(labels.begin(), labels.end());
  return Tensor::make_result({}, {loss}, "cross_entropy", {logits},
                             [B, C, probs = std::move(probs), ys = std::move(ys)](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    const double s = self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 0; c < C; ++c) g[b * C + c] += s * probs[b * C + c];
      g[b * C + static_cast<std::size_t>(ys[b])] -= s;
    }
  });
}

/// Inserts block[B, L, D] into x[B, T, D] before row `at`.
inline Tensor insert_rows(const Tensor& x, std::size_t at, const Tensor& block) {
  if (x.rank() != 3 || block.rank() != 3 || x.dim(0) != block.dim(0) || x.dim(2) != block.dim(2) || at > x.dim(1)) {
    throw ConfigError("insert_rows shape mismatch: " + shape_str(x.shape()) + " <- " + shape_str(block.shape()));
  }
  const std::size_t B = x.dim(0), T = x.dim(1), L = block.dim(1), D = x.dim(2), To = T + L;
  std::vector<double> out(B * To * D);
  for (std::size_t b = 0; b < B; ++b) {
    const double* xs = x.data().data() + b * T * D;
    const double* bs = block.data().data() + b * L * D;
    double* o = out.data() + b * To * D;
    std::copy(xs, xs + at * D, o);
    std::copy(bs, bs + L * D, o + at * D);
    std::copy(xs + at * D, xs + T * D, o + (at + L) * D);
  }
  const bool gx = x.requires_grad(), gb = block.requires_grad();
  return Tensor::make_result({B, To, D}, std::move(out), "insert_rows", {x, block},
                             [B, T, L, D, To, at, gx, gb](detail::Node& self) {
    for (std::size_t b = 0; b < B; ++b) {
      const double* o = self.grad.data() + b * To * D;
      if (gx) {
        double* g = detail::parent(self, 0).grad_buffer().data() + b * T * D;
        for (std::size_t i = 0; i < at * D; ++i) g[i] += o[i];
        for (std::size_t i = at * D; i < T * D; ++i) g[i] += o[i + L * D];
      }
      if (gb) {
        double* g = detail::parent(self, 1).grad_buffer().data() + b * L * D;
        for (std::size_t i = 0; i < L * D; ++i) g[i] += o[at * D + i];
      }
    }
  });
}

/// Stacks items[indices[b]] along a new leading axis. Only the referenced
/// items become graph parents, so unreferenced ones never receive a gradient.
inline Tensor gather_stack(std::span<const Tensor> items, std::span<const std::size_t> indices) {
  if (items.empty()) throw ConfigError("gather_stack over an empty set");
  const Shape& item_shape = items[0].shape();
  const std::size_t n = items[0].numel();
  std::vector<Tensor> parents;
  std::vector<std::size_t> slot(indices.size());
  std::vector<std::size_t> item_slot(items.size(), SIZE_MAX);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t idx = indices[b];
    if (idx >= items.size()) throw InputError("gather_stack index out of range");
    if (items[idx].shape() != item_shape) throw ConfigError("gather_stack over mixed shapes");
    if (item_slot[idx] == SIZE_MAX) {
      item_slot[idx] = parents.size();
      parents.push_back(items[idx]);
    }
    slot[b] = item_slot[idx];
  }
  std::vector<double> out(indices.size() * n);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto src = items[indices[b]].data();
    std::copy(src.begin(), src.end(), out.begin() + static_cast<std::ptrdiff_t>(b * n));
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  return Tensor::make_result(std::move(shape), std::move(out), "gather_stack", std::move(parents),
                             [n, slot = std::move(slot)](detail::Node& self) {
    for (std::size_t b = 0; b < slot.size(); ++b) {
      auto& p = detail::parent(self, slot[b]);
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[b * n + i];
    }
  });
}

/// Row `row` of every sample: x[B, T, D] -> [B, D].
inline Tensor select_row(const Tensor& x, std::size_t row) {
  if (x.rank() != 3 || row >= x.dim(1)) throw ConfigError("select_row out of range");
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  std::vector<double> out(B * D);
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(x.data().data() + (b * T + row) * D, D, out.data() + b * D);
  return Tensor::make_result({B, D}, std::move(out), "select_row", {x}, [B, T, D, row](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < D; ++j) g[(b * T + row) * D + j] += self.grad[b * D + j];
  });
}

/// Per-sample linear token reduction: output row dest[b][i] accumulates
/// weight[b][i] * x[b, i]. Used to realize size-weighted token merges.
struct TokenMap {
  std::size_t out_tokens = 0;
  std::vector<std::vector<std::size_t>> dest;   // [B][T]
  std::vector<std::vector<double>> weight;      // [B][T]
};

inline Tensor merge_tokens(const Tensor& x, const TokenMap& map) {
  if (x.rank() != 3 || map.dest.size() != x.dim(0)) throw ConfigError("merge_tokens batch mismatch");
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2), To = map.out_tokens;
  std::vector<double> out(B * To * D, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    if (map.dest[b].size() != T || map.weight[b].size() != T) throw ConfigError("merge_tokens map size mismatch");
    for (std::size_t i = 0; i < T; ++i) {
      const std::size_t d = map.dest[b][i];
      if (d >= To) throw InternalError("merge_tokens destination out of range");
      const double w = map.weight[b][i];
      const double* src = x.data().data() + (b * T + i) * D;
      double* dst = out.data() + (b * To + d) * D;
      for (std::size_t j = 0; j < D; ++j) dst[j] += w * src[j];
    }
  }
  return Tensor::make_result({B, To, D}, std::move(out), "merge_tokens", {x},
                             [B, T, D, To, map](detail::Node& self) {
    auto& g = detail::parent(self, 0).grad_buffer();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < T; ++i) {
        const double w = map.weight[b][i];
        const double* src = self.grad.data() + (b * To + map.dest[b][i]) * D;
        double* dst = g.data() + (b * T + i) * D;
        for (std::size_t j = 0; j < D; ++j) dst[j] += w * src[j];
      }
  });
}

/// Mean over b of 1 - cos(keys[indices[b]], queries[b]). Queries are
/// constants; a zero query contributes similarity 0 and no gradient.
inline Tensor key_pull_loss(std::span<const Tensor> keys, std::span<const std::size_t> indices, const Tensor& queries) {
  if (queries.rank() != 2 || queries.dim(0) != indices.size()) throw ConfigError("key_pull_loss batch mismatch");
  const std::size_t B = indices.size(), D = queries.dim(1);
  Tensor stacked = gather_stack(keys, indices);  // [B, D]
  if (stacked.dim(1) != D) throw ConfigError("key_pull_loss dimension mismatch");
  double loss = 0.0;
  std::vector<double> coef_q(B), coef_k(B);  // d cos / d k = coef_q * q + coef_k * k
  for (std::size_t b = 0; b < B; ++b) {
    const double* k = stacked.data().data() + b * D;
    const double* q = queries.data().data() + b * D;
    double kk = 0, qq = 0, kq = 0;
    for (std::size_t j = 0; j < D; ++j) {
      kk += k[j] * k[j];
      qq += q[j] * q[j];
      kq += k[j] * q[j];
    }
    const double nk = std::sqrt(kk), nq = std::sqrt(qq);
    double cos = 0.0;
    if (nk > 0.0 && nq > 0.0) {
      cos = kq / (nk * nq);
      coef_q[b] = 1.0 / (nk * nq);
      coef_k[b] = -cos / kk;
    }
    loss += 1.0 - cos;
  }
  loss /= static_cast<double>(B);
  return Tensor::make_result({}, {loss}, "key_pull_loss", {stacked, queries},
                             [B, D, coef_q = std::move(coef_q), coef_k = std::move(coef_k)](detail::Node& self) {
    auto& pk = detail::parent(self, 0);
    auto& pq = detail::parent(self, 1);
    auto& g = pk.grad_buffer();
    const double s = -self.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < D; ++j)
        g[b * D + j] += s * (coef_q[b] * pq.data[b * D + j] + coef_k[b] * pk.data[b * D + j]);
  });
}

}  // namespace rep
