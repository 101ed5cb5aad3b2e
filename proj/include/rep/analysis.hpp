#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "rep/errors.hpp"
#include "rep/vit.hpp"

namespace rep {

/// Attention-weighted mean squared grid distance for one head.
///
/// Rows/columns of CLS and prompts are dropped; the remaining g*g tokens are
/// patches in row-major grid order. For each query patch the weighted mean
/// sum_i a_i d_i / sum_i a_i with d_i = dx^2 + dy^2 is taken over key patches,
/// then averaged over queries.
inline double mean_attention_distance(const AttentionRecord& record, std::size_t grid_side, std::size_t prompt_span) {
  const Tensor& w = record.weights;
  const std::size_t g2 = grid_side * grid_side;
  if (w.rank() != 2 || w.dim(0) != w.dim(1) || w.dim(0) != 1 + prompt_span + g2) {
    throw InputError("attention record of size " + shape_str(w.shape()) + " does not hold a " +
                     std::to_string(grid_side) + "x" + std::to_string(grid_side) + " grid plus " +
                     std::to_string(1 + prompt_span) + " protected tokens");
  }
  const std::size_t T = w.dim(0), off = 1 + prompt_span;
  double total = 0.0;
  for (std::size_t q = 0; q < g2; ++q) {
    const double qx = static_cast<double>(q % grid_side), qy = static_cast<double>(q / grid_side);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < g2; ++i) {
      const double dx = static_cast<double>(i % grid_side) - qx;
      const double dy = static_cast<double>(i / grid_side) - qy;
      const double a = w[(off + q) * T + off + i];
      num += a * (dx * dx + dy * dy);
      den += a;
    }
    total += den > 0.0 ? num / den : 0.0;
  }
  return total / static_cast<double>(g2);
}

struct HeadDistance {
  std::size_t layer = 0;
  std::size_t head = 0;
  double distance = 0.0;
};

/// Mean attention distance per (layer, head), averaged over samples.
inline std::vector<HeadDistance> attention_distance_table(const std::vector<AttentionRecord>& records,
                                                          std::size_t grid_side, std::size_t prompt_span) {
  std::map<std::pair<std::size_t, std::size_t>, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    auto& slot = acc[{r.layer, r.head}];
    slot.first += mean_attention_distance(r, grid_side, prompt_span);
    ++slot.second;
  }
  std::vector<HeadDistance> out;
  for (const auto& [key, v] : acc) out.push_back({key.first, key.second, v.first / static_cast<double>(v.second)});
  return out;
}

/// Linear-kernel centered kernel alignment between X[N x d1] and Y[N x d2],
/// computed in feature space: ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F).
inline double cka(const Tensor& X, const Tensor& Y) {
  if (X.rank() != 2 || Y.rank() != 2 || X.dim(0) != Y.dim(0)) throw InputError("cka needs X[N x d1], Y[N x d2]");
  const std::size_t N = X.dim(0);
  if (N < 2) throw InputError("cka needs at least two samples");
  auto centered = [N](const Tensor& t) {
    Eigen::MatrixXd m = detail::cmat(t.node()->data, N, t.dim(1));
    m.rowwise() -= m.colwise().mean();
    return m;
  };
  const Eigen::MatrixXd xc = centered(X), yc = centered(Y);
  const double xx = (xc.transpose() * xc).norm();
  const double yy = (yc.transpose() * yc).norm();
  if (xx == 0.0 || yy == 0.0) throw InputError("cka undefined for zero-variance input");
  const double xy = (yc.transpose() * xc).squaredNorm();
  return xy / (xx * yy);
}

}  // namespace rep
