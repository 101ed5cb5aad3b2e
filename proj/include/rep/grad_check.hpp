#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "rep/tensor.hpp"

namespace rep {

struct GradCheckReport {
  double max_rel_error = 0.0;
  /// Analytic gradient per parameter; all zeros for frozen parameters.
  std::vector<std::vector<double>> analytic;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences: max over trainable entries of
/// |analytic - numeric| / max(1, |analytic|).
/// With `max_entries` > 0 only that many evenly spaced entries of each
/// parameter are perturbed.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Parameter> params, double eps = 1e-5,
                                  std::size_t max_entries = 0) {
  GradCheckReport report;
  for (auto& p : params) p.tensor.zero_grad();
  f().backward();
  for (auto& p : params) {
    std::vector<double> g(p.tensor.numel(), 0.0);
    if (p.trainable && p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), g.begin());
    report.analytic.push_back(std::move(g));
    p.tensor.zero_grad();
  }

  NoGradGuard no_grad;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.trainable) continue;
    auto values = p.tensor.data();
    const std::size_t n = values.size();
    const std::size_t probes = max_entries == 0 ? n : std::min(n, max_entries);
    for (std::size_t j = 0; j < probes; ++j) {
      const std::size_t i = j * n / probes;
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = f().item();
      values[i] = orig - eps;
      const double down = f().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = report.analytic[pi][i];
      report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
    }
  }
  return report;
}

}  // namespace rep
