#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rep/tensor.hpp"

namespace rep {

struct AdamOptions {
  double lr = 1.875e-3;
  double beta1 = 0.990;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Lazy Adam: a parameter without a gradient this step is left untouched,
/// moments included, and so is every entry whose gradient is exactly zero
/// (e.g. head columns of classes masked out of the current task). Bias
/// correction uses per-entry step counts.
class Adam {
 public:
  Adam(std::vector<Parameter*> params, AdamOptions opts = {}) : opts_(opts) {
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      const std::size_t n = p->tensor.numel();
      slots_.push_back(Slot{p, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), std::vector<std::uint32_t>(n, 0)});
    }
  }

  void step() {
    for (auto& s : slots_) {
      Tensor& t = s.param->tensor;
      if (!t.has_grad()) continue;
      auto g = t.grad();
      auto w = t.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (g[i] == 0.0) continue;
        const double n = static_cast<double>(++s.steps[i]);
        const double c1 = 1.0 - std::pow(opts_.beta1, n);
        const double c2 = 1.0 - std::pow(opts_.beta2, n);
        s.m[i] = opts_.beta1 * s.m[i] + (1.0 - opts_.beta1) * g[i];
        s.v[i] = opts_.beta2 * s.v[i] + (1.0 - opts_.beta2) * g[i] * g[i];
        w[i] -= opts_.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + opts_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& s : slots_) s.param->tensor.zero_grad();
  }

  /// Bytes of optimizer state: two moments and a step count per scalar.
  std::size_t state_bytes() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += s.m.size() * (2 * sizeof(double) + sizeof(std::uint32_t));
    return n;
  }

 private:
  struct Slot {
    Parameter* param;
    std::vector<double> m, v;
    std::vector<std::uint32_t> steps;
  };
  AdamOptions opts_;
  std::vector<Slot> slots_;
};

}  // namespace rep
