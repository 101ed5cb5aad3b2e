#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "rep/ald.hpp"
#include "rep/atom.hpp"
#include "rep/config.hpp"
#include "rep/vit.hpp"

namespace rep {

/// Everything the MAC count of one training step depends on.
struct CostShape {
  ViTConfig update;
  ViTConfig surrogate;
  bool surrogate_query = true;
  std::size_t batch = 16;
  std::size_t prompt_length = 5;
  std::size_t head_classes = 10;
  bool atom = true;
  MergeSchedule schedule;
  bool protect_prompts = true;
};

inline CostShape cost_shape(const RunConfig& c) {
  CostShape s;
  s.update = c.backbone;
  s.surrogate = c.surrogate;
  s.surrogate_query = c.query.surrogate;
  s.batch = c.train.batch;
  s.prompt_length = c.pool.length;
  s.head_classes = c.stream.n_tasks * c.stream.classes_per_task;
  s.atom = c.atom.enabled;
  s.schedule = c.merge_schedule();
  s.protect_prompts = c.atom.protect_prompts;
  return s;
}

/// Forward-only pass of a clean model on B images (embedding + blocks).
inline std::uint64_t clean_forward_macs(const ViTConfig& m, std::size_t B) {
  const std::uint64_t D = m.width, M = m.mlp_width(), T = m.base_tokens();
  std::uint64_t macs = B * m.num_patches() * m.patch_dim() * D;
  for (std::size_t l = 0; l < m.depth; ++l) macs += B * (T * D * 3 * D + 2 * T * T * D + T * D * D + 2 * T * D * M);
  return macs;
}

/// Query features for one batch: surrogate + projection, or the full model.
inline std::uint64_t query_macs(const CostShape& s) {
  if (!s.surrogate_query) return clean_forward_macs(s.update, s.batch);
  return clean_forward_macs(s.surrogate, s.batch) + s.batch * s.surrogate.width * s.update.width;
}

struct StepCost {
  std::uint64_t macs = 0;
  std::vector<std::size_t> merged;  // per layer, valid where executed
};

/// Prompted forward + backward of the update model with the given block
/// pattern, replaying the token-count recurrence of merging.
inline StepCost train_step_macs(const CostShape& s, const std::vector<bool>& executed) {
  const std::uint64_t B = s.batch, D = s.update.width, M = s.update.mlp_width(), hd = s.update.head_dim();
  const bool grad = s.prompt_length > 0;  // prompts are the only trainable input to the body
  const std::uint64_t lin = grad ? 2 : 1, attn = grad ? 6 : 2;
  std::uint64_t T = s.update.base_tokens() + s.prompt_length;
  std::uint64_t prompts = s.prompt_length;
  StepCost out;
  out.merged.assign(s.update.depth, 0);
  out.macs = B * s.update.num_patches() * s.update.patch_dim() * D;
  for (std::size_t l = 0; l < s.update.depth; ++l) {
    if (!executed[l]) continue;
    out.macs += lin * B * T * D * 3 * D + attn * B * T * T * D + lin * B * T * D * D;
    if (s.atom) {
      const std::size_t target = schedule_r(l + 1, s.schedule);
      if (!s.protect_prompts && prompts > 0 && target > 0) prompts = 0;
      const std::uint64_t eligible = T - 1 - prompts;
      const std::uint64_t r = std::min<std::uint64_t>(target, eligible / 2);
      if (r > 0) {
        out.macs += B * ((eligible + 1) / 2) * (eligible / 2) * hd;
        T -= r;
      }
      out.merged[l] = r;
    }
    out.macs += lin * 2 * B * T * D * M;
  }
  out.macs += (grad ? 3 : 2) * B * D * s.head_classes;
  return out;
}

struct CostEstimate {
  std::vector<double> step_macs;  // expected MACs per training step, in run order

  double total() const {
    double t = 0.0;
    for (double v : step_macs) t += v;
    return t;
  }
};

/// Expected MACs of `steps` consecutive steps of one task. Exact: the
/// expectation runs over every gate pattern and every merge-feedback state
/// reachable from the task start.
inline std::vector<double> expected_task_macs(const CostShape& s, bool ald, const DropSchedule& sched,
                                              DropStrategy strategy, std::size_t steps) {
  const std::size_t L = s.update.depth;
  const double q = static_cast<double>(query_macs(s));
  std::vector<double> out;
  out.reserve(steps);
  if (!ald) {
    const double m = static_cast<double>(train_step_macs(s, std::vector<bool>(L, true)).macs);
    out.assign(steps, q + m);
    return out;
  }
  if (L > 20) throw ConfigError("exact cost expectation supports at most 20 layers");
  std::map<std::vector<std::size_t>, double> states{{std::vector<std::size_t>(L, 0), 1.0}};
  std::vector<bool> pattern(L);
  for (std::size_t t = 0; t < steps; ++t) {
    std::map<std::vector<std::size_t>, double> next;
    double expect = 0.0;
    for (const auto& [fb, p_state] : states) {
      std::vector<double> theta(L);
      for (std::size_t l = 0; l < L; ++l)
        theta[l] = keep_probability(strategy, t, l + 1, L, sched, static_cast<double>(fb[l]));
      for (std::uint64_t mask = 0; mask < (1ULL << L); ++mask) {
        double p = p_state;
        for (std::size_t l = 0; l < L; ++l) {
          pattern[l] = (mask >> l) & 1;
          p *= pattern[l] ? theta[l] : 1.0 - theta[l];
        }
        if (p == 0.0) continue;
        const StepCost c = train_step_macs(s, pattern);
        expect += p * static_cast<double>(c.macs);
        std::vector<std::size_t> nfb = fb;
        if (s.atom)
          for (std::size_t l = 0; l < L; ++l)
            if (pattern[l]) nfb[l] = c.merged[l];
        next[nfb] += p;
      }
    }
    out.push_back(q + expect);
    states = std::move(next);
  }
  return out;
}

/// Analytic cost of a full run under `c`: tasks x iterations, with the
/// drop schedule restarting at every task.
inline CostEstimate profile_estimate(const RunConfig& c) {
  const CostShape s = cost_shape(c);
  const auto task = expected_task_macs(s, c.ald.enabled, c.ald.schedule, c.ald.strategy, c.train.iters_per_task);
  CostEstimate e;
  for (std::size_t k = 0; k < c.stream.n_tasks; ++k) e.step_macs.insert(e.step_macs.end(), task.begin(), task.end());
  return e;
}

}  // namespace rep
