#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <string_view>
#include <utility>
#include <vector>

#include "rep/atom.hpp"
#include "rep/errors.hpp"
#include "rep/rng.hpp"
#include "rep/tensor.hpp"

namespace rep {

/// Keep-probability parameters:
///   theta(t, l) = alpha(l) * ((1 - theta_min) exp(-gamma t) + theta_min)
///   alpha(l)    = alpha if merged(l) >= tau else 1
struct DropSchedule {
  double theta_min = 0.5;
  double gamma = 5.0 / 300.0;
  double alpha = 0.9;
  double tau = 4.0;

  void validate() const {
    if (!(theta_min > 0.0 && theta_min <= 1.0)) throw ConfigError("theta_min must lie in (0, 1]");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be >= 0");
    if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
  }
};

/// Which keep-probability rule drives the gates. Only `adaptive` is the
/// supported configuration; the others exist as ablation baselines.
enum class DropStrategy {
  adaptive,          // temporal decay + merge feedback
  progressive,       // temporal decay only (PLD)
  stochastic_depth,  // linear decay over depth, constant in time
};

inline double temporal_keep(std::uint64_t t, const DropSchedule& s) {
  return (1.0 - s.theta_min) * std::exp(-s.gamma * static_cast<double>(t)) + s.theta_min;
}

inline double keep_probability(std::uint64_t t, const DropSchedule& s, double merged_count) {
  const double alpha_l = merged_count >= s.tau ? s.alpha : 1.0;
  return alpha_l * temporal_keep(t, s);
}

/// Keep probability for 1-based `layer` of `depth` under any strategy.
inline double keep_probability(DropStrategy strategy, std::uint64_t t, std::size_t layer, std::size_t depth,
                               const DropSchedule& s, double merged_count) {
  switch (strategy) {
    case DropStrategy::adaptive:
      return keep_probability(t, s, merged_count);
    case DropStrategy::progressive:
      return temporal_keep(t, s);
    case DropStrategy::stochastic_depth:
      return 1.0 - (static_cast<double>(layer) / static_cast<double>(depth)) * (1.0 - s.theta_min);
  }
  return 1.0;
}

struct AldDefaults {
  double alpha;
  double tau;
};

/// (alpha, tau) per backbone size class. The desk class scales tau to the
/// 16-patch token budget of the desk backbone.
inline AldDefaults defaults_for(std::string_view size_class) {
  if (size_class == "large") return {0.9, 16.0};
  if (size_class == "base") return {0.9, 12.0};
  if (size_class == "tiny") return {0.9, 8.0};
  if (size_class == "desk") return {0.9, 4.0};
  throw ConfigError("unknown backbone size class '" + std::string(size_class) + "'");
}

/// Bernoulli(theta) from a counter-based stream: keep iff u < theta.
inline bool bernoulli_keep(double theta, const RngStream& rng, std::uint64_t index) {
  return rng.uniform_at(index) < theta;
}

/// Executes `block(x)` with probability theta, otherwise returns x
/// untouched. Outside training the block always runs.
template <class Block>
Tensor gate_layer(Block&& block, const Tensor& x, double theta, const RngStream& rng, std::uint64_t index,
                  bool training = true) {
  if (!training || bernoulli_keep(theta, rng, index)) return block(x);
  return x;
}

struct GateEvent {
  std::uint64_t step = 0;
  std::size_t layer = 0;
  double theta = 1.0;
  bool kept = true;
};

/// Append-only record of every gate decision.
struct GateTrace {
  std::vector<GateEvent> events;

  void write_csv(std::ostream& os) const {
    os << "step,layer,theta,kept\n";
    os.precision(17);
    for (const auto& e : events) os << e.step << ',' << e.layer << ',' << e.theta << ',' << (e.kept ? 1 : 0) << '\n';
  }
};

/// Per-run layer-dropping state: step counter within the task, merge
/// feedback per layer, and the gate stream.
class LayerDropper {
 public:
  LayerDropper(DropSchedule schedule, std::size_t depth, RngStream rng,
               DropStrategy strategy = DropStrategy::adaptive)
      : schedule_(schedule), strategy_(strategy), depth_(depth), rng_(std::move(rng)), feedback_(depth, 0.0) {
    schedule_.validate();
  }

  const DropSchedule& schedule() const { return schedule_; }
  DropStrategy strategy() const { return strategy_; }
  const GateTrace& trace() const { return trace_; }
  const std::vector<double>& feedback() const { return feedback_; }

  /// New task: t restarts at 0 and feedback is cleared.
  void reset_task() { std::fill(feedback_.begin(), feedback_.end(), 0.0); }

  /// `t` is the iteration inside the current task; `global_step` keys the
  /// random draws so that every step of a run uses fresh gates.
  void begin_step(std::uint64_t t, std::uint64_t global_step) {
    t_ = t;
    global_step_ = global_step;
  }

  double theta(std::size_t layer) const {
    return keep_probability(strategy_, t_, layer + 1, depth_, schedule_, feedback_[layer]);
  }

  bool gate(std::size_t layer) {
    const double th = theta(layer);
    const bool kept = bernoulli_keep(th, rng_, global_step_ * depth_ + layer);
    trace_.events.push_back({global_step_, layer, th, kept});
    return kept;
  }

  /// Feeds the merge report of the forward just finished. Layers that did
  /// not run keep their last observed count.
  void update_feedback(const MergeReport& report) {
    for (const auto& row : report.rows)
      if (row.executed && row.layer < depth_) feedback_[row.layer] = static_cast<double>(row.n_entering - row.n_surviving);
  }

 private:
  DropSchedule schedule_;
  DropStrategy strategy_;
  std::size_t depth_;
  RngStream rng_;
  std::vector<double> feedback_;
  GateTrace trace_;
  std::uint64_t t_ = 0;
  std::uint64_t global_step_ = 0;
};

}  // namespace rep
