#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "rep/errors.hpp"
#include "rep/ops.hpp"
#include "rep/profiler.hpp"
#include "rep/vit.hpp"

namespace rep {

/// Per-layer merge targets. Progressive: r'(l) = min(delta (l - 1), r_max)
/// with delta = r_max / (L - 1), floored. Uniform: r'(l) = r for every
/// layer (the conventional ToMe scheduler, kept as an ablation baseline).
struct MergeSchedule {
  enum class Kind { progressive, uniform };

  std::size_t r_max = 16;
  std::size_t depth = 6;
  Kind kind = Kind::progressive;

  double delta() const {
    return depth > 1 ? static_cast<double>(r_max) / static_cast<double>(depth - 1) : 0.0;
  }
};

/// Target merges at 1-based layer `l`. Integer arithmetic keeps the floor
/// exact: floor(r_max (l-1) / (L-1)) == floor(delta (l-1)).
inline std::size_t schedule_r(std::size_t l, const MergeSchedule& s) {
  if (l < 1 || l > s.depth) throw ConfigError("layer index out of range for merge schedule");
  if (s.kind == MergeSchedule::Kind::uniform) return s.r_max;
  if (s.depth == 1 || l == 1) return 0;
  return std::min(s.r_max * (l - 1) / (s.depth - 1), s.r_max);
}

struct MergeRow {
  std::size_t layer = 0;        // 0-based
  std::size_t n_entering = 0;   // all tokens, protected included
  std::size_t n_merged = 0;
  std::size_t n_surviving = 0;
  bool executed = true;
};

/// Rows of one forward pass, one per layer.
struct MergeReport {
  std::vector<MergeRow> rows;

  /// Tokens removed at `layer` (n_entering - n_surviving); 0 for layers that
  /// did not run.
  std::size_t merged_at(std::size_t layer) const {
    for (const auto& r : rows)
      if (r.layer == layer) return r.n_entering - r.n_surviving;
    return 0;
  }

  void write_csv(std::ostream& os) const {
    os << "layer,n_entering,n_merged,n_surviving\n";
    for (const auto& r : rows) os << r.layer << ',' << r.n_entering << ',' << r.n_merged << ',' << r.n_surviving << '\n';
  }
};

/// Matching for one sample over the eligible rows.
struct BipartitePlan {
  std::vector<std::size_t> merged_src;   // eligible-local indices of merged A tokens
  std::vector<std::size_t> merged_dst;   // their B destinations (eligible-local)
  std::vector<std::size_t> survivors;    // eligible-local indices kept, ascending
};

/// ToMe bipartite soft matching over `eligible` tokens with features
/// keys[eligible x key_dim]. Tokens alternate into A (even) and B (odd);
/// each A token scores its best B by cosine similarity; the `r` best-scoring
/// A tokens are merged (ties: lower index first).
inline BipartitePlan plan_bipartite_merge(std::span<const double> keys, std::size_t eligible, std::size_t key_dim,
                                          std::size_t r) {
  BipartitePlan plan;
  const std::size_t na = (eligible + 1) / 2, nb = eligible / 2;
  r = std::min(r, nb);
  if (r == 0) {
    plan.survivors.resize(eligible);
    std::iota(plan.survivors.begin(), plan.survivors.end(), std::size_t{0});
    return plan;
  }
  std::vector<double> norm(eligible);
  for (std::size_t i = 0; i < eligible; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < key_dim; ++j) s += keys[i * key_dim + j] * keys[i * key_dim + j];
    norm[i] = std::sqrt(s);
  }
  std::vector<double> best(na, -INFINITY);
  std::vector<std::size_t> best_b(na, 0);
  for (std::size_t a = 0; a < na; ++a) {
    const std::size_t ia = 2 * a;
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t ib = 2 * b + 1;
      double dot = 0.0;
      for (std::size_t j = 0; j < key_dim; ++j) dot += keys[ia * key_dim + j] * keys[ib * key_dim + j];
      const double den = norm[ia] * norm[ib];
      const double score = den > 0.0 ? dot / den : 0.0;
      if (score > best[a]) {
        best[a] = score;
        best_b[a] = b;
      }
    }
  }
  record_macs(na * nb * key_dim);
  std::vector<std::size_t> order(na);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return best[x] > best[y]; });
  std::vector<bool> gone(eligible, false);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t a = order[i];
    plan.merged_src.push_back(2 * a);
    plan.merged_dst.push_back(2 * best_b[a] + 1);
    gone[2 * a] = true;
  }
  for (std::size_t i = 0; i < eligible; ++i)
    if (!gone[i]) plan.survivors.push_back(i);
  return plan;
}

/// Merges up to `n_merge` eligible tokens of every sample. Protected rows
/// (CLS + prompts) pass through unchanged and stay first; survivors follow
/// in their original order. Merged values are size-weighted means and sizes
/// add up. `keys` is [B, T, key_dim].
inline MergeRow merge_layer(TokenBatch& tokens, std::span<const double> keys, std::size_t key_dim,
                            std::size_t n_merge, std::size_t layer = 0) {
  const std::size_t B = tokens.batch(), T = tokens.tokens(), prot = tokens.protected_count();
  if (T < prot) throw InternalError("token batch smaller than its protected span");
  if (keys.size() != B * T * key_dim) throw ConfigError("merge_layer key buffer size mismatch");
  const std::size_t eligible = T - prot;
  const std::size_t r = std::min(n_merge, eligible / 2);
  MergeRow row{layer, T, r, T - r, true};
  if (r == 0) return row;

  TokenMap map;
  map.out_tokens = T - r;
  map.dest.assign(B, std::vector<std::size_t>(T));
  map.weight.assign(B, std::vector<double>(T, 1.0));
  std::vector<double> sizes(B * (T - r));
  for (std::size_t b = 0; b < B; ++b) {
    const BipartitePlan plan = plan_bipartite_merge(keys.subspan((b * T + prot) * key_dim, eligible * key_dim),
                                                    eligible, key_dim, r);
    const double* sz = tokens.sizes.data() + b * T;
    double* out_sz = sizes.data() + b * (T - r);
    for (std::size_t i = 0; i < prot; ++i) {
      map.dest[b][i] = i;
      out_sz[i] = sz[i];
    }
    std::vector<std::size_t> slot(eligible, SIZE_MAX);
    for (std::size_t s = 0; s < plan.survivors.size(); ++s) {
      const std::size_t e = plan.survivors[s];
      slot[e] = prot + s;
      out_sz[prot + s] = sz[prot + e];
    }
    for (std::size_t m = 0; m < plan.merged_src.size(); ++m) {
      slot[plan.merged_src[m]] = slot[plan.merged_dst[m]];
      out_sz[slot[plan.merged_dst[m]]] += sz[prot + plan.merged_src[m]];
    }
    for (std::size_t e = 0; e < eligible; ++e) {
      map.dest[b][prot + e] = slot[e];
      map.weight[b][prot + e] = sz[prot + e] / out_sz[slot[e]];
    }
  }
  tokens.x = merge_tokens(tokens.x, map);
  tokens.sizes = std::move(sizes);
  return row;
}

/// Forward hook realizing the merge schedule after every attention step.
///
/// With `protect_prompts` false the prompts join the eligible set (ToMe
/// behaviour) and the token layout loses its prompt span at the first merge.
class TokenMerger : public BlockHooks {
 public:
  TokenMerger(MergeSchedule schedule, bool protect_prompts = true)
      : schedule_(schedule), protect_prompts_(protect_prompts) {}

  const MergeSchedule& schedule() const { return schedule_; }
  const MergeReport& report() const { return report_; }
  void clear_report() { report_.rows.clear(); }

  bool wants_merge(std::size_t) const override { return true; }

  void after_attention(std::size_t layer, TokenBatch& tokens, std::span<const double> keys,
                       std::size_t key_dim) override {
    const std::size_t target = schedule_r(layer + 1, schedule_);
    if (!protect_prompts_ && tokens.prompt_tokens > 0 && target > 0) tokens.prompt_tokens = 0;
    report_.rows.push_back(merge_layer(tokens, keys, key_dim, target, layer));
  }

 private:
  MergeSchedule schedule_;
  bool protect_prompts_;
  MergeReport report_;
};

}  // namespace rep
