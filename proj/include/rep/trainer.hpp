#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rep/ald.hpp"
#include "rep/atom.hpp"
#include "rep/checkpoint.hpp"
#include "rep/config.hpp"
#include "rep/data.hpp"
#include "rep/log.hpp"
#include "rep/metrics.hpp"
#include "rep/optim.hpp"
#include "rep/pretrain.hpp"
#include "rep/profiler.hpp"
#include "rep/prompting.hpp"
#include "rep/vit.hpp"

namespace rep {

/// Joins token merging and layer dropping into one hook set. Either part
/// may be absent.
class RepHooks : public BlockHooks {
 public:
  RepHooks(TokenMerger* merger, LayerDropper* dropper) : merger_(merger), dropper_(dropper) {}

  bool execute_block(std::size_t layer) override { return dropper_ ? dropper_->gate(layer) : true; }
  bool wants_merge(std::size_t layer) const override { return merger_ && merger_->wants_merge(layer); }
  void after_attention(std::size_t layer, TokenBatch& tokens, std::span<const double> keys,
                       std::size_t key_dim) override {
    merger_->after_attention(layer, tokens, keys, key_dim);
  }

 private:
  TokenMerger* merger_;
  LayerDropper* dropper_;
};

struct StepLog {
  std::size_t task = 0;
  std::size_t step = 0;
  double loss = 0.0;
  double acc = 0.0;
};

/// What a step callback sees; logits are those of the training forward.
struct StepInfo {
  std::size_t task = 0;
  std::size_t step = 0;
  std::uint64_t global_step = 0;
  const Tensor* logits = nullptr;
  const std::vector<std::size_t>* selected = nullptr;
  const MergeReport* merges = nullptr;
  std::uint64_t macs = 0;
};

struct RunResult {
  AccuracyMatrix accuracy;
  CostLedger ledger;
  std::vector<StepLog> log;
  GateTrace gates;
  MergeReport first_merge_report;
  std::uint64_t frozen_hash_before = 0;
  std::uint64_t frozen_hash_after = 0;
  std::vector<std::string> audit;

  double final_avg_acc() const { return final_average_accuracy(accuracy); }
  std::optional<double> forgetting_value() const {
    if (accuracy.tasks() < 2) return std::nullopt;
    return forgetting(accuracy);
  }
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

/// Class-incremental training of prompts and head over a frozen backbone.
class ContinualTrainer {
 public:
  ContinualTrainer(const RunConfig& cfg, Backbones& models, const TaskStream& stream)
      : cfg_(cfg), models_(&models), stream_(&stream), loader_(stream) {
    if (stream.image_side != cfg.backbone.image_side) throw ConfigError("stream image side differs from backbone");
    const RngStream rng(cfg.seed, "cl");
    models_->update.set_body_trainable(false);
    models_->surrogate.set_body_trainable(false);
    for (Parameter* p : models_->surrogate.head_parameters()) p->set_trainable(false);
    models_->update.reset_head(stream.n_classes(), rng.child("head"));
    pool_ = PromptPool(cfg.pool.size, cfg.pool.length, cfg.backbone.width, rng.child("pool"));
    if (cfg.query.surrogate) {
      phi_ = RandomProjection(cfg.backbone.width, cfg.surrogate.width, cfg.query.projection_seed);
    } else {
      phi_ = RandomProjection::identity(cfg.backbone.width);
    }
    std::vector<Parameter*> trainable = pool_.parameters();
    for (Parameter* p : models_->update.head_parameters()) trainable.push_back(p);
    adam_.emplace(trainable, cfg.train.adam);
    if (cfg.ald.enabled) dropper_.emplace(cfg.ald.schedule, cfg.backbone.depth, RngStream(cfg.seed, "ald-gate"), cfg.ald.strategy);
    if (cfg.atom.enabled) merger_.emplace(cfg.merge_schedule(), cfg.atom.protect_prompts);
  }

  /// Replaces the projection (e.g. with the identity when the surrogate is
  /// the update model itself).
  void set_projection(RandomProjection phi) { phi_ = std::move(phi); }
  /// Routes queries through `m` instead of the configured surrogate.
  void set_query_model(const VisionTransformer* m) { query_override_ = m; }
  void on_step(std::function<void(const StepInfo&)> f) { on_step_ = std::move(f); }

  PromptPool& pool() { return pool_; }
  const RandomProjection& projection() const { return phi_; }
  const AuditedLoader& loader() const { return loader_; }

  /// Backbone parameters of both models; they must never change.
  std::vector<Parameter*> frozen_parameters() {
    auto out = models_->update.body_parameters();
    for (Parameter* p : models_->surrogate.body_parameters()) out.push_back(p);
    return out;
  }

  /// q_hat for a batch, without tape.
  Tensor query(const Tensor& images) const {
    NoGradGuard no_grad;
    if (query_override_) return phi_.apply(query_override_->query_features(images));
    if (cfg_.query.surrogate) return query_surrogate(images, models_->surrogate, phi_);
    return models_->update.query_features(images);
  }

  void train_task(std::size_t k, RunResult& res) {
    loader_.begin_task(k);
    const Task& task = stream_->tasks.at(k);
    const std::size_t C = stream_->n_classes();
    const auto active_buf = std::make_unique<bool[]>(C);
    const std::span<bool> active(active_buf.get(), C);
    for (int c : task.classes) active[static_cast<std::size_t>(c)] = true;
    if (dropper_) dropper_->reset_task();
    const RngStream order = RngStream(cfg_.seed, "data-order").child("task" + std::to_string(k));
    const std::size_t B = cfg_.train.batch, n = task.train.size();
    for (std::size_t t = 0; t < cfg_.train.iters_per_task; ++t) {
      std::vector<const Sample*> batch;
      std::vector<int> labels;
      for (std::size_t i = 0; i < B; ++i) {
        const auto idx = static_cast<std::size_t>(order.uniform_at(t * B + i) * static_cast<double>(n));
        batch.push_back(&loader_.train_sample(k, idx));
        labels.push_back(batch.back()->label);
      }
      const Tensor images = images_tensor(batch, stream_->image_side);

      Profiler prof;
      Tensor logits;
      LossTerms loss;
      std::vector<std::size_t> selected;
      {
        ProfileScope scope(prof);
        const Tensor q = query(images);
        selected = select_prompts(q, pool_);
        TokenBatch tokens = prepend(models_->update.embed(images), gather_prompts(pool_, selected));
        if (merger_) merger_->clear_report();
        if (dropper_) dropper_->begin_step(t, global_step_);
        RepHooks hooks(merger_ ? &*merger_ : nullptr, dropper_ ? &*dropper_ : nullptr);
        ForwardOptions opts;
        if (merger_ || dropper_) opts.hooks = &hooks;
        logits = models_->update.forward(std::move(tokens), opts).logits;
        loss = total_loss(logits, labels, pool_, selected, q, cfg_.loss, active);
        loss.total.backward();
      }
      adam_->step();
      adam_->zero_grad();
      if (merger_ && dropper_) dropper_->update_feedback(merger_->report());
      if (merger_ && global_step_ == 0) res.first_merge_report = merger_->report();

      res.ledger.rows.push_back({k, global_step_, prof.macs, prof.retained_bytes});
      res.log.push_back({k, t, loss.total.item(), masked_accuracy(logits, labels, active)});
      if (on_step_) {
        static const MergeReport empty;
        on_step_(StepInfo{k, t, global_step_, &logits, &selected, merger_ ? &merger_->report() : &empty, prof.macs});
      }
      ++global_step_;
    }
  }

  /// Accuracy on task j's test set over the classes of tasks 0..k; clean
  /// forward (no merging, no dropping).
  double evaluate(std::size_t j, std::size_t k) {
    NoGradGuard no_grad;
    const std::size_t C = stream_->n_classes();
    const auto seen_buf = std::make_unique<bool[]>(C);
    const std::span<bool> seen(seen_buf.get(), C);
    for (std::size_t i = 0; i <= k; ++i)
      for (int c : stream_->tasks.at(i).classes) seen[static_cast<std::size_t>(c)] = true;
    const auto& test = loader_.test_set(j);
    if (test.empty()) throw InputError("task " + std::to_string(j) + " has no test samples");
    std::size_t correct = 0;
    for (std::size_t start = 0; start < test.size(); start += cfg_.train.eval_batch) {
      std::vector<const Sample*> batch;
      std::vector<int> labels;
      for (std::size_t i = start; i < std::min(test.size(), start + cfg_.train.eval_batch); ++i) {
        batch.push_back(&test[i]);
        labels.push_back(test[i].label);
      }
      const Tensor images = images_tensor(batch, stream_->image_side);
      const auto selected = select_prompts(query(images), pool_);
      const Tensor logits = models_->update.forward(prepend(models_->update.embed(images), gather_prompts(pool_, selected))).logits;
      correct += static_cast<std::size_t>(masked_accuracy(logits, labels, seen) * static_cast<double>(batch.size()) + 0.5);
    }
    return static_cast<double>(correct) / static_cast<double>(test.size());
  }

  RunResult run() {
    RunResult res;
    res.accuracy = AccuracyMatrix(stream_->tasks.size());
    res.frozen_hash_before = hash_parameters(frozen_parameters());
    std::uint64_t static_bytes = models_->update.parameter_bytes() + adam_->state_bytes();
    for (Parameter* p : pool_.parameters()) static_bytes += p->tensor.numel() * sizeof(double);
    if (cfg_.query.surrogate) {
      static_bytes += models_->surrogate.parameter_bytes() + phi_.matrix().numel() * sizeof(double);
    }
    res.ledger.static_bytes = static_bytes;
    for (std::size_t k = 0; k < stream_->tasks.size(); ++k) {
      train_task(k, res);
      for (std::size_t j = 0; j <= k; ++j) res.accuracy.set(k, j, evaluate(j, k));
      log(LogLevel::info, "task " + std::to_string(k) + " done, acc on it " + std::to_string(res.accuracy.at(k, k)));
    }
    res.frozen_hash_after = hash_parameters(frozen_parameters());
    if (dropper_) res.gates = dropper_->trace();
    res.audit = loader_.audit_log();
    return res;
  }

  static double masked_accuracy(const Tensor& logits, std::span<const int> labels, std::span<const bool> active) {
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    auto lg = logits.data();
    std::size_t correct = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t best = C;
      for (std::size_t c = 0; c < C; ++c)
        if (active[c] && (best == C || lg[b * C + c] > lg[b * C + best])) best = c;
      correct += static_cast<int>(best) == labels[b];
    }
    return static_cast<double>(correct) / static_cast<double>(B);
  }

 private:
  RunConfig cfg_;
  Backbones* models_;
  const TaskStream* stream_;
  AuditedLoader loader_;
  PromptPool pool_;
  RandomProjection phi_;
  std::optional<Adam> adam_;
  std::optional<LayerDropper> dropper_;
  std::optional<TokenMerger> merger_;
  const VisionTransformer* query_override_ = nullptr;
  std::function<void(const StepInfo&)> on_step_;
  std::uint64_t global_step_ = 0;
};

/// Summary JSON of a finished run.
inline json run_summary(const RunConfig& cfg, const RunResult& r) {
  json j;
  j["final_avg_acc"] = r.final_avg_acc();
  const auto f = r.forgetting_value();
  j["forgetting"] = f ? json(*f) : json(nullptr);
  j["total_macs"] = r.ledger.total_macs();
  j["peak_bytes"] = r.ledger.peak_bytes();
  j["peak_activation_bytes"] = r.ledger.peak_activation_bytes();
  j["frozen_hash"] = hex64(r.frozen_hash_after);
  j["frozen_unchanged"] = r.frozen_hash_before == r.frozen_hash_after;
  j["audit_violations"] = r.audit.size();
  j["steps"] = r.ledger.rows.size();
  j["components"] = {{"atom", cfg.atom.enabled}, {"ald", cfg.ald.enabled}, {"surrogate", cfg.query.surrogate}};
  j["seed"] = cfg.seed;
  return j;
}

/// Writes metrics.csv, accuracy.csv, ledger.csv, merge_report.csv,
/// gates.csv and summary.json into `dir`.
inline void write_run_outputs(const std::filesystem::path& dir, const RunConfig& cfg, const RunResult& r) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::trunc);
    if (!f) throw InputError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("metrics.csv");
    f << "task,step,loss,acc\n" << std::setprecision(12);
    for (const auto& s : r.log) f << s.task << ',' << s.step << ',' << s.loss << ',' << s.acc << '\n';
  }
  {
    auto f = open("accuracy.csv");
    r.accuracy.write_csv(f);
  }
  {
    auto f = open("ledger.csv");
    r.ledger.write_csv(f);
  }
  {
    auto f = open("merge_report.csv");
    r.first_merge_report.write_csv(f);
  }
  {
    auto f = open("gates.csv");
    r.gates.write_csv(f);
  }
  {
    auto f = open("summary.json");
    f << run_summary(cfg, r).dump(2) << '\n';
  }
}

}  // namespace rep
