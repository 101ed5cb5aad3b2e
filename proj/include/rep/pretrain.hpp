#pragma once

#include <string>
#include <vector>

#include "rep/checkpoint.hpp"
#include "rep/config.hpp"
#include "rep/data.hpp"
#include "rep/log.hpp"
#include "rep/ops.hpp"
#include "rep/optim.hpp"
#include "rep/vit.hpp"

namespace rep {

/// Held-out distribution for producing the frozen weights: a different
/// pattern family from the continual stream, so no stream class is seen.
inline TaskStream pretrain_stream(const RunConfig& c) {
  SyntheticSpec s;
  s.image_side = c.backbone.image_side;
  s.n_tasks = 1;
  s.classes_per_task = c.pretrain.classes;
  s.train_per_class = c.pretrain.train_per_class;
  s.test_per_class = 0;
  s.noise = c.pretrain.noise;
  s.seed = c.seed;
  s.family = "pretrain";
  return gen_synthetic_stream(s);
}

/// Skips each block independently with a fixed probability.
class StochasticDepth final : public BlockHooks {
 public:
  StochasticDepth(double drop, RngStream rng) : drop_(drop), rng_(std::move(rng)) {}
  bool execute_block(std::size_t) override { return rng_.uniform() >= drop_; }

 private:
  double drop_;
  RngStream rng_;
};

struct PretrainResult {
  double final_loss = 0.0;
  double final_acc = 0.0;  // running accuracy over the last 10% of steps
};

/// Supervised training of every parameter of `model` on `data` (task 0).
/// The body is frozen on return.
inline PretrainResult pretrain_model(VisionTransformer& model, const TaskStream& data, const PretrainConfig& p,
                                     const RngStream& rng, const std::string& label) {
  model.reset_head(data.n_classes(), rng.child("head"));
  model.set_body_trainable(true);
  auto params = model.parameters();
  for (Parameter* q : params) q->set_trainable(true);
  AdamOptions opts;
  opts.lr = p.lr;
  opts.beta1 = 0.9;
  Adam adam(params, opts);
  const auto& train = data.tasks.at(0).train;
  const RngStream order = rng.child("order");
  StochasticDepth depth(p.layer_drop, rng.child("depth"));
  ForwardOptions fo;
  if (p.layer_drop > 0.0) fo.hooks = &depth;
  PretrainResult res;
  std::size_t tail_correct = 0, tail_seen = 0;
  const std::size_t tail_from = p.steps - p.steps / 10;
  for (std::size_t step = 0; step < p.steps; ++step) {
    std::vector<const Sample*> batch;
    std::vector<int> labels;
    for (std::size_t i = 0; i < p.batch; ++i) {
      const auto idx = static_cast<std::size_t>(order.uniform_at(step * p.batch + i) * static_cast<double>(train.size()));
      batch.push_back(&train[idx]);
      labels.push_back(train[idx].label);
    }
    const ForwardResult fr = model.forward(model.embed(images_tensor(batch, data.image_side)), fo);
    const Tensor loss = cross_entropy(fr.logits, labels);
    loss.backward();
    adam.step();
    adam.zero_grad();
    res.final_loss = loss.item();
    if (step >= tail_from) {
      const std::size_t C = fr.logits.dim(1);
      auto lg = fr.logits.data();
      for (std::size_t b = 0; b < batch.size(); ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c)
          if (lg[b * C + c] > lg[b * C + best]) best = c;
        tail_correct += static_cast<int>(best) == labels[b];
        ++tail_seen;
      }
    }
    if (step % 50 == 0) log(LogLevel::debug, label + " pretrain step " + std::to_string(step) + " loss " + std::to_string(res.final_loss));
  }
  res.final_acc = tail_seen ? static_cast<double>(tail_correct) / static_cast<double>(tail_seen) : 0.0;
  model.set_body_trainable(false);
  return res;
}

/// Frozen update model and surrogate, as stored in one checkpoint.
struct Backbones {
  VisionTransformer update;
  VisionTransformer surrogate;
};

inline Checkpoint make_checkpoint(Backbones& b) {
  Checkpoint ck;
  ck.models.emplace_back("update", b.update.config());
  ck.models.emplace_back("surrogate", b.surrogate.config());
  append_blobs(ck, "update", b.update.body_parameters());
  append_blobs(ck, "surrogate", b.surrogate.body_parameters());
  return ck;
}

/// Builds both models from `c` and fills their bodies from `ck`. Any
/// architecture disagreement is a state mismatch.
inline Backbones load_backbones(const RunConfig& c, const Checkpoint& ck) {
  const RngStream rng(c.seed, "init");
  Backbones b{VisionTransformer(c.backbone, rng.child("update")), VisionTransformer(c.surrogate, rng.child("surrogate"))};
  for (auto [tag, cfg] : {std::pair{"update", &c.backbone}, std::pair{"surrogate", &c.surrogate}}) {
    const ViTConfig* stored = ck.model(tag);
    if (!stored) throw StateMismatch(std::string("checkpoint has no '") + tag + "' model");
    if (!stored->same_body(*cfg)) throw StateMismatch(std::string("checkpoint '") + tag + "' architecture differs from config");
  }
  restore_blobs(ck, "update", b.update.body_parameters());
  restore_blobs(ck, "surrogate", b.surrogate.body_parameters());
  b.update.set_body_trainable(false);
  b.surrogate.set_body_trainable(false);
  return b;
}

/// Seeded pre-training of both models; deterministic in (config, seed).
inline Backbones pretrain_backbones(const RunConfig& c, PretrainResult* upd = nullptr, PretrainResult* sur = nullptr) {
  const RngStream rng(c.seed, "init");
  Backbones b{VisionTransformer(c.backbone, rng.child("update")), VisionTransformer(c.surrogate, rng.child("surrogate"))};
  const TaskStream data = pretrain_stream(c);
  const RngStream prng(c.seed, "pretrain");
  const PretrainResult ru = pretrain_model(b.update, data, c.pretrain, prng.child("update"), "update");
  const PretrainResult rs = pretrain_model(b.surrogate, data, c.pretrain, prng.child("surrogate"), "surrogate");
  if (upd) *upd = ru;
  if (sur) *sur = rs;
  return b;
}

}  // namespace rep
