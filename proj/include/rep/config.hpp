#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <string>

#include <json.hpp>

#include "rep/ald.hpp"
#include "rep/atom.hpp"
#include "rep/data.hpp"
#include "rep/errors.hpp"
#include "rep/optim.hpp"
#include "rep/prompting.hpp"
#include "rep/vit.hpp"

namespace rep {

using json = nlohmann::json;

inline constexpr int kConfigSchemaVersion = 1;

struct PoolConfig {
  std::size_t size = 10;
  std::size_t length = 5;
};

struct AtomConfig {
  bool enabled = true;
  std::size_t n = 8;
  std::size_t r_max = 16;  // 2 * n unless given
  bool protect_prompts = true;
  MergeSchedule::Kind schedule = MergeSchedule::Kind::progressive;
};

struct AldConfig {
  bool enabled = true;
  DropStrategy strategy = DropStrategy::adaptive;
  DropSchedule schedule;  // gamma, alpha and tau resolved at load time
};

struct QueryConfig {
  bool surrogate = true;
  std::uint64_t projection_seed = 7;
};

struct TrainConfig {
  std::size_t iters_per_task = 300;
  std::size_t batch = 16;
  std::size_t eval_batch = 50;
  AdamOptions adam;
};

struct PretrainConfig {
  std::size_t classes = 20;
  std::size_t train_per_class = 64;
  std::size_t steps = 300;
  std::size_t batch = 32;
  double lr = 1e-3;
  double noise = 0.5;
  double layer_drop = 0.0;  // stochastic depth: per-block skip probability
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string size_class = "desk";
  std::filesystem::path out_dir = "out";
  std::filesystem::path checkpoint = "out/backbone.ckpt";
  ViTConfig backbone;
  ViTConfig surrogate{32, 8, 3, 32, 2, 4, 10};
  PoolConfig pool;
  LossWeights loss;
  AtomConfig atom;
  AldConfig ald;
  QueryConfig query;
  SyntheticSpec stream;
  TrainConfig train;
  PretrainConfig pretrain;

  bool rep_enabled() const { return atom.enabled && ald.enabled && query.surrogate; }
  void set_rep(bool on) { atom.enabled = ald.enabled = query.surrogate = on; }

  MergeSchedule merge_schedule() const { return {atom.r_max, backbone.depth, atom.schedule}; }

  void validate() const {
    backbone.validate();
    surrogate.validate();
    if (backbone.depth == 0) throw ConfigError("backbone.depth must be at least 1");
    if (surrogate.depth == 0) throw ConfigError("surrogate.depth must be at least 1");
    if (surrogate.image_side != backbone.image_side || surrogate.patch_side != backbone.patch_side) {
      throw ConfigError("surrogate must share image_side and patch_side with the backbone");
    }
    if (surrogate.width > backbone.width) throw ConfigError("surrogate.width must not exceed backbone.width");
    if (stream.image_side != backbone.image_side) throw ConfigError("stream image side differs from backbone");
    if (pool.size == 0) throw ConfigError("pool.size must be positive");
    loss.validate();
    ald.schedule.validate();
    if (train.batch == 0 || train.eval_batch == 0) throw ConfigError("batch sizes must be positive");
    if (!(train.adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (pretrain.classes < 2 || pretrain.batch == 0) throw ConfigError("pretrain needs >= 2 classes and a batch");
    if (!(pretrain.layer_drop >= 0.0 && pretrain.layer_drop < 1.0)) throw ConfigError("pretrain.layer_drop must be in [0, 1)");
  }
};

namespace detail {

inline void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("unknown key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void take(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + where + key + "'");
  }
}

inline void take_size(const json& j, const char* key, std::size_t& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("'" + where + key + "' must be a non-negative integer");
  }
  out = v.get<std::size_t>();
}

inline void read_vit(const json& j, const std::string& where, ViTConfig& c) {
  reject_unknown(j, where, {"image_side", "patch_side", "depth", "width", "heads", "mlp_ratio"});
  const std::string p = where + ".";
  take_size(j, "image_side", c.image_side, p);
  take_size(j, "patch_side", c.patch_side, p);
  take_size(j, "depth", c.depth, p);
  take_size(j, "width", c.width, p);
  take_size(j, "heads", c.heads, p);
  take_size(j, "mlp_ratio", c.mlp_ratio, p);
}

inline json vit_json(const ViTConfig& c) {
  return {{"image_side", c.image_side}, {"patch_side", c.patch_side}, {"depth", c.depth},
          {"width", c.width},           {"heads", c.heads},           {"mlp_ratio", c.mlp_ratio}};
}

inline double read_tau(const json& v) {
  if (v.is_string() && v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
  if (v.is_number()) return v.get<double>();
  throw ConfigError("'ald.tau' must be a number or \"inf\"");
}

inline const char* strategy_name(DropStrategy s) {
  switch (s) {
    case DropStrategy::adaptive: return "adaptive";
    case DropStrategy::progressive: return "progressive";
    case DropStrategy::stochastic_depth: return "stochastic_depth";
  }
  return "adaptive";
}

}  // namespace detail

/// Parses a config object. Unknown keys anywhere are rejected; omitted
/// keys keep their defaults. Relative paths resolve against `base_dir`.
inline RunConfig parse_config(const json& j, const std::filesystem::path& base_dir = {}) {
  using detail::take;
  using detail::take_size;
  detail::reject_unknown(j, "", {"schema_version", "seed", "size_class", "out", "checkpoint", "backbone", "surrogate",
                                 "pool", "loss", "atom", "ald", "query", "stream", "train", "pretrain"});
  if (!j.contains("schema_version") || !j.at("schema_version").is_number_integer()) {
    throw ConfigError("config needs an integer 'schema_version'");
  }
  if (j.at("schema_version").get<int>() != kConfigSchemaVersion) {
    throw ConfigError("unsupported schema_version " + j.at("schema_version").dump());
  }
  RunConfig c;
  take(j, "seed", c.seed, "");
  take(j, "size_class", c.size_class, "");
  std::string out = c.out_dir.string(), ck = c.checkpoint.string();
  take(j, "out", out, "");
  take(j, "checkpoint", ck, "");
  c.out_dir = base_dir / out;
  c.checkpoint = base_dir / ck;

  if (j.contains("backbone")) detail::read_vit(j["backbone"], "backbone", c.backbone);
  c.surrogate.image_side = c.backbone.image_side;
  c.surrogate.patch_side = c.backbone.patch_side;
  if (j.contains("surrogate")) detail::read_vit(j["surrogate"], "surrogate", c.surrogate);

  if (j.contains("pool")) {
    const json& p = j["pool"];
    detail::reject_unknown(p, "pool", {"size", "length"});
    take_size(p, "size", c.pool.size, "pool.");
    take_size(p, "length", c.pool.length, "pool.");
  }
  if (j.contains("loss")) {
    const json& p = j["loss"];
    detail::reject_unknown(p, "loss", {"prompt", "aux"});
    take(p, "prompt", c.loss.prompt, "loss.");
    take(p, "aux", c.loss.aux, "loss.");
  }

  bool r_max_given = false;
  if (j.contains("atom")) {
    const json& p = j["atom"];
    detail::reject_unknown(p, "atom", {"enabled", "n", "r_max", "protect_prompts", "schedule"});
    take(p, "enabled", c.atom.enabled, "atom.");
    take_size(p, "n", c.atom.n, "atom.");
    r_max_given = p.contains("r_max");
    take_size(p, "r_max", c.atom.r_max, "atom.");
    take(p, "protect_prompts", c.atom.protect_prompts, "atom.");
    std::string kind = "progressive";
    take(p, "schedule", kind, "atom.");
    if (kind == "progressive") c.atom.schedule = MergeSchedule::Kind::progressive;
    else if (kind == "uniform") c.atom.schedule = MergeSchedule::Kind::uniform;
    else throw ConfigError("atom.schedule must be 'progressive' or 'uniform'");
  }
  if (!r_max_given) c.atom.r_max = c.atom.schedule == MergeSchedule::Kind::uniform ? c.atom.n : 2 * c.atom.n;

  take_size(j.value("train", json::object()), "iters_per_task", c.train.iters_per_task, "train.");
  const AldDefaults ad = defaults_for(c.size_class);
  c.ald.schedule.alpha = ad.alpha;
  c.ald.schedule.tau = ad.tau;
  c.ald.schedule.gamma = c.train.iters_per_task > 0 ? 5.0 / static_cast<double>(c.train.iters_per_task) : 0.0;
  if (j.contains("ald")) {
    const json& p = j["ald"];
    detail::reject_unknown(p, "ald", {"enabled", "strategy", "theta_min", "gamma", "alpha", "tau"});
    take(p, "enabled", c.ald.enabled, "ald.");
    take(p, "theta_min", c.ald.schedule.theta_min, "ald.");
    take(p, "gamma", c.ald.schedule.gamma, "ald.");
    take(p, "alpha", c.ald.schedule.alpha, "ald.");
    if (p.contains("tau")) c.ald.schedule.tau = detail::read_tau(p["tau"]);
    std::string s = "adaptive";
    take(p, "strategy", s, "ald.");
    if (s == "adaptive") c.ald.strategy = DropStrategy::adaptive;
    else if (s == "progressive") c.ald.strategy = DropStrategy::progressive;
    else if (s == "stochastic_depth") c.ald.strategy = DropStrategy::stochastic_depth;
    else throw ConfigError("ald.strategy must be adaptive, progressive or stochastic_depth");
  }
  if (j.contains("query")) {
    const json& p = j["query"];
    detail::reject_unknown(p, "query", {"surrogate", "projection_seed"});
    take(p, "surrogate", c.query.surrogate, "query.");
    take(p, "projection_seed", c.query.projection_seed, "query.");
  }
  c.stream.image_side = c.backbone.image_side;
  c.stream.seed = c.seed;
  if (j.contains("stream")) {
    const json& p = j["stream"];
    detail::reject_unknown(p, "stream", {"n_tasks", "classes_per_task", "train_per_class", "test_per_class", "noise"});
    take_size(p, "n_tasks", c.stream.n_tasks, "stream.");
    take_size(p, "classes_per_task", c.stream.classes_per_task, "stream.");
    take_size(p, "train_per_class", c.stream.train_per_class, "stream.");
    take_size(p, "test_per_class", c.stream.test_per_class, "stream.");
    take(p, "noise", c.stream.noise, "stream.");
  }
  if (j.contains("train")) {
    const json& p = j["train"];
    detail::reject_unknown(p, "train", {"iters_per_task", "batch", "eval_batch", "lr", "beta1", "beta2"});
    take_size(p, "batch", c.train.batch, "train.");
    take_size(p, "eval_batch", c.train.eval_batch, "train.");
    take(p, "lr", c.train.adam.lr, "train.");
    take(p, "beta1", c.train.adam.beta1, "train.");
    take(p, "beta2", c.train.adam.beta2, "train.");
  }
  if (j.contains("pretrain")) {
    const json& p = j["pretrain"];
    detail::reject_unknown(p, "pretrain", {"classes", "train_per_class", "steps", "batch", "lr", "noise", "layer_drop"});
    take_size(p, "classes", c.pretrain.classes, "pretrain.");
    take_size(p, "train_per_class", c.pretrain.train_per_class, "pretrain.");
    take_size(p, "steps", c.pretrain.steps, "pretrain.");
    take_size(p, "batch", c.pretrain.batch, "pretrain.");
    take(p, "lr", c.pretrain.lr, "pretrain.");
    take(p, "noise", c.pretrain.noise, "pretrain.");
    take(p, "layer_drop", c.pretrain.layer_drop, "pretrain.");
  }
  c.backbone.n_classes = c.stream.n_tasks * c.stream.classes_per_task;
  c.surrogate.n_classes = c.backbone.n_classes;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j, path.parent_path());
}

/// Fully resolved config, suitable for re-parsing (paths as given).
inline json config_to_json(const RunConfig& c) {
  json tau = std::isinf(c.ald.schedule.tau) ? json("inf") : json(c.ald.schedule.tau);
  return {
      {"schema_version", kConfigSchemaVersion},
      {"seed", c.seed},
      {"size_class", c.size_class},
      {"out", c.out_dir.generic_string()},
      {"checkpoint", c.checkpoint.generic_string()},
      {"backbone", detail::vit_json(c.backbone)},
      {"surrogate", detail::vit_json(c.surrogate)},
      {"pool", {{"size", c.pool.size}, {"length", c.pool.length}}},
      {"loss", {{"prompt", c.loss.prompt}, {"aux", c.loss.aux}}},
      {"atom",
       {{"enabled", c.atom.enabled},
        {"n", c.atom.n},
        {"r_max", c.atom.r_max},
        {"protect_prompts", c.atom.protect_prompts},
        {"schedule", c.atom.schedule == MergeSchedule::Kind::uniform ? "uniform" : "progressive"}}},
      {"ald",
       {{"enabled", c.ald.enabled},
        {"strategy", detail::strategy_name(c.ald.strategy)},
        {"theta_min", c.ald.schedule.theta_min},
        {"gamma", c.ald.schedule.gamma},
        {"alpha", c.ald.schedule.alpha},
        {"tau", tau}}},
      {"query", {{"surrogate", c.query.surrogate}, {"projection_seed", c.query.projection_seed}}},
      {"stream",
       {{"n_tasks", c.stream.n_tasks},
        {"classes_per_task", c.stream.classes_per_task},
        {"train_per_class", c.stream.train_per_class},
        {"test_per_class", c.stream.test_per_class},
        {"noise", c.stream.noise}}},
      {"train",
       {{"iters_per_task", c.train.iters_per_task},
        {"batch", c.train.batch},
        {"eval_batch", c.train.eval_batch},
        {"lr", c.train.adam.lr},
        {"beta1", c.train.adam.beta1},
        {"beta2", c.train.adam.beta2}}},
      {"pretrain",
       {{"classes", c.pretrain.classes},
        {"train_per_class", c.pretrain.train_per_class},
        {"steps", c.pretrain.steps},
        {"batch", c.pretrain.batch},
        {"lr", c.pretrain.lr},
        {"noise", c.pretrain.noise},
        {"layer_drop", c.pretrain.layer_drop}}},
  };
}

}  // namespace rep
