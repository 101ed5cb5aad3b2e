// rep: command-line driver for pre-training, continual runs, sweeps and analysis.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rep/analysis.hpp"
#include "rep/checkpoint.hpp"
#include "rep/config.hpp"
#include "rep/cost_model.hpp"
#include "rep/errors.hpp"
#include "rep/log.hpp"
#include "rep/pretrain.hpp"
#include "rep/trainer.hpp"

namespace fs = std::filesystem;
using namespace rep;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct RunFlags {
  bool rep = false, no_rep = false, no_atom = false, no_ald = false, no_surrogate = false;
};

void apply_common(RunConfig& c, const Common& o) {
  if (o.seed) {
    c.seed = *o.seed;
    c.stream.seed = *o.seed;
  }
  if (!o.out.empty()) c.out_dir = o.out;
}

void apply_flags(RunConfig& c, const RunFlags& f) {
  if (f.rep && f.no_rep) throw ConfigError("--rep and --no-rep are mutually exclusive");
  if (f.rep) c.set_rep(true);
  if (f.no_rep) c.set_rep(false);
  if (f.no_atom) c.atom.enabled = false;
  if (f.no_ald) c.ald.enabled = false;
  if (f.no_surrogate) c.query.surrogate = false;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  if (!f) throw InputError("cannot write " + p.string());
  return f;
}

Backbones load_models(const RunConfig& c) {
  if (!fs::exists(c.checkpoint)) throw InputError("checkpoint not found: " + c.checkpoint.string());
  return load_backbones(c, decode_checkpoint(read_file(c.checkpoint)));
}

int cmd_pretrain(const Common& o) {
  RunConfig c = load_config(o.config);
  apply_common(c, o);
  if (!o.out.empty()) c.checkpoint = c.out_dir / "backbone.ckpt";
  PretrainResult ru, rs;
  Backbones b = pretrain_backbones(c, &ru, &rs);
  const std::vector<char> bytes = encode_checkpoint(make_checkpoint(b));
  write_file(c.checkpoint, bytes);
  log(LogLevel::info, "update model: final loss " + std::to_string(ru.final_loss) + ", train acc " + std::to_string(ru.final_acc));
  log(LogLevel::info, "surrogate: final loss " + std::to_string(rs.final_loss) + ", train acc " + std::to_string(rs.final_acc));
  std::cout << c.checkpoint.string() << ' ' << hex64(hash_bytes(bytes)) << '\n';
  return 0;
}

json execute_run(const RunConfig& c) {
  Backbones models = load_models(c);
  const TaskStream stream = gen_synthetic_stream(c.stream);
  ContinualTrainer trainer(c, models, stream);
  const RunResult r = trainer.run();
  write_run_outputs(c.out_dir, c, r);
  {
    auto f = open_out(c.out_dir / "config.json");
    f << config_to_json(c).dump(2) << '\n';
  }
  return run_summary(c, r);
}

int cmd_run(const Common& o, const RunFlags& f) {
  RunConfig c = load_config(o.config);
  apply_common(c, o);
  apply_flags(c, f);
  const json s = execute_run(c);
  std::cout << s.dump() << '\n';
  return 0;
}

/// Sets "a.b.c" inside a JSON object, creating intermediate objects.
void set_path(json& j, const std::string& dotted, const json& value) {
  json* cur = &j;
  std::stringstream ss(dotted);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty sweep key");
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->contains(parts[i])) (*cur)[parts[i]] = json::object();
    cur = &(*cur)[parts[i]];
  }
  (*cur)[parts.back()] = value;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw InputError("cannot open " + p.string());
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + " is not valid JSON: " + e.what());
  }
}

// Sweep file: {"schema_version": 1, "base": "<config>", "overrides": {...},
//              "ablations": ["rep", "no_atom", ...],
//              "axes": [{"key": "atom.n", "values": [...]}, ...]}
// Each axis is swept on its own with everything else at the base values.
int cmd_sweep(const Common& o) {
  const fs::path sweep_path = o.config;
  const json sw = read_json(sweep_path);
  detail::reject_unknown(sw, "", {"schema_version", "base", "overrides", "ablations", "axes"});
  if (sw.value("schema_version", 0) != kConfigSchemaVersion) throw ConfigError("unsupported sweep schema_version");
  if (!sw.contains("base") || !sw["base"].is_string()) throw ConfigError("sweep needs a 'base' config path");
  const fs::path base_path = sweep_path.parent_path() / sw["base"].get<std::string>();
  json base = read_json(base_path);
  if (sw.contains("overrides")) base.merge_patch(sw["overrides"]);
  if (o.seed) base["seed"] = *o.seed;

  const RunConfig base_cfg = parse_config(base, base_path.parent_path());
  const fs::path out = o.out.empty() ? base_cfg.out_dir / "sweep" : fs::path(o.out);

  struct Job {
    std::string group, key, label;
    json value;
    RunConfig cfg;
  };
  std::vector<Job> jobs;
  for (const auto& a : sw.value("ablations", json::array())) {
    const std::string name = a.get<std::string>();
    RunConfig c = base_cfg;
    if (name == "rep") c.set_rep(true);
    else if (name == "no_rep") c.set_rep(false);
    else if (name == "no_atom") c.atom.enabled = false;
    else if (name == "no_ald") c.ald.enabled = false;
    else if (name == "no_surrogate") c.query.surrogate = false;
    else throw ConfigError("unknown ablation '" + name + "'");
    jobs.push_back({"ablation", "components", name, json(name), c});
  }
  for (const auto& axis : sw.value("axes", json::array())) {
    detail::reject_unknown(axis, "axes[]", {"key", "values"});
    const std::string key = axis.at("key").get<std::string>();
    for (const auto& v : axis.at("values")) {
      json j = base;
      set_path(j, key, v);
      jobs.push_back({"axis", key, key + "=" + v.dump(), v, parse_config(j, base_path.parent_path())});
    }
  }

  auto table = open_out(out / "sweep.csv");
  table << "group,key,value,total_macs,peak_activation_bytes,final_avg_acc,forgetting\n";
  table.precision(10);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    Job& job = jobs[i];
    job.cfg.out_dir = out / ("run" + std::to_string(i));
    log(LogLevel::info, "sweep " + job.label);
    const json s = execute_run(job.cfg);
    std::string value = job.value.is_string() ? job.value.get<std::string>() : job.value.dump();
    table << job.group << ',' << job.key << ',' << value << ',' << s["total_macs"].get<std::uint64_t>() << ','
          << s["peak_activation_bytes"].get<std::uint64_t>() << ',' << s["final_avg_acc"].get<double>() << ','
          << (s["forgetting"].is_null() ? std::string("") : s["forgetting"].dump()) << '\n';
  }
  return 0;
}

/// Attention-distance table, merge schedule and surrogate/backbone CKA.
int cmd_analyze(const Common& o, std::size_t n_samples) {
  RunConfig c = load_config(o.config);
  apply_common(c, o);
  const fs::path out = o.out.empty() ? c.out_dir / "analysis" : fs::path(o.out);
  Backbones models = load_models(c);
  const TaskStream stream = gen_synthetic_stream(c.stream);
  std::vector<const Sample*> batch;
  for (std::size_t i = 0; batch.size() < n_samples; ++i) {
    const auto& test = stream.tasks[i % stream.tasks.size()].test;
    const std::size_t idx = i / stream.tasks.size();
    if (idx >= test.size()) break;
    batch.push_back(&test[idx]);
  }
  if (batch.size() < 2) throw InputError("analysis needs at least two test samples");
  const Tensor images = images_tensor(batch, stream.image_side);

  NoGradGuard no_grad;
  ForwardOptions opts;
  opts.record_attention = true;
  opts.skip_head = true;
  const ForwardResult fr = models.update.forward(models.update.embed(images), opts);
  {
    auto f = open_out(out / "attention_distance.csv");
    f << "layer,head,mean_distance\n";
    f.precision(12);
    for (const auto& h : attention_distance_table(fr.attention, c.backbone.grid_side(), 0))
      f << h.layer << ',' << h.head << ',' << h.distance << '\n';
  }
  {
    auto f = open_out(out / "schedule.csv");
    f << "layer,r_target\n";
    const MergeSchedule s = c.merge_schedule();
    for (std::size_t l = 1; l <= s.depth; ++l) f << l << ',' << schedule_r(l, s) << '\n';
  }
  const Tensor fu = models.update.query_features(images);
  const Tensor fs_ = models.surrogate.query_features(images);
  const RandomProjection phi(c.backbone.width, c.surrogate.width, c.query.projection_seed);
  json j;
  j["samples"] = batch.size();
  j["cka_update_surrogate"] = cka(fu, fs_);
  j["cka_update_projected"] = cka(fu, phi.apply(fs_));
  j["query_macs_update"] = clean_forward_macs(c.backbone, 1);
  j["query_macs_surrogate"] = clean_forward_macs(c.surrogate, 1) + c.surrogate.width * c.backbone.width;
  j["expected_total_macs"] = profile_estimate(c).total();
  auto f = open_out(out / "analysis.json");
  f << j.dump(2) << '\n';
  return 0;
}

/// One row per run directory, read from its summary.json.
int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  if (dirs.empty()) throw ConfigError("report needs at least one run directory");
  std::ostringstream table;
  table << "run,atom,ald,surrogate,final_avg_acc,forgetting,total_macs,peak_activation_bytes,peak_bytes\n";
  table.precision(10);
  for (const auto& d : dirs) {
    const json s = read_json(fs::path(d) / "summary.json");
    const json& comp = s.at("components");
    table << fs::path(d).filename().string() << ',' << comp.at("atom").get<bool>() << ','
          << comp.at("ald").get<bool>() << ',' << comp.at("surrogate").get<bool>() << ','
          << s.at("final_avg_acc").get<double>() << ','
          << (s.at("forgetting").is_null() ? std::string("") : s.at("forgetting").dump()) << ','
          << s.at("total_macs").get<std::uint64_t>() << ',' << s.at("peak_activation_bytes").get<std::uint64_t>()
          << ',' << s.at("peak_bytes").get<std::uint64_t>() << '\n';
  }
  if (out.empty()) {
    std::cout << table.str();
  } else {
    auto f = open_out(fs::path(out) / "report.csv");
    f << table.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-based continual learning with token merging and layer dropping"};
  app.require_subcommand(1);

  Common common;
  RunFlags flags;
  std::size_t n_samples = 64;
  std::vector<std::string> report_dirs;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", common.config, "JSON config path");
    if (needs_config) opt->required();
    sub->add_option("--seed", common.seed, "override the config seed");
    sub->add_option("--out", common.out, "output directory");
  };
  auto* pretrain = app.add_subcommand("pretrain", "train the frozen backbone and surrogate, write the checkpoint");
  add_common(pretrain, true);
  auto* run = app.add_subcommand("run", "run the continual task stream");
  add_common(run, true);
  run->add_flag("--rep", flags.rep, "enable surrogate query, token merging and layer dropping");
  run->add_flag("--no-rep", flags.no_rep, "disable all three components");
  run->add_flag("--no-atom", flags.no_atom, "disable token merging");
  run->add_flag("--no-ald", flags.no_ald, "disable layer dropping");
  run->add_flag("--no-surrogate", flags.no_surrogate, "query with the update model");
  auto* sweep = app.add_subcommand("sweep", "run component ablations and parameter sweeps");
  add_common(sweep, true);
  auto* analyze = app.add_subcommand("analyze", "attention distances, merge schedule and CKA");
  add_common(analyze, true);
  analyze->add_option("--samples", n_samples, "test images to analyze")->check(CLI::PositiveNumber);
  auto* report = app.add_subcommand("report", "tabulate run summaries");
  report->add_option("--out", common.out, "write report.csv here instead of stdout");
  report->add_option("dirs", report_dirs, "run output directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*pretrain) return cmd_pretrain(common);
    if (*run) return cmd_run(common, flags);
    if (*sweep) return cmd_sweep(common);
    if (*analyze) return cmd_analyze(common, n_samples);
    if (*report) return cmd_report(report_dirs, common.out);
  } catch (const ConfigError& e) {
    log(LogLevel::error, e.what());
    return 2;
  } catch (const InputError& e) {
    log(LogLevel::error, e.what());
    return 2;
  } catch (const StateMismatch& e) {
    log(LogLevel::error, e.what());
    return 3;
  } catch (const NumericError& e) {
    log(LogLevel::error, e.what());
    return 4;
  } catch (const json::exception& e) {
    log(LogLevel::error, e.what());
    return 2;
  } catch (const std::exception& e) {
    log(LogLevel::error, std::string("internal error: ") + e.what());
    return 1;
  }
  return 2;
}
