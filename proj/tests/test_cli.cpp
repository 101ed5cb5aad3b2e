#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "rep/config.hpp"

namespace fs = std::filesystem;
using rep::json;

namespace {

struct Result {
  int code = -1;
  std::string out, err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path work_dir(const std::string& name) {
  const fs::path d = fs::path(REP_WORK_DIR) / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Result cli(const std::string& args, const fs::path& dir) {
  const fs::path o = dir / "stdout.txt", e = dir / "stderr.txt";
  const std::string cmd = std::string(REP_CLI_PATH) + " " + args + " > " + o.string() + " 2> " + e.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

json tiny_config() {
  return json::parse(R"({
    "schema_version": 1,
    "seed": 2,
    "out": "out",
    "checkpoint": "out/backbone.ckpt",
    "backbone": {"image_side": 16, "patch_side": 4, "depth": 3, "width": 16, "heads": 2, "mlp_ratio": 2},
    "surrogate": {"depth": 2, "width": 8, "heads": 2, "mlp_ratio": 2},
    "pool": {"size": 4, "length": 2},
    "atom": {"n": 3},
    "stream": {"n_tasks": 2, "classes_per_task": 2, "train_per_class": 8, "test_per_class": 4},
    "train": {"iters_per_task": 5, "batch": 4, "eval_batch": 8},
    "pretrain": {"classes": 4, "train_per_class": 4, "steps": 4, "batch": 4}
  })");
}

fs::path write_json(const fs::path& p, const json& j) {
  std::ofstream(p) << j.dump(2);
  return p;
}

// Work dir holding the tiny config and its pre-trained checkpoint.
fs::path prepared(const std::string& name) {
  const fs::path d = work_dir(name);
  write_json(d / "cfg.json", tiny_config());
  const Result r = cli("pretrain --config " + (d / "cfg.json").string(), d);
  EXPECT_EQ(r.code, 0) << r.err;
  return d;
}

std::map<std::string, std::string> dir_files(const fs::path& d) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(d))
    if (e.is_regular_file()) out[fs::relative(e.path(), d).string()] = slurp(e.path());
  return out;
}

}  // namespace

TEST(Cli, MissingConfigIsExitTwoAndNamesPath) {
  const fs::path d = work_dir("missing");
  const Result r = cli("run --config " + (d / "absent.json").string(), d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("absent.json"), std::string::npos);
}

TEST(Cli, UsageErrorsAreExitTwo) {
  const fs::path d = work_dir("usage");
  EXPECT_EQ(cli("", d).code, 2);
  EXPECT_EQ(cli("frobnicate", d).code, 2);
  EXPECT_EQ(cli("run", d).code, 2);
}

TEST(Cli, DepthZeroIsExitTwo) {
  const fs::path d = work_dir("depth0");
  json j = tiny_config();
  j["backbone"]["depth"] = 0;
  write_json(d / "cfg.json", j);
  EXPECT_EQ(cli("pretrain --config " + (d / "cfg.json").string(), d).code, 2);
}

TEST(Cli, MissingCheckpointIsExitTwo) {
  const fs::path d = work_dir("nockpt");
  write_json(d / "cfg.json", tiny_config());
  const Result r = cli("run --config " + (d / "cfg.json").string(), d);
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("backbone.ckpt"), std::string::npos);
}

TEST(Cli, ArchitectureMismatchIsExitThree) {
  const fs::path d = prepared("mismatch");
  json j = tiny_config();
  j["backbone"]["depth"] = 4;
  write_json(d / "deeper.json", j);
  EXPECT_EQ(cli("run --config " + (d / "deeper.json").string(), d).code, 3);
}

TEST(Cli, PretrainIsDeterministic) {
  const fs::path d = work_dir("pretrain");
  write_json(d / "cfg.json", tiny_config());
  const Result a = cli("pretrain --config " + (d / "cfg.json").string() + " --out " + (d / "a").string(), d);
  const Result b = cli("pretrain --config " + (d / "cfg.json").string() + " --out " + (d / "b").string(), d);
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(d / "a" / "backbone.ckpt"), slurp(d / "b" / "backbone.ckpt"));
  EXPECT_EQ(a.out.substr(a.out.find(' ')), b.out.substr(b.out.find(' ')));
}

TEST(Cli, RepAndNoRepShareFrozenHash) {
  const fs::path d = prepared("repflags");
  const std::string cfg = "--config " + (d / "cfg.json").string();
  ASSERT_EQ(cli("run " + cfg + " --rep --out " + (d / "on").string(), d).code, 0);
  ASSERT_EQ(cli("run " + cfg + " --no-rep --out " + (d / "off").string(), d).code, 0);
  const json on = json::parse(slurp(d / "on" / "summary.json"));
  const json off = json::parse(slurp(d / "off" / "summary.json"));
  EXPECT_NE(on["total_macs"], off["total_macs"]);
  EXPECT_EQ(on["frozen_hash"], off["frozen_hash"]);
  EXPECT_TRUE(on["frozen_unchanged"].get<bool>());
  EXPECT_EQ(on["audit_violations"], 0);
}

TEST(Cli, ComponentFlagsComposeToNoRep) {
  const fs::path d = prepared("algebra");
  const std::string cfg = "--config " + (d / "cfg.json").string();
  ASSERT_EQ(cli("run " + cfg + " --no-atom --no-ald --no-surrogate --out " + (d / "a").string(), d).code, 0);
  ASSERT_EQ(cli("run " + cfg + " --no-rep --out " + (d / "b").string(), d).code, 0);
  auto a = dir_files(d / "a"), b = dir_files(d / "b");
  a.erase("config.json");  // records its own output directory
  b.erase("config.json");
  EXPECT_EQ(a, b);
  EXPECT_EQ(cli("run " + cfg + " --rep --no-rep", d).code, 2);
}

TEST(Cli, RerunsAreByteIdentical) {
  const fs::path d = prepared("rerun");
  const std::string cfg = "--config " + (d / "cfg.json").string();
  ASSERT_EQ(cli("run " + cfg + " --out " + (d / "a").string(), d).code, 0);
  const auto first = dir_files(d / "a");
  EXPECT_EQ(first.size(), 7u);
  ASSERT_EQ(cli("run " + cfg + " --out " + (d / "a").string(), d).code, 0);
  EXPECT_EQ(first, dir_files(d / "a"));
}

TEST(Cli, AnalyzeWritesOneRowPerLayerHead) {
  const fs::path d = prepared("analyze");
  const Result r = cli("analyze --config " + (d / "cfg.json").string() + " --samples 6 --out " + (d / "an").string(), d);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(d / "an" / "attention_distance.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "layer,head,mean_distance");
  std::size_t rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3u * 2u);
  const json a = json::parse(slurp(d / "an" / "analysis.json"));
  EXPECT_EQ(a["samples"], 6);
  EXPECT_LT(a["query_macs_surrogate"].get<double>(), a["query_macs_update"].get<double>());
}

TEST(Cli, SweepAndReport) {
  const fs::path d = prepared("sweep");
  json sw = {{"schema_version", 1},
             {"base", "cfg.json"},
             {"overrides", {{"train", {{"iters_per_task", 3}}}}},
             {"ablations", {"rep", "no_ald"}},
             {"axes", {{{"key", "atom.n"}, {"values", {1, 3}}}}}};
  write_json(d / "sweep.json", sw);
  const Result r = cli("sweep --config " + (d / "sweep.json").string() + " --out " + (d / "sw").string(), d);
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(d / "sw" / "sweep.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 4u);

  const Result rep = cli("report " + (d / "sw" / "run0").string() + " " + (d / "sw" / "run1").string(), d);
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_EQ(std::count(rep.out.begin(), rep.out.end(), '\n'), 3);

  sw["ablations"] = {"no_everything"};
  write_json(d / "bad.json", sw);
  EXPECT_EQ(cli("sweep --config " + (d / "bad.json").string(), d).code, 2);
}
