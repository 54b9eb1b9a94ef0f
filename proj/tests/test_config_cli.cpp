#include "powerpm/commands.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace powerpm;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("powerpm_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json tiny_config(const fs::path& out) {
  json j = json::parse(R"({
    "seed": 5,
    "data": {"source": "synth", "synth": {"districts_per_city": 2, "users_per_district": 2, "length": 640}},
    "windows": {"window": 32, "stride": 8},
    "graph": {"n_clusters": 2, "restarts": 1},
    "model": {"scale": "custom", "d_model": 8, "n_layers": 1, "d_ffn": 16, "n_heads": 2, "rgcn_layers": 1},
    "patch": {"patch_len": 8, "stride": 4},
    "contrastive": {"delta": 8, "batch": 4},
    "pretrain": {"steps": 3, "accumulation": 1, "mse_batch": 2, "lr": 0.003},
    "tasks": [{"family": "forecast", "horizon": 4, "steps": 3, "regime": "frozen"}]
  })");
  j["output_dir"] = out.string();
  return j;
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p;
}

struct Run {
  int code;
  std::string log, err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "powerpm");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), log, err);
  return {code, log.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Relative path -> contents for every file below `root`.
std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  }
  return out;
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughJson) {
  const ExperimentConfig c = parse_config(json::object());
  EXPECT_EQ(parse_config(to_json(c)), c);
  EXPECT_EQ(c.windows.window, 672);
  EXPECT_EQ(c.model.scale, "tiny");
}

TEST(Config, TinyConfigRoundTrip) {
  const ExperimentConfig c = parse_config(tiny_config("out"));
  EXPECT_EQ(parse_config(to_json(c)), c);
  ASSERT_EQ(c.tasks.size(), 1u);
  EXPECT_EQ(c.tasks[0].regime, Regime::frozen);
  EXPECT_EQ(c.corpus_options().horizon, 4);
}

TEST(Config, UnknownKeysNameTheirPath) {
  auto expect_key = [](const json& j, const std::string& key) {
    try {
      parse_config(j);
      ADD_FAILURE() << "accepted " << j.dump();
    } catch (const ConfigError& e) {
      EXPECT_EQ(e.key_path(), key);
    }
  };
  expect_key(json{{"sed", 1}}, "sed");
  expect_key(json{{"model", {{"dmodel", 8}}}}, "model.dmodel");
  expect_key(json{{"data", {{"synth", {{"users", 3}}}}}}, "data.synth.users");
  expect_key(json{{"tasks", {{{"family", "forecast"}, {"horizn", 4}}}}}, "tasks.0.horizn");
  expect_key(json{{"windows", {{"window", "long"}}}}, "windows.window");
}

TEST(Config, FixedScaleRejectsDimensionOverride) {
  EXPECT_THROW(parse_config(json{{"model", {{"scale", "tiny"}, {"d_model", 9}}}}), ConfigError);
  EXPECT_NO_THROW(parse_config(json{{"model", {{"scale", "custom"}, {"d_model", 16}, {"n_heads", 2}}}}));
}

TEST(Config, OverridesWinOverFile) {
  const fs::path dir = scratch("overrides");
  const fs::path p = write_config(dir, tiny_config(dir));
  const auto c = load_config(p, {"seed=9", "tasks.0.horizon=8", "data.source=dataset"});
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.tasks[0].horizon, 8);
  EXPECT_EQ(c.data.source, "dataset");
  EXPECT_THROW(load_config(p, {"seed"}), ConfigError);
  EXPECT_THROW(load_config(p, {"model.bogus=1"}), ConfigError);
}

TEST(Cli, UnknownKeyExitsTwoWithKeyPath) {
  const fs::path dir = scratch("unknown");
  json j = tiny_config(dir);
  j["pretrain"]["stepz"] = 3;
  const auto r = run({"pretrain", "--config", write_config(dir, j).string()});
  EXPECT_EQ(r.code, 2);
  const json e = json::parse(r.err);
  EXPECT_EQ(e["error"], "config");
  EXPECT_EQ(e["key"], "pretrain.stepz");
}

TEST(Cli, UsageErrorsExitTwo) {
  EXPECT_EQ(run({}).code, 2);
  EXPECT_EQ(run({"train"}).code, 2);
  EXPECT_EQ(run({"pretrain", "--bogus"}).code, 2);
  EXPECT_EQ(run({"--help"}).code, 0);
}

TEST(Cli, InvalidJsonExitsTwo) {
  const fs::path dir = scratch("badjson");
  std::ofstream(dir / "c.json") << "{ not json";
  EXPECT_EQ(run({"synth", "--config", (dir / "c.json").string()}).code, 2);
}

TEST(Cli, MissingCheckpointExitsThree) {
  const fs::path dir = scratch("missing");
  const fs::path cfg = write_config(dir, tiny_config(dir));
  const auto r = run({"finetune", "--config", cfg.string(), "--checkpoint", (dir / "nope.bin").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_EQ(json::parse(r.err)["error"], "missing_checkpoint");
  EXPECT_EQ(run({"ablate", "--config", cfg.string()}).code, 3);
}

TEST(Cli, SynthIsByteIdenticalAcrossRuns) {
  const fs::path dir = scratch("synth");
  const fs::path cfg = write_config(dir, tiny_config(dir));
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--set", "data.output=" + (dir / "a").string()}).code, 0);
  ASSERT_EQ(run({"synth", "--config", cfg.string(), "--set", "data.output=" + (dir / "b").string()}).code, 0);
  const auto a = tree(dir / "a");
  EXPECT_GT(a.size(), 1u);
  EXPECT_EQ(a, tree(dir / "b"));
  const auto c = run({"synth", "--config", cfg.string(), "--set", "seed=6", "--set",
                      "data.output=" + (dir / "c").string()});
  ASSERT_EQ(c.code, 0);
  EXPECT_NE(a, tree(dir / "c"));
}

TEST(Cli, IngestWritesSplitSummary) {
  const fs::path dir = scratch("ingest");
  const fs::path cfg = write_config(dir, tiny_config(dir));
  ASSERT_EQ(run({"ingest", "--config", cfg.string()}).code, 0);
  const json split = json::parse(slurp(dir / "ingested" / "split.json"));
  EXPECT_EQ(split["window"], 32);
  EXPECT_GT(split["windows"]["train"].get<int>(), 0);
  EXPECT_EQ(split["normalization"].size(), 7u);
}

TEST(Cli, PretrainFinetuneReportPipeline) {
  const fs::path dir = scratch("pipeline");
  const fs::path cfg = write_config(dir, tiny_config(dir));
  const auto p = run({"pretrain", "--config", cfg.string()});
  ASSERT_EQ(p.code, 0) << p.err;
  for (const char* f : {"checkpoint.bin", "loss_trace.csv", "graph.tsv", "clusters.csv", "config.json"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_EQ(parse_config(json::parse(slurp(dir / "config.json"))), load_config(cfg));

  const auto f = run({"finetune", "--config", cfg.string()});
  ASSERT_EQ(f.code, 0) << f.err;
  EXPECT_NE(f.log.find("encoder frozen"), std::string::npos);
  std::vector<fs::path> metrics;
  for (const auto& e : fs::directory_iterator(dir / "metrics")) metrics.push_back(e.path());
  ASSERT_EQ(metrics.size(), 1u);
  const json m = json::parse(slurp(metrics[0]));
  EXPECT_EQ(m["encoder_checksum"]["before"], m["encoder_checksum"]["after"]);
  EXPECT_TRUE(m["metrics"].contains("MSE"));

  const auto rep = run({"report", "--config", cfg.string(), metrics[0].string()});
  ASSERT_EQ(rep.code, 0) << rep.err;
  const std::string csv = slurp(dir / "report" / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(csv.rfind("task,setting,level,regime,variant,fraction,seed,MSE", 0), 0u);
  for (const char* svg : {"loss_curves.svg", "metric_vs_horizon.svg", "ablation.svg", "fewshot.svg"}) {
    EXPECT_TRUE(fs::exists(dir / "report" / svg)) << svg;
  }
}

TEST(Cli, ReportRejectsNonMetricsJson) {
  const fs::path dir = scratch("report_bad");
  std::ofstream(dir / "x.json") << R"({"hello": 1})";
  const auto r = run({"report", "--set", "output_dir=" + dir.string(), (dir / "x.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(run({"report", (dir / "absent.json").string()}).code, 1);
}

TEST(Cli, CorruptCheckpointIsRuntimeFailure) {
  const fs::path dir = scratch("corrupt");
  const fs::path cfg = write_config(dir, tiny_config(dir));
  std::ofstream(dir / "bad.bin") << "PWPMCKPT garbage";
  EXPECT_EQ(run({"finetune", "--config", cfg.string(), "--checkpoint", (dir / "bad.bin").string()}).code, 1);
}
