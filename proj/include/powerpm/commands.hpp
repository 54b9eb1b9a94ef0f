// Command implementations behind the `powerpm` executable.
#pragma once

#include "powerpm/checkpoint.hpp"
#include "powerpm/config.hpp"
#include "powerpm/corpus.hpp"
#include "powerpm/data.hpp"
#include "powerpm/downstream.hpp"
#include "powerpm/hierarchy.hpp"
#include "powerpm/pretrain.hpp"
#include "powerpm/svg.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace powerpm::cli {

namespace fs = std::filesystem;

class MissingCheckpoint : public Error {
 public:
  explicit MissingCheckpoint(const fs::path& p) : Error("checkpoint not found: " + p.string()), path_(p) {}
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Data sources

inline SynthConfig synth_config(const ExperimentConfig& cfg) {
  SynthConfig s = cfg.data.synth;
  s.seed = derive_seed(cfg.seed, "synth");
  return s;
}

/// Loads the configured source. Synthetic data is generated once per
/// (generator config, seed) and cached under POWERPM_CACHE.
inline Dataset load_source(const ExperimentConfig& cfg, std::ostream& log) {
  if (cfg.data.source == "dataset") {
    if (cfg.data.path.empty()) throw ConfigError("data.path is required for source 'dataset'", "data.path");
    log << "reading dataset " << cfg.data.path << "\n";
    return read_dataset(cfg.data.path);
  }
  if (cfg.data.source == "iso") {
    if (cfg.data.path.empty()) throw ConfigError("data.path is required for source 'iso'", "data.path");
    Dataset ds;
    ds.instances = load_iso_dataset(cfg.data.path, iso_schema_from_string(cfg.data.iso_schema));
    if (!cfg.data.exogenous_path.empty()) ds.exogenous = load_exogenous_sidecar(cfg.data.exogenous_path);
    log << "loaded " << ds.instances.size() << " " << cfg.data.iso_schema << " series from " << cfg.data.path << "\n";
    return ds;
  }
  const SynthConfig s = synth_config(cfg);
  const json key = to_json(cfg)["data"]["synth"];
  const fs::path dir = cache_dir() / ("synth-" + hex64(fnv1a64(key.dump() + "/" + std::to_string(s.seed))));
  if (fs::exists(dir / "manifest.csv")) {
    log << "using cached synthetic dataset " << dir.string() << "\n";
    return read_dataset(dir);
  }
  Dataset ds = synth_generate(s);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!ec) {
    // Write to a scratch directory first so a half-written cache is never used.
    const fs::path tmp = dir.string() + ".tmp";
    fs::remove_all(tmp, ec);
    write_dataset(tmp, ds);
    fs::remove_all(dir, ec);
    fs::rename(tmp, dir, ec);
    if (!ec) return read_dataset(dir);
  }
  return ds;
}

struct Prepared {
  Dataset dataset;
  Corpus corpus;
  std::optional<HierGraph> graph;
  ClusterAssignment assignment;
};

inline bool wants_graph(const ExperimentConfig& cfg, const AblationFlags& flags) {
  return cfg.model.rgcn_layers > 0 && !flags.no_hierarchy;
}

inline Prepared prepare(const ExperimentConfig& cfg, bool with_graph, std::ostream& log) {
  Prepared p;
  p.dataset = load_source(cfg, log);
  p.corpus = build_corpus(p.dataset, cfg.corpus_options());
  log << "corpus: " << p.corpus.instances.size() << " instances, windows train/val/test = "
      << p.corpus.train_offsets.size() << "/" << p.corpus.val_offsets.size() << "/" << p.corpus.test_offsets.size()
      << "\n";
  if (with_graph) {
    auto [g, a] = build_corpus_graph(p.corpus, cfg.graph.n_clusters, cfg.kmeans_options());
    p.graph = std::move(g);
    p.assignment = std::move(a);
    log << "graph: " << p.graph->nodes.size() << " nodes, " << p.graph->edges.size() << " edges\n";
  }
  return p;
}

// ---------------------------------------------------------------------------
// synth / ingest

inline fs::path dataset_output(const ExperimentConfig& cfg, const std::string& fallback) {
  return cfg.data.output.empty() ? fs::path(cfg.output_dir) / fallback : fs::path(cfg.data.output);
}

inline fs::path cmd_synth(const ExperimentConfig& cfg, std::ostream& log) {
  const fs::path out = dataset_output(cfg, "dataset");
  const Dataset ds = synth_generate(synth_config(cfg));
  fs::remove_all(out);
  write_dataset(out, ds);
  log << "wrote " << ds.instances.size() << " synthetic series to " << out.string() << "\n";
  return out;
}

inline json split_json(const Corpus& c, const CorpusOptions& opt) {
  json norm = json::object();
  for (const auto& [id, st] : c.plan.normalization) norm[id] = {{"mean", st.mean}, {"stddev", st.stddev}};
  const auto& p = c.plan;
  return {{"ratios", p.ratios},
          {"window", opt.window},
          {"stride", opt.stride},
          {"horizon", opt.horizon},
          {"train", {{"first", io::format_timestamp(p.train_first)}, {"last", io::format_timestamp(p.train_last)}}},
          {"val", {{"first", io::format_timestamp(p.val_first)}, {"last", io::format_timestamp(p.val_last)}}},
          {"test", {{"first", io::format_timestamp(p.test_first)}, {"last", io::format_timestamp(p.test_last)}}},
          {"windows", {{"train", c.train_offsets.size()}, {"val", c.val_offsets.size()}, {"test", c.test_offsets.size()}}},
          {"normalization", norm}};
}

/// Aligned, train-normalized copy of the source plus split.json.
inline fs::path cmd_ingest(const ExperimentConfig& cfg, std::ostream& log) {
  const fs::path out = dataset_output(cfg, "ingested");
  const Dataset src = load_source(cfg, log);
  const CorpusOptions opt = cfg.corpus_options();
  const Corpus c = build_corpus(src, opt);
  Dataset norm;
  norm.instances = c.instances;
  norm.exogenous = src.exogenous;
  norm.user_labels = src.user_labels;
  fs::remove_all(out);
  write_dataset(out, norm);
  io::write_text(out / "split.json", split_json(c, opt).dump(2) + "\n");
  log << "wrote normalized dataset (" << c.instances.size() << " series) to " << out.string() << "\n";
  return out;
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainOutputs {
  fs::path checkpoint;
  fs::path trace;
  PretrainResult result;
};

inline PretrainOutputs run_pretraining(const ExperimentConfig& cfg, const AblationFlags& flags, const Prepared& p,
                                       const fs::path& out, std::ostream& log) {
  fs::create_directories(out);
  EncoderState state =
      EncoderState::init(cfg.model, cfg.patch, cfg.windows.window, p.corpus.schema, derive_seed(cfg.seed, "init"));
  const PretrainConfig pc = apply_ablation(cfg.pretrain, flags);
  log << "pretraining variant " << flags.name() << ": " << pc.steps << " updates x " << pc.accumulation
      << " micro-steps, lambda=" << io::format_double(pc.lambda) << "\n";
  const HierGraph* g = p.graph && pc.flags.use_hierarchy ? &*p.graph : nullptr;
  auto on_ckpt = [&](int update, const EncoderState& s) {
    fs::create_directories(out / "checkpoints");
    save_checkpoint(out / "checkpoints" / ("step_" + std::to_string(update) + ".bin"), s);
  };
  PretrainOutputs o;
  o.result = pretrain_loop(pc, p.corpus, g, state, on_ckpt);
  o.checkpoint = out / "checkpoint.bin";
  o.trace = out / "loss_trace.csv";
  save_checkpoint(o.checkpoint, state);
  io::write_text(o.trace, trace_csv(o.result.trace));
  if (!o.result.trace.empty()) {
    const auto& last = o.result.trace.back();
    log << "final l_mse=" << io::format_double(last.l_mse) << " l_dvcl=" << io::format_double(last.l_dvcl) << "\n";
  }
  return o;
}

inline void write_graph_exports(const Prepared& p, const fs::path& out) {
  if (!p.graph) return;
  fs::create_directories(out);
  io::write_text(out / "graph.tsv", p.graph->to_edge_list());
  io::write_text(out / "clusters.csv", p.assignment.to_csv());
}

inline PretrainOutputs cmd_pretrain(const ExperimentConfig& cfg, std::ostream& log) {
  const Prepared p = prepare(cfg, wants_graph(cfg, cfg.ablation), log);
  const fs::path out = cfg.output_dir;
  write_graph_exports(p, out);
  io::write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  auto o = run_pretraining(cfg, cfg.ablation, p, out, log);
  log << "checkpoint " << o.checkpoint.string() << "\n";
  return o;
}

// ---------------------------------------------------------------------------
// finetune / ablate

inline EncoderState load_encoder(const fs::path& path, const Corpus& c) {
  if (!fs::exists(path)) throw MissingCheckpoint(path);
  LoadedCheckpoint ck = load_checkpoint(path);
  if (!(ck.state.exogenous == c.schema)) {
    throw ConfigError("checkpoint exogenous schema does not match the configured data", "exogenous");
  }
  if (ck.state.window != c.window) throw ConfigError("checkpoint window length does not match", "windows.window");
  return std::move(ck.state);
}

inline std::string metrics_filename(std::size_t index, const TaskSpec& t, const AblationFlags& f) {
  std::string setting = t.setting();
  for (char& ch : setting) {
    if (ch == '=' || ch == '.') ch = '_';
  }
  return std::to_string(index) + "_" + to_string(t.family) + "_" + setting + "_" + f.name() + "_" +
         to_string(t.regime) + "_f" + std::to_string(static_cast<int>(std::lround(t.data_fraction * 100))) + ".json";
}

/// Runs every configured task against `base` and writes one metrics JSON each.
inline std::vector<json> run_tasks(const ExperimentConfig& cfg, const AblationFlags& flags, const Prepared& p,
                                   const EncoderState& base, const fs::path& metrics_dir, std::ostream& log) {
  if (cfg.tasks.empty()) throw ConfigError("no tasks configured", "tasks");
  fs::create_directories(metrics_dir);
  std::vector<json> out;
  const HierGraph* g = p.graph && !flags.no_hierarchy ? &*p.graph : nullptr;
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    const TaskSpec& t = cfg.tasks[i];
    const std::uint64_t seed = derive_seed(cfg.seed, "task" + std::to_string(i));
    EncoderState state = base;
    std::optional<Corpus> injected;
    std::optional<TheftInjection> theft;
    if (t.family == TaskFamily::anomaly) {
      Dataset ds = p.dataset;
      theft = inject_theft(ds, t.theft_fraction, t.theft_factor, derive_seed(seed, "theft"));
      injected = build_corpus(ds, cfg.corpus_options());
    }
    FinetuneData data{injected ? &*injected : &p.corpus, g, theft ? &*theft : nullptr};
    log << "task " << i << ": " << to_string(t.family) << " " << t.setting() << " level=" << to_string(t.level)
        << " regime=" << to_string(t.regime) << " fraction=" << io::format_double(t.data_fraction)
        << " variant=" << flags.name() << "\n";
    if (t.regime == Regime::frozen) log << "encoder frozen\n";
    const FinetuneResult r = finetune(t, state, data, flags, seed);
    log << "encoder checksum pre=" << hex64(r.checksum_before) << " post=" << hex64(r.checksum_after) << "\n";
    for (const auto& [k, v] : r.metrics) log << "  " << k << " = " << io::format_double(v) << "\n";
    if (!r.baseline.empty()) log << "  persistence MSE = " << io::format_double(r.baseline.at("MSE")) << "\n";
    json j = metrics_json(t, flags, seed, r);
    io::write_text(metrics_dir / metrics_filename(i, t, flags), j.dump(2) + "\n");
    out.push_back(std::move(j));
  }
  return out;
}

inline std::vector<json> cmd_finetune(const ExperimentConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  if (!fs::exists(checkpoint)) throw MissingCheckpoint(checkpoint);
  const Prepared p = prepare(cfg, wants_graph(cfg, cfg.ablation), log);
  const EncoderState base = load_encoder(checkpoint, p.corpus);
  return run_tasks(cfg, cfg.ablation, p, base, fs::path(cfg.output_dir) / "metrics", log);
}

/// Full model from `checkpoint`; each single-component ablation is
/// pretrained again from the same initialization and seeds.
inline std::vector<json> cmd_ablate(const ExperimentConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  if (!fs::exists(checkpoint)) throw MissingCheckpoint(checkpoint);
  const Prepared p = prepare(cfg, cfg.model.rgcn_layers > 0, log);
  std::vector<json> all;
  for (const AblationFlags& v : AblationFlags::variants()) {
    const fs::path vdir = fs::path(cfg.output_dir) / "ablation" / v.name();
    EncoderState state = v.any() ? load_checkpoint(run_pretraining(cfg, v, p, vdir, log).checkpoint).state
                                 : load_encoder(checkpoint, p.corpus);
    auto js = run_tasks(cfg, v, p, state, vdir / "metrics", log);
    all.insert(all.end(), js.begin(), js.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// report

inline const std::vector<std::string>& report_metric_columns() {
  static const std::vector<std::string> cols{"MSE", "MAE", "precision", "recall", "F0.5", "F1", "accuracy"};
  return cols;
}

inline std::vector<fs::path> collect_files(const std::vector<fs::path>& inputs, const std::string& ext,
                                           const std::string& name = {}) {
  std::set<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      for (const auto& e : fs::recursive_directory_iterator(in)) {
        if (!e.is_regular_file()) continue;
        if (!name.empty() ? e.path().filename() == name : e.path().extension() == ext) files.insert(e.path());
      }
    } else if (fs::exists(in)) {
      files.insert(in);
    } else {
      throw Error("report input not found: " + in.string());
    }
  }
  return {files.begin(), files.end()};
}

/// Aggregate CSV (one row per metrics file) plus SVG plots of loss curves,
/// metric vs. horizon, ablation variants and few-shot fractions.
inline fs::path cmd_report(const ExperimentConfig& cfg, std::vector<fs::path> inputs, std::ostream& log) {
  if (inputs.empty()) inputs.push_back(fs::path(cfg.output_dir));
  std::vector<fs::path> files;
  for (const auto& f : collect_files(inputs, ".json")) {
    if (f.filename() != "config.json" && f.filename() != "split.json") files.push_back(f);
  }
  std::vector<json> runs;
  for (const auto& f : files) {
    json j = json::parse(io::read_text(f), nullptr, false);
    if (j.is_discarded() || !j.contains("metrics") || !j.contains("task")) {
      throw SchemaError("not a metrics file: " + f.string());
    }
    runs.push_back(std::move(j));
  }
  const fs::path out = fs::path(cfg.output_dir) / "report";
  fs::create_directories(out);

  std::ostringstream csv;
  csv << "task,setting,level,regime,variant,fraction,seed";
  for (const auto& m : report_metric_columns()) csv << ',' << m;
  csv << ",persistence_MSE\n";
  for (const auto& r : runs) {
    csv << r.value("task", "") << ',' << r.value("setting", "") << ',' << r.value("level", "") << ','
        << r.value("regime", "") << ',' << r.value("variant", "") << ','
        << io::format_double(r.value("fraction", 1.0)) << ',' << r.value("seed", std::uint64_t{0});
    for (const auto& m : report_metric_columns()) {
      csv << ',';
      if (r["metrics"].contains(m)) csv << io::format_double(r["metrics"][m].get<double>());
    }
    csv << ',';
    if (r.contains("baseline_persistence")) csv << io::format_double(r["baseline_persistence"]["MSE"].get<double>());
    csv << '\n';
  }
  io::write_text(out / "report.csv", csv.str());

  // Loss curves from every trace found next to the inputs.
  std::vector<fs::path> trace_roots = inputs;
  trace_roots.push_back(cfg.output_dir);
  std::vector<fs::path> roots;
  for (const auto& r : trace_roots) {
    if (fs::is_directory(r)) roots.push_back(r);
  }
  std::vector<svg::Series> loss;
  std::set<fs::path> seen;
  for (const auto& t : collect_files(roots, ".csv", "loss_trace.csv")) {
    const auto canon = fs::weakly_canonical(t);
    if (!seen.insert(canon).second) continue;
    const io::CsvTable table = io::read_csv(t);
    const int c_step = table.require_column("step", t.string());
    const int c_total = table.require_column("total", t.string());
    svg::Series s;
    s.name = t.parent_path().filename().string();
    for (const auto& row : table.rows) {
      double x = 0, y = 0;
      if (io::parse_double(row[c_step], x) && io::parse_double(row[c_total], y)) {
        s.x.push_back(x);
        s.y.push_back(y);
      }
    }
    loss.push_back(std::move(s));
  }
  io::write_text(out / "loss_curves.svg", svg::line_chart("Pre-training loss", "update", "total loss", loss));

  std::map<std::string, svg::Series> by_variant;
  for (const auto& r : runs) {
    if (r["task"] != "forecast" || !r["metrics"].contains("MSE") || !r.contains("horizon")) continue;
    auto& s = by_variant[r.value("variant", "full")];
    s.name = r.value("variant", "full");
    s.x.push_back(r["horizon"].get<double>());
    s.y.push_back(r["metrics"]["MSE"].get<double>());
  }
  std::vector<svg::Series> horizon;
  for (auto& [_, s] : by_variant) horizon.push_back(std::move(s));
  io::write_text(out / "metric_vs_horizon.svg", svg::line_chart("Forecast MSE vs horizon", "horizon", "MSE", horizon));

  // First metric of each variant on the first task/setting that has variants.
  std::vector<std::string> labels;
  std::vector<double> values;
  std::string ablation_title = "Ablation";
  if (!runs.empty()) {
    const std::string task = runs.front()["task"], setting = runs.front()["setting"];
    for (const auto& r : runs) {
      if (r["task"] != task || r["setting"] != setting || r["metrics"].empty()) continue;
      labels.push_back(r.value("variant", "full"));
      values.push_back(r["metrics"].begin().value().get<double>());
    }
    ablation_title = "Ablation: " + task + " " + setting + " (" + runs.front()["metrics"].begin().key() + ")";
  }
  io::write_text(out / "ablation.svg", svg::bar_chart(ablation_title, "metric", labels, values));

  std::map<std::string, svg::Series> by_task;
  for (const auto& r : runs) {
    if (r["metrics"].empty()) continue;
    const std::string key = r.value("task", "") + " " + r.value("setting", "") + " " + r.value("variant", "");
    auto& s = by_task[key];
    s.name = key;
    s.x.push_back(r.value("fraction", 1.0));
    s.y.push_back(r["metrics"].begin().value().get<double>());
  }
  std::vector<svg::Series> fewshot;
  for (auto& [_, s] : by_task) {
    if (s.x.size() < 2) continue;
    std::vector<std::size_t> idx(s.x.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
    svg::Series sorted{s.name, {}, {}};
    for (std::size_t i : idx) sorted.x.push_back(s.x[i]), sorted.y.push_back(s.y[i]);
    fewshot.push_back(std::move(sorted));
  }
  io::write_text(out / "fewshot.svg", svg::line_chart("Few-shot", "train fraction", "metric", fewshot));
  log << "report: " << runs.size() << " runs -> " << (out / "report.csv").string() << "\n";
  return out / "report.csv";
}

// ---------------------------------------------------------------------------
// Entry point

inline void print_error(std::ostream& err, const std::string& kind, const std::string& message,
                        const std::string& key = {}) {
  json j{{"error", kind}, {"message", message}};
  if (!key.empty()) j["key"] = key;
  err << j.dump() << "\n";
}

/// Exit codes: 0 success, 1 runtime failure, 2 configuration or schema
/// error, 3 missing checkpoint. Errors are printed to `err` as one JSON line.
inline int run(int argc, const char* const* argv, std::ostream& log = std::clog, std::ostream& err = std::cerr) {
  CLI::App app{"Hierarchical electricity time-series pretraining", "powerpm"};
  app.require_subcommand(1);
  std::string config_path, checkpoint;
  std::vector<std::string> overrides, inputs;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--set", overrides, "override a config key: key=value (repeatable)")->take_all();
  };
  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic hierarchical dataset");
  CLI::App* ingest = app.add_subcommand("ingest", "align, normalize and split a dataset");
  CLI::App* pre = app.add_subcommand("pretrain", "pretrain the encoder");
  CLI::App* ft = app.add_subcommand("finetune", "fine-tune and evaluate the configured tasks");
  CLI::App* abl = app.add_subcommand("ablate", "evaluate the -H/-M/-C/-E variants");
  CLI::App* rep = app.add_subcommand("report", "aggregate metrics files into a CSV and plots");
  for (CLI::App* s : {synth, ingest, pre, ft, abl, rep}) add_common(s);
  for (CLI::App* s : {ft, abl}) s->add_option("--checkpoint", checkpoint, "pretrained checkpoint");
  rep->add_option("inputs", inputs, "metrics files or directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    log << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return 2;
  }

  try {
    const ExperimentConfig cfg = load_config(config_path, overrides);
    auto ckpt = [&]() { return checkpoint.empty() ? fs::path(cfg.output_dir) / "checkpoint.bin" : fs::path(checkpoint); };
    if (synth->parsed()) {
      cmd_synth(cfg, log);
    } else if (ingest->parsed()) {
      cmd_ingest(cfg, log);
    } else if (pre->parsed()) {
      cmd_pretrain(cfg, log);
    } else if (ft->parsed()) {
      cmd_finetune(cfg, ckpt(), log);
    } else if (abl->parsed()) {
      cmd_ablate(cfg, ckpt(), log);
    } else if (rep->parsed()) {
      std::vector<fs::path> paths(inputs.begin(), inputs.end());
      cmd_report(cfg, paths, log);
    }
  } catch (const ConfigError& e) {
    print_error(err, "config", e.what(), e.key_path());
    return 2;
  } catch (const SchemaError& e) {
    print_error(err, "schema", e.what());
    return 2;
  } catch (const MissingCheckpoint& e) {
    print_error(err, "missing_checkpoint", e.what());
    return 3;
  } catch (const std::exception& e) {
    print_error(err, "runtime", e.what());
    return 1;
  }
  return 0;
}

}  // namespace powerpm::cli
