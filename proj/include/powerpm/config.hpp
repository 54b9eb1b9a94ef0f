// Experiment configuration: one JSON document per experiment, validated
// against a fixed key tree, with dotted-path overrides from the command line.
#pragma once

#include "powerpm/data.hpp"
#include "powerpm/downstream.hpp"
#include "powerpm/encoder.hpp"
#include "powerpm/errors.hpp"
#include "powerpm/pretrain.hpp"

#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace powerpm {

using nlohmann::json;

struct DataConfig {
  /// "synth", "iso" or "dataset" (a directory written by synth/ingest).
  std::string source = "synth";
  std::string path;
  std::string iso_schema = "NYISO";
  /// Exogenous sidecar CSV for ISO sources (optional).
  std::string exogenous_path;
  /// Where synth/ingest write their dataset.
  std::string output;
  SynthConfig synth;
};

struct WindowConfig {
  int window = 672;
  int stride = 96;
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  double max_filled_fraction = 0.1;
};

struct ExogenousConfig {
  bool enabled = true;
  std::vector<std::string> vocabulary{"sunny", "cloudy", "rainy", "snowy"};
  int temp_lo = -20;
  int temp_hi = 45;
};

struct GraphConfig {
  int n_clusters = 12;
  int restarts = 10;
  int max_iterations = 100;
  std::optional<int> band;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  WindowConfig windows;
  ExogenousConfig exogenous;
  GraphConfig graph;
  ModelConfig model = ModelConfig::for_scale("tiny");
  PatchConfig patch;
  PretrainConfig pretrain;
  std::vector<TaskSpec> tasks;
  AblationFlags ablation;
  std::string output_dir = "runs/default";

  CorpusOptions corpus_options() const {
    CorpusOptions o;
    o.window = windows.window;
    o.stride = windows.stride;
    o.ratios = windows.ratios;
    o.max_filled_fraction = windows.max_filled_fraction;
    o.use_exogenous_data = exogenous.enabled;
    o.codec.weather_vocabulary = exogenous.vocabulary;
    o.codec.temp_lo = exogenous.temp_lo;
    o.codec.temp_hi = exogenous.temp_hi;
    for (const auto& t : tasks) {
      if (t.family == TaskFamily::forecast) o.horizon = std::max(o.horizon, t.horizon);
    }
    return o;
  }

  KMeansOptions kmeans_options() const {
    KMeansOptions k;
    k.n_restarts = graph.restarts;
    k.max_iterations = graph.max_iterations;
    k.band = graph.band;
    k.seed = derive_seed(seed, "kmeans");
    return k;
  }
};

// ---------------------------------------------------------------------------
// Reading with unknown-key rejection

namespace detail {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
  }

  std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  bool has(const std::string& k) const { return j_.contains(k); }

  template <class T>
  void get(const std::string& k, T& out) {
    seen_.insert(k);
    if (!j_.contains(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("wrong type for '" + key(k) + "'", key(k));
    }
  }

  const json* child(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k) ? &j_.at(k) : nullptr;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown configuration key '" + key(it.key()) + "'", key(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_synth(const json& j, SynthConfig& s, const std::string& path) {
  Section r(j, path);
  r.get("n_cities", s.n_cities);
  r.get("districts_per_city", s.districts_per_city);
  r.get("users_per_district", s.users_per_district);
  r.get("length", s.length);
  r.get("frequency_seconds", s.frequency_seconds);
  r.get("start_epoch", s.start_epoch);
  r.get("noise", s.noise);
  r.finish();
}

inline TaskSpec read_task(const json& j, const std::string& path) {
  Section r(j, path);
  TaskSpec t;
  std::string family = "forecast", regime = "full_ft", level;
  r.get("family", family);
  t.family = task_family_from_string(family);
  if (t.family == TaskFamily::anomaly || t.family == TaskFamily::classify) t.level = Level::user;
  if (t.family == TaskFamily::classify) t.n_classes = kSynthArchetypes;
  r.get("horizon", t.horizon);
  r.get("mask_ratio", t.mask_ratio);
  r.get("n_classes", t.n_classes);
  r.get("metrics", t.metrics);
  r.get("regime", regime);
  t.regime = regime_from_string(regime);
  r.get("data_fraction", t.data_fraction);
  r.get("level", level);
  if (!level.empty()) {
    try {
      t.level = level_from_string(level);
    } catch (const SchemaError&) {
      throw ConfigError("unknown level '" + level + "'", r.key("level"));
    }
  }
  r.get("steps", t.steps);
  r.get("lr", t.lr);
  r.get("batch", t.batch);
  r.get("accumulation", t.accumulation);
  r.get("eval_every", t.eval_every);
  r.get("theft_fraction", t.theft_fraction);
  r.get("theft_factor", t.theft_factor);
  r.finish();
  try {
    t.validate();
  } catch (const ConfigError& e) {
    const std::string k = e.key_path().substr(e.key_path().find('.') + 1);
    throw ConfigError(e.what(), path + "." + k);
  }
  return t;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& root) {
  using detail::Section;
  ExperimentConfig c;
  Section r(root, "");
  r.get("seed", c.seed);
  r.get("output_dir", c.output_dir);

  if (const json* j = r.child("data")) {
    Section s(*j, "data");
    s.get("source", c.data.source);
    s.get("path", c.data.path);
    s.get("iso_schema", c.data.iso_schema);
    s.get("exogenous_path", c.data.exogenous_path);
    s.get("output", c.data.output);
    if (const json* sj = s.child("synth")) detail::read_synth(*sj, c.data.synth, "data.synth");
    s.finish();
    if (c.data.source != "synth" && c.data.source != "iso" && c.data.source != "dataset") {
      throw ConfigError("data.source must be synth, iso or dataset", "data.source");
    }
    if (c.data.source == "iso") {
      try {
        iso_schema_from_string(c.data.iso_schema);
      } catch (const Error&) {
        throw ConfigError("unknown ISO schema '" + c.data.iso_schema + "'", "data.iso_schema");
      }
    }
  }
  if (const json* j = r.child("windows")) {
    Section s(*j, "windows");
    s.get("window", c.windows.window);
    s.get("stride", c.windows.stride);
    s.get("ratios", c.windows.ratios);
    s.get("max_filled_fraction", c.windows.max_filled_fraction);
    s.finish();
  }
  if (c.windows.window < 1) throw ConfigError("window must be >= 1", "windows.window");
  if (c.windows.stride < 1) throw ConfigError("stride must be >= 1", "windows.stride");
  if (std::abs(c.windows.ratios[0] + c.windows.ratios[1] + c.windows.ratios[2] - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1", "windows.ratios");
  }
  if (const json* j = r.child("exogenous")) {
    Section s(*j, "exogenous");
    s.get("enabled", c.exogenous.enabled);
    s.get("vocabulary", c.exogenous.vocabulary);
    s.get("temp_lo", c.exogenous.temp_lo);
    s.get("temp_hi", c.exogenous.temp_hi);
    s.finish();
  }
  if (c.exogenous.vocabulary.empty()) throw ConfigError("weather vocabulary is empty", "exogenous.vocabulary");
  if (c.exogenous.temp_hi < c.exogenous.temp_lo) throw ConfigError("temp_hi < temp_lo", "exogenous.temp_hi");
  if (const json* j = r.child("graph")) {
    Section s(*j, "graph");
    s.get("n_clusters", c.graph.n_clusters);
    s.get("restarts", c.graph.restarts);
    s.get("max_iterations", c.graph.max_iterations);
    if (const json* b = s.child("band"); b && !b->is_null()) {
      if (!b->is_number_integer()) throw ConfigError("wrong type for 'graph.band'", "graph.band");
      c.graph.band = b->get<int>();
    }
    s.finish();
  }
  if (c.graph.n_clusters < 1) throw ConfigError("n_clusters must be >= 1", "graph.n_clusters");
  if (c.graph.restarts < 1) throw ConfigError("restarts must be >= 1", "graph.restarts");
  if (const json* j = r.child("model")) {
    Section s(*j, "model");
    std::string scale = c.model.scale;
    s.get("scale", scale);
    if (scale != "custom") {
      c.model = ModelConfig::for_scale(scale);
    } else {
      c.model.scale = "custom";
    }
    const ModelConfig table = c.model;
    s.get("d_model", c.model.d_model);
    s.get("n_layers", c.model.n_layers);
    s.get("d_ffn", c.model.d_ffn);
    s.get("n_heads", c.model.n_heads);
    s.get("rgcn_layers", c.model.rgcn_layers);
    s.get("rgcn_activation", c.model.rgcn_activation);
    s.get("rgcn_residual", c.model.rgcn_residual);
    s.finish();
    if (scale != "custom" && (c.model.d_model != table.d_model || c.model.n_layers != table.n_layers ||
                              c.model.d_ffn != table.d_ffn || c.model.n_heads != table.n_heads)) {
      throw ConfigError("model dimensions of scale '" + scale + "' are fixed; use scale \"custom\"", "model.scale");
    }
  }
  c.model.validate();
  if (const json* j = r.child("patch")) {
    Section s(*j, "patch");
    s.get("patch_len", c.patch.patch_len);
    s.get("stride", c.patch.stride);
    s.finish();
  }
  try {
    c.patch.validate(c.windows.window);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what(), "patch");
  }
  if (const json* j = r.child("mask")) {
    Section s(*j, "mask");
    s.get("ratio", c.pretrain.mask_ratio);
    s.finish();
  }
  if (!(c.pretrain.mask_ratio > 0 && c.pretrain.mask_ratio < 1)) throw ConfigError("mask ratio must be in (0, 1)", "mask.ratio");
  if (const json* j = r.child("contrastive")) {
    Section s(*j, "contrastive");
    s.get("delta", c.pretrain.contrastive.delta);
    s.get("tau", c.pretrain.contrastive.tau);
    s.get("batch", c.pretrain.contrastive.batch);
    s.get("temporal_negatives", c.pretrain.sampler.temporal_negatives);
    s.get("start_times", c.pretrain.sampler.start_times);
    s.finish();
  }
  if (const json* j = r.child("pretrain")) {
    Section s(*j, "pretrain");
    auto& p = c.pretrain;
    s.get("lambda", p.lambda);
    s.get("steps", p.steps);
    s.get("accumulation", p.accumulation);
    s.get("lr", p.lr);
    s.get("plateau_factor", p.plateau_factor);
    s.get("plateau_patience", p.plateau_patience);
    s.get("plateau_interval", p.plateau_interval);
    s.get("min_lr", p.min_lr);
    s.get("mse_batch", p.mse_batch);
    s.get("checkpoint_every", p.checkpoint_every);
    s.get("stop_grad_background", p.flags.stop_grad_background);
    s.finish();
  }
  c.pretrain.validate();
  if (const json* j = r.child("tasks")) {
    if (!j->is_array()) throw ConfigError("tasks must be a list", "tasks");
    for (std::size_t i = 0; i < j->size(); ++i) c.tasks.push_back(detail::read_task((*j)[i], "tasks." + std::to_string(i)));
  }
  if (const json* j = r.child("ablation")) {
    Section s(*j, "ablation");
    s.get("no_hierarchy", c.ablation.no_hierarchy);
    s.get("random_mask_only", c.ablation.random_mask_only);
    s.get("no_contrastive", c.ablation.no_contrastive);
    s.get("no_exogenous", c.ablation.no_exogenous);
    s.finish();
  }
  r.finish();
  c.pretrain.seed = derive_seed(c.seed, "pretrain");
  return c;
}

inline json to_json(const TaskSpec& t) {
  return {{"family", to_string(t.family)}, {"horizon", t.horizon},     {"mask_ratio", t.mask_ratio},
          {"n_classes", t.n_classes},      {"metrics", t.metrics},     {"regime", to_string(t.regime)},
          {"data_fraction", t.data_fraction}, {"level", to_string(t.level)}, {"steps", t.steps},
          {"lr", t.lr},                    {"batch", t.batch}, {"accumulation", t.accumulation},         {"eval_every", t.eval_every}, {"theft_fraction", t.theft_fraction},
          {"theft_factor", t.theft_factor}};
}

/// Full configuration tree with every default made explicit.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  const auto& s = c.data.synth;
  j["data"] = {{"source", c.data.source},
               {"path", c.data.path},
               {"iso_schema", c.data.iso_schema},
               {"exogenous_path", c.data.exogenous_path},
               {"output", c.data.output},
               {"synth",
                {{"n_cities", s.n_cities},
                 {"districts_per_city", s.districts_per_city},
                 {"users_per_district", s.users_per_district},
                 {"length", s.length},
                 {"frequency_seconds", s.frequency_seconds},
                 {"start_epoch", s.start_epoch},
                 {"noise", s.noise}}}};
  j["windows"] = {{"window", c.windows.window},
                  {"stride", c.windows.stride},
                  {"ratios", c.windows.ratios},
                  {"max_filled_fraction", c.windows.max_filled_fraction}};
  j["exogenous"] = {{"enabled", c.exogenous.enabled},
                    {"vocabulary", c.exogenous.vocabulary},
                    {"temp_lo", c.exogenous.temp_lo},
                    {"temp_hi", c.exogenous.temp_hi}};
  j["graph"] = {{"n_clusters", c.graph.n_clusters},
                {"restarts", c.graph.restarts},
                {"max_iterations", c.graph.max_iterations},
                {"band", c.graph.band ? json(*c.graph.band) : json(nullptr)}};
  j["model"] = {{"scale", c.model.scale},           {"d_model", c.model.d_model},
                {"n_layers", c.model.n_layers},     {"d_ffn", c.model.d_ffn},
                {"n_heads", c.model.n_heads},       {"rgcn_layers", c.model.rgcn_layers},
                {"rgcn_activation", c.model.rgcn_activation}, {"rgcn_residual", c.model.rgcn_residual}};
  j["patch"] = {{"patch_len", c.patch.patch_len}, {"stride", c.patch.stride}};
  j["mask"] = {{"ratio", c.pretrain.mask_ratio}};
  j["contrastive"] = {{"delta", c.pretrain.contrastive.delta},
                      {"tau", c.pretrain.contrastive.tau},
                      {"batch", c.pretrain.contrastive.batch},
                      {"temporal_negatives", c.pretrain.sampler.temporal_negatives},
                      {"start_times", c.pretrain.sampler.start_times}};
  const auto& p = c.pretrain;
  j["pretrain"] = {{"lambda", p.lambda},
                   {"steps", p.steps},
                   {"accumulation", p.accumulation},
                   {"lr", p.lr},
                   {"plateau_factor", p.plateau_factor},
                   {"plateau_patience", p.plateau_patience},
                   {"plateau_interval", p.plateau_interval},
                   {"min_lr", p.min_lr},
                   {"mse_batch", p.mse_batch},
                   {"checkpoint_every", p.checkpoint_every},
                   {"stop_grad_background", p.flags.stop_grad_background}};
  j["tasks"] = json::array();
  for (const auto& t : c.tasks) j["tasks"].push_back(to_json(t));
  j["ablation"] = c.ablation.to_json();
  return j;
}

inline bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return to_json(a) == to_json(b); }

// ---------------------------------------------------------------------------
// Overrides

/// Parses "a.b.c=value"; the value is JSON when it parses as JSON and a plain
/// string otherwise. Array elements are addressed by index ("tasks.0.horizon").
inline void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override must look like key=value: '" + assignment + "'", assignment);
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* cur = &root;
  std::size_t pos = 0;
  while (true) {
    const auto dot = path.find('.', pos);
    const std::string part = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw ConfigError("empty key segment in '" + path + "'", path);
    json* next = nullptr;
    if (cur->is_array()) {
      long long idx = 0;
      if (!io::parse_int(part, idx) || idx < 0) throw ConfigError("expected a list index in '" + path + "'", path);
      while (cur->size() <= static_cast<std::size_t>(idx)) cur->push_back(json::object());
      next = &(*cur)[static_cast<std::size_t>(idx)];
    } else {
      if (cur->is_null()) *cur = json::object();
      if (!cur->is_object()) throw ConfigError("cannot descend into '" + part + "' of '" + path + "'", path);
      next = &(*cur)[part];
    }
    if (dot == std::string::npos) {
      *next = value;
      return;
    }
    cur = next;
    pos = dot + 1;
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  json root = json::object();
  if (!path.empty()) {
    const std::string text = io::read_text(path);
    root = json::parse(text, nullptr, false);
    if (root.is_discarded()) throw ConfigError("config is not valid JSON: " + path.string(), "<root>");
  }
  for (const auto& o : overrides) apply_override(root, o);
  return parse_config(root);
}

/// Dataset cache directory: $POWERPM_CACHE, else ".powerpm_cache".
inline std::filesystem::path cache_dir() {
  const char* env = std::getenv("POWERPM_CACHE");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path(".powerpm_cache");
}

}  // namespace powerpm
