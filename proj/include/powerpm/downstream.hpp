// Task heads, fine-tuning regimes, metrics, ablation flags and the
// few-shot protocol.
#pragma once

#include "powerpm/autograd.hpp"
#include "powerpm/corpus.hpp"
#include "powerpm/encoder.hpp"
#include "powerpm/errors.hpp"
#include "powerpm/optim.hpp"
#include "powerpm/pretrain.hpp"
#include "powerpm/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

namespace powerpm {

// ---------------------------------------------------------------------------
// Task description

enum class TaskFamily { forecast, impute, anomaly, classify };
enum class Regime { full_ft, frozen };

inline const char* to_string(TaskFamily f) {
  switch (f) {
    case TaskFamily::forecast: return "forecast";
    case TaskFamily::impute: return "impute";
    case TaskFamily::anomaly: return "anomaly";
    case TaskFamily::classify: return "classify";
  }
  return "?";
}

inline TaskFamily task_family_from_string(const std::string& s) {
  if (s == "forecast") return TaskFamily::forecast;
  if (s == "impute") return TaskFamily::impute;
  if (s == "anomaly") return TaskFamily::anomaly;
  if (s == "classify") return TaskFamily::classify;
  throw ConfigError("unknown task family '" + s + "'", "tasks.family");
}

inline const char* to_string(Regime r) { return r == Regime::frozen ? "frozen" : "full_ft"; }

inline Regime regime_from_string(const std::string& s) {
  if (s == "full_ft" || s == "full") return Regime::full_ft;
  if (s == "frozen") return Regime::frozen;
  throw ConfigError("unknown fine-tune regime '" + s + "'", "tasks.regime");
}

struct TaskSpec {
  TaskFamily family = TaskFamily::forecast;
  int horizon = 4;
  double mask_ratio = 0.25;
  int n_classes = 2;
  std::vector<std::string> metrics;
  Regime regime = Regime::full_ft;
  double data_fraction = 1.0;
  /// Hierarchy level whose nodes are predicted and scored.
  Level level = Level::district;
  int steps = 200;
  double lr = 1e-3;
  /// Loss-set nodes per step (0 = every node of the level).
  int batch = 0;
  /// Window start times whose gradients are summed per update.
  int accumulation = 1;
  /// Steps between validation checks; the best-scoring parameters are kept
  /// (0 = keep the final parameters).
  int eval_every = 0;
  /// Anomaly injection: share of users with theft and the kept share of load.
  double theft_fraction = 0.25;
  double theft_factor = 0.4;

  /// Metric names reported for the family when `metrics` is empty.
  std::vector<std::string> default_metrics() const {
    switch (family) {
      case TaskFamily::forecast:
      case TaskFamily::impute: return {"MSE", "MAE"};
      case TaskFamily::anomaly: return {"precision", "recall", "F0.5", "F1", "accuracy"};
      case TaskFamily::classify: return {"accuracy", "precision", "recall", "F1"};
    }
    return {};
  }

  std::string setting() const {
    switch (family) {
      case TaskFamily::forecast: return "H=" + std::to_string(horizon);
      case TaskFamily::impute: return "ratio=" + io::format_double(mask_ratio);
      default: return "classes=" + std::to_string(n_classes);
    }
  }

  void validate() const {
    static const std::vector<std::string> known{"MSE", "MAE", "precision", "recall", "F0.5", "F1", "accuracy"};
    for (const auto& m : metrics) {
      if (std::find(known.begin(), known.end(), m) == known.end()) {
        throw ConfigError("unknown metric '" + m + "'", "tasks.metrics");
      }
    }
    if (!(data_fraction > 0.0 && data_fraction <= 1.0)) {
      throw ConfigError("data_fraction must be in (0, 1]", "tasks.data_fraction");
    }
    if (steps < 0) throw ConfigError("steps must be >= 0", "tasks.steps");
    if (accumulation < 1) throw ConfigError("accumulation must be >= 1", "tasks.accumulation");
    if (!(lr > 0)) throw ConfigError("lr must be > 0", "tasks.lr");
    switch (family) {
      case TaskFamily::forecast:
        if (horizon < 1) throw ConfigError("forecast horizon must be >= 1", "tasks.horizon");
        break;
      case TaskFamily::impute:
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask_ratio must be in (0, 1)", "tasks.mask_ratio");
        break;
      case TaskFamily::anomaly:
        if (n_classes != 2) throw ConfigError("anomaly detection is binary", "tasks.n_classes");
        if (!(theft_fraction > 0 && theft_fraction < 1)) throw ConfigError("theft_fraction must be in (0, 1)", "tasks.theft_fraction");
        if (!(theft_factor >= 0 && theft_factor < 1)) throw ConfigError("theft_factor must be in [0, 1)", "tasks.theft_factor");
        break;
      case TaskFamily::classify:
        if (n_classes < 2) throw ConfigError("n_classes must be >= 2", "tasks.n_classes");
        break;
    }
  }
};

struct AblationFlags {
  bool no_hierarchy = false;      // -H
  bool random_mask_only = false;  // -M
  bool no_contrastive = false;    // -C
  bool no_exogenous = false;      // -E

  bool any() const { return no_hierarchy || random_mask_only || no_contrastive || no_exogenous; }

  std::string name() const {
    if (!any()) return "full";
    std::string s;
    if (no_hierarchy) s += "-H";
    if (random_mask_only) s += "-M";
    if (no_contrastive) s += "-C";
    if (no_exogenous) s += "-E";
    return s;
  }

  nlohmann::json to_json() const {
    return {{"no_hierarchy", no_hierarchy},
            {"random_mask_only", random_mask_only},
            {"no_contrastive", no_contrastive},
            {"no_exogenous", no_exogenous}};
  }

  /// The single-component variants, in reporting order.
  static std::vector<AblationFlags> variants() {
    std::vector<AblationFlags> out(5);
    out[1].no_hierarchy = true;
    out[2].random_mask_only = true;
    out[3].no_contrastive = true;
    out[4].no_exogenous = true;
    return out;
  }
};

inline ForwardFlags forward_flags(const AblationFlags& a, bool stop_grad_background = false) {
  ForwardFlags f;
  f.use_hierarchy = !a.no_hierarchy;
  f.use_exogenous = !a.no_exogenous;
  f.stop_grad_background = stop_grad_background;
  return f;
}

/// Pretraining configuration for an ablation variant.
inline PretrainConfig apply_ablation(PretrainConfig cfg, const AblationFlags& a) {
  cfg.flags.use_hierarchy = cfg.flags.use_hierarchy && !a.no_hierarchy;
  cfg.flags.use_exogenous = cfg.flags.use_exogenous && !a.no_exogenous;
  if (a.random_mask_only) cfg.random_mask_only = true;
  if (a.no_contrastive) cfg.lambda = 0.0;
  return cfg;
}

// ---------------------------------------------------------------------------
// Metrics

using MetricMap = std::map<std::string, double>;

/// (1 + b^2) P R / (b^2 P + R), 0 when the denominator vanishes.
inline double f_beta(double precision, double recall, double beta) {
  const double b2 = beta * beta;
  const double den = b2 * precision + recall;
  return den > 0.0 ? (1.0 + b2) * precision * recall / den : 0.0;
}

inline MetricMap regression_metrics(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) throw std::invalid_argument("metric_suite: length mismatch");
  if (y.empty()) throw std::invalid_argument("metric_suite: empty input");
  double se = 0.0, ae = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = y[i] - yhat[i];
    se += d * d;
    ae += std::abs(d);
  }
  const auto n = static_cast<double>(y.size());
  return {{"MSE", se / n}, {"MAE", ae / n}};
}

/// Precision, recall and F-scores treat `positive` as the positive class;
/// accuracy covers every class.
inline MetricMap classification_metrics(const std::vector<int>& labels, const std::vector<int>& predictions,
                                        int positive = 1) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("metric_suite: length mismatch");
  if (labels.empty()) throw std::invalid_argument("metric_suite: empty input");
  double tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool l = labels[i] == positive, p = predictions[i] == positive;
    tp += l && p;
    fp += !l && p;
    fn += l && !p;
    correct += labels[i] == predictions[i];
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  return {{"precision", precision},
          {"recall", recall},
          {"F0.5", f_beta(precision, recall, 0.5)},
          {"F1", f_beta(precision, recall, 1.0)},
          {"accuracy", correct / static_cast<double>(labels.size())}};
}

/// Macro-averaged precision/recall/F1 over classes, plus accuracy.
inline MetricMap multiclass_metrics(const std::vector<int>& labels, const std::vector<int>& predictions,
                                    int n_classes) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("metric_suite: length mismatch");
  if (labels.empty()) throw std::invalid_argument("metric_suite: empty input");
  double p_sum = 0, r_sum = 0, f_sum = 0;
  for (int c = 0; c < n_classes; ++c) {
    const auto m = classification_metrics(labels, predictions, c);
    p_sum += m.at("precision");
    r_sum += m.at("recall");
    f_sum += m.at("F1");
  }
  double correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += labels[i] == predictions[i];
  const double k = n_classes;
  return {{"precision", p_sum / k},
          {"recall", r_sum / k},
          {"F1", f_sum / k},
          {"accuracy", correct / static_cast<double>(labels.size())}};
}

inline MetricMap metric_suite(const std::vector<double>& y, const std::vector<double>& yhat) {
  return regression_metrics(y, yhat);
}

inline MetricMap metric_suite(const std::vector<int>& labels, const std::vector<int>& predictions) {
  return classification_metrics(labels, predictions);
}

inline MetricMap select_metrics(const MetricMap& all, const std::vector<std::string>& names) {
  MetricMap out;
  for (const auto& n : names) {
    auto it = all.find(n);
    if (it != all.end()) out[n] = it->second;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Heads

/// Linear map from the flattened [N_p * d] representation to H points.
struct ForecastHead {
  Var weight;  // [N_p * d, H]
  Var bias;    // [1, H]

  static ForecastHead init(int num_patches, int d_model, int horizon, std::uint64_t seed) {
    Rng rng(seed);
    const Eigen::Index in = static_cast<Eigen::Index>(num_patches) * d_model;
    return {Var::parameter(detail::random_matrix(rng, in, horizon, 0.1 / std::sqrt(static_cast<double>(in)))),
            Var::parameter(Matrix::Zero(1, horizon))};
  }

  int horizon() const { return static_cast<int>(weight.cols()); }
  std::vector<Var> parameters() const { return {weight, bias}; }
};

inline Var head_forecast(const Var& z, const ForecastHead& head) {
  if (z.rows() * z.cols() != head.weight.rows()) {
    throw ConfigError("forecast head expects " + std::to_string(head.weight.rows()) + " inputs, got " +
                      std::to_string(z.rows() * z.cols()), "tasks.horizon");
  }
  return ag::add_row(ag::matmul(ag::flatten(z), head.weight), head.bias);
}

inline std::vector<Var> head_forecast(const std::vector<Var>& z, const ForecastHead& head, int horizon) {
  if (horizon != head.horizon()) {
    throw ConfigError("horizon " + std::to_string(horizon) + " does not match trained head (" +
                      std::to_string(head.horizon()) + ")", "tasks.horizon");
  }
  std::vector<Var> out;
  for (const auto& zi : z) out.push_back(head_forecast(zi, head));
  return out;
}

/// Linear map + softmax on mean-pooled z.
struct ClassifyHead {
  Var weight;  // [d, C]
  Var bias;    // [1, C]

  static ClassifyHead init(int d_model, int n_classes, std::uint64_t seed) {
    Rng rng(seed);
    return {Var::parameter(detail::random_matrix(rng, d_model, n_classes, 1.0 / std::sqrt(static_cast<double>(d_model)))),
            Var::parameter(Matrix::Zero(1, n_classes))};
  }

  int n_classes() const { return static_cast<int>(weight.cols()); }
  std::vector<Var> parameters() const { return {weight, bias}; }
};

inline Var classify_logits(const Var& z, const ClassifyHead& head) {
  return ag::add_row(ag::matmul(ag::mean_rows(z), head.weight), head.bias);
}

/// Class probabilities [1, C].
inline Var head_classify(const Var& z, const ClassifyHead& head) {
  return ag::softmax_rows(classify_logits(z, head), false);
}

/// One contiguous block of round(ratio * T_w) timestamps per window.
struct ImputeMask {
  int start = 0;
  int length = 0;

  bool contains(int t) const { return t >= start && t < start + length; }
};

inline ImputeMask make_impute_mask(int window, double ratio, Rng& rng) {
  const int m = static_cast<int>(std::lround(ratio * window));
  if (m <= 0) throw TaskError("imputation mask ratio " + io::format_double(ratio) + " scores no point");
  if (m >= window) throw TaskError("imputation mask covers the whole window");
  return {static_cast<int>(uniform_index(rng, static_cast<std::size_t>(window - m + 1))), m};
}

/// Hides the block in `x` (set to 0) and returns the patches lying entirely
/// inside it, which the encoder replaces with the mask token.
inline std::vector<int> apply_impute_mask(std::vector<double>& x, const ImputeMask& m, const PatchLayout& layout) {
  for (int t = m.start; t < m.start + m.length; ++t) x[static_cast<std::size_t>(t)] = 0.0;
  std::vector<int> covered;
  for (int j = 0; j < layout.count; ++j) {
    bool all = true;
    for (int s = 0; s < layout.patch_len && all; ++s) {
      if (layout.is_real(j, s) && !m.contains(layout.time_index(j, s))) all = false;
    }
    if (all) covered.push_back(j);
  }
  return covered;
}

/// Reconstruction of an imputation-masked window, reusing the pretraining
/// head; only the masked points are scored.
inline Var head_impute(const Var& z, const EncoderState& state) {
  Var pred = ag::add_row(ag::matmul(z, state.recon_weight), state.recon_bias);
  return stitch_patches(pred, PatchLayout(state.window, state.patching));
}

// ---------------------------------------------------------------------------
// Anomaly injection

struct TheftInjection {
  /// Onset timestamp per affected user.
  std::map<std::string, std::int64_t> onset;
  double factor = 0.4;

  bool stolen(const std::string& id, std::int64_t t) const {
    auto it = onset.find(id);
    return it != onset.end() && t >= it->second;
  }
};

/// Scales the readings of a seeded random subset of users by `factor` from a
/// random onset onward (meter tampering). Aggregates keep the true load, so a
/// district no longer equals the sum of its reported users.
inline TheftInjection inject_theft(Dataset& ds, double fraction, double factor, std::uint64_t seed) {
  Rng rng(seed);
  TheftInjection inj;
  inj.factor = factor;
  std::vector<InstanceSeries*> users;
  for (auto& s : ds.instances) {
    if (s.level == Level::user) users.push_back(&s);
  }
  if (users.empty()) throw TaskError("anomaly task needs user-level instances");
  const auto n = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(fraction * static_cast<double>(users.size()))));
  for (std::size_t i = 0; i < users.size(); ++i) {
    const std::size_t j = i + uniform_index(rng, users.size() - i);
    std::swap(users[i], users[j]);
  }
  for (std::size_t i = 0; i < std::min(n, users.size()); ++i) {
    InstanceSeries& s = *users[i];
    const double u = 0.3 + 0.6 * uniform01(rng);
    const auto k = static_cast<std::size_t>(u * static_cast<double>(s.size()));
    inj.onset[s.instance_id] = s.timestamps[k];
    for (std::size_t t = k; t < s.size(); ++t) s.values[t] *= factor;
  }
  return inj;
}

// ---------------------------------------------------------------------------
// Fine-tuning

/// Chronologically earliest `fraction` of the train offsets.
inline std::vector<std::size_t> few_shot_offsets(const std::vector<std::size_t>& train, double fraction) {
  std::vector<std::size_t> sorted = train;
  std::sort(sorted.begin(), sorted.end());
  const auto n = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(sorted.size()) + 1e-9));
  if (n < 1) {
    throw TaskError("data fraction " + io::format_double(fraction) + " of " + std::to_string(sorted.size()) +
                    " train windows yields no batch");
  }
  sorted.resize(n);
  return sorted;
}

struct FinetuneResult {
  MetricMap metrics;
  /// Anomaly task: metrics over per-instance mean probabilities.
  MetricMap instance_metrics;
  /// Forecasting: last-value persistence on the same test targets.
  MetricMap baseline;
  std::vector<double> train_loss;
  /// (step, loss) at every validation check.
  std::vector<std::pair<int, double>> val_loss;
  std::uint64_t checksum_before = 0;
  std::uint64_t checksum_after = 0;
  std::size_t train_windows = 0;
  std::size_t test_windows = 0;
  std::optional<ForecastHead> forecast_head;
  std::optional<ClassifyHead> classify_head;
};

struct FinetuneData {
  const Corpus* corpus = nullptr;
  const HierGraph* graph = nullptr;
  /// Anomaly labels; required for the anomaly family.
  const TheftInjection* theft = nullptr;
};

namespace detail {

struct TaskBatch {
  WindowBatch batch;
  /// Batch positions of the scored windows and their instance indices.
  std::vector<std::size_t> pos;
  std::vector<int> inst;
  /// Imputation masks for scored windows (parallel to pos).
  std::vector<ImputeMask> impute;
};

inline TaskBatch make_task_batch(const Corpus& c, bool hier, std::size_t offset, const std::vector<int>& targets,
                                 const TaskSpec& task, const EncoderState& state, Rng* rng) {
  TaskBatch tb;
  tb.batch = hier ? c.snapshot(offset, targets) : c.batch(targets, offset);
  for (std::size_t k = 0; k < targets.size(); ++k) {
    tb.pos.push_back(hier ? static_cast<std::size_t>(targets[k]) : k);
    tb.inst.push_back(targets[k]);
  }
  if (task.family == TaskFamily::impute) {
    const PatchLayout layout(state.window, state.patching);
    for (std::size_t p : tb.pos) {
      const ImputeMask m = make_impute_mask(state.window, task.mask_ratio, *rng);
      MaskSpec spec;
      spec.ratio = task.mask_ratio;
      spec.masked_indices = apply_impute_mask(tb.batch.x[p], m, layout);
      tb.batch.masks[p] = spec;
      tb.impute.push_back(m);
    }
  }
  return tb;
}

inline int window_label(const FinetuneData& d, const TaskSpec& task, int inst, std::size_t offset) {
  const Corpus& c = *d.corpus;
  const auto& id = c.instances[static_cast<std::size_t>(inst)].instance_id;
  if (task.family == TaskFamily::classify) {
    auto it = c.user_labels.find(id);
    if (it == c.user_labels.end()) throw TaskError("no class label for '" + id + "'");
    if (it->second < 0 || it->second >= task.n_classes) throw TaskError("label of '" + id + "' out of range");
    return it->second;
  }
  if (!d.theft) throw TaskError("anomaly task needs injected labels");
  std::size_t stolen = 0;
  const auto w = static_cast<std::size_t>(c.window);
  for (std::size_t t = offset; t < offset + w; ++t) stolen += d.theft->stolen(id, c.timestamps[t]);
  return 2 * stolen >= w ? 1 : 0;
}

}  // namespace detail

/// Fits the task head (frozen) or head plus encoder (full_ft) on the train
/// split and reports the task metrics on the test split. `state` is updated
/// in place.
inline FinetuneResult finetune(const TaskSpec& task, EncoderState& state, const FinetuneData& data,
                               const AblationFlags& flags, std::uint64_t seed) {
  task.validate();
  if (!data.corpus) throw TaskError("finetune: no data");
  const Corpus& c = *data.corpus;
  if (task.family == TaskFamily::forecast && c.horizon < task.horizon) {
    throw TaskError("corpus reserves " + std::to_string(c.horizon) + " points after each window, horizon is " +
                    std::to_string(task.horizon));
  }
  const Level level = (task.family == TaskFamily::anomaly || task.family == TaskFamily::classify) &&
                              task.level != Level::user
                          ? Level::user
                          : task.level;
  const std::vector<int> members = c.level_members(level);
  if (members.empty()) throw TaskError(std::string("no instances at level ") + to_string(level));
  const std::vector<std::size_t> train = few_shot_offsets(c.train_offsets, task.data_fraction);
  if (c.test_offsets.empty()) throw TaskError("no test windows");

  ForwardFlags ff = forward_flags(flags, true);
  const bool hier = ff.use_hierarchy && data.graph != nullptr && !state.rgcn.empty();
  ff.use_hierarchy = hier;
  const HierGraph* graph = hier ? data.graph : nullptr;
  const bool frozen = task.regime == Regime::frozen;

  FinetuneResult res;
  res.checksum_before = state.encoder_checksum();
  res.train_windows = train.size();
  Rng rng(derive_seed(seed, "finetune"));

  std::vector<Var> params;
  if (task.family == TaskFamily::forecast) {
    res.forecast_head = ForecastHead::init(state.num_patches(), state.model.d_model, task.horizon, derive_seed(seed, "head"));
    params = res.forecast_head->parameters();
  } else if (task.family == TaskFamily::impute) {
    for (auto& [_, v] : state.head_parameters()) params.push_back(v);
  } else {
    res.classify_head = ClassifyHead::init(state.model.d_model, task.n_classes, derive_seed(seed, "head"));
    params = res.classify_head->parameters();
  }
  if (!frozen) {
    for (auto& [_, v] : state.encoder_parameters()) params.push_back(v);
  }
  Adam opt(params, {task.lr});
  const bool early_stop = task.eval_every > 0 && !c.val_offsets.empty();

  auto encode = [&](const detail::TaskBatch& tb, bool grad) {
    std::optional<ag::NoGradGuard> guard;
    if (frozen || !grad) guard.emplace();
    return forward(tb.batch, graph, state, ff);
  };

  // Per-target prediction loss; returns the scalar and appends outputs.
  auto task_loss = [&](const detail::TaskBatch& tb, const std::vector<Var>& z, std::size_t offset) {
    std::vector<Var> terms;
    for (std::size_t k = 0; k < tb.pos.size(); ++k) {
      const Var& zk = z[tb.pos[k]];
      const int inst = tb.inst[k];
      if (task.family == TaskFamily::forecast) {
        Var y = head_forecast(zk, *res.forecast_head);
        const auto truth = c.values(inst, offset + static_cast<std::size_t>(c.window), static_cast<std::size_t>(task.horizon));
        Matrix t = Eigen::Map<const Eigen::RowVectorXd>(truth.data(), task.horizon);
        terms.push_back(ag::mean_all(ag::square(ag::sub(y, Var::constant(t)))));
      } else if (task.family == TaskFamily::impute) {
        Var xhat = head_impute(zk, state);
        const auto truth = c.values(inst, offset, static_cast<std::size_t>(c.window));
        const ImputeMask& m = tb.impute[k];
        Matrix t(1, m.length);
        for (int i = 0; i < m.length; ++i) t(0, i) = truth[static_cast<std::size_t>(m.start + i)];
        terms.push_back(ag::mean_all(ag::square(ag::sub(ag::cols(xhat, m.start, m.length), Var::constant(t)))));
      } else {
        const int label = detail::window_label(data, task, inst, offset);
        Var logp = ag::log_softmax_rows(classify_logits(zk, *res.classify_head));
        terms.push_back(ag::scale(ag::pick(logp, 0, label), -1.0));
      }
    }
    return ag::scale(ag::sum_of(terms), 1.0 / static_cast<double>(terms.size()));
  };

  // Mean task loss over the validation split, with fixed imputation masks.
  auto validation_loss = [&]() {
    Rng vr(derive_seed(seed, "validate"));
    ag::NoGradGuard ng;
    double sum = 0.0;
    for (std::size_t off : c.val_offsets) {
      const auto tb = detail::make_task_batch(c, hier, off, members, task, state, &vr);
      sum += task_loss(tb, forward(tb.batch, graph, state, ff), off).item();
    }
    return sum / static_cast<double>(c.val_offsets.size());
  };
  std::vector<Matrix> best;
  double best_loss = std::numeric_limits<double>::infinity();
  auto consider = [&](int step) {
    const double v = validation_loss();
    res.val_loss.emplace_back(step, v);
    if (v < best_loss) {
      best_loss = v;
      best.clear();
      for (const auto& p : params) best.push_back(p.value());
    }
  };
  if (early_stop) consider(0);

  for (int step = 0; step < task.steps; ++step) {
    opt.zero_grad();
    double step_loss = 0.0;
    for (int micro = 0; micro < task.accumulation; ++micro) {
      const std::size_t off = train[uniform_index(rng, train.size())];
      std::vector<int> targets = members;
      if (task.batch > 0 && static_cast<std::size_t>(task.batch) < members.size()) {
        targets = detail::sample_distinct(members, static_cast<std::size_t>(task.batch), rng);
      }
      const auto tb = detail::make_task_batch(c, hier, off, targets, task, state, &rng);
      const auto z = encode(tb, true);
      Var loss = task_loss(tb, z, off);
      if (!std::isfinite(loss.item())) throw NumericError("non-finite fine-tuning loss at step " + std::to_string(step));
      ag::backward(loss);
      step_loss += loss.item();
    }
    opt.step(static_cast<double>(task.accumulation));
    res.train_loss.push_back(step_loss / task.accumulation);
    if (early_stop && ((step + 1) % task.eval_every == 0 || step + 1 == task.steps)) consider(step + 1);
  }
  if (early_stop) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].mutable_value() = best[i];
  }

  // Evaluation on the test split.
  Rng eval_rng(derive_seed(seed, "evaluate"));
  std::vector<double> y, yhat, y_base;
  std::vector<int> labels, preds;
  std::map<int, std::pair<double, int>> inst_prob;  // sum, count
  std::map<int, int> inst_label;
  for (std::size_t off : c.test_offsets) {
    const auto tb = detail::make_task_batch(c, hier, off, members, task, state, &eval_rng);
    ag::NoGradGuard ng;
    const auto z = forward(tb.batch, graph, state, ff);
    for (std::size_t k = 0; k < tb.pos.size(); ++k) {
      const Var& zk = z[tb.pos[k]];
      const int inst = tb.inst[k];
      if (task.family == TaskFamily::forecast) {
        const Var p = head_forecast(zk, *res.forecast_head);
        const auto truth = c.values(inst, off + static_cast<std::size_t>(c.window), static_cast<std::size_t>(task.horizon));
        const double last = c.values(inst, off + static_cast<std::size_t>(c.window) - 1, 1)[0];
        for (int h = 0; h < task.horizon; ++h) {
          y.push_back(truth[static_cast<std::size_t>(h)]);
          yhat.push_back(p.value()(0, h));
          y_base.push_back(last);
        }
      } else if (task.family == TaskFamily::impute) {
        const Var xhat = head_impute(zk, state);
        const auto truth = c.values(inst, off, static_cast<std::size_t>(c.window));
        const ImputeMask& m = tb.impute[k];
        for (int t = m.start; t < m.start + m.length; ++t) {
          y.push_back(truth[static_cast<std::size_t>(t)]);
          yhat.push_back(xhat.value()(0, t));
        }
      } else {
        const Matrix prob = head_classify(zk, *res.classify_head).value();
        Eigen::Index arg = 0;
        prob.row(0).maxCoeff(&arg);
        const int label = detail::window_label(data, task, inst, off);
        labels.push_back(label);
        if (task.family == TaskFamily::anomaly) {
          preds.push_back(prob(0, 1) >= 0.5 ? 1 : 0);
          auto& acc = inst_prob[inst];
          acc.first += prob(0, 1);
          acc.second += 1;
          inst_label[inst] = std::max(inst_label[inst], label);
        } else {
          preds.push_back(static_cast<int>(arg));
        }
      }
    }
    res.test_windows += tb.pos.size();
  }

  MetricMap all;
  if (task.family == TaskFamily::forecast || task.family == TaskFamily::impute) {
    all = regression_metrics(y, yhat);
    if (task.family == TaskFamily::forecast) res.baseline = regression_metrics(y, y_base);
  } else if (task.family == TaskFamily::anomaly) {
    all = classification_metrics(labels, preds);
    std::vector<int> il, ip;
    for (const auto& [inst, acc] : inst_prob) {
      il.push_back(inst_label[inst]);
      ip.push_back(acc.first / acc.second >= 0.5 ? 1 : 0);
    }
    res.instance_metrics = classification_metrics(il, ip);
  } else {
    all = task.n_classes == 2 ? classification_metrics(labels, preds) : multiclass_metrics(labels, preds, task.n_classes);
  }
  res.metrics = select_metrics(all, task.metrics.empty() ? task.default_metrics() : task.metrics);
  res.checksum_after = state.encoder_checksum();
  return res;
}

inline nlohmann::json metrics_json(const TaskSpec& task, const AblationFlags& flags, std::uint64_t seed,
                                   const FinetuneResult& r) {
  nlohmann::json j;
  j["task"] = to_string(task.family);
  j["setting"] = task.setting();
  j["level"] = to_string(task.level);
  j["regime"] = to_string(task.regime);
  j["flags"] = flags.to_json();
  j["variant"] = flags.name();
  j["fraction"] = task.data_fraction;
  j["seed"] = seed;
  j["metrics"] = r.metrics;
  if (!r.baseline.empty()) j["baseline_persistence"] = r.baseline;
  if (!r.instance_metrics.empty()) j["instance_metrics"] = r.instance_metrics;
  if (task.family == TaskFamily::forecast) j["horizon"] = task.horizon;
  if (task.family == TaskFamily::impute) j["mask_ratio"] = task.mask_ratio;
  if (task.family == TaskFamily::anomaly || task.family == TaskFamily::classify) j["n_classes"] = task.n_classes;
  j["train_windows"] = r.train_windows;
  j["test_windows"] = r.test_windows;
  char hex[2][17];
  std::snprintf(hex[0], sizeof(hex[0]), "%016llx", static_cast<unsigned long long>(r.checksum_before));
  std::snprintf(hex[1], sizeof(hex[1]), "%016llx", static_cast<unsigned long long>(r.checksum_after));
  j["encoder_checksum"] = {{"before", hex[0]}, {"after", hex[1]}};
  return j;
}

}  // namespace powerpm
