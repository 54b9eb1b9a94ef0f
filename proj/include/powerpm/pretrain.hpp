// Self-supervised objectives: masked ETS modeling with a random/causal mask
// mixture and dual-view contrastive learning, plus the training loop.
#pragma once

#include "powerpm/autograd.hpp"
#include "powerpm/corpus.hpp"
#include "powerpm/encoder.hpp"
#include "powerpm/errors.hpp"
#include "powerpm/mask.hpp"
#include "powerpm/optim.hpp"
#include "powerpm/random.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace powerpm {

/// alpha < 0.5 selects random masking of round(ratio * N_p) distinct patches;
/// otherwise the last round(ratio * N_p) patches are masked.
inline MaskSpec make_mask(int num_patches, double ratio, double alpha, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw MaskError("mask ratio must be in (0, 1)");
  const int m = static_cast<int>(std::lround(ratio * static_cast<double>(num_patches)));
  if (m == 0) {
    throw MaskError("mask ratio " + std::to_string(ratio) + " masks no patch of " + std::to_string(num_patches));
  }
  MaskSpec spec;
  spec.ratio = ratio;
  if (alpha < 0.5) {
    spec.mode = MaskMode::random;
    std::vector<int> idx(static_cast<std::size_t>(num_patches));
    for (int i = 0; i < num_patches; ++i) idx[static_cast<std::size_t>(i)] = i;
    for (int i = 0; i < m; ++i) {
      const auto j = static_cast<std::size_t>(i) + uniform_index(rng, static_cast<std::size_t>(num_patches - i));
      std::swap(idx[static_cast<std::size_t>(i)], idx[j]);
    }
    spec.masked_indices.assign(idx.begin(), idx.begin() + m);
    std::sort(spec.masked_indices.begin(), spec.masked_indices.end());
  } else {
    spec.mode = MaskMode::causal;
    for (int i = num_patches - m; i < num_patches; ++i) spec.masked_indices.push_back(i);
  }
  return spec;
}

/// Draws alpha ~ U[0, 1] (or forces the random branch) and builds the mask.
inline MaskSpec sample_mask(int num_patches, double ratio, Rng& rng, bool random_only = false) {
  const double alpha = uniform01(rng);
  return make_mask(num_patches, ratio, random_only ? 0.0 : alpha, rng);
}

// ---------------------------------------------------------------------------
// Masked reconstruction

/// Reconstructed windows [1, T_w] for every batch entry: per-patch linear
/// head d -> P, stitched back by averaging overlapping predictions.
inline std::vector<Var> reconstruct(const WindowBatch& batch, const HierGraph* graph, const EncoderState& state,
                                    const ForwardFlags& flags) {
  const std::vector<Var> z = forward(batch, graph, state, flags);
  const PatchLayout layout(state.window, state.patching);
  std::vector<Var> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (flags.stop_grad_background && !batch.loss(i)) continue;
    Var pred = ag::add_row(ag::matmul(z[i], state.recon_weight), state.recon_bias);
    out[i] = stitch_patches(pred, layout);
  }
  return out;
}

inline double loss_mse(const std::vector<std::vector<double>>& x, const std::vector<std::vector<double>>& xhat) {
  if (x.size() != xhat.size()) throw std::invalid_argument("loss_mse: batch size mismatch");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != xhat[i].size()) throw std::invalid_argument("loss_mse: window length mismatch");
    for (std::size_t t = 0; t < x[i].size(); ++t) {
      const double d = x[i][t] - xhat[i][t];
      sum += d * d;
    }
    n += x[i].size();
  }
  if (n == 0) throw std::invalid_argument("loss_mse: empty input");
  return sum / static_cast<double>(n);
}

/// Differentiable mean squared error over every element of the listed rows.
inline Var loss_mse(const std::vector<Var>& xhat, const std::vector<std::vector<double>>& x) {
  if (x.size() != xhat.size() || x.empty()) throw std::invalid_argument("loss_mse: batch size mismatch");
  std::vector<Var> terms;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (static_cast<std::size_t>(xhat[i].cols()) != x[i].size() || xhat[i].rows() != 1) {
      throw std::invalid_argument("loss_mse: window length mismatch");
    }
    Matrix target = Eigen::Map<const Eigen::RowVectorXd>(x[i].data(), static_cast<Eigen::Index>(x[i].size()));
    terms.push_back(ag::mean_all(ag::square(ag::sub(xhat[i], Var::constant(target)))));
  }
  return ag::scale(ag::sum_of(terms), 1.0 / static_cast<double>(terms.size()));
}

// ---------------------------------------------------------------------------
// Dual-view contrastive learning

struct ContrastiveConfig {
  /// Shift between an anchor and its positive, in points.
  int delta = 96;
  double tau = 0.2;
  int batch = 16;

  void validate() const {
    if (delta < 1) throw ConfigError("contrastive delta must be >= 1", "contrastive.delta");
    if (!(tau > 0.0)) throw ConfigError("contrastive tau must be > 0", "contrastive.tau");
    if (batch < 2) throw ConfigError("contrastive batch must be >= 2", "contrastive.batch");
  }
};

struct WindowKey {
  std::string node;
  std::int64_t t_start = 0;

  auto operator<=>(const WindowKey&) const = default;
};

struct ContrastiveSample {
  std::vector<WindowKey> anchors;
  std::vector<WindowKey> positives;
};

struct SamplerOptions {
  /// Number of distinct anchor start times per batch. With 1, negatives are
  /// other instances at the same time (instance view) only.
  int start_times = 1;
  /// Add same-instance windows at a distant start time (>= 4 * delta away)
  /// as explicit temporal-view negatives.
  bool temporal_negatives = false;
};

/// Samples up to B anchors over distinct (node, start) pairs whose
/// delta-shifted window exists in the pool; positive i is anchor i shifted.
inline ContrastiveSample sample_contrastive_batch(const std::vector<WindowKey>& pool, int batch,
                                                  std::int64_t shift_seconds, Rng& rng,
                                                  const SamplerOptions& opt = {}) {
  const std::set<WindowKey> present(pool.begin(), pool.end());
  std::map<std::int64_t, std::vector<const WindowKey*>> by_time;
  for (const auto& k : present) {
    if (present.count({k.node, k.t_start + shift_seconds})) by_time[k.t_start].push_back(&k);
  }
  ContrastiveSample out;
  if (by_time.empty()) throw Error("contrastive batch: no anchor has a shifted counterpart");
  std::vector<std::int64_t> times;
  for (const auto& [t, _] : by_time) times.push_back(t);

  std::vector<std::int64_t> chosen_times;
  const std::int64_t first = times[uniform_index(rng, times.size())];
  chosen_times.push_back(first);
  if (opt.temporal_negatives) {
    std::vector<std::int64_t> far;
    for (auto t : times) {
      if (std::llabs(t - first) >= 4 * shift_seconds) far.push_back(t);
    }
    if (!far.empty()) chosen_times.push_back(far[uniform_index(rng, far.size())]);
  }
  while (static_cast<int>(chosen_times.size()) < std::max(1, opt.start_times) &&
         chosen_times.size() < times.size()) {
    const auto t = times[uniform_index(rng, times.size())];
    if (std::find(chosen_times.begin(), chosen_times.end(), t) == chosen_times.end()) chosen_times.push_back(t);
  }

  std::vector<const WindowKey*> candidates;
  const std::size_t per_time = (static_cast<std::size_t>(batch) + chosen_times.size() - 1) / chosen_times.size();
  for (std::size_t ti = 0; ti < chosen_times.size(); ++ti) {
    auto nodes = by_time[chosen_times[ti]];
    if (ti > 0 && opt.temporal_negatives) {
      // Keep the nodes already chosen at the first time so each has a
      // same-instance distant negative.
      std::vector<const WindowKey*> same;
      for (const auto* k : nodes) {
        for (const auto* c : candidates) {
          if (c->node == k->node) same.push_back(k);
        }
      }
      nodes = same.empty() ? nodes : same;
    }
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const std::size_t j = i + uniform_index(rng, nodes.size() - i);
      std::swap(nodes[i], nodes[j]);
    }
    const std::size_t take = std::min(per_time, nodes.size());
    for (std::size_t i = 0; i < take && static_cast<int>(candidates.size()) < batch; ++i) candidates.push_back(nodes[i]);
  }
  for (const auto* k : candidates) {
    out.anchors.push_back(*k);
    out.positives.push_back({k->node, k->t_start + shift_seconds});
  }
  if (out.anchors.size() < 2) throw Error("contrastive batch needs at least 2 anchors, got " + std::to_string(out.anchors.size()));
  return out;
}

/// Window-level representation: mean over patches, [1, d].
inline Var pool_representation(const Var& z) { return ag::mean_rows(z); }

/// InfoNCE over cosine similarities. Row i's logits are the positive
/// sim(a_i, p_i) and the negatives sim(a_i, a_m), m != i; the loss is the
/// mean negative log-probability of the positive.
inline Var loss_dvcl(const Var& anchors, const Var& positives, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("loss_dvcl: tau must be > 0");
  if (anchors.rows() != positives.rows() || anchors.cols() != positives.cols()) {
    throw std::invalid_argument("loss_dvcl: anchor/positive shape mismatch");
  }
  const Eigen::Index B = anchors.rows();
  if (B < 2) throw std::invalid_argument("loss_dvcl: need at least 2 anchors");
  Var a, p;
  try {
    a = ag::normalize_rows(anchors);
    p = ag::normalize_rows(positives);
  } catch (const std::domain_error& e) {
    throw NumericError(std::string("loss_dvcl: ") + e.what());
  }
  const Matrix eye = Matrix::Identity(B, B);
  const Matrix off = Matrix::Ones(B, B) - eye;
  Var sim_aa = ag::matmul(a, ag::transpose(a));
  Var sim_ap = ag::matmul(a, ag::transpose(p));
  Var logits = ag::add(ag::hadamard(sim_aa, Var::constant(off)), ag::hadamard(sim_ap, Var::constant(eye)));
  Var logp = ag::log_softmax_rows(ag::scale(logits, 1.0 / tau));
  std::vector<Var> diag;
  for (Eigen::Index i = 0; i < B; ++i) diag.push_back(ag::pick(logp, i, i));
  return ag::scale(ag::sum_of(diag), -1.0 / static_cast<double>(B));
}

// ---------------------------------------------------------------------------
// Training loop

struct PretrainConfig {
  double lambda = 1.0;
  int steps = 200;  // optimizer updates
  int accumulation = 4;
  double lr = 1e-3;
  double plateau_factor = 0.5;
  int plateau_patience = 5;
  /// Updates between scheduler evaluations.
  int plateau_interval = 10;
  double min_lr = 1e-6;
  double mask_ratio = 0.4;
  bool random_mask_only = false;
  /// Windows in the masked-modeling loss set per micro-step.
  int mse_batch = 8;
  ContrastiveConfig contrastive;
  SamplerOptions sampler;
  ForwardFlags flags;
  /// Updates between checkpoint callbacks (0 = never).
  int checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (accumulation < 1) throw ConfigError("accumulation must be >= 1", "pretrain.accumulation");
    if (lambda < 0) throw ConfigError("lambda must be >= 0", "pretrain.lambda");
    if (steps < 0) throw ConfigError("steps must be >= 0", "pretrain.steps");
    if (mse_batch < 1) throw ConfigError("mse_batch must be >= 1", "pretrain.mse_batch");
    if (!(lr > 0)) throw ConfigError("lr must be > 0", "pretrain.lr");
    if (lambda > 0) contrastive.validate();
  }
};

struct TraceRow {
  int step = 0;
  double l_mse = 0.0;
  double l_dvcl = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

struct PretrainResult {
  std::vector<TraceRow> trace;
  long dvcl_evaluations = 0;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::ostringstream os;
  os << "step,l_mse,l_dvcl,total,lr\n";
  for (const auto& r : trace) {
    os << r.step << ',' << io::format_double(r.l_mse) << ',' << io::format_double(r.l_dvcl) << ','
       << io::format_double(r.total) << ',' << io::format_double(r.lr) << '\n';
  }
  return os.str();
}

namespace detail {

inline std::vector<int> sample_distinct(std::vector<int> pool, std::size_t k, Rng& rng) {
  k = std::min(k, pool.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

inline Var contrastive_pooled(const Corpus& corpus, const std::vector<WindowKey>& keys, const HierGraph* graph,
                              const EncoderState& state, const ForwardFlags& flags) {
  // Group by start time so hierarchical passes see full snapshots.
  std::map<std::int64_t, std::vector<std::size_t>> by_time;
  for (std::size_t i = 0; i < keys.size(); ++i) by_time[keys[i].t_start].push_back(i);
  std::vector<Var> pooled(keys.size());
  const bool hier = flags.use_hierarchy && graph != nullptr && !state.rgcn.empty();
  for (const auto& [t, idx] : by_time) {
    const auto offset = static_cast<std::size_t>((t - corpus.timestamps.front()) / corpus.frequency);
    std::vector<int> targets;
    for (std::size_t i : idx) targets.push_back(corpus.index_of(keys[i].node));
    WindowBatch b = hier ? corpus.snapshot(offset, targets) : corpus.batch(targets, offset);
    const auto z = forward(b, hier ? graph : nullptr, state, flags);
    for (std::size_t i : idx) {
      const int inst = corpus.index_of(keys[i].node);
      const std::size_t pos = hier ? static_cast<std::size_t>(inst)
                                   : static_cast<std::size_t>(std::find(targets.begin(), targets.end(), inst) - targets.begin());
      pooled[i] = pool_representation(z[pos]);
    }
  }
  return ag::vcat(pooled);
}

}  // namespace detail

/// Total loss L_MSE + lambda * L_DVCL with gradients accumulated over
/// `accumulation` micro-steps per Adam update and a plateau scheduler on the
/// running loss. `on_checkpoint(update)` fires every `checkpoint_every` updates.
inline PretrainResult pretrain_loop(const PretrainConfig& cfg, const Corpus& corpus, const HierGraph* graph,
                                    EncoderState& state,
                                    const std::function<void(int, const EncoderState&)>& on_checkpoint = {}) {
  cfg.validate();
  if (corpus.train_offsets.empty()) throw Error("pretrain: no training windows");
  Rng rng(derive_seed(cfg.seed, "pretrain"));
  Adam opt(state.parameters(), {cfg.lr});
  PlateauScheduler sched(cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
  const bool hier = cfg.flags.use_hierarchy && graph != nullptr && !state.rgcn.empty();
  const int np = state.num_patches();

  // Node pool for the masked objective and window pool for contrastive pairs.
  std::vector<int> nodes(corpus.instances.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i] = static_cast<int>(i);
  std::vector<WindowKey> pool;
  for (std::size_t off : corpus.train_offsets) {
    for (const auto& s : corpus.instances) pool.push_back({s.instance_id, corpus.timestamps[off]});
  }
  const std::int64_t shift = static_cast<std::int64_t>(cfg.contrastive.delta) * corpus.frequency;

  PretrainResult result;
  double window_sum = 0.0;
  int window_count = 0;
  for (int update = 1; update <= cfg.steps; ++update) {
    opt.zero_grad();
    double sum_mse = 0.0, sum_dvcl = 0.0;
    for (int micro = 0; micro < cfg.accumulation; ++micro) {
      const std::size_t off = corpus.train_offsets[uniform_index(rng, corpus.train_offsets.size())];
      const std::vector<int> targets = detail::sample_distinct(nodes, static_cast<std::size_t>(cfg.mse_batch), rng);
      WindowBatch b = hier ? corpus.snapshot(off, targets) : corpus.batch(targets, off);
      std::vector<std::vector<double>> truth;
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (!b.loss(i)) continue;
        b.masks[i] = sample_mask(np, cfg.mask_ratio, rng, cfg.random_mask_only);
      }
      ForwardFlags f = cfg.flags;
      f.use_hierarchy = hier;
      const auto xhat = reconstruct(b, hier ? graph : nullptr, state, f);
      std::vector<Var> pred;
      for (std::size_t i = 0; i < b.size(); ++i) {
        if (!b.loss(i)) continue;
        pred.push_back(xhat[i]);
        truth.push_back(b.x[i]);
      }
      Var l_mse = loss_mse(pred, truth);
      Var total = l_mse;
      double dvcl_value = 0.0;
      if (cfg.lambda > 0.0) {
        const auto sample = sample_contrastive_batch(pool, cfg.contrastive.batch, shift, rng, cfg.sampler);
        ForwardFlags cf = f;
        Var za = detail::contrastive_pooled(corpus, sample.anchors, graph, state, cf);
        Var zp = detail::contrastive_pooled(corpus, sample.positives, graph, state, cf);
        Var l_dvcl = loss_dvcl(za, zp, cfg.contrastive.tau);
        dvcl_value = l_dvcl.item();
        ++result.dvcl_evaluations;
        total = ag::add(total, ag::scale(l_dvcl, cfg.lambda));
      }
      if (!std::isfinite(total.item())) {
        throw NumericError("non-finite loss at update " + std::to_string(update) + " (l_mse=" +
                           io::format_double(l_mse.item()) + ", l_dvcl=" + io::format_double(dvcl_value) + ")");
      }
      ag::backward(total);
      sum_mse += l_mse.item();
      sum_dvcl += dvcl_value;
    }
    opt.step(static_cast<double>(cfg.accumulation));
    TraceRow row;
    row.step = update;
    row.l_mse = sum_mse / cfg.accumulation;
    row.l_dvcl = sum_dvcl / cfg.accumulation;
    row.total = row.l_mse + cfg.lambda * row.l_dvcl;
    row.lr = opt.lr();
    result.trace.push_back(row);
    window_sum += row.total;
    ++window_count;
    if (window_count == cfg.plateau_interval) {
      opt.set_lr(sched.observe(window_sum / window_count, opt.lr()));
      window_sum = 0.0;
      window_count = 0;
    }
    if (cfg.checkpoint_every > 0 && update % cfg.checkpoint_every == 0 && on_checkpoint) on_checkpoint(update, state);
  }
  return result;
}

/// MSE of the reconstruction restricted to masked timestamps, over the given
/// windows with freshly sampled masks (no gradient).
inline double masked_reconstruction_mse(const Corpus& corpus, const std::vector<std::size_t>& offsets,
                                        const HierGraph* graph, const EncoderState& state, const ForwardFlags& flags,
                                        double ratio, std::uint64_t seed, bool random_only = false) {
  ag::NoGradGuard ng;
  Rng rng(seed);
  const PatchLayout layout(state.window, state.patching);
  const bool hier = flags.use_hierarchy && graph != nullptr && !state.rgcn.empty();
  double sum = 0.0;
  std::size_t n = 0;
  std::vector<int> all(corpus.instances.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  for (std::size_t off : offsets) {
    WindowBatch b = hier ? corpus.snapshot(off, all) : corpus.batch(all, off);
    for (std::size_t i = 0; i < b.size(); ++i) b.masks[i] = sample_mask(state.num_patches(), ratio, rng, random_only);
    ForwardFlags f = flags;
    f.use_hierarchy = hier;
    const auto xhat = reconstruct(b, hier ? graph : nullptr, state, f);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto hidden = masked_view(std::vector<double>(b.x[i].size(), 1.0), layout, b.masks[i]->masked_indices);
      for (std::size_t t = 0; t < hidden.size(); ++t) {
        if (hidden[t] != 0.0) continue;
        const double d = xhat[i].value()(0, static_cast<Eigen::Index>(t)) - b.x[i][t];
        sum += d * d;
        ++n;
      }
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace powerpm
