// Aligned, normalized, exogenous-encoded view of a dataset, with window
// offsets partitioned chronologically.
#pragma once

#include "powerpm/data.hpp"
#include "powerpm/encoder.hpp"
#include "powerpm/hierarchy.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace powerpm {

struct CorpusOptions {
  int window = 672;
  int stride = 96;
  /// Extra points reserved after each window (largest forecast horizon).
  int horizon = 0;
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  ExogenousCodec codec;
  bool use_exogenous_data = true;
  /// Windows with a larger share of ingestion-filled points are dropped.
  double max_filled_fraction = 0.1;
};

class Corpus {
 public:
  std::vector<InstanceSeries> instances;
  /// Per instance [T, K] codes (K may be 0).
  std::vector<CodeMatrix> codes;
  ExogenousSchema schema;
  std::vector<std::int64_t> timestamps;
  std::int64_t frequency = 0;
  std::map<std::string, int> user_labels;
  SplitPlan plan;
  int window = 0;
  int horizon = 0;
  std::vector<std::size_t> train_offsets, val_offsets, test_offsets;

  int index_of(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? -1 : it->second;
  }

  std::vector<int> level_members(Level level) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < instances.size(); ++i) {
      if (instances[i].level == level) out.push_back(static_cast<int>(i));
    }
    return out;
  }

  std::vector<double> values(int inst, std::size_t offset, std::size_t length) const {
    const auto& v = instances[static_cast<std::size_t>(inst)].values;
    return {v.begin() + static_cast<std::ptrdiff_t>(offset), v.begin() + static_cast<std::ptrdiff_t>(offset + length)};
  }

  CodeMatrix window_codes(int inst, std::size_t offset, std::size_t length) const {
    const CodeMatrix& c = codes[static_cast<std::size_t>(inst)];
    if (c.cols() == 0) return CodeMatrix(static_cast<Eigen::Index>(length), 0);
    return c.middleRows(static_cast<Eigen::Index>(offset), static_cast<Eigen::Index>(length));
  }

  /// Input windows of the listed instances starting at `offset`.
  WindowBatch batch(const std::vector<int>& insts, std::size_t offset) const {
    WindowBatch b;
    const auto w = static_cast<std::size_t>(window);
    for (int i : insts) {
      b.add(values(i, offset, w), window_codes(i, offset, w), instances[static_cast<std::size_t>(i)].instance_id,
            timestamps[offset], timestamps[offset + w - 1]);
    }
    return b;
  }

  /// Every instance's window at `offset`; `targets` form the loss set.
  WindowBatch snapshot(std::size_t offset, const std::vector<int>& targets) const {
    std::vector<int> all(instances.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    WindowBatch b = batch(all, offset);
    std::fill(b.in_loss.begin(), b.in_loss.end(), false);
    for (int t : targets) b.in_loss[static_cast<std::size_t>(t)] = true;
    return b;
  }

  void rebuild_index() {
    index_.clear();
    for (std::size_t i = 0; i < instances.size(); ++i) index_[instances[i].instance_id] = static_cast<int>(i);
  }

 private:
  std::map<std::string, int> index_;
};

/// Aligns all instances to their common time span, encodes exogenous
/// records (inherited from the nearest ancestor region), splits window
/// offsets 6:2:2 by start time and z-scores each instance with train-span
/// statistics (unless the dataset is already normalized).
inline Corpus build_corpus(const Dataset& ds, const CorpusOptions& opt) {
  if (ds.instances.empty()) throw SchemaError("dataset has no instances");
  Corpus c;
  c.window = opt.window;
  c.horizon = opt.horizon;
  c.frequency = ds.instances.front().frequency_seconds;
  std::int64_t lo = ds.instances.front().timestamps.front(), hi = ds.instances.front().timestamps.back();
  for (const auto& s : ds.instances) {
    if (s.frequency_seconds != c.frequency) throw SchemaError("instances have different frequencies");
    if (s.timestamps.empty()) throw SchemaError("instance '" + s.instance_id + "' is empty");
    lo = std::max(lo, s.timestamps.front());
    hi = std::min(hi, s.timestamps.back());
  }
  if (hi < lo) throw SchemaError("instances share no common time span");
  for (std::int64_t t = lo; t <= hi; t += c.frequency) c.timestamps.push_back(t);
  const std::size_t T = c.timestamps.size();

  for (const auto& s : ds.instances) {
    InstanceSeries a = s;
    const auto off = static_cast<std::size_t>((lo - s.timestamps.front()) / c.frequency);
    a.timestamps.assign(s.timestamps.begin() + static_cast<std::ptrdiff_t>(off),
                        s.timestamps.begin() + static_cast<std::ptrdiff_t>(off + T));
    a.values.assign(s.values.begin() + static_cast<std::ptrdiff_t>(off), s.values.begin() + static_cast<std::ptrdiff_t>(off + T));
    if (!s.filled.empty()) {
      a.filled.assign(s.filled.begin() + static_cast<std::ptrdiff_t>(off), s.filled.begin() + static_cast<std::ptrdiff_t>(off + T));
    }
    c.instances.push_back(std::move(a));
  }
  c.rebuild_index();
  c.user_labels = ds.user_labels;

  const bool exo = opt.use_exogenous_data && !ds.exogenous.empty();
  c.schema = exo ? opt.codec.schema() : ExogenousSchema{};
  for (const auto& s : c.instances) {
    if (!exo) {
      c.codes.emplace_back(static_cast<Eigen::Index>(T), 0);
      continue;
    }
    const auto region = exogenous_region(ds, s.instance_id);
    if (!region) throw SchemaError("no exogenous records for '" + s.instance_id + "' or its ancestors");
    const auto& recs = ds.exogenous.at(*region);
    std::map<std::int64_t, const ExogenousRecord*> by_ts;
    for (const auto& r : recs) by_ts[r.timestamp] = &r;
    std::vector<ExogenousRecord> aligned(T);
    const ExogenousRecord* last = nullptr;
    for (std::size_t t = 0; t < T; ++t) {
      // Hourly weather against sub-hourly load: carry the latest record forward.
      auto it = by_ts.upper_bound(c.timestamps[t]);
      if (it != by_ts.begin()) last = std::prev(it)->second;
      if (!last) last = by_ts.begin()->second;
      aligned[t] = *last;
    }
    c.codes.push_back(opt.codec.encode(aligned));
  }

  const auto span = static_cast<std::size_t>(opt.window + opt.horizon);
  if (span > T) throw SplitError("series of length " + std::to_string(T) + " shorter than window + horizon");
  std::vector<std::size_t> offsets;
  for (std::size_t off = 0; off + span <= T; off += static_cast<std::size_t>(opt.stride)) {
    bool ok = true;
    for (const auto& s : c.instances) {
      if (filled_fraction(s, off, span) > opt.max_filled_fraction) ok = false;
    }
    if (ok) offsets.push_back(off);
  }
  auto split = chronological_split(offsets, opt.ratios,
                                   [&](std::size_t off) { return c.timestamps[off]; });
  c.plan = split.plan;
  c.train_offsets = std::move(split.train);
  c.val_offsets = std::move(split.val);
  c.test_offsets = std::move(split.test);

  const std::int64_t train_end = c.plan.train_last + static_cast<std::int64_t>(span - 1) * c.frequency;
  for (auto& s : c.instances) {
    NormalizationStats st = ds.normalized ? NormalizationStats{} : train_statistics(s, train_end);
    if (!ds.normalized) apply_normalization(s, st);
    c.plan.normalization[s.instance_id] = st;
  }
  return c;
}

/// Mean train window of every user, used as the clustering feature.
inline std::vector<std::vector<double>> user_profiles(const Corpus& c, std::vector<std::string>& ids) {
  std::vector<std::vector<double>> out;
  ids.clear();
  for (int u : c.level_members(Level::user)) {
    std::vector<double> mean(static_cast<std::size_t>(c.window), 0.0);
    for (std::size_t off : c.train_offsets) {
      const auto v = c.values(u, off, static_cast<std::size_t>(c.window));
      for (std::size_t t = 0; t < mean.size(); ++t) mean[t] += v[t];
    }
    for (double& m : mean) m /= static_cast<double>(std::max<std::size_t>(1, c.train_offsets.size()));
    ids.push_back(c.instances[static_cast<std::size_t>(u)].instance_id);
    out.push_back(std::move(mean));
  }
  return out;
}

/// Clusters users (K capped at the user count) and builds the graph.
inline std::pair<HierGraph, ClusterAssignment> build_corpus_graph(const Corpus& c, int n_clusters,
                                                                  const KMeansOptions& opt) {
  std::vector<std::string> ids;
  const auto profiles = user_profiles(c, ids);
  ClusterAssignment a;
  if (!ids.empty()) a = kmeans_dtw(ids, profiles, std::min<int>(n_clusters, static_cast<int>(ids.size())), opt);
  return {build_hierarchy_graph(c.instances, a), a};
}

}  // namespace powerpm
