// DTW k-means user clustering and the typed, directed hierarchy graph.
#pragma once

#include "powerpm/data.hpp"
#include "powerpm/errors.hpp"
#include "powerpm/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace powerpm {

/// Dynamic time warping with absolute-difference point cost. `band` is a
/// Sakoe-Chiba half-width; it is widened to |len(a) - len(b)| when narrower so
/// that an alignment always exists.
inline double dtw_distance(std::span<const double> a, std::span<const double> b,
                           std::optional<int> band = std::nullopt) {
  if (a.empty() || b.empty()) throw std::invalid_argument("dtw_distance: empty series");
  const auto n = static_cast<long>(a.size());
  const auto m = static_cast<long>(b.size());
  long w = std::max(n, m);
  if (band) w = std::max<long>(*band, std::labs(n - m));
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(static_cast<std::size_t>(m + 1), inf), cur(static_cast<std::size_t>(m + 1), inf);
  prev[0] = 0.0;
  for (long i = 1; i <= n; ++i) {
    std::fill(cur.begin(), cur.end(), inf);
    const long j_lo = std::max(1L, i - w);
    const long j_hi = std::min(m, i + w);
    for (long j = j_lo; j <= j_hi; ++j) {
      const double cost = std::abs(a[static_cast<std::size_t>(i - 1)] - b[static_cast<std::size_t>(j - 1)]);
      const double best = std::min({prev[static_cast<std::size_t>(j - 1)], prev[static_cast<std::size_t>(j)],
                                    cur[static_cast<std::size_t>(j - 1)]});
      cur[static_cast<std::size_t>(j)] = cost + best;
    }
    std::swap(prev, cur);
  }
  return prev[static_cast<std::size_t>(m)];
}

struct ClusterAssignment {
  /// Parallel to the input user order.
  std::vector<std::string> user_ids;
  std::vector<int> cluster;
  int n_clusters = 0;
  std::vector<std::vector<double>> centroids;
  double distortion = 0.0;

  std::optional<int> cluster_of(const std::string& user) const {
    for (std::size_t i = 0; i < user_ids.size(); ++i) {
      if (user_ids[i] == user) return cluster[i];
    }
    return std::nullopt;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "user_id,cluster_index\n";
    for (std::size_t i = 0; i < user_ids.size(); ++i) os << user_ids[i] << ',' << cluster[i] << '\n';
    return os.str();
  }
};

struct KMeansOptions {
  int n_restarts = 10;
  int max_iterations = 100;
  std::optional<int> band;
  std::uint64_t seed = 0;
};

namespace detail {

struct KMeansRun {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  double distortion = 0.0;
};

inline std::vector<double> mean_series(const std::vector<std::vector<double>>& series,
                                       const std::vector<int>& labels, int k) {
  std::vector<double> c;
  int n = 0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (labels[i] != k) continue;
    if (c.empty()) c.assign(series[i].size(), 0.0);
    for (std::size_t t = 0; t < c.size(); ++t) c[t] += series[i][t];
    ++n;
  }
  for (double& v : c) v /= static_cast<double>(n);
  return c;
}

inline KMeansRun kmeans_once(const std::vector<std::vector<double>>& series, int k, const KMeansOptions& opt,
                             Rng& rng) {
  const std::size_t n = series.size();
  // Initial centroids: k distinct users drawn uniformly.
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < static_cast<std::size_t>(k); ++i) {
    const std::size_t j = i + uniform_index(rng, n - i);
    std::swap(idx[i], idx[j]);
  }
  KMeansRun run;
  for (int c = 0; c < k; ++c) run.centroids.push_back(series[idx[static_cast<std::size_t>(c)]]);
  run.labels.assign(n, -1);
  std::vector<double> dist(n, 0.0);

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    std::vector<int> labels(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = dtw_distance(series[i], run.centroids[static_cast<std::size_t>(c)], opt.band);
        if (d < best) {
          best = d;
          labels[i] = c;
        }
      }
      dist[i] = best;
    }
    // Empty-cluster repair: move the point farthest from its centroid.
    for (int c = 0; c < k; ++c) {
      if (std::count(labels.begin(), labels.end(), c) > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (std::count(labels.begin(), labels.end(), labels[i]) < 2) continue;
        if (far == n || dist[i] > dist[far]) far = i;
      }
      if (far == n) break;
      labels[far] = c;
      dist[far] = 0.0;
      run.centroids[static_cast<std::size_t>(c)] = series[far];
    }
    const bool stable = labels == run.labels;
    run.labels = std::move(labels);
    for (int c = 0; c < k; ++c) run.centroids[static_cast<std::size_t>(c)] = mean_series(series, run.labels, c);
    if (stable) break;
  }
  run.distortion = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    run.distortion += dtw_distance(series[i], run.centroids[static_cast<std::size_t>(run.labels[i])], opt.band);
  }
  return run;
}

// Relabels clusters by first appearance so equal partitions compare equal.
inline std::vector<int> canonical_labels(const std::vector<int>& labels, std::vector<int>* old_of_new = nullptr) {
  std::map<int, int> remap;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = remap.find(labels[i]);
    if (it == remap.end()) it = remap.emplace(labels[i], static_cast<int>(remap.size())).first;
    out[i] = it->second;
  }
  if (old_of_new) {
    old_of_new->assign(remap.size(), 0);
    for (const auto& [o, nw] : remap) (*old_of_new)[static_cast<std::size_t>(nw)] = o;
  }
  return out;
}

}  // namespace detail

/// Lloyd-style k-means under DTW with arithmetic-mean centroids. Runs
/// `n_restarts` times (seed + r) and keeps the partition found most often;
/// ties go to the lowest total distortion.
inline ClusterAssignment kmeans_dtw(const std::vector<std::string>& user_ids,
                                    const std::vector<std::vector<double>>& series, int k,
                                    const KMeansOptions& opt = {}) {
  if (user_ids.size() != series.size()) throw std::invalid_argument("kmeans_dtw: ids/series size mismatch");
  if (k < 1 || static_cast<std::size_t>(k) > series.size()) {
    throw std::invalid_argument("kmeans_dtw: K_c=" + std::to_string(k) + " exceeds " +
                                std::to_string(series.size()) + " users");
  }
  if (opt.n_restarts < 1) throw std::invalid_argument("kmeans_dtw: n_restarts must be >= 1");
  for (const auto& s : series) {
    if (s.size() != series.front().size() || s.empty()) {
      throw std::invalid_argument("kmeans_dtw: series must be nonempty and of equal length");
    }
  }

  std::vector<detail::KMeansRun> runs;
  std::vector<std::vector<int>> partitions;
  for (int r = 0; r < opt.n_restarts; ++r) {
    Rng rng(opt.seed + static_cast<std::uint64_t>(r));
    std::vector<int> old_of_new;
    detail::KMeansRun run = detail::kmeans_once(series, k, opt, rng);
    std::vector<int> canon = detail::canonical_labels(run.labels, &old_of_new);
    std::vector<std::vector<double>> cents;
    for (int o : old_of_new) cents.push_back(run.centroids[static_cast<std::size_t>(o)]);
    run.labels = canon;
    run.centroids = std::move(cents);
    partitions.push_back(run.labels);
    runs.push_back(std::move(run));
  }

  std::size_t best = 0;
  long best_count = -1;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const long count = std::count(partitions.begin(), partitions.end(), partitions[i]);
    if (count > best_count || (count == best_count && runs[i].distortion < runs[best].distortion)) {
      best = i;
      best_count = count;
    }
  }
  ClusterAssignment a;
  a.user_ids = user_ids;
  a.cluster = runs[best].labels;
  a.n_clusters = k;
  a.centroids = runs[best].centroids;
  a.distortion = runs[best].distortion;
  return a;
}

// ---------------------------------------------------------------------------
// Hierarchy graph

enum class Relation : int {
  city_to_district = 0,
  district_to_city,
  district_to_cluster,
  cluster_to_district,
  district_to_user,
  user_to_cluster,
};

inline constexpr int kRelationCount = 6;

inline const char* relation_name(Relation r) {
  switch (r) {
    case Relation::city_to_district: return "city_to_district";
    case Relation::district_to_city: return "district_to_city";
    case Relation::district_to_cluster: return "district_to_cluster";
    case Relation::cluster_to_district: return "cluster_to_district";
    case Relation::district_to_user: return "district_to_user";
    case Relation::user_to_cluster: return "user_to_cluster";
  }
  return "?";
}

/// Endpoint levels a relation connects.
inline std::pair<Level, Level> relation_levels(Relation r) {
  switch (r) {
    case Relation::city_to_district: return {Level::city, Level::district};
    case Relation::district_to_city: return {Level::district, Level::city};
    case Relation::district_to_cluster: return {Level::district, Level::cluster};
    case Relation::cluster_to_district: return {Level::cluster, Level::district};
    case Relation::district_to_user: return {Level::district, Level::user};
    case Relation::user_to_cluster: return {Level::user, Level::cluster};
  }
  return {Level::city, Level::city};
}

struct GraphNode {
  std::string id;
  Level level;
};

struct Edge {
  int src;
  int dst;
  Relation relation;
};

struct HierGraph {
  std::vector<GraphNode> nodes;
  std::vector<Edge> edges;

  int index_of(const std::string& id) const {
    auto it = index_.find(id);
    return it == index_.end() ? -1 : it->second;
  }

  int add_node(std::string id, Level level) {
    const int i = static_cast<int>(nodes.size());
    index_[id] = i;
    nodes.push_back({std::move(id), level});
    return i;
  }

  void add_edge(int src, int dst, Relation r) { edges.push_back({src, dst, r}); }

  /// Source nodes of edges of relation r that end at v.
  std::vector<int> in_neighbors(int v, Relation r) const {
    std::vector<int> out;
    for (const auto& e : edges) {
      if (e.dst == v && e.relation == r) out.push_back(e.src);
    }
    return out;
  }

  /// Per node, per relation, incoming neighbor lists.
  std::vector<std::array<std::vector<int>, kRelationCount>> incoming() const {
    std::vector<std::array<std::vector<int>, kRelationCount>> out(nodes.size());
    for (const auto& e : edges) out[static_cast<std::size_t>(e.dst)][static_cast<std::size_t>(e.relation)].push_back(e.src);
    return out;
  }

  /// Users feeding each cluster node (via user_to_cluster edges).
  std::vector<int> cluster_members(int cluster_node) const { return in_neighbors(cluster_node, Relation::user_to_cluster); }

  /// Edge list: "src<TAB>dst<TAB>relation" per line.
  std::string to_edge_list() const {
    std::ostringstream os;
    for (const auto& e : edges) {
      os << nodes[static_cast<std::size_t>(e.src)].id << '\t' << nodes[static_cast<std::size_t>(e.dst)].id << '\t'
         << relation_name(e.relation) << '\n';
    }
    return os.str();
  }

  /// Throws GraphError if any edge's relation disagrees with its endpoint levels.
  void validate() const {
    for (const auto& e : edges) {
      const auto [ls, ld] = relation_levels(e.relation);
      if (nodes[static_cast<std::size_t>(e.src)].level != ls || nodes[static_cast<std::size_t>(e.dst)].level != ld) {
        throw GraphError(std::string("edge ") + nodes[static_cast<std::size_t>(e.src)].id + " -> " +
                         nodes[static_cast<std::size_t>(e.dst)].id + " inconsistent with relation " +
                         relation_name(e.relation));
      }
    }
  }

 private:
  std::map<std::string, int> index_;
};

inline std::string cluster_node_id(int k) { return "cluster" + std::to_string(k); }

/// Builds nodes for cities, districts, clusters and users with edges
/// city<->district, district<->cluster (for each district hosting a member),
/// district->user and user->cluster. Users get no edge back to their district.
inline HierGraph build_hierarchy_graph(const std::vector<InstanceSeries>& instances,
                                       const ClusterAssignment& assignment) {
  HierGraph g;
  std::map<std::string, const InstanceSeries*> by_id;
  for (const auto& s : instances) by_id[s.instance_id] = &s;
  for (Level lvl : {Level::city, Level::district}) {
    for (const auto& s : instances) {
      if (s.level == lvl) g.add_node(s.instance_id, lvl);
    }
  }
  const bool has_users = std::any_of(instances.begin(), instances.end(),
                                     [](const InstanceSeries& s) { return s.level == Level::user; });
  if (has_users) {
    for (int k = 0; k < assignment.n_clusters; ++k) g.add_node(cluster_node_id(k), Level::cluster);
  }
  for (const auto& s : instances) {
    if (s.level == Level::user) g.add_node(s.instance_id, Level::user);
  }

  for (const auto& s : instances) {
    if (s.level != Level::district) continue;
    if (!s.parent_id) continue;
    const int c = g.index_of(*s.parent_id);
    if (c < 0 || g.nodes[static_cast<std::size_t>(c)].level != Level::city) {
      throw GraphError("district '" + s.instance_id + "' has no city parent");
    }
    const int d = g.index_of(s.instance_id);
    g.add_edge(c, d, Relation::city_to_district);
    g.add_edge(d, c, Relation::district_to_city);
  }

  std::map<std::pair<int, int>, bool> district_cluster;
  for (const auto& s : instances) {
    if (s.level != Level::user) continue;
    if (!s.parent_id) throw GraphError("orphan user '" + s.instance_id + "' has no district parent");
    const int d = g.index_of(*s.parent_id);
    if (d < 0 || g.nodes[static_cast<std::size_t>(d)].level != Level::district) {
      throw GraphError("orphan user '" + s.instance_id + "' has no district parent");
    }
    const auto k = assignment.cluster_of(s.instance_id);
    if (!k) throw GraphError("user '" + s.instance_id + "' has no cluster assignment");
    const int u = g.index_of(s.instance_id);
    const int c = g.index_of(cluster_node_id(*k));
    g.add_edge(d, u, Relation::district_to_user);
    g.add_edge(u, c, Relation::user_to_cluster);
    district_cluster[{d, c}] = true;
  }
  for (const auto& [dc, _] : district_cluster) {
    g.add_edge(dc.first, dc.second, Relation::district_to_cluster);
    g.add_edge(dc.second, dc.first, Relation::cluster_to_district);
  }
  g.validate();
  return g;
}

}  // namespace powerpm
