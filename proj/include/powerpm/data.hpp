// Electricity time series ingestion, synthetic hierarchy generation,
// exogenous encoding, windowing and chronological splits.
#pragma once

#include "powerpm/errors.hpp"
#include "powerpm/io.hpp"
#include "powerpm/random.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace powerpm {

enum class Level { city, district, user, cluster };

inline const char* to_string(Level l) {
  switch (l) {
    case Level::city: return "city";
    case Level::district: return "district";
    case Level::user: return "user";
    case Level::cluster: return "cluster";
  }
  return "?";
}

inline Level level_from_string(const std::string& s) {
  if (s == "city") return Level::city;
  if (s == "district") return Level::district;
  if (s == "user") return Level::user;
  if (s == "cluster") return Level::cluster;
  throw SchemaError("unknown level '" + s + "'");
}

struct InstanceSeries {
  std::string instance_id;
  Level level = Level::user;
  std::optional<std::string> parent_id;
  std::vector<std::int64_t> timestamps;
  std::vector<double> values;
  /// Points that were missing in the source and imputed at ingestion.
  std::vector<bool> filled;
  std::int64_t frequency_seconds = 900;

  std::size_t size() const { return values.size(); }

  /// Throws SchemaError when an invariant is violated.
  void validate() const {
    if (frequency_seconds <= 0) throw SchemaError(instance_id + ": non-positive frequency");
    if (timestamps.size() != values.size()) throw SchemaError(instance_id + ": length mismatch");
    if (!filled.empty() && filled.size() != values.size()) {
      throw SchemaError(instance_id + ": fill-flag length mismatch");
    }
    for (std::size_t i = 1; i < timestamps.size(); ++i) {
      if (timestamps[i] - timestamps[i - 1] != frequency_seconds) {
        throw SchemaError(instance_id + ": irregular spacing at index " + std::to_string(i));
      }
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!std::isfinite(values[i])) {
        throw SchemaError(instance_id + ": non-finite value at index " + std::to_string(i));
      }
    }
    if (level == Level::city && parent_id) throw SchemaError(instance_id + ": city with a parent");
    if (level == Level::user && !parent_id) throw SchemaError(instance_id + ": user without a district");
  }
};

// ---------------------------------------------------------------------------
// Exogenous variables

struct ExogenousVariable {
  std::string name;
  int cardinality = 1;
};

struct ExogenousSchema {
  std::vector<ExogenousVariable> variables;

  int count() const { return static_cast<int>(variables.size()); }

  int total_rows() const {
    int n = 0;
    for (const auto& v : variables) n += v.cardinality;
    return n;
  }

  /// First embedding row of variable k.
  int offset(int k) const {
    int n = 0;
    for (int i = 0; i < k; ++i) n += variables[i].cardinality;
    return n;
  }

  void validate() const {
    for (const auto& v : variables) {
      if (v.cardinality < 1) throw SchemaError("exogenous variable '" + v.name + "' has cardinality < 1");
    }
  }

  std::uint64_t hash() const {
    std::string s;
    for (const auto& v : variables) s += v.name + ":" + std::to_string(v.cardinality) + ";";
    return fnv1a64(s);
  }

  bool operator==(const ExogenousSchema& o) const {
    if (variables.size() != o.variables.size()) return false;
    for (std::size_t i = 0; i < variables.size(); ++i) {
      if (variables[i].name != o.variables[i].name ||
          variables[i].cardinality != o.variables[i].cardinality) {
        return false;
      }
    }
    return true;
  }
};

/// One timestamp of raw weather observations for a region.
struct ExogenousRecord {
  std::int64_t timestamp = 0;
  std::string weather;
  double temp_max = 0.0;
  double temp_min = 0.0;
};

using CodeMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;

/// Clamped 1-degree bin index over [lo, hi]; bin i covers [lo + i, lo + i + 1).
inline int temperature_bin(double t, int lo, int hi) {
  if (!std::isfinite(t)) throw EncodingError("non-finite temperature");
  const double f = std::floor(t) - static_cast<double>(lo);
  const double clamped = std::clamp(f, 0.0, static_cast<double>(hi - lo));
  return static_cast<int>(clamped);
}

/// Half-open temperature interval represented by a bin code.
inline std::pair<double, double> temperature_bin_range(int code, int lo) {
  return {static_cast<double>(lo + code), static_cast<double>(lo + code + 1)};
}

/// Maps weather labels and max/min temperature to categorical codes.
struct ExogenousCodec {
  std::vector<std::string> weather_vocabulary{"sunny", "cloudy", "rainy", "snowy"};
  int temp_lo = -20;
  int temp_hi = 45;

  ExogenousSchema schema() const {
    ExogenousSchema s;
    const int bins = temp_hi - temp_lo + 1;
    s.variables = {{"weather", static_cast<int>(weather_vocabulary.size())},
                   {"temp_max", bins},
                   {"temp_min", bins}};
    return s;
  }

  int weather_code(const std::string& label) const {
    for (std::size_t i = 0; i < weather_vocabulary.size(); ++i) {
      if (weather_vocabulary[i] == label) return static_cast<int>(i);
    }
    throw EncodingError("unknown weather label '" + label + "'");
  }

  /// [T, 3] codes: weather, temp_max bin, temp_min bin.
  CodeMatrix encode(const std::vector<ExogenousRecord>& raw) const {
    if (temp_hi < temp_lo) throw EncodingError("temperature range hi < lo");
    CodeMatrix out(static_cast<Eigen::Index>(raw.size()), 3);
    for (std::size_t t = 0; t < raw.size(); ++t) {
      out(t, 0) = weather_code(raw[t].weather);
      out(t, 1) = temperature_bin(raw[t].temp_max, temp_lo, temp_hi);
      out(t, 2) = temperature_bin(raw[t].temp_min, temp_lo, temp_hi);
    }
    return out;
  }
};

inline CodeMatrix encode_exogenous(const std::vector<ExogenousRecord>& raw, const ExogenousCodec& codec) {
  return codec.encode(raw);
}

// ---------------------------------------------------------------------------
// Windows and splits

struct Window {
  std::size_t offset = 0;
  std::int64_t t_start = 0;
  std::int64_t t_end = 0;
  std::vector<double> values;
};

/// Windows of length `window` at offsets 0, stride, 2*stride, ... that fit.
inline std::vector<Window> slice_windows(const InstanceSeries& series, std::size_t window,
                                         std::size_t stride) {
  if (stride < 1) throw std::invalid_argument("slice_windows: stride must be >= 1");
  if (window < 1) throw std::invalid_argument("slice_windows: window must be >= 1");
  std::vector<Window> out;
  if (window > series.size()) {
    std::clog << "slice_windows: " << series.instance_id << " shorter (" << series.size()
              << ") than window " << window << "; no windows\n";
    return out;
  }
  for (std::size_t off = 0; off + window <= series.size(); off += stride) {
    Window w;
    w.offset = off;
    w.t_start = series.timestamps[off];
    w.t_end = series.timestamps[off + window - 1];
    w.values.assign(series.values.begin() + static_cast<std::ptrdiff_t>(off),
                    series.values.begin() + static_cast<std::ptrdiff_t>(off + window));
    out.push_back(std::move(w));
  }
  return out;
}

/// Fraction of ingestion-filled points inside [offset, offset + length).
inline double filled_fraction(const InstanceSeries& s, std::size_t offset, std::size_t length) {
  if (s.filled.empty() || length == 0) return 0.0;
  std::size_t n = 0;
  for (std::size_t i = offset; i < offset + length; ++i) n += s.filled[i] ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(length);
}

struct NormalizationStats {
  double mean = 0.0;
  double stddev = 1.0;
};

struct SplitPlan {
  std::array<double, 3> ratios{0.6, 0.2, 0.2};
  std::int64_t train_first = 0, train_last = 0;
  std::int64_t val_first = 0, val_last = 0;
  std::int64_t test_first = 0, test_last = 0;
  /// Per-instance z-score statistics computed on the train span.
  std::map<std::string, NormalizationStats> normalization;
};

template <class Item>
struct SplitResult {
  SplitPlan plan;
  std::vector<Item> train, val, test;
};

/// Chronological split over distinct start times. Items sharing a start time
/// always land in the same split. Counts are floor(ratio * n) for train and
/// validation; the remainder goes to test.
template <class Item, class StartOf>
SplitResult<Item> chronological_split(std::vector<Item> items, std::array<double, 3> ratios,
                                      StartOf start_of) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw SplitError("split ratios must be non-negative and sum to 1");
  }
  std::stable_sort(items.begin(), items.end(),
                   [&](const Item& a, const Item& b) { return start_of(a) < start_of(b); });
  std::vector<std::int64_t> starts;
  for (const Item& it : items) {
    if (starts.empty() || starts.back() != start_of(it)) starts.push_back(start_of(it));
  }
  const std::size_t n = starts.size();
  if (n < 3) throw SplitError("need at least 3 windows to split, got " + std::to_string(n));
  const auto n_train = static_cast<std::size_t>(std::floor(ratios[0] * static_cast<double>(n) + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[1] * static_cast<double>(n) + 1e-9));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n) {
    throw SplitError("split ratios leave an empty partition for " + std::to_string(n) + " windows");
  }
  SplitResult<Item> r;
  r.plan.ratios = ratios;
  r.plan.train_first = starts.front();
  r.plan.train_last = starts[n_train - 1];
  r.plan.val_first = starts[n_train];
  r.plan.val_last = starts[n_train + n_val - 1];
  r.plan.test_first = starts[n_train + n_val];
  r.plan.test_last = starts.back();
  for (Item& it : items) {
    const auto t = start_of(it);
    if (t <= r.plan.train_last) {
      r.train.push_back(std::move(it));
    } else if (t <= r.plan.val_last) {
      r.val.push_back(std::move(it));
    } else {
      r.test.push_back(std::move(it));
    }
  }
  return r;
}

inline SplitResult<Window> chronological_split(std::vector<Window> windows,
                                               std::array<double, 3> ratios = {0.6, 0.2, 0.2}) {
  return chronological_split(std::move(windows), ratios, [](const Window& w) { return w.t_start; });
}

/// Mean and standard deviation of the points with timestamp <= `last`.
inline NormalizationStats train_statistics(const InstanceSeries& s, std::int64_t last) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.size() && s.timestamps[i] <= last; ++i) {
    sum += s.values[i];
    ++n;
  }
  if (n == 0) return {};
  const double mean = sum / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) sq += (s.values[i] - mean) * (s.values[i] - mean);
  double sd = std::sqrt(sq / static_cast<double>(n));
  if (!(sd > 1e-12)) sd = 1.0;
  return {mean, sd};
}

inline void apply_normalization(InstanceSeries& s, const NormalizationStats& st) {
  for (double& v : s.values) v = (v - st.mean) / st.stddev;
}

// ---------------------------------------------------------------------------
// Datasets on disk

struct Dataset {
  std::vector<InstanceSeries> instances;
  /// Raw exogenous observations keyed by region id; descendants inherit them.
  std::map<std::string, std::vector<ExogenousRecord>> exogenous;
  /// Ground-truth archetype per synthetic user.
  std::map<std::string, int> user_labels;
  bool normalized = false;

  const InstanceSeries* find(const std::string& id) const {
    for (const auto& s : instances) {
      if (s.instance_id == id) return &s;
    }
    return nullptr;
  }
};

/// Region whose exogenous records apply to `id`: the nearest ancestor (or
/// itself) that has records.
inline std::optional<std::string> exogenous_region(const Dataset& ds, const std::string& id) {
  std::string cur = id;
  for (std::size_t guard = 0; guard < ds.instances.size() + 1; ++guard) {
    if (ds.exogenous.count(cur)) return cur;
    const InstanceSeries* s = ds.find(cur);
    if (!s || !s->parent_id) return std::nullopt;
    cur = *s->parent_id;
  }
  return std::nullopt;
}

inline std::string sanitize_filename(const std::string& id) {
  std::string out = id;
  for (char& c : out) {
    if (c == '/' || c == '\\' || c == ':' || c == ' ') c = '_';
  }
  return out;
}

/// Writes manifest.csv, series/<id>.csv, exogenous.csv and (if present) labels.csv.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "series");
  std::ostringstream manifest;
  manifest << "instance_id,level,parent_id,frequency\n";
  for (const auto& s : ds.instances) {
    manifest << s.instance_id << ',' << to_string(s.level) << ',' << s.parent_id.value_or("") << ','
             << s.frequency_seconds << '\n';
    std::ostringstream body;
    body << "timestamp,value,filled\n";
    for (std::size_t i = 0; i < s.size(); ++i) {
      body << io::format_timestamp(s.timestamps[i]) << ',' << io::format_double(s.values[i]) << ','
           << ((!s.filled.empty() && s.filled[i]) ? 1 : 0) << '\n';
    }
    io::write_text(dir / "series" / (sanitize_filename(s.instance_id) + ".csv"), body.str());
  }
  io::write_text(dir / "manifest.csv", manifest.str());

  std::ostringstream exo;
  exo << "timestamp,region_id,weather_label,temp_max,temp_min\n";
  for (const auto& [region, recs] : ds.exogenous) {
    for (const auto& r : recs) {
      exo << io::format_timestamp(r.timestamp) << ',' << region << ',' << r.weather << ','
          << io::format_double(r.temp_max) << ',' << io::format_double(r.temp_min) << '\n';
    }
  }
  io::write_text(dir / "exogenous.csv", exo.str());

  if (!ds.user_labels.empty()) {
    std::ostringstream labels;
    labels << "user_id,label\n";
    for (const auto& [id, l] : ds.user_labels) labels << id << ',' << l << '\n';
    io::write_text(dir / "labels.csv", labels.str());
  }
}

inline std::vector<ExogenousRecord> parse_exogenous_rows(const io::CsvTable& t, const std::string& file,
                                                          const std::string& region_filter,
                                                          std::map<std::string, std::vector<ExogenousRecord>>* all) {
  const int c_ts = t.require_column("timestamp", file);
  const int c_region = t.require_column("region_id", file);
  const int c_weather = t.require_column("weather_label", file);
  const int c_max = t.require_column("temp_max", file);
  const int c_min = t.require_column("temp_min", file);
  std::vector<ExogenousRecord> out;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto& row = t.rows[r];
    if (row.size() < t.header.size()) {
      throw IngestionError(file + ": short row " + std::to_string(r), static_cast<long>(r));
    }
    ExogenousRecord rec;
    if (!io::parse_timestamp(row[c_ts], rec.timestamp) || !io::parse_double(row[c_max], rec.temp_max) ||
        !io::parse_double(row[c_min], rec.temp_min)) {
      throw IngestionError(file + ": malformed row " + std::to_string(r), static_cast<long>(r));
    }
    rec.weather = row[c_weather];
    if (all) {
      (*all)[row[c_region]].push_back(rec);
    } else if (row[c_region] == region_filter) {
      out.push_back(rec);
    }
  }
  return out;
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.csv";
  if (!fs::exists(manifest_path)) throw SchemaError("no manifest.csv in " + dir.string());
  const io::CsvTable m = io::read_csv(manifest_path);
  const int c_id = m.require_column("instance_id", manifest_path.string());
  const int c_level = m.require_column("level", manifest_path.string());
  const int c_parent = m.require_column("parent_id", manifest_path.string());
  const int c_freq = m.require_column("frequency", manifest_path.string());
  Dataset ds;
  for (const auto& row : m.rows) {
    InstanceSeries s;
    s.instance_id = row.at(c_id);
    s.level = level_from_string(row.at(c_level));
    if (!row.at(c_parent).empty()) s.parent_id = row.at(c_parent);
    long long f = 0;
    if (!io::parse_int(row.at(c_freq), f)) throw SchemaError("bad frequency for " + s.instance_id);
    s.frequency_seconds = f;
    const fs::path sp = dir / "series" / (sanitize_filename(s.instance_id) + ".csv");
    const io::CsvTable t = io::read_csv(sp);
    const int c_ts = t.require_column("timestamp", sp.string());
    const int c_val = t.require_column("value", sp.string());
    const int c_fill = t.column("filled");
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      std::int64_t ts = 0;
      double v = 0.0;
      if (!io::parse_timestamp(t.rows[r].at(c_ts), ts) || !io::parse_double(t.rows[r].at(c_val), v)) {
        throw IngestionError(sp.string() + ": malformed row " + std::to_string(r), static_cast<long>(r));
      }
      s.timestamps.push_back(ts);
      s.values.push_back(v);
      s.filled.push_back(c_fill >= 0 && t.rows[r].at(c_fill) == "1");
    }
    s.validate();
    ds.instances.push_back(std::move(s));
  }
  const fs::path exo_path = dir / "exogenous.csv";
  if (fs::exists(exo_path)) {
    parse_exogenous_rows(io::read_csv(exo_path), exo_path.string(), {}, &ds.exogenous);
  }
  const fs::path labels_path = dir / "labels.csv";
  if (fs::exists(labels_path)) {
    const io::CsvTable t = io::read_csv(labels_path);
    const int c_u = t.require_column("user_id", labels_path.string());
    const int c_l = t.require_column("label", labels_path.string());
    for (const auto& row : t.rows) {
      long long l = 0;
      if (!io::parse_int(row.at(c_l), l)) throw SchemaError("bad label for " + row.at(c_u));
      ds.user_labels[row.at(c_u)] = static_cast<int>(l);
    }
  }
  ds.normalized = fs::exists(dir / "split.json");
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic hierarchy

struct SynthConfig {
  int n_cities = 1;
  int districts_per_city = 4;
  int users_per_district = 8;
  /// Points per series.
  int length = 8640;
  std::int64_t frequency_seconds = 900;
  std::uint64_t seed = 0;
  /// Epoch seconds of the first point (2023-01-02 00:00, a Monday).
  std::int64_t start_epoch = 1672617600;
  /// Noise standard deviation relative to a user's base load.
  double noise = 0.03;

  void validate() const {
    if (n_cities < 1 || districts_per_city < 1 || users_per_district < 1 || length < 1 ||
        frequency_seconds < 1) {
      throw ConfigError("synthetic generator counts, length and frequency must be positive");
    }
  }
};

/// Number of synthetic load archetypes (labels 0..3).
inline constexpr int kSynthArchetypes = 4;

namespace detail {

inline double bump(double hour, double center, double width) {
  double d = std::abs(hour - center);
  d = std::min(d, 24.0 - d);
  return std::exp(-0.5 * (d / width) * (d / width));
}

// Normalized load shape of each archetype at local hour `h` on weekday `dow`
// (0 = Monday).
inline double archetype_shape(int archetype, double h, int dow) {
  const bool weekend = dow >= 5;
  switch (archetype) {
    case 0:  // residential: morning and evening peaks
      return 0.35 + 0.55 * bump(h, 7.5, 1.3) + 0.9 * bump(h, 19.5, 2.0) + (weekend ? 0.15 * bump(h, 13.0, 3.0) : 0.0);
    case 1:  // industrial: weekday daytime plateau
      return weekend ? 0.3 : 0.25 + 1.1 / (1.0 + std::exp(-(h - 7.5) * 2.0)) / (1.0 + std::exp((h - 17.5) * 2.0));
    case 2:  // commercial: late-morning to evening, all week
      return 0.3 + 0.9 / (1.0 + std::exp(-(h - 10.0) * 1.5)) / (1.0 + std::exp((h - 21.0) * 1.5)) * (weekend ? 1.2 : 1.0);
    default:  // night-shift / storage charging
      return 0.3 + 0.9 * bump(h, 2.5, 2.0);
  }
}

}  // namespace detail

/// Generates a city -> district -> user hierarchy. Users follow one of four
/// archetype profiles plus daily and weekly sinusoids, a temperature response
/// and noise. Districts and cities are exact sums of their children.
inline Dataset synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  Dataset ds;
  Rng rng(cfg.seed);
  const auto T = static_cast<std::size_t>(cfg.length);
  std::vector<std::int64_t> ts(T);
  for (std::size_t t = 0; t < T; ++t) ts[t] = cfg.start_epoch + static_cast<std::int64_t>(t) * cfg.frequency_seconds;

  const std::array<const char*, 3> weather = {"sunny", "cloudy", "rainy"};
  for (int c = 0; c < cfg.n_cities; ++c) {
    const std::string city_id = "c" + std::to_string(c);

    // Regional weather: daily mean temperature as AR(1) around a seasonal
    // drift; weather label as a 3-hourly Markov chain.
    std::vector<ExogenousRecord> exo(T);
    std::vector<double> temp(T);
    const double climate = 14.0 + 6.0 * uniform01(rng);
    double day_anom = 0.0;
    int state = 0;
    std::int64_t last_day = -1, last_block = -1;
    for (std::size_t t = 0; t < T; ++t) {
      const std::int64_t secs = ts[t] - cfg.start_epoch;
      const std::int64_t day = secs / 86400;
      const std::int64_t block = secs / (3 * 3600);
      if (day != last_day) {
        day_anom = 0.7 * day_anom + 2.0 * normal01(rng);
        last_day = day;
      }
      if (block != last_block) {
        const double u = uniform01(rng);
        if (u < 0.25) state = static_cast<int>(uniform_index(rng, weather.size()));
        last_block = block;
      }
      const double hour = static_cast<double>(secs % 86400) / 3600.0;
      const double season = 6.0 * std::sin(6.283185307179586 * static_cast<double>(day) / 365.0);
      const double diurnal = 5.0 * std::sin(6.283185307179586 * (hour - 9.0) / 24.0);
      temp[t] = climate + season + day_anom + diurnal - (state == 2 ? 3.0 : 0.0);
      exo[t].timestamp = ts[t];
      exo[t].weather = weather[static_cast<std::size_t>(state)];
      exo[t].temp_max = std::round((temp[t] + 1.5) * 10.0) / 10.0;
      exo[t].temp_min = std::round((temp[t] - 1.5) * 10.0) / 10.0;
    }
    ds.exogenous[city_id] = exo;

    InstanceSeries city;
    city.instance_id = city_id;
    city.level = Level::city;
    city.timestamps = ts;
    city.values.assign(T, 0.0);
    city.filled.assign(T, false);
    city.frequency_seconds = cfg.frequency_seconds;
    std::vector<InstanceSeries> districts, users;

    for (int d = 0; d < cfg.districts_per_city; ++d) {
      InstanceSeries dist;
      dist.instance_id = city_id + "_d" + std::to_string(d);
      dist.level = Level::district;
      dist.parent_id = city_id;
      dist.timestamps = ts;
      dist.values.assign(T, 0.0);
      dist.filled.assign(T, false);
      dist.frequency_seconds = cfg.frequency_seconds;
      for (int u = 0; u < cfg.users_per_district; ++u) {
        InstanceSeries user;
        user.instance_id = dist.instance_id + "_u" + std::to_string(u);
        user.level = Level::user;
        user.parent_id = dist.instance_id;
        user.timestamps = ts;
        user.filled.assign(T, false);
        user.frequency_seconds = cfg.frequency_seconds;
        const int archetype = static_cast<int>(uniform_index(rng, kSynthArchetypes));
        const double base = 1.0 + 4.0 * uniform01(rng);
        const double phase_shift = 1.0 * (uniform01(rng) - 0.5);
        const double daily_amp = 0.15 * uniform01(rng);
        const double daily_phase = 6.283185307179586 * uniform01(rng);
        const double weekly_amp = 0.1 * uniform01(rng);
        const double weekly_phase = 6.283185307179586 * uniform01(rng);
        const double cooling = 0.02 + 0.04 * uniform01(rng);
        const double heating = 0.01 + 0.03 * uniform01(rng);
        user.values.resize(T);
        for (std::size_t t = 0; t < T; ++t) {
          const std::int64_t secs = ts[t] - cfg.start_epoch;
          const double hour = std::fmod(static_cast<double>(secs % 86400) / 3600.0 + phase_shift + 24.0, 24.0);
          const int dow = static_cast<int>((secs / 86400) % 7);
          const double days = static_cast<double>(secs) / 86400.0;
          double shape = detail::archetype_shape(archetype, hour, dow);
          shape += daily_amp * std::sin(6.283185307179586 * days + daily_phase);
          shape += weekly_amp * std::sin(6.283185307179586 * days / 7.0 + weekly_phase);
          const double weather_effect = 1.0 + cooling * std::max(0.0, temp[t] - 22.0) +
                                        heating * std::max(0.0, 10.0 - temp[t]);
          const double v = base * shape * weather_effect + cfg.noise * base * normal01(rng);
          user.values[t] = std::max(0.01 * base, v);
        }
        for (std::size_t t = 0; t < T; ++t) dist.values[t] += user.values[t];
        ds.user_labels[user.instance_id] = archetype;
        users.push_back(std::move(user));
      }
      for (std::size_t t = 0; t < T; ++t) city.values[t] += dist.values[t];
      districts.push_back(std::move(dist));
    }
    ds.instances.push_back(std::move(city));
    for (auto& d : districts) ds.instances.push_back(std::move(d));
    for (auto& u : users) ds.instances.push_back(std::move(u));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Public ISO load datasets

enum class IsoSchema { CAISO, NYISO, ISONE, PJM };

inline IsoSchema iso_schema_from_string(const std::string& s) {
  if (s == "CAISO") return IsoSchema::CAISO;
  if (s == "NYISO") return IsoSchema::NYISO;
  if (s == "ISONE") return IsoSchema::ISONE;
  if (s == "PJM") return IsoSchema::PJM;
  throw ConfigError("unknown ISO schema '" + s + "'", "data.iso_schema");
}

/// Name of the instance-id column for each dataset.
inline const char* iso_id_column(IsoSchema s) {
  switch (s) {
    case IsoSchema::CAISO: return "area_id";
    case IsoSchema::NYISO: return "zone_name";
    case IsoSchema::ISONE: return "state";
    case IsoSchema::PJM: return "zone";
  }
  return "";
}

namespace detail {

struct RawPoint {
  std::int64_t ts;
  std::optional<double> value;
  std::string file;
  long row;
};

inline bool is_missing_token(const std::string& s) {
  return s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == "null" || s == "-";
}

}  // namespace detail

/// Loads every *.csv file of `dir` with columns (timestamp, <id column>,
/// load_mw). Ids of the form "parent/child" denote children; bare ids are
/// top-level aggregates. An aggregate referenced only by children is built as
/// the sum of its children. Missing readings are forward- then back-filled
/// and flagged; timestamp gaps that are whole multiples of the frequency are
/// filled the same way.
inline std::vector<InstanceSeries> load_iso_dataset(const std::filesystem::path& dir, IsoSchema schema) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw SchemaError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".csv") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw SchemaError("no files matched schema in " + dir.string());

  std::map<std::string, std::vector<detail::RawPoint>> raw;
  std::vector<std::string> order;
  for (const auto& f : files) {
    const io::CsvTable t = io::read_csv(f);
    const std::string name = f.filename().string();
    const int c_ts = t.require_column("timestamp", name);
    const int c_id = t.require_column(iso_id_column(schema), name);
    const int c_load = t.require_column("load_mw", name);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      const auto& row = t.rows[r];
      if (row.size() < t.header.size()) {
        throw IngestionError(name + ": row " + std::to_string(r) + " has too few fields", static_cast<long>(r));
      }
      detail::RawPoint p{0, std::nullopt, name, static_cast<long>(r)};
      if (!io::parse_timestamp(row[c_ts], p.ts)) {
        throw IngestionError(name + ": unparseable timestamp at row " + std::to_string(r), static_cast<long>(r));
      }
      if (!detail::is_missing_token(row[c_load])) {
        double v = 0.0;
        if (!io::parse_double(row[c_load], v) || !std::isfinite(v)) {
          throw IngestionError(name + ": bad load_mw at row " + std::to_string(r), static_cast<long>(r));
        }
        p.value = v;
      }
      const std::string& id = row[c_id];
      if (id.empty()) throw IngestionError(name + ": empty id at row " + std::to_string(r), static_cast<long>(r));
      if (!raw.count(id)) order.push_back(id);
      raw[id].push_back(std::move(p));
    }
  }

  std::map<std::string, InstanceSeries> built;
  for (const auto& id : order) {
    const auto& pts = raw[id];
    for (std::size_t i = 1; i < pts.size(); ++i) {
      if (pts[i].ts <= pts[i - 1].ts) {
        throw IngestionError(pts[i].file + ": non-monotone timestamp for '" + id + "' at row " +
                                 std::to_string(pts[i].row),
                             pts[i].row);
      }
    }
    if (pts.size() < 2) throw IngestionError("series '" + id + "' has fewer than 2 rows", pts.empty() ? -1 : pts[0].row);
    std::int64_t freq = pts[1].ts - pts[0].ts;
    for (std::size_t i = 1; i < pts.size(); ++i) freq = std::min(freq, pts[i].ts - pts[i - 1].ts);
    InstanceSeries s;
    s.instance_id = id;
    s.frequency_seconds = freq;
    std::vector<std::optional<double>> vals;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i > 0) {
        const std::int64_t gap = pts[i].ts - pts[i - 1].ts;
        if (gap % freq != 0) {
          throw IngestionError(pts[i].file + ": irregular spacing for '" + id + "' at row " +
                                   std::to_string(pts[i].row),
                               pts[i].row);
        }
        for (std::int64_t k = 1; k < gap / freq; ++k) {
          s.timestamps.push_back(pts[i - 1].ts + k * freq);
          vals.push_back(std::nullopt);
        }
      }
      s.timestamps.push_back(pts[i].ts);
      vals.push_back(pts[i].value);
    }
    s.values.assign(vals.size(), 0.0);
    s.filled.assign(vals.size(), false);
    std::optional<double> last;
    for (std::size_t i = 0; i < vals.size(); ++i) {
      if (vals[i]) {
        last = vals[i];
        s.values[i] = *vals[i];
      } else {
        s.filled[i] = true;
        if (last) s.values[i] = *last;
      }
    }
    if (!last) throw IngestionError("series '" + id + "' has no valid readings", -1);
    // Back-fill the leading gap with the first valid reading.
    const auto first_valid = static_cast<std::size_t>(
        std::find_if(vals.begin(), vals.end(), [](const auto& v) { return v.has_value(); }) - vals.begin());
    for (std::size_t i = 0; i < first_valid; ++i) s.values[i] = *vals[first_valid];
    const auto slash = id.rfind('/');
    if (slash != std::string::npos) s.parent_id = id.substr(0, slash);
    built[id] = std::move(s);
  }

  // Synthesize aggregates that appear only as parents.
  bool added = true;
  while (added) {
    added = false;
    std::vector<std::string> missing;
    for (const auto& [id, s] : built) {
      if (s.parent_id && !built.count(*s.parent_id)) missing.push_back(*s.parent_id);
    }
    std::sort(missing.begin(), missing.end());
    missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
    for (const auto& pid : missing) {
      InstanceSeries agg;
      agg.instance_id = pid;
      const auto slash = pid.rfind('/');
      if (slash != std::string::npos) agg.parent_id = pid.substr(0, slash);
      std::vector<const InstanceSeries*> kids;
      for (const auto& [id, s] : built) {
        if (s.parent_id == pid) kids.push_back(&s);
      }
      agg.frequency_seconds = kids.front()->frequency_seconds;
      std::int64_t lo = kids.front()->timestamps.front(), hi = kids.front()->timestamps.back();
      for (const auto* k : kids) {
        if (k->frequency_seconds != agg.frequency_seconds) {
          throw IngestionError("children of '" + pid + "' have different frequencies", -1);
        }
        lo = std::max(lo, k->timestamps.front());
        hi = std::min(hi, k->timestamps.back());
      }
      for (std::int64_t t = lo; t <= hi; t += agg.frequency_seconds) {
        double v = 0.0;
        bool f = false;
        for (const auto* k : kids) {
          const auto idx = static_cast<std::size_t>((t - k->timestamps.front()) / k->frequency_seconds);
          v += k->values[idx];
          f = f || k->filled[idx];
        }
        agg.timestamps.push_back(t);
        agg.values.push_back(v);
        agg.filled.push_back(f);
      }
      built[pid] = std::move(agg);
      added = true;
    }
  }

  std::vector<InstanceSeries> out;
  for (auto& [id, s] : built) {
    const auto depth = static_cast<std::size_t>(std::count(id.begin(), id.end(), '/'));
    s.level = depth == 0 ? Level::city : depth == 1 ? Level::district : Level::user;
    out.push_back(std::move(s));
  }
  // Parents before children; stable by id within a level.
  std::stable_sort(out.begin(), out.end(), [](const InstanceSeries& a, const InstanceSeries& b) {
    return static_cast<int>(a.level) < static_cast<int>(b.level);
  });
  for (const auto& s : out) s.validate();
  return out;
}

/// Loads the exogenous sidecar CSV (timestamp, region_id, weather_label,
/// temp_max, temp_min), grouped by region.
inline std::map<std::string, std::vector<ExogenousRecord>> load_exogenous_sidecar(const std::filesystem::path& path) {
  std::map<std::string, std::vector<ExogenousRecord>> out;
  parse_exogenous_rows(io::read_csv(path), path.string(), {}, &out);
  for (auto& [region, recs] : out) {
    std::stable_sort(recs.begin(), recs.end(),
                     [](const ExogenousRecord& a, const ExogenousRecord& b) { return a.timestamp < b.timestamp; });
  }
  return out;
}

}  // namespace powerpm
