#include "powerpm/corpus.hpp"
#include "powerpm/data.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace powerpm;
namespace fs = std::filesystem;

namespace {

const fs::path kFixtures = POWERPM_FIXTURES;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("powerpm_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

InstanceSeries ramp(std::size_t n) {
  InstanceSeries s;
  s.instance_id = "x";
  s.level = Level::city;
  s.frequency_seconds = 60;
  for (std::size_t i = 0; i < n; ++i) {
    s.timestamps.push_back(static_cast<std::int64_t>(i) * 60);
    s.values.push_back(static_cast<double>(i));
  }
  return s;
}

const InstanceSeries& by_id(const std::vector<InstanceSeries>& v, const std::string& id) {
  for (const auto& s : v) {
    if (s.instance_id == id) return s;
  }
  throw std::runtime_error("missing " + id);
}

void expect_children_sum(const std::vector<InstanceSeries>& all) {
  for (const auto& parent : all) {
    std::vector<const InstanceSeries*> kids;
    for (const auto& s : all) {
      if (s.parent_id == parent.instance_id) kids.push_back(&s);
    }
    if (kids.empty()) continue;
    for (std::size_t t = 0; t < parent.size(); ++t) {
      double sum = 0.0;
      for (const auto* k : kids) sum += k->values[t];
      ASSERT_EQ(parent.values[t], sum) << parent.instance_id << " at " << t;
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Synthetic generator

TEST(Synth, SmallHierarchyHasExactSums) {
  SynthConfig c;
  c.n_cities = 1;
  c.districts_per_city = 2;
  c.users_per_district = 3;
  c.length = 672;
  c.seed = 11;
  const Dataset ds = synth_generate(c);
  ASSERT_EQ(ds.instances.size(), 9u);
  expect_children_sum(ds.instances);
  const auto& d0 = by_id(ds.instances, "c0_d0");
  int users = 0;
  for (const auto& s : ds.instances) users += s.parent_id == d0.instance_id;
  EXPECT_EQ(users, 3);
  for (const auto& s : ds.instances) EXPECT_NO_THROW(s.validate());
}

TEST(Synth, DeterministicPerSeed) {
  SynthConfig c;
  c.length = 500;
  c.seed = 42;
  const Dataset a = synth_generate(c), b = synth_generate(c);
  ASSERT_EQ(a.instances.size(), b.instances.size());
  for (std::size_t i = 0; i < a.instances.size(); ++i) {
    EXPECT_EQ(a.instances[i].values, b.instances[i].values);
    EXPECT_EQ(a.instances[i].timestamps, b.instances[i].timestamps);
  }
  c.seed = 43;
  EXPECT_NE(synth_generate(c).instances.back().values, a.instances.back().values);
}

TEST(Synth, RejectsNonPositiveCounts) {
  SynthConfig c;
  c.users_per_district = 0;
  EXPECT_THROW(synth_generate(c), ConfigError);
  c = {};
  c.length = 0;
  EXPECT_THROW(synth_generate(c), ConfigError);
}

TEST(Synth, DefaultCorpusShapeAndLabels) {
  SynthConfig c;
  c.length = 200;
  const Dataset ds = synth_generate(c);
  EXPECT_EQ(ds.instances.size(), 1u + 4u + 32u);
  EXPECT_EQ(ds.user_labels.size(), 32u);
  for (const auto& [_, l] : ds.user_labels) {
    EXPECT_GE(l, 0);
    EXPECT_LT(l, kSynthArchetypes);
  }
  EXPECT_FALSE(ds.exogenous.empty());
}

TEST(Synth, DatasetRoundTripsThroughDisk) {
  SynthConfig c;
  c.districts_per_city = 2;
  c.users_per_district = 2;
  c.length = 300;
  const Dataset ds = synth_generate(c);
  const fs::path dir = scratch_dir("roundtrip");
  write_dataset(dir, ds);
  const Dataset back = read_dataset(dir);
  ASSERT_EQ(back.instances.size(), ds.instances.size());
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    EXPECT_EQ(back.instances[i].instance_id, ds.instances[i].instance_id);
    EXPECT_EQ(back.instances[i].level, ds.instances[i].level);
    EXPECT_EQ(back.instances[i].parent_id, ds.instances[i].parent_id);
    EXPECT_EQ(back.instances[i].values, ds.instances[i].values);
    EXPECT_EQ(back.instances[i].timestamps, ds.instances[i].timestamps);
  }
  EXPECT_EQ(back.user_labels, ds.user_labels);
  EXPECT_EQ(back.exogenous.size(), ds.exogenous.size());
  EXPECT_FALSE(back.normalized);
}

// ---------------------------------------------------------------------------
// Exogenous encoding

TEST(Exogenous, WeatherCodeIsVocabularyIndex) {
  ExogenousCodec codec;
  codec.weather_vocabulary = {"sunny", "rainy", "cloudy"};
  EXPECT_EQ(codec.weather_code("sunny"), 0);
  EXPECT_EQ(codec.weather_code("cloudy"), 2);
  try {
    codec.weather_code("hail");
    FAIL() << "expected EncodingError";
  } catch (const EncodingError& e) {
    EXPECT_NE(std::string(e.what()).find("hail"), std::string::npos);
  }
}

TEST(Exogenous, TemperatureBinsClampToRange) {
  EXPECT_EQ(temperature_bin(25.4, -20, 45), 45);
  EXPECT_EQ(temperature_bin(99.0, -20, 45), 65);
  EXPECT_EQ(temperature_bin(-80.0, -20, 45), 0);
  EXPECT_EQ(temperature_bin(-19.5, -20, 45), 0);
  EXPECT_EQ(temperature_bin(45.0, -20, 45), 65);
}

TEST(Exogenous, DecodedBinContainsValue) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double t = -20.0 + 65.999 * uniform01(rng);
    const int code = temperature_bin(t, -20, 45);
    const auto [lo, hi] = temperature_bin_range(code, -20);
    EXPECT_LE(lo, t);
    EXPECT_LT(t, hi);
  }
}

TEST(Exogenous, EncodeProducesInRangeCodes) {
  ExogenousCodec codec;
  const ExogenousSchema schema = codec.schema();
  EXPECT_EQ(schema.count(), 3);
  EXPECT_EQ(schema.total_rows(), 4 + 66 + 66);
  std::vector<ExogenousRecord> raw{{0, "rainy", 30.2, 12.9}, {1, "snowy", -40, -50}, {2, "sunny", 50, 44.9}};
  const CodeMatrix codes = encode_exogenous(raw, codec);
  ASSERT_EQ(codes.rows(), 3);
  for (int t = 0; t < 3; ++t) {
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(codes(t, k), 0);
      EXPECT_LT(codes(t, k), schema.variables[k].cardinality);
    }
  }
  EXPECT_EQ(codes(0, 0), 2);
  EXPECT_EQ(codes(0, 1), 50);
  EXPECT_EQ(codes(1, 2), 0);
  EXPECT_EQ(codes(2, 1), 65);
}

// ---------------------------------------------------------------------------
// Windows

TEST(Windows, Examples) {
  EXPECT_EQ(slice_windows(ramp(10), 10, 1).size(), 1u);
  const auto w = slice_windows(ramp(10), 4, 3);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[0].offset, 0u);
  EXPECT_EQ(w[1].offset, 3u);
  EXPECT_EQ(w[2].offset, 6u);
  EXPECT_EQ(w[2].values, (std::vector<double>{6, 7, 8, 9}));
  EXPECT_EQ(w[1].t_end - w[1].t_start, 3 * 60);
  EXPECT_TRUE(slice_windows(ramp(3), 4, 1).empty());
}

TEST(Windows, CountLawMatchesEnumeration) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    const std::size_t L = 1 + rng() % 300;
    const std::size_t Tw = 1 + rng() % L;
    const std::size_t stride = 1 + rng() % 50;
    std::size_t enumerated = 0;
    for (std::size_t off = 0; off + Tw <= L; off += stride) ++enumerated;
    EXPECT_EQ((L - Tw) / stride + 1, enumerated);
    EXPECT_EQ(slice_windows(ramp(L), Tw, stride).size(), enumerated);
  }
}

// ---------------------------------------------------------------------------
// Splits

TEST(Split, SixTwoTwoCounts) {
  const auto s = chronological_split(slice_windows(ramp(103), 4, 1));
  EXPECT_EQ(s.train.size(), 60u);
  EXPECT_EQ(s.val.size(), 20u);
  EXPECT_EQ(s.test.size(), 20u);
}

TEST(Split, FloorThenRemainderToTest) {
  const auto s = chronological_split(slice_windows(ramp(5), 1, 1));
  EXPECT_EQ(s.train.size(), 3u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Split, ChronologicalOrdering) {
  auto windows = slice_windows(ramp(80), 8, 3);
  std::reverse(windows.begin(), windows.end());
  const auto s = chronological_split(windows);
  for (const auto& a : s.train) {
    for (const auto& b : s.val) EXPECT_LT(a.t_start, b.t_start);
  }
  for (const auto& a : s.val) {
    for (const auto& b : s.test) EXPECT_LT(a.t_start, b.t_start);
  }
  EXPECT_LT(s.plan.train_last, s.plan.val_first);
  EXPECT_LT(s.plan.val_last, s.plan.test_first);
}

TEST(Split, TooFewWindowsFails) {
  EXPECT_THROW(chronological_split(slice_windows(ramp(2), 1, 1)), SplitError);
}

// ---------------------------------------------------------------------------
// ISO loaders

TEST(Iso, NyisoStatePlusElevenAreas) {
  const auto v = load_iso_dataset(kFixtures / "nyiso", IsoSchema::NYISO);
  ASSERT_EQ(v.size(), 12u);
  EXPECT_EQ(v.front().instance_id, "NYS");
  EXPECT_EQ(v.front().level, Level::city);
  int areas = 0;
  for (const auto& s : v) {
    EXPECT_EQ(s.frequency_seconds, 300);
    if (s.level == Level::district) {
      ++areas;
      EXPECT_EQ(s.parent_id, std::optional<std::string>("NYS"));
    }
  }
  EXPECT_EQ(areas, 11);
}

TEST(Iso, CaisoHourlyWithForwardFilledGap) {
  const auto v = load_iso_dataset(kFixtures / "caiso", IsoSchema::CAISO);
  ASSERT_EQ(v.size(), 4u);
  const auto& sce = by_id(v, "CA/SCE");
  EXPECT_EQ(sce.frequency_seconds, 3600);
  EXPECT_TRUE(sce.filled[7]);
  EXPECT_EQ(sce.values[7], sce.values[6]);
  EXPECT_EQ(std::count(sce.filled.begin(), sce.filled.end(), true), 1);
}

TEST(Iso, IsoneAggregateIsSumOfStates) {
  const auto v = load_iso_dataset(kFixtures / "isone", IsoSchema::ISONE);
  ASSERT_EQ(v.size(), 7u);
  EXPECT_EQ(v.front().instance_id, "ISONE");
  expect_children_sum(v);
}

TEST(Iso, PjmMissingHourIsInsertedAndFlagged) {
  const auto v = load_iso_dataset(kFixtures / "pjm", IsoSchema::PJM);
  const auto& bge = by_id(v, "PJM/BGE");
  ASSERT_EQ(bge.size(), 48u);
  EXPECT_TRUE(bge.filled[10]);
  EXPECT_EQ(bge.values[10], bge.values[9]);
  EXPECT_EQ(bge.timestamps[10] - bge.timestamps[9], 3600);
}

TEST(Iso, DuplicateTimestampCitesRow) {
  try {
    load_iso_dataset(kFixtures / "caiso_duplicate", IsoSchema::CAISO);
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.row(), 6);
    EXPECT_NE(std::string(e.what()).find("row 6"), std::string::npos);
  }
}

TEST(Iso, EmptyDirectoryFails) {
  const fs::path dir = scratch_dir("empty");
  try {
    load_iso_dataset(dir, IsoSchema::PJM);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("no files matched schema"), std::string::npos);
  }
}

TEST(Iso, MissingColumnIsNamed) {
  const fs::path dir = scratch_dir("missing_col");
  std::ofstream(dir / "a.csv") << "timestamp,zone,load\n2023-01-01 00:00,PJM/AE,1\n";
  try {
    load_iso_dataset(dir, IsoSchema::PJM);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("load_mw"), std::string::npos);
  }
}

TEST(Iso, NonMonotoneTimestampFails) {
  const fs::path dir = scratch_dir("nonmono");
  std::ofstream(dir / "a.csv") << "timestamp,state,load_mw\n2023-01-01 02:00,ISONE/CT,1\n"
                                  "2023-01-01 03:00,ISONE/CT,1\n2023-01-01 01:00,ISONE/CT,1\n";
  try {
    load_iso_dataset(dir, IsoSchema::ISONE);
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.row(), 2);
  }
}

TEST(Iso, SplitsAreChronologicalForEveryLoader) {
  const std::vector<std::pair<std::string, IsoSchema>> cases{
      {"caiso", IsoSchema::CAISO}, {"nyiso", IsoSchema::NYISO}, {"isone", IsoSchema::ISONE}, {"pjm", IsoSchema::PJM}};
  for (const auto& [dir, schema] : cases) {
    for (const auto& s : load_iso_dataset(kFixtures / dir, schema)) {
      const auto split = chronological_split(slice_windows(s, 8, 2));
      ASSERT_FALSE(split.train.empty());
      EXPECT_LT(split.train.back().t_start, split.val.front().t_start) << dir;
      EXPECT_LT(split.val.back().t_start, split.test.front().t_start) << dir;
    }
  }
}

TEST(Iso, SidecarExogenousAttachesToDescendants) {
  Dataset ds;
  ds.instances = load_iso_dataset(kFixtures / "caiso", IsoSchema::CAISO);
  ds.exogenous = load_exogenous_sidecar(kFixtures / "caiso_exogenous.csv");
  EXPECT_EQ(exogenous_region(ds, "CA/PGE"), std::optional<std::string>("CA"));
  CorpusOptions opt;
  opt.window = 12;
  opt.stride = 4;
  const Corpus c = build_corpus(ds, opt);
  EXPECT_EQ(c.schema.count(), 3);
  for (const auto& codes : c.codes) EXPECT_EQ(codes.rows(), 48);
}

// ---------------------------------------------------------------------------
// Corpus

TEST(Corpus, NormalizesWithTrainStatistics) {
  SynthConfig sc;
  sc.districts_per_city = 2;
  sc.users_per_district = 2;
  sc.length = 96 * 20;
  const Dataset ds = synth_generate(sc);
  CorpusOptions opt;
  opt.window = 96;
  opt.stride = 48;
  const Corpus c = build_corpus(ds, opt);
  ASSERT_GE(c.train_offsets.size(), 3u);
  const std::int64_t train_end =
      c.plan.train_last + static_cast<std::int64_t>(opt.window - 1) * c.frequency;
  for (const auto& s : c.instances) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < s.size() && s.timestamps[t] <= train_end; ++t) sum += s.values[t], ++n;
    for (std::size_t t = 0; t < n; ++t) sq += (s.values[t] - sum / n) * (s.values[t] - sum / n);
    EXPECT_NEAR(sum / n, 0.0, 1e-9);
    EXPECT_NEAR(sq / n, 1.0, 1e-9);
  }
  for (std::size_t a : c.train_offsets) {
    for (std::size_t b : c.val_offsets) EXPECT_LT(a, b);
  }
  for (std::size_t a : c.val_offsets) {
    for (std::size_t b : c.test_offsets) EXPECT_LT(a, b);
  }
}

TEST(Corpus, DropsWindowsWithTooManyFilledPoints) {
  SynthConfig sc;
  sc.districts_per_city = 1;
  sc.users_per_district = 1;
  sc.length = 400;
  Dataset ds = synth_generate(sc);
  for (auto& s : ds.instances) s.filled.assign(s.size(), false);
  for (std::size_t t = 0; t < 30; ++t) ds.instances.back().filled[t] = true;
  CorpusOptions opt;
  opt.window = 100;
  opt.stride = 50;
  const Corpus c = build_corpus(ds, opt);
  std::set<std::size_t> all(c.train_offsets.begin(), c.train_offsets.end());
  EXPECT_FALSE(all.count(0));   // 30% filled
  EXPECT_TRUE(all.count(50));  // no filled points
}
