#include "powerpm/pretrain.hpp"

#include "gradcheck.hpp"
#include "tiny_world.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace powerpm;
using powerpm::testkit::tiny_state;
using powerpm::testkit::tiny_world;

namespace {

PretrainConfig quick_config(int steps) {
  PretrainConfig cfg;
  cfg.steps = steps;
  cfg.accumulation = 2;
  cfg.mse_batch = 3;
  cfg.lr = 3e-3;
  cfg.contrastive.delta = 8;
  cfg.contrastive.batch = 4;
  cfg.seed = 17;
  return cfg;
}

std::vector<WindowKey> grid_pool(int nodes, int times, std::int64_t step) {
  std::vector<WindowKey> pool;
  for (int n = 0; n < nodes; ++n) {
    for (int t = 0; t < times; ++t) pool.push_back({"n" + std::to_string(n), t * step});
  }
  return pool;
}

}  // namespace

TEST(Mask, DocumentedExamples) {
  Rng rng(1);
  const MaskSpec c = make_mask(10, 0.4, 0.7, rng);
  EXPECT_TRUE(c.causal());
  EXPECT_EQ(c.masked_indices, (std::vector<int>{6, 7, 8, 9}));
  const MaskSpec r = make_mask(10, 0.4, 0.3, rng);
  EXPECT_FALSE(r.causal());
  ASSERT_EQ(r.masked_indices.size(), 4u);
  EXPECT_EQ(std::set<int>(r.masked_indices.begin(), r.masked_indices.end()).size(), 4u);
  for (int j : r.masked_indices) {
    EXPECT_GE(j, 0);
    EXPECT_LT(j, 10);
  }
  EXPECT_TRUE(std::is_sorted(r.masked_indices.begin(), r.masked_indices.end()));
}

TEST(Mask, CardinalitySuffixAndBranchFraction) {
  Rng rng(2);
  int causal = 0;
  for (int t = 0; t < 10000; ++t) {
    const int np = 2 + static_cast<int>(uniform_index(rng, 40));
    const MaskSpec m = sample_mask(np, 0.4, rng);
    const auto expect = static_cast<std::size_t>(std::lround(0.4 * np));
    ASSERT_EQ(m.masked_indices.size(), expect);
    if (m.causal()) {
      ++causal;
      for (std::size_t i = 0; i < expect; ++i) {
        ASSERT_EQ(m.masked_indices[i], np - static_cast<int>(expect) + static_cast<int>(i));
      }
    }
  }
  const double frac = causal / 10000.0;
  EXPECT_GE(frac, 0.48);
  EXPECT_LE(frac, 0.52);
}

TEST(Mask, RandomOnlyNeverCausal) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) EXPECT_FALSE(sample_mask(27, 0.4, rng, true).causal());
}

TEST(Mask, NothingToMaskIsMaskError) {
  Rng rng(4);
  EXPECT_THROW(make_mask(1, 0.4, 0.9, rng), MaskError);
  EXPECT_THROW(make_mask(10, 0.0, 0.9, rng), MaskError);
  EXPECT_THROW(make_mask(10, 1.0, 0.9, rng), MaskError);
}

TEST(Stitch, DisjointPatchesAreIdentity) {
  const PatchLayout layout(8, PatchConfig{4, 4});
  Matrix pred(2, 4);
  pred << 1, 2, 3, 4, 5, 6, 7, 8;
  const Matrix s = stitch_patches(Var::constant(pred), layout).value();
  for (int t = 0; t < 8; ++t) EXPECT_EQ(s(0, t), t + 1.0);
}

TEST(Stitch, OverlapAveragesPredictions) {
  const PatchLayout layout(8, PatchConfig{4, 2});
  Matrix pred(3, 4);
  pred << 0, 1, 2, 3, 10, 11, 12, 13, 20, 21, 22, 23;
  const Matrix s = stitch_patches(Var::constant(pred), layout).value();
  EXPECT_DOUBLE_EQ(s(0, 0), 0.0);
  EXPECT_DOUBLE_EQ(s(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(s(0, 2), (2.0 + 10.0) / 2);
  EXPECT_DOUBLE_EQ(s(0, 3), (3.0 + 11.0) / 2);
  EXPECT_DOUBLE_EQ(s(0, 4), (12.0 + 20.0) / 2);
  EXPECT_DOUBLE_EQ(s(0, 7), 23.0);
}

TEST(Stitch, PaddingSlotsAreIgnored) {
  const PatchLayout layout(10, PatchConfig{4, 4});
  Matrix pred(3, 4);
  pred << 0, 1, 2, 3, 4, 5, 6, 7, 100, 100, 8, 9;
  const Matrix s = stitch_patches(Var::constant(pred), layout).value();
  EXPECT_DOUBLE_EQ(s(0, 8), 8.0);
  EXPECT_DOUBLE_EQ(s(0, 9), 9.0);
}

TEST(LossMse, Examples) {
  const std::vector<std::vector<double>> x{{0, 0}}, y{{2, 2}};
  EXPECT_DOUBLE_EQ(loss_mse(x, x), 0.0);
  EXPECT_DOUBLE_EQ(loss_mse(x, y), 4.0);
  EXPECT_DOUBLE_EQ(loss_mse(y, x), loss_mse(x, y));
  const std::vector<std::vector<double>> a{{1, -2, 3}, {0.5, 0, 1}}, b{{0, 1, 1}, {2, 2, 2}};
  std::vector<std::vector<double>> a2 = a, b2 = b;
  for (auto& r : a2) for (double& v : r) v *= 2;
  for (auto& r : b2) for (double& v : r) v *= 2;
  EXPECT_NEAR(loss_mse(a2, b2), 4 * loss_mse(a, b), 1e-12);
  EXPECT_THROW(loss_mse(x, std::vector<std::vector<double>>{{1, 2, 3}}), std::invalid_argument);
}

TEST(LossMse, DifferentiableVersionAgrees) {
  const std::vector<std::vector<double>> a{{1, -2, 3}, {0.5, 0, 1}}, b{{0, 1, 1}, {2, 2, 2}};
  std::vector<Var> pred;
  for (const auto& r : a) pred.push_back(Var::constant(Eigen::Map<const Eigen::RowVectorXd>(r.data(), 3)));
  EXPECT_NEAR(loss_mse(pred, b).item(), loss_mse(a, b), 1e-12);
}

TEST(Dvcl, IdenticalRepresentationsGiveLogB) {
  for (int B : {2, 8, 32}) {
    const Matrix z = Matrix::Constant(B, 6, 0.3);
    EXPECT_NEAR(loss_dvcl(Var::constant(z), Var::constant(z), 0.2).item(), std::log(B), 1e-6) << B;
  }
}

TEST(Dvcl, HandEvaluatedPair) {
  const Matrix a = Matrix::Identity(2, 2);
  EXPECT_NEAR(loss_dvcl(Var::constant(a), Var::constant(a), 1.0).item(), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)),
              1e-12);
  EXPECT_NEAR(loss_dvcl(Var::constant(a), Var::constant(a), 1.0).item(), 0.3133, 5e-5);
}

TEST(Dvcl, CloserPositiveLowersLoss) {
  Matrix a(3, 2), p(3, 2);
  a << 1, 0, 0, 1, 1, 1;
  double prev = std::numeric_limits<double>::infinity();
  for (double angle : {1.5, 1.0, 0.5, 0.1}) {
    p = a;
    p.row(0) << std::cos(angle), std::sin(angle);
    const double l = loss_dvcl(Var::constant(a), Var::constant(p), 0.5).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(Dvcl, ZeroNormIsNumericError) {
  Matrix a = Matrix::Identity(2, 3);
  a.row(1).setZero();
  EXPECT_THROW(loss_dvcl(Var::constant(a), Var::constant(Matrix::Identity(2, 3)), 0.2), NumericError);
}

TEST(Dvcl, GradientsMatchFiniteDifferences) {
  Var a = Var::parameter(Matrix::Random(4, 5));
  Var p = Var::parameter(Matrix::Random(4, 5));
  const auto rep = powerpm::testkit::check_gradients({{"a", a}, {"p", p}}, [&] { return loss_dvcl(a, p, 0.3); });
  EXPECT_LT(rep.max_rel_error, 1e-6) << rep.worst;
}

TEST(Sampler, ShiftContractAndDistinctAnchors) {
  const auto pool = grid_pool(6, 10, 900);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto s = sample_contrastive_batch(pool, 4, 2 * 900, rng);
    ASSERT_EQ(s.anchors.size(), 4u);
    ASSERT_EQ(s.positives.size(), 4u);
    std::set<WindowKey> seen(s.anchors.begin(), s.anchors.end());
    EXPECT_EQ(seen.size(), 4u);
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_EQ(s.positives[i].t_start - s.anchors[i].t_start, 2 * 900);
      EXPECT_EQ(s.positives[i].node, s.anchors[i].node);
      EXPECT_LE(s.positives[i].t_start, 9 * 900);
    }
  }
}

TEST(Sampler, PairOfAnchorsHasOneNegativeEach) {
  const auto pool = grid_pool(5, 4, 900);
  Rng rng(6);
  const auto s = sample_contrastive_batch(pool, 2, 900, rng);
  ASSERT_EQ(s.anchors.size(), 2u);
  EXPECT_NE(s.anchors[0], s.anchors[1]);
}

TEST(Sampler, SkipsAnchorsWithoutShiftAndRejectsTinyBatches) {
  // Only n0 has a shifted counterpart.
  std::vector<WindowKey> pool{{"n0", 0}, {"n0", 900}, {"n1", 0}, {"n2", 0}};
  Rng rng(7);
  EXPECT_THROW(sample_contrastive_batch(pool, 4, 900, rng), Error);
  EXPECT_THROW(sample_contrastive_batch(pool, 4, 9000, rng), Error);
}

TEST(Sampler, TemporalNegativesAddDistantSameInstanceWindows) {
  const auto pool = grid_pool(3, 40, 900);
  Rng rng(8);
  SamplerOptions opt;
  opt.temporal_negatives = true;
  int with_temporal = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = sample_contrastive_batch(pool, 6, 900, rng, opt);
    std::map<std::string, std::vector<std::int64_t>> by_node;
    for (const auto& a : s.anchors) by_node[a.node].push_back(a.t_start);
    for (const auto& [n, ts] : by_node) {
      if (ts.size() == 2 && std::llabs(ts[0] - ts[1]) >= 4 * 900) ++with_temporal;
    }
  }
  EXPECT_GT(with_temporal, 0);
}

TEST(Reconstruct, ShapeMatchesWindow) {
  const auto w = tiny_world();
  const EncoderState st = tiny_state(w.corpus);
  const WindowBatch b = w.corpus.snapshot(w.corpus.train_offsets[0], {1, 2});
  const auto xhat = reconstruct(b, &w.graph, st, ForwardFlags{});
  ASSERT_EQ(xhat.size(), b.size());
  for (const auto& v : xhat) {
    EXPECT_EQ(v.rows(), 1);
    EXPECT_EQ(v.cols(), 32);
  }
}

TEST(Reconstruct, CausalMaskDoesNotLeakSuffix) {
  const auto w = tiny_world();
  const EncoderState st = tiny_state(w.corpus);
  const PatchLayout layout(st.window, st.patching);
  Rng rng(9);
  const MaskSpec mask = make_mask(st.num_patches(), 0.4, 0.9, rng);
  ASSERT_TRUE(mask.causal());
  const auto hidden = masked_view(std::vector<double>(32, 1.0), layout, mask.masked_indices);
  for (bool hier : {false, true}) {
    const int target = w.corpus.index_of("c0_d1_u0");
    WindowBatch b = hier ? w.corpus.snapshot(w.corpus.train_offsets[3], {target})
                         : w.corpus.batch({target}, w.corpus.train_offsets[3]);
    const std::size_t i = hier ? static_cast<std::size_t>(target) : 0;
    b.masks[i] = mask;
    ForwardFlags f;
    f.use_hierarchy = hier;
    const Matrix before = reconstruct(b, hier ? &w.graph : nullptr, st, f)[i].value();
    for (std::size_t t = 0; t < 32; ++t) {
      if (hidden[t] == 0.0) b.x[i][t] += 100.0 * std::sin(static_cast<double>(t));
    }
    const Matrix after = reconstruct(b, hier ? &w.graph : nullptr, st, f)[i].value();
    for (std::size_t t = 0; t < 32; ++t) {
      if (hidden[t] == 0.0) {
        EXPECT_EQ(before(0, static_cast<Eigen::Index>(t)), after(0, static_cast<Eigen::Index>(t)));
      }
    }
  }
}

TEST(PretrainLoop, ZeroLambdaNeverEvaluatesContrastive) {
  const auto w = tiny_world();
  EncoderState st = tiny_state(w.corpus);
  PretrainConfig cfg = quick_config(5);
  cfg.lambda = 0.0;
  const auto r = pretrain_loop(cfg, w.corpus, &w.graph, st);
  EXPECT_EQ(r.dvcl_evaluations, 0);
  ASSERT_EQ(r.trace.size(), 5u);
  for (const auto& row : r.trace) {
    EXPECT_EQ(row.l_dvcl, 0.0);
    EXPECT_EQ(row.total, row.l_mse);
  }
}

TEST(PretrainLoop, SameSeedSameTraceAndParameters) {
  const auto w = tiny_world();
  EncoderState a = tiny_state(w.corpus), b = tiny_state(w.corpus);
  const auto cfg = quick_config(10);
  const auto ra = pretrain_loop(cfg, w.corpus, &w.graph, a);
  const auto rb = pretrain_loop(cfg, w.corpus, &w.graph, b);
  EXPECT_EQ(trace_csv(ra.trace), trace_csv(rb.trace));
  EXPECT_EQ(a.encoder_checksum(), b.encoder_checksum());
  EXPECT_EQ(ra.dvcl_evaluations, 10 * cfg.accumulation);
}

TEST(PretrainLoop, TraceCsvHeaderAndRows) {
  const auto w = tiny_world();
  EncoderState st = tiny_state(w.corpus);
  const auto r = pretrain_loop(quick_config(3), w.corpus, &w.graph, st);
  const std::string csv = trace_csv(r.trace);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,l_mse,l_dvcl,total,lr");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
  for (const auto& row : r.trace) EXPECT_NEAR(row.total, row.l_mse + row.l_dvcl, 1e-12);
}

TEST(PretrainLoop, ReducesMaskedReconstructionError) {
  const auto w = tiny_world();
  EncoderState st = tiny_state(w.corpus, 3, 16, 1, 1);
  ForwardFlags f;
  const double before = masked_reconstruction_mse(w.corpus, w.corpus.train_offsets, &w.graph, st, f, 0.4, 1);
  auto cfg = quick_config(60);
  cfg.lambda = 0.1;
  pretrain_loop(cfg, w.corpus, &w.graph, st);
  const double after = masked_reconstruction_mse(w.corpus, w.corpus.train_offsets, &w.graph, st, f, 0.4, 1);
  EXPECT_LT(after, before);
}

TEST(PretrainLoop, CheckpointCallbackCadence) {
  const auto w = tiny_world();
  EncoderState st = tiny_state(w.corpus);
  auto cfg = quick_config(6);
  cfg.checkpoint_every = 2;
  std::vector<int> seen;
  pretrain_loop(cfg, w.corpus, &w.graph, st, [&](int u, const EncoderState&) { seen.push_back(u); });
  EXPECT_EQ(seen, (std::vector<int>{2, 4, 6}));
}

TEST(PretrainConfig, Validation) {
  PretrainConfig cfg;
  cfg.accumulation = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PretrainConfig{};
  cfg.lambda = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = PretrainConfig{};
  cfg.contrastive.tau = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.lambda = 0;
  EXPECT_NO_THROW(cfg.validate());
}
