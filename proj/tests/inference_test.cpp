#include <gtest/gtest.h>

#include <cmath>

#include "svdl/inference.hpp"
#include "test_support.hpp"

using namespace svdl;
using namespace svdl::testing;

namespace {

Batch one_sequence(const ModelShape& shape, const std::vector<std::int32_t>& ids) {
  Batch b;
  b.size = 1;
  b.steps = ids.size();
  b.tokens = ids;
  b.lengths = {ids.size()};
  if (is_lm(shape.task)) {
    b.targets.assign(ids.size(), 0);
  } else {
    b.labels = {0};
  }
  return b;
}

std::vector<std::int32_t> random_ids(const ModelShape& shape, Rng& rng, std::size_t n) {
  std::vector<std::int32_t> ids(n);
  for (auto& t : ids) t = static_cast<std::int32_t>(rng.below(shape.vocab));
  return ids;
}

template <class T>
void expect_matches_reference(const PrunedModel<T>& pruned, const CompiledModel<T>& cm,
                              const std::vector<std::int32_t>& ids, double tol) {
  const auto& shape = pruned.model.shape;
  const auto fp = model_forward(pruned.model, draw_weights(pruned.model, NoiseMode::Deterministic, nullptr),
                                one_sequence(shape, ids));
  const auto fast = fast_forward<T>(cm, ids);
  ASSERT_EQ(fast.logits.rows(), fp.logits.rows());
  for (std::size_t r = 0; r < fp.logits.rows(); ++r)
    for (std::size_t k = 0; k < shape.classes; ++k) ASSERT_NEAR(fast.logits(r, k), fp.logits(r, k), tol);
  // surviving units carry the reference hidden state
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t u = 0; u < cm.units(); ++u) ASSERT_NEAR(fast.h[t][u], fp.lstm.steps[t].h(0, cm.hidden_units[u]), tol);
}

}  // namespace

TEST(Compiled, MatchesPrunedForwardOnRandomPrunings) {
  Rng rng(31);
  for (int inst = 0; inst < 40; ++inst) {
    const auto shape = random_shape(rng);
    const auto m = sparse_random_model(shape, rng);
    const auto pruned = apply_pruning(m, rng.uniform(0.0, 2.0));
    const auto ids = random_ids(shape, rng, 1 + rng.below(12));
    expect_matches_reference(pruned, compile(pruned), ids, 1e-6);
    expect_matches_reference(pruned, compile(pruned, false), ids, 1e-6);
  }
}

TEST(Compiled, FloatModelsWithinTolerance) {
  Rng rng(32);
  for (int inst = 0; inst < 20; ++inst) {
    const auto shape = random_shape(rng);
    const auto m = sparse_random_model<float>(shape, rng);
    const auto pruned = apply_pruning(m, rng.uniform(0.0, 2.0));
    expect_matches_reference(pruned, compile(pruned), random_ids(shape, rng, 10), 1e-5);
  }
}

TEST(Compiled, CountedMacsEqualAnalytic) {
  Rng rng(33);
  for (int inst = 0; inst < 30; ++inst) {
    const auto shape = random_shape(rng);
    const auto pruned = apply_pruning(sparse_random_model(shape, rng), rng.uniform(0.0, 2.0));
    const auto ids = random_ids(shape, rng, 9);
    for (bool exploit : {true, false}) {
      const auto cm = compile(pruned, exploit);
      std::uint64_t counted = 0;
      fast_forward<double>(cm, ids, {false, &counted});
      EXPECT_EQ(counted, analytic_macs(cm, ids));
    }
  }
}

TEST(Compiled, DenseReferenceCostsFullMatrices) {
  Rng rng(34);
  const auto cls = make_shape(Task::Classification, Variant::WGN, 3, 4, 9, 2);
  const auto pc = apply_pruning(sparse_random_model(cls, rng), 0.5);
  const std::vector<std::int32_t> ids = {1, 2, 3, 4, 5};
  EXPECT_EQ(analytic_macs(compile(pc, false), ids), 5u * 4 * 4 * (3 + 4) + 2 * 4);
  const auto lm = make_shape(Task::CharLM, Variant::WN, 0, 4, 6, 6);
  const auto pl = apply_pruning(sparse_random_model(lm, rng), 0.5);
  EXPECT_EQ(analytic_macs(compile(pl, false), ids), 5u * (4 * 4 * 4 + 4 * 4 + 6 * 4));
}

TEST(Compiled, NothingPrunedCostsTheSame) {
  Rng rng(35);
  for (const auto& shape : {make_shape(Task::Classification, Variant::WGN, 5, 6, 9, 2),
                            make_shape(Task::CharLM, Variant::WGN, 0, 6, 9, 9)}) {
    const auto pruned = apply_pruning(random_model<double>(shape, rng), 0.0);
    const auto ids = random_ids(shape, rng, 7);
    EXPECT_EQ(analytic_macs(compile(pruned), ids), analytic_macs(compile(pruned, false), ids));
  }
}

TEST(Compiled, ConstantGatesComputeNothingAndTraceTheirValue) {
  Rng rng(36);
  const auto shape = make_shape(Task::Classification, Variant::WGN, 3, 4, 7, 2);
  auto m = random_model<double>(shape, rng);
  m.params.z_gate[kGateF]->mean.fill(0.0);
  m.params.z_gate[kGateI]->mean[2] = 0.0;
  for (std::size_t j = 0; j < 4; ++j) m.params.b[kGateF].mean[j] = 0.3 * static_cast<double>(j);
  const auto pruned = apply_pruning(m, 0.0);
  const auto cm = compile(pruned);
  EXPECT_TRUE(cm.gates[kGateF].rows.empty());
  EXPECT_EQ(cm.gates[kGateI].rows.size(), 3u);
  const auto r = fast_forward<double>(cm, std::vector<std::int32_t>{1, 4, 6}, {true, nullptr});
  ASSERT_EQ(r.gate_trace.size(), 3u);
  for (const auto& step : r.gate_trace)
    for (std::size_t u = 0; u < cm.units(); ++u)
      EXPECT_NEAR(step[kGateF][u], 1.0 / (1.0 + std::exp(-0.3 * static_cast<double>(cm.hidden_units[u]))), 1e-12);
}

TEST(Compiled, InactiveUnitsAndTokensDropped) {
  Rng rng(37);
  const auto shape = make_shape(Task::Classification, Variant::WN, 3, 5, 7, 2);
  auto m = random_model<double>(shape, rng);
  m.params.z_h->mean[1] = 0.0;
  m.params.z_vocab->mean[3] = 0.0;
  const auto pruned = apply_pruning(m, 0.0);
  const auto cm = compile(pruned);
  EXPECT_EQ(cm.units(), 4u);
  EXPECT_EQ(cm.token_map[3], -1);
  EXPECT_EQ(cm.emb.rows(), 6u);
  expect_matches_reference(pruned, cm, {3, 0, 3, 6}, 1e-9);
}

TEST(Compiled, EmptyInputAndBadToken) {
  Rng rng(38);
  const auto shape = make_shape(Task::CharLM, Variant::W, 0, 3, 5, 5);
  const auto cm = compile(apply_pruning(random_model<double>(shape, rng), 0.05));
  const auto r = fast_forward<double>(cm, std::vector<std::int32_t>{});
  EXPECT_TRUE(r.h.empty());
  EXPECT_EQ(r.logits.size(), 0u);
  for (double v : r.h_final) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(fast_forward<double>(cm, std::vector<std::int32_t>{7}), ShapeError);
}

TEST(CompileRow, DenseOrSparseByDensity) {
  const std::vector<double> full = {0.0, 2.0, 0.0, 0.0, 3.0, 0.0};
  const std::vector<std::uint32_t> cols = {0, 1, 2, 3, 4, 5};
  const auto sparse = compile_row<double>(full, cols, true);
  EXPECT_FALSE(sparse.dense);
  EXPECT_EQ(sparse.macs(), 2u);
  const auto dense = compile_row<double>(full, cols, false);
  EXPECT_TRUE(dense.dense);
  EXPECT_EQ(dense.macs(), 6u);
  const std::vector<double> x = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(sparse.dot(x), 19.0);
  EXPECT_EQ(dense.dot(x), 19.0);
  const auto half = compile_row<double>(full, {1, 2, 4, 5}, true);
  EXPECT_TRUE(half.dense);
  EXPECT_EQ(half.macs(), 4u);
}

TEST(Timing, MedianAndIqr) {
  const auto s = timing_stats({5.0, 1.0, 3.0, 2.0, 4.0});
  EXPECT_EQ(s.median, 3.0);
  EXPECT_EQ(s.iqr, 2.0);
}

TEST(Benchmark, ReportsMacsAndRejectsFewRepeats) {
  Rng rng(39);
  const auto shape = make_shape(Task::Classification, Variant::WGN, 4, 6, 12, 2);
  const auto pruned = apply_pruning(sparse_random_model<float>(shape, rng), 0.5);
  const auto cm = compile(pruned);
  EXPECT_THROW(benchmark(pruned, cm, 20, 9), ConfigError);
  const BenchReport rep = benchmark(pruned, cm, 20, 10);
  EXPECT_GT(rep.dense.median, 0.0);
  EXPECT_GT(rep.compiled.median, 0.0);
  EXPECT_LE(rep.compiled_macs, rep.dense_macs);
  const auto row = bench_row(rep);
  EXPECT_EQ(std::count(row.begin(), row.end(), '\t'), std::count(kBenchHeader.begin(), kBenchHeader.end(), '\t'));
}

TEST(Compiled, MacsMonotoneInTauOnRandomModels) {
  Rng rng(40);
  const std::vector<double> taus = {0.0, 0.01, 0.05, 0.2, 1.0, 5.0, 50.0};
  int violations = 0, cases = 0;
  for (int inst = 0; inst < 300; ++inst) {
    const auto shape = random_shape(rng);
    const auto m = sparse_random_model(shape, rng);
    const auto ids = random_ids(shape, rng, 6);
    std::uint64_t prev = UINT64_MAX;
    for (double tau : taus) {
      const auto macs = analytic_macs(compile(apply_pruning(m, tau)), ids);
      ++cases;
      if (macs > prev) ++violations;
      prev = macs;
    }
  }
  EXPECT_EQ(violations, 0) << "of " << cases;
}

// Dropping columns can push a sparse row over the dense threshold, so the
// MAC count is not monotone in τ in general. A row never costs more than
// twice its nonzeros.
TEST(Compiled, DenseFallbackCanRaiseMacsWithinFactorTwo) {
  const auto shape = make_shape(Task::CharLM, Variant::W, 0, 10, 4, 4);
  auto m = make_model<double>(shape);
  for_each_param(m, [](VariationalParam<double>& p) {
    p.mean.fill(0.0);
    if (p.is_variational()) p.log_sigma.fill(-4.0);
  });
  for (std::size_t g = 0; g < kNumGates; ++g)
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t c = 0; c < 3; ++c) m.params.wh[g].mean(j, c) = 0.5;
      m.params.wx[g].mean(j, 0) = 0.5;
    }
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 10; ++j) {
      m.params.w_out.mean(k, j) = 0.5;
      if (j >= 5) m.params.w_out.log_sigma(k, j) = std::log(0.5);  // SNR 1
    }
  const std::vector<std::int32_t> ids = {0, 1, 2};
  const auto low = compile(apply_pruning(m, 0.05));
  const auto high = compile(apply_pruning(m, 5.0));
  EXPECT_EQ(low.units(), 10u);
  EXPECT_EQ(high.units(), 5u);
  EXPECT_GT(analytic_macs(high, ids), analytic_macs(low, ids));

  Rng rng(41);
  for (int inst = 0; inst < 50; ++inst) {
    const auto cm = compile(apply_pruning(sparse_random_model(random_shape(rng), rng), rng.uniform(0.0, 2.0)));
    auto check = [](const CompiledRow<double>& r) {
      std::size_t nnz = 0;
      for (double v : r.val) nnz += v != 0.0 ? 1 : 0;
      EXPECT_LE(r.macs(), 2 * nnz);
    };
    for (const auto& g : cm.gates) {
      for (const auto& r : g.h_rows) check(r);
      for (const auto& r : g.x_rows) check(r);
    }
    for (const auto& r : cm.out_rows) check(r);
  }
}

TEST(Compiled, NinetyPercentConstantAndSparseGivesTenfoldMacs) {
  Rng rng(42);
  const auto shape = make_shape(Task::Classification, Variant::WGN, 20, 20, 30, 2);
  auto m = random_model<double>(shape, rng);
  std::size_t g_idx = 0;
  for (std::size_t g = 0; g < kNumGates; ++g)
    for (std::size_t j = 0; j < 20; ++j)
      if (g_idx++ % 10 != 0) m.params.z_gate[g]->mean[j] = 0.0;
  for (auto* a : {&m.params.wx, &m.params.wh})
    for (auto& p : *a)
      for (std::size_t i = 0; i < p.mean.size(); ++i)
        if (i % 10 != 0) p.mean[i] = 0.0;
  for (std::size_t i = 0; i < m.params.w_out.mean.size(); ++i)
    if (i % 10 != 0) m.params.w_out.mean[i] = 0.0;
  const auto pruned = apply_pruning(m, 0.0);
  const std::vector<std::int32_t> ids = {1, 2, 3, 4, 5, 6, 7, 8};
  const double ratio = static_cast<double>(analytic_macs(compile(pruned, false), ids)) /
                       static_cast<double>(analytic_macs(compile(pruned), ids));
  EXPECT_GE(ratio, 10.0);
  EXPECT_EQ(count_nonconstant_gates(pruned).first, 8u);
}
