#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "svdl/compression.hpp"
#include "svdl/sparse_lstm.hpp"

namespace svdl {

/// Row of a compacted matrix: dense over the compact columns, or sorted
/// (column, value) pairs when fewer than half the columns are nonzero.
template <class T>
struct CompiledRow {
  bool dense = true;
  std::vector<std::uint32_t> idx;
  std::vector<T> val;

  std::size_t macs() const { return val.size(); }

  double dot(std::span<const T> x) const {
    double acc = 0.0;
    if (dense) {
      for (std::size_t k = 0; k < val.size(); ++k) acc += static_cast<double>(val[k]) * x[k];
    } else {
      for (std::size_t k = 0; k < val.size(); ++k) acc += static_cast<double>(val[k]) * x[idx[k]];
    }
    return acc;
  }
};

template <class T>
CompiledRow<T> compile_row(std::span<const T> full, const std::vector<std::uint32_t>& cols, bool allow_sparse) {
  CompiledRow<T> row;
  std::size_t nnz = 0;
  for (auto c : cols) nnz += full[c] != T(0) ? 1 : 0;
  row.dense = !allow_sparse || 2 * nnz >= cols.size();
  for (std::size_t k = 0; k < cols.size(); ++k) {
    const T v = full[cols[k]];
    if (row.dense) {
      row.val.push_back(v);
    } else if (v != T(0)) {
      row.idx.push_back(static_cast<std::uint32_t>(k));
      row.val.push_back(v);
    }
  }
  return row;
}

template <class T>
struct CompiledGate {
  std::vector<std::uint32_t> rows;  // compact unit positions computed by matvec
  std::vector<CompiledRow<T>> x_rows, h_rows;
  std::vector<T> bias;                // per computed row
  std::vector<std::uint8_t> is_const;  // per compact unit
  std::vector<T> const_value;          // per compact unit
  // one-hot input: per compact input column, (position in `rows`, value)
  std::vector<std::vector<std::pair<std::uint32_t, T>>> onehot_cols;
};

/// Forward-only evaluator over the surviving structure of a pruned model.
template <class T>
struct CompiledModel {
  ModelShape shape;
  bool exploits_structure = true;
  std::vector<std::uint32_t> hidden_units;  // original indices, compact order
  std::vector<std::uint32_t> input_cols;    // original LSTM input columns kept
  std::vector<std::int32_t> token_map;      // token id → compact embedding row / input column, −1 if dropped
  Array2<T> emb;                            // compact rows × compact input columns
  std::array<CompiledGate<T>, kNumGates> gates;
  std::vector<CompiledRow<T>> out_rows;
  std::vector<T> out_bias;

  std::size_t units() const { return hidden_units.size(); }
};

/// With `exploit_structure` false every row is kept dense over every unit and
/// column: the reference layout the compiled one is measured against.
template <class T>
CompiledModel<T> compile(const PrunedModel<T>& pruned, bool exploit_structure = true) {
  const Model<T>& m = pruned.model;
  const ModelShape& shape = m.shape;
  const std::size_t H = shape.hidden, D = shape.input_dim();
  const EffectiveWeights<T> e = effective_weights(m);
  const GateStructure gs = gate_structure(pruned);

  CompiledModel<T> cm;
  cm.shape = shape;
  cm.exploits_structure = exploit_structure;
  if (exploit_structure) {
    for (auto j : count_active_neurons(pruned).active_hidden) cm.hidden_units.push_back(static_cast<std::uint32_t>(j));
  } else {
    for (std::size_t j = 0; j < H; ++j) cm.hidden_units.push_back(static_cast<std::uint32_t>(j));
  }
  const std::size_t U = cm.units();

  // LSTM input columns that any computed row reads
  for (std::size_t c = 0; c < D; ++c) {
    bool used = !exploit_structure;
    for (std::size_t g = 0; g < kNumGates && !used; ++g)
      for (auto j : cm.hidden_units)
        if (!gs.units[g][j].constant && e.wx[g](j, c) != T(0)) {
          used = true;
          break;
        }
    if (used) cm.input_cols.push_back(static_cast<std::uint32_t>(c));
  }

  if (shape.one_hot_input()) {
    cm.token_map.assign(shape.vocab, -1);
    for (std::size_t k = 0; k < cm.input_cols.size(); ++k) cm.token_map[cm.input_cols[k]] = static_cast<std::int32_t>(k);
  } else {
    cm.token_map.assign(shape.vocab, -1);
    std::vector<std::vector<T>> rows;
    for (std::size_t v = 0; v < shape.vocab; ++v) {
      std::vector<T> r;
      bool any = !exploit_structure;
      for (auto c : cm.input_cols) {
        r.push_back((*e.emb)(v, c));
        any = any || r.back() != T(0);
      }
      if (any) {
        cm.token_map[v] = static_cast<std::int32_t>(rows.size());
        rows.push_back(std::move(r));
      }
    }
    cm.emb = Array2<T>(rows.size(), cm.input_cols.size());
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), cm.emb.row(i).begin());
  }

  for (std::size_t g = 0; g < kNumGates; ++g) {
    CompiledGate<T>& cg = cm.gates[g];
    cg.is_const.assign(U, 0);
    cg.const_value.assign(U, T(0));
    if (shape.one_hot_input()) cg.onehot_cols.resize(cm.input_cols.size());
    for (std::size_t u = 0; u < U; ++u) {
      const std::size_t j = cm.hidden_units[u];
      if (exploit_structure && gs.units[g][j].constant) {
        cg.is_const[u] = 1;
        cg.const_value[u] = static_cast<T>(gs.units[g][j].value);
        continue;
      }
      const auto pos = static_cast<std::uint32_t>(cg.rows.size());
      cg.rows.push_back(static_cast<std::uint32_t>(u));
      cg.bias.push_back(m.params.b[g].mean[j]);
      cg.h_rows.push_back(compile_row<T>(e.wh[g].row(j), cm.hidden_units, exploit_structure));
      if (shape.one_hot_input()) {
        for (std::size_t k = 0; k < cm.input_cols.size(); ++k) {
          const T v = e.wx[g](j, cm.input_cols[k]);
          if (v != T(0) || !exploit_structure) cg.onehot_cols[k].push_back({pos, v});
        }
      } else {
        cg.x_rows.push_back(compile_row<T>(e.wx[g].row(j), cm.input_cols, exploit_structure));
      }
    }
  }

  for (std::size_t k = 0; k < shape.classes; ++k) {
    cm.out_rows.push_back(compile_row<T>(e.w_out.row(k), cm.hidden_units, exploit_structure));
    cm.out_bias.push_back(e.b_out[k]);
  }
  return cm;
}

template <class T>
struct FastResult {
  std::vector<std::vector<T>> h;  // per step, compact units
  Array2<T> logits;               // LM: steps×K; classification: 1×K; empty without input
  std::vector<T> h_final, c_final;
  std::vector<std::array<std::vector<T>, kNumGates>> gate_trace;  // when requested
};

struct FastOptions {
  bool trace_gates = false;
  std::uint64_t* macs = nullptr;  // incremented by every multiply-accumulate performed
};

/// Single-sequence forward on the compiled structure from a zero state.
template <class T>
FastResult<T> fast_forward(const CompiledModel<T>& cm, std::span<const std::int32_t> ids, FastOptions opt = {}) {
  const std::size_t U = cm.units(), K = cm.out_rows.size();
  const bool onehot = cm.shape.one_hot_input();
  FastResult<T> res;
  std::vector<T> h(U, T(0)), c(U, T(0)), x(cm.input_cols.size(), T(0));
  std::array<std::vector<T>, kNumGates> gate;
  for (auto& v : gate) v.assign(U, T(0));
  std::vector<double> pre;
  std::uint64_t macs = 0;
  if (is_lm(cm.shape.task) && !ids.empty()) res.logits = Array2<T>(ids.size(), K);

  for (std::size_t t = 0; t < ids.size(); ++t) {
    const std::int32_t id = ids[t];
    if (id < 0 || static_cast<std::size_t>(id) >= cm.token_map.size()) {
      throw ShapeError("fast_forward: token " + std::to_string(id) + " outside the compiled vocabulary of " +
                       std::to_string(cm.token_map.size()));
    }
    const std::int32_t mapped = cm.token_map[static_cast<std::size_t>(id)];
    if (!onehot) {
      if (mapped >= 0) {
        const auto row = cm.emb.row(static_cast<std::size_t>(mapped));
        std::copy(row.begin(), row.end(), x.begin());
      } else {
        std::fill(x.begin(), x.end(), T(0));
      }
    }
    for (std::size_t g = 0; g < kNumGates; ++g) {
      const CompiledGate<T>& cg = cm.gates[g];
      pre.assign(cg.rows.size(), 0.0);
      for (std::size_t r = 0; r < cg.rows.size(); ++r) {
        double a = cg.h_rows[r].dot(h);
        macs += cg.h_rows[r].macs();
        if (!onehot) {
          a += cg.x_rows[r].dot(x);
          macs += cg.x_rows[r].macs();
        }
        pre[r] = a;
      }
      if (onehot && mapped >= 0) {
        for (const auto& [r, v] : cg.onehot_cols[static_cast<std::size_t>(mapped)]) pre[r] += v;
        macs += cg.onehot_cols[static_cast<std::size_t>(mapped)].size();
      }
      const Activation act = gate_activation(g);
      for (std::size_t u = 0; u < U; ++u)
        if (cg.is_const[u]) gate[g][u] = cg.const_value[u];
      for (std::size_t r = 0; r < cg.rows.size(); ++r)
        gate[g][cg.rows[r]] = activate<T>(act, static_cast<T>(pre[r]) + cg.bias[r]);
    }
    for (std::size_t u = 0; u < U; ++u) {
      c[u] = gate[kGateF][u] * c[u] + gate[kGateI][u] * gate[kGateG][u];
      h[u] = gate[kGateO][u] * std::tanh(c[u]);
    }
    res.h.push_back(h);
    if (opt.trace_gates) res.gate_trace.push_back(gate);
    if (is_lm(cm.shape.task)) {
      for (std::size_t k = 0; k < K; ++k) {
        res.logits(t, k) = static_cast<T>(cm.out_rows[k].dot(h)) + cm.out_bias[k];
        macs += cm.out_rows[k].macs();
      }
    }
  }
  if (!is_lm(cm.shape.task) && !ids.empty()) {
    res.logits = Array2<T>(1, K);
    for (std::size_t k = 0; k < K; ++k) {
      res.logits(0, k) = static_cast<T>(cm.out_rows[k].dot(h)) + cm.out_bias[k];
      macs += cm.out_rows[k].macs();
    }
  }
  res.h_final = std::move(h);
  res.c_final = std::move(c);
  if (opt.macs) *opt.macs += macs;
  return res;
}

/// Multiply-accumulates fast_forward performs on `ids`, from the stored
/// layout alone: a row costs its stored length (nnz when sparse, all compact
/// columns when dense); a one-hot step costs the stored entries of its column.
template <class T>
std::uint64_t analytic_macs(const CompiledModel<T>& cm, std::span<const std::int32_t> ids) {
  std::uint64_t per_step = 0, head = 0;
  for (const auto& cg : cm.gates) {
    for (const auto& r : cg.h_rows) per_step += r.macs();
    for (const auto& r : cg.x_rows) per_step += r.macs();
  }
  for (const auto& r : cm.out_rows) head += r.macs();
  std::uint64_t total = 0;
  for (auto id : ids) {
    total += per_step;
    if (cm.shape.one_hot_input()) {
      const std::int32_t mapped = cm.token_map.at(static_cast<std::size_t>(id));
      if (mapped >= 0)
        for (const auto& cg : cm.gates) total += cg.onehot_cols[static_cast<std::size_t>(mapped)].size();
    }
    if (is_lm(cm.shape.task)) total += head;
  }
  if (!is_lm(cm.shape.task) && !ids.empty()) total += head;
  return total;
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

struct TimingStats {
  double median = 0.0;
  double iqr = 0.0;
};

inline TimingStats timing_stats(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  auto q = [&](double p) {
    const double pos = p * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
  };
  return {q(0.5), q(0.75) - q(0.25)};
}

struct BenchReport {
  std::string config;
  TimingStats dense, compiled;
  double dense_macs = 0.0;     // per step
  double compiled_macs = 0.0;  // per step
  double speedup() const { return compiled.median > 0.0 ? dense.median / compiled.median : 0.0; }
};

inline constexpr std::string_view kBenchHeader =
    "config\tdense_ns_per_step\tcompiled_ns_per_step\tspeedup\tdense_macs\tcompiled_macs";

inline std::string bench_row(const BenchReport& r) {
  return r.config + "\t" + g6(r.dense.median) + "\t" + g6(r.compiled.median) + "\t" + g6(r.speedup()) + "\t" +
         g6(r.dense_macs) + "\t" + g6(r.compiled_macs);
}

/// Median wall-clock ns per step over `repeats` timed blocks for the dense
/// layout and the compiled one, on one fixed random sequence of length T.
template <class T>
BenchReport benchmark(const PrunedModel<T>& pruned, const CompiledModel<T>& compiled, std::size_t steps,
                      std::size_t repeats, std::uint64_t seed = 7, std::string config = "model") {
  if (repeats < 10) throw ConfigError("benchmark: repeats must be at least 10");
  if (steps == 0) throw ConfigError("benchmark: sequence length must be positive");
  const CompiledModel<T> dense = compile(pruned, false);
  Rng rng(seed);
  std::vector<std::int32_t> ids(steps);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(pruned.model.shape.vocab));

  BenchReport rep;
  rep.config = std::move(config);
  rep.dense_macs = static_cast<double>(analytic_macs(dense, ids)) / static_cast<double>(steps);
  rep.compiled_macs = static_cast<double>(analytic_macs(compiled, ids)) / static_cast<double>(steps);

  using clock = std::chrono::steady_clock;
  volatile T sink = T(0);
  auto run = [&](const CompiledModel<T>& cm, std::size_t iters) {
    const auto t0 = clock::now();
    for (std::size_t i = 0; i < iters; ++i) {
      const auto r = fast_forward(cm, std::span<const std::int32_t>(ids));
      sink = sink + (r.h_final.empty() ? T(0) : r.h_final[0]);
    }
    return std::chrono::duration<double, std::nano>(clock::now() - t0).count();
  };
  // calibrate so that each timed block of the dense layout lasts about 5 ms
  std::size_t iters = 1;
  while (run(dense, iters) < 5e6 && iters < (1u << 20)) iters *= 2;

  std::vector<double> td, tc;
  for (std::size_t r = 0; r < repeats; ++r) {
    td.push_back(run(dense, iters) / static_cast<double>(iters * steps));
    tc.push_back(run(compiled, iters) / static_cast<double>(iters * steps));
  }
  rep.dense = timing_stats(td);
  rep.compiled = timing_stats(tc);
  return rep;
}

}  // namespace svdl
