#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "svdl/sparse_lstm.hpp"
#include "svdl/variational.hpp"

namespace svdl {

// ---------------------------------------------------------------------------
// Pruned model
// ---------------------------------------------------------------------------

struct GateUnit {
  bool constant = false;
  double value = 0.0;  // activation(b) when constant
};

struct GateStructure {
  std::array<std::vector<GateUnit>, kNumGates> units;

  std::size_t hidden() const { return units[0].size(); }
  std::size_t constant_count() const {
    std::size_t n = 0;
    for (const auto& g : units)
      for (const auto& u : g) n += u.constant ? 1 : 0;
    return n;
  }
  std::size_t nonconstant_count() const { return kNumGates * hidden() - constant_count(); }
};

/// Label for a constant gate value: sigmoid gates are open/closed near 1/0,
/// the information flow is closed near 0.
inline std::string_view gate_regime(std::size_t gate, double value) {
  if (gate == kGateG) {
    if (std::abs(value) <= 0.01) return "closed";
    if (std::abs(value) >= 0.99) return "saturated";
    return "partial";
  }
  if (value >= 0.99) return "open";
  if (value <= 0.01) return "closed";
  return "partial";
}

struct NeuronCounts {
  std::size_t input = 0;       // vocabulary entries (classification) or one-hot inputs (LM)
  std::size_t hidden = 0;
  std::size_t lstm_input = 0;  // embedding dimensions reaching the cell (= input for LM)
  std::vector<std::size_t> active_input, active_hidden, active_lstm_input;
};

/// Means with every pruned entry set to exactly zero; log-σ kept as trained.
/// `masks` has an empty mask for deterministic tensors.
template <class T>
struct PrunedModel {
  Model<T> model;
  ParamSet<Mask> masks;
  double tau = 0.05;
};

template <class T>
PrunedModel<T> apply_pruning(const Model<T>& model, double tau) {
  PrunedModel<T> out;
  out.model = model;
  out.tau = tau;
  out.masks = map_slots<Mask>(model.params, [&](const VariationalParam<T>& p) {
    return p.is_variational() ? prune_mask(p, tau) : Mask{};
  });
  for_each_slot(
      [](const std::string&, VariationalParam<T>& p, const Mask& m) {
        if (m.empty()) return;
        for (std::size_t i = 0; i < p.mean.size(); ++i)
          if (!m.keep[i]) p.mean[i] = T(0);
      },
      out.model.params, out.masks);
  return out;
}

// ---------------------------------------------------------------------------
// Structure analysis on effective weights
// ---------------------------------------------------------------------------

/// Effective weights with the embedding propagated: entry (v, d) of the
/// effective table is E[v][d]·z^vocab[v]·z^x[d], and zero when dimension d
/// is consumed by no gate row.
template <class T>
struct Structure {
  EffectiveWeights<T> eff;
  std::optional<Array2<T>> emb;
  std::vector<std::uint8_t> dim_consumed;  // per LSTM input column
};

template <class T>
Structure<T> analyze_structure(const Model<T>& m) {
  Structure<T> s;
  s.eff = effective_weights(m);
  const std::size_t D = m.shape.input_dim(), H = m.shape.hidden;
  s.dim_consumed.assign(D, 0);
  for (std::size_t g = 0; g < kNumGates; ++g)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < D; ++c)
        if (s.eff.wx[g](r, c) != T(0)) s.dim_consumed[c] = 1;
  if (s.eff.emb) {
    s.emb = *s.eff.emb;
    Array2<T>& e = *s.emb;
    for (std::size_t v = 0; v < e.rows(); ++v)
      for (std::size_t d = 0; d < e.cols(); ++d) {
        const T zx = m.params.z_x ? m.params.z_x->mean[d] : T(1);
        e(v, d) = s.dim_consumed[d] ? e(v, d) * zx : T(0);
      }
  }
  return s;
}

struct LayerCount {
  std::string name;
  std::size_t total = 0;
  std::size_t nonzero = 0;
  double rate() const { return static_cast<double>(total) / static_cast<double>(std::max<std::size_t>(nonzero, 1)); }
};

struct CompressionReport {
  double rate = 1.0;
  std::size_t total = 0;
  std::size_t nonzero = 0;
  bool saturated = false;  // nothing survived; rate reported as total/1
  std::vector<LayerCount> layers;
};

namespace detail {

template <class T>
std::size_t count_nonzero(const Array2<T>& a) {
  std::size_t n = 0;
  for (auto v : a.flat()) n += v != T(0) ? 1 : 0;
  return n;
}

}  // namespace detail

/// |w| / |w ≠ 0| over every weight matrix (embedding, input, recurrent,
/// output), counting effective values; biases and group variables excluded.
template <class T>
CompressionReport compression_rate(const PrunedModel<T>& pruned) {
  const Structure<T> s = analyze_structure(pruned.model);
  CompressionReport rep;
  if (s.emb) rep.layers.push_back({"emb", s.emb->size(), detail::count_nonzero(*s.emb)});
  LayerCount x{"lstm.x", 0, 0}, h{"lstm.h", 0, 0};
  for (std::size_t g = 0; g < kNumGates; ++g) {
    x.total += s.eff.wx[g].size();
    x.nonzero += detail::count_nonzero(s.eff.wx[g]);
    h.total += s.eff.wh[g].size();
    h.nonzero += detail::count_nonzero(s.eff.wh[g]);
  }
  rep.layers.push_back(x);
  rep.layers.push_back(h);
  rep.layers.push_back({"out", s.eff.w_out.size(), detail::count_nonzero(s.eff.w_out)});
  for (const auto& l : rep.layers) {
    rep.total += l.total;
    rep.nonzero += l.nonzero;
  }
  rep.saturated = rep.nonzero == 0;
  rep.rate = static_cast<double>(rep.total) / static_cast<double>(rep.saturated ? 1 : rep.nonzero);
  return rep;
}

/// Input neuron: group multiplier nonzero and at least one effective outgoing
/// weight. Hidden neuron j: z^h[j] nonzero and column j of the recurrent or
/// output weights has a nonzero. `strict` also requires the unit's own gate
/// rows to read something.
template <class T>
NeuronCounts count_active_neurons(const PrunedModel<T>& pruned, bool strict = false) {
  const Model<T>& m = pruned.model;
  const Structure<T> s = analyze_structure(m);
  const std::size_t H = m.shape.hidden, D = m.shape.input_dim();
  NeuronCounts n;

  for (std::size_t c = 0; c < D; ++c) {
    const bool z_ok = !m.params.z_x || m.params.z_x->mean[c] != T(0);
    if (z_ok && s.dim_consumed[c]) n.active_lstm_input.push_back(c);
  }
  if (s.emb) {
    for (std::size_t v = 0; v < s.emb->rows(); ++v) {
      bool out = false;
      for (auto val : s.emb->row(v)) out = out || val != T(0);
      if (out) n.active_input.push_back(v);
    }
  } else {
    n.active_input = n.active_lstm_input;
  }

  for (std::size_t j = 0; j < H; ++j) {
    if (m.params.z_h && m.params.z_h->mean[j] == T(0)) continue;
    bool consumed = false;
    for (std::size_t g = 0; g < kNumGates && !consumed; ++g)
      for (std::size_t r = 0; r < H && !consumed; ++r) consumed = s.eff.wh[g](r, j) != T(0);
    for (std::size_t k = 0; k < s.eff.w_out.rows() && !consumed; ++k) consumed = s.eff.w_out(k, j) != T(0);
    if (!consumed) continue;
    if (strict) {
      bool produced = false;
      for (std::size_t g = 0; g < kNumGates && !produced; ++g) {
        for (auto v : s.eff.wx[g].row(j)) produced = produced || v != T(0);
        for (auto v : s.eff.wh[g].row(j)) produced = produced || v != T(0);
      }
      if (!produced) continue;
    }
    n.active_hidden.push_back(j);
  }
  n.input = n.active_input.size();
  n.hidden = n.active_hidden.size();
  n.lstm_input = n.active_lstm_input.size();
  return n;
}

/// Gate component (G, j) is constant when z^G[j] is zero or row j of
/// [ŵ^x_G | ŵ^h_G] is entirely zero; its value is then activation(b_G[j]).
template <class T>
GateStructure gate_structure(const PrunedModel<T>& pruned) {
  const Model<T>& m = pruned.model;
  const EffectiveWeights<T> e = effective_weights(m);
  const std::size_t H = m.shape.hidden;
  GateStructure gs;
  for (std::size_t g = 0; g < kNumGates; ++g) {
    gs.units[g].resize(H);
    for (std::size_t j = 0; j < H; ++j) {
      bool constant = m.params.z_gate[g] && m.params.z_gate[g]->mean[j] == T(0);
      if (!constant) {
        bool any = false;
        for (auto v : e.wx[g].row(j)) any = any || v != T(0);
        for (auto v : e.wh[g].row(j)) any = any || v != T(0);
        constant = !any;
      }
      auto& u = gs.units[g][j];
      u.constant = constant;
      if (constant) u.value = activate<double>(gate_activation(g), static_cast<double>(m.params.b[g].mean[j]));
    }
  }
  return gs;
}

template <class T>
std::pair<std::size_t, GateStructure> count_nonconstant_gates(const PrunedModel<T>& pruned) {
  GateStructure gs = gate_structure(pruned);
  const std::size_t n = gs.nonconstant_count();
  return {n, std::move(gs)};
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline constexpr std::size_t kSnrBins = 20;
inline constexpr double kSnrLogLo = -6.0;  // log10 of the first edge
inline constexpr double kSnrLogStep = 0.5;

struct SnrHistogram {
  std::string tensor;
  std::array<std::size_t, kSnrBins> counts{};
};

/// 20 half-decade bins from 1e-6 to 1e4; values outside land in the end bins.
template <class T>
std::vector<SnrHistogram> snr_histograms(const Model<T>& m) {
  std::vector<SnrHistogram> out;
  for_each_slot(
      [&](const std::string& name, const VariationalParam<T>& p) {
        if (!p.is_variational()) return;
        SnrHistogram h;
        h.tensor = name;
        for (double v : snr(p).flat()) {
          long bin = 0;
          if (v > 0.0) bin = static_cast<long>(std::floor((std::log10(v) - kSnrLogLo) / kSnrLogStep));
          bin = std::clamp(bin, 0L, static_cast<long>(kSnrBins) - 1);
          ++h.counts[static_cast<std::size_t>(bin)];
        }
        out.push_back(std::move(h));
      },
      m.params);
  return out;
}

/// Quality figure shown next to the structure numbers.
struct QualityFigure {
  std::string name = "none";
  double value = std::numeric_limits<double>::quiet_NaN();
};

struct StructureSummary {
  std::string variant;
  QualityFigure quality;
  CompressionReport compression;
  NeuronCounts neurons;
  GateStructure gates;
  double tau = 0.05;

  std::string neurons_field() const {
    return std::to_string(neurons.input) + "-" + std::to_string(neurons.hidden);
  }
};

template <class T>
StructureSummary summarize(const PrunedModel<T>& pruned, QualityFigure quality, bool strict_neurons = false) {
  StructureSummary s;
  s.variant = std::string(variant_name(pruned.model.shape.variant));
  s.quality = std::move(quality);
  s.compression = compression_rate(pruned);
  s.neurons = count_active_neurons(pruned, strict_neurons);
  s.gates = gate_structure(pruned);
  s.tau = pruned.tau;
  return s;
}

inline constexpr std::string_view kSummaryHeader =
    "variant\tmetric_name\tmetric\tcompression\tneurons\tgates\tlstm_input\ttau";

inline std::string summary_row(const StructureSummary& s) {
  return s.variant + "\t" + s.quality.name + "\t" + g6(s.quality.value) + "\t" + g6(s.compression.rate) + "\t" +
         s.neurons_field() + "\t" + std::to_string(s.gates.nonconstant_count()) + "\t" +
         std::to_string(s.neurons.lstm_input) + "\t" + g6(s.tau);
}

namespace detail {

inline std::ofstream open_report(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  return out;
}

}  // namespace detail

/// Writes summary.tsv, gates.csv, snr_hist.tsv and compression.tsv into `dir`.
/// `source` is the unpruned model for the histogram; the pruned means are used without it.
template <class T>
void structure_report(const PrunedModel<T>& pruned, const StructureSummary& s, const std::filesystem::path& dir,
                      const Model<T>* source = nullptr) {
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_report(dir / "summary.tsv");
    out << kSummaryHeader << '\n' << summary_row(s) << '\n';
  }
  {
    auto out = detail::open_report(dir / "gates.csv");
    out << "gate,unit,constant,value\n";
    for (std::size_t g = 0; g < kNumGates; ++g)
      for (std::size_t j = 0; j < s.gates.units[g].size(); ++j) {
        const auto& u = s.gates.units[g][j];
        out << kGateNames[g] << ',' << j << ',' << (u.constant ? "true" : "false") << ',';
        if (u.constant) out << g6(u.value);
        out << '\n';
      }
  }
  {
    auto out = detail::open_report(dir / "snr_hist.tsv");
    out << "tensor\tbin\tlo\thi\tcount\n";
    for (const auto& h : snr_histograms(source ? *source : pruned.model))
      for (std::size_t b = 0; b < kSnrBins; ++b) {
        const double lo = std::pow(10.0, kSnrLogLo + kSnrLogStep * static_cast<double>(b));
        const double hi = std::pow(10.0, kSnrLogLo + kSnrLogStep * static_cast<double>(b + 1));
        out << h.tensor << '\t' << b << '\t' << g6(lo) << '\t' << g6(hi) << '\t' << h.counts[b] << '\n';
      }
  }
  {
    auto out = detail::open_report(dir / "compression.tsv");
    out << "layer\ttotal\tnonzero\tcompression\n";
    for (const auto& l : s.compression.layers)
      out << l.name << '\t' << l.total << '\t' << l.nonzero << '\t' << g6(l.rate()) << '\n';
    out << "all\t" << s.compression.total << '\t' << s.compression.nonzero << '\t' << g6(s.compression.rate)
        << '\n';
  }
}

}  // namespace svdl
