#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "svdl/numerics.hpp"
#include "svdl/variational.hpp"

namespace svdl {

// ---------------------------------------------------------------------------
// Model description
// ---------------------------------------------------------------------------

enum class Variant { Baseline, W, WN, WGN };
enum class Task { CharLM, WordLM, Classification };

/// Gate order used in every layout: input, forget, information flow, output.
enum Gate : std::size_t { kGateI = 0, kGateF = 1, kGateG = 2, kGateO = 3 };
inline constexpr std::size_t kNumGates = 4;
inline constexpr std::array<char, kNumGates> kGateNames{'i', 'f', 'g', 'o'};

inline Activation gate_activation(std::size_t gate) {
  return gate == kGateG ? Activation::Tanh : Activation::Sigmoid;
}

inline std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::W: return "w";
    case Variant::WN: return "wn";
    case Variant::WGN: return "wgn";
  }
  return "?";
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  if (s == "baseline" || s == "original") return Variant::Baseline;
  if (s == "w" || s == "W") return Variant::W;
  if (s == "wn" || s == "W+N" || s == "w+n") return Variant::WN;
  if (s == "wgn" || s == "W+G+N" || s == "w+g+n") return Variant::WGN;
  return std::nullopt;
}

inline std::string_view task_name(Task t) {
  switch (t) {
    case Task::CharLM: return "char_lm";
    case Task::WordLM: return "word_lm";
    case Task::Classification: return "classification";
  }
  return "?";
}

inline std::optional<Task> parse_task(std::string_view s) {
  if (s == "char_lm") return Task::CharLM;
  if (s == "word_lm") return Task::WordLM;
  if (s == "classification") return Task::Classification;
  return std::nullopt;
}

inline bool is_lm(Task t) { return t != Task::Classification; }

/// Sizes and structure flags. Classification models read an embedding table
/// of width `emb_dim`; language models feed one-hot tokens (input width =
/// vocabulary) and predict the next token (classes = vocabulary).
struct ModelShape {
  Task task = Task::Classification;
  Variant variant = Variant::W;
  std::size_t vocab = 0;
  std::size_t emb_dim = 0;
  std::size_t hidden = 0;
  std::size_t classes = 0;

  bool one_hot_input() const { return is_lm(task); }
  std::size_t input_dim() const { return one_hot_input() ? vocab : emb_dim; }
  bool weights_variational() const { return variant != Variant::Baseline; }
  bool has_neuron_groups() const { return variant == Variant::WN || variant == Variant::WGN; }
  bool has_z_x() const { return has_neuron_groups() && !is_lm(task); }
  bool has_z_h() const { return has_neuron_groups(); }
  bool has_z_vocab() const { return has_neuron_groups() && task == Task::Classification; }
  bool has_gate_groups() const { return variant == Variant::WGN; }

  friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

/// One slot per tensor of the network, in the fixed serialization order.
/// Instantiated with VariationalParam (the model), Draw (a sampled
/// realization), Array2 (gradients) or Mask (pruning masks).
template <class P>
struct ParamSet {
  std::optional<P> emb;      // V×E, classification only
  std::optional<P> z_vocab;  // 1×V
  std::array<P, kNumGates> wx;  // H×D
  std::array<P, kNumGates> wh;  // H×H
  std::array<P, kNumGates> b;   // 1×H
  std::optional<P> z_x;         // 1×D
  std::optional<P> z_h;         // 1×H
  std::array<std::optional<P>, kNumGates> z_gate;  // 1×H each
  P w_out;  // K×H
  P b_out;  // 1×K
};

namespace detail {

inline std::string gate_slot(std::string_view prefix, std::size_t g) {
  return std::string(prefix) + "." + kGateNames[g];
}

template <class First, class... Rest>
First& first_of(First& f, Rest&...) {
  return f;
}

}  // namespace detail

/// Calls f(name, slot_of_set0, slot_of_set1, ...) for every slot present in
/// the first set. The other sets must share its structure.
template <class F, class... S>
void for_each_slot(F&& f, S&... sets) {
  auto& first = detail::first_of(sets...);
  if (first.emb) f(std::string("emb.table"), *sets.emb...);
  if (first.z_vocab) f(std::string("emb.z_vocab"), *sets.z_vocab...);
  for (std::size_t g = 0; g < kNumGates; ++g) f(detail::gate_slot("lstm.wx", g), sets.wx[g]...);
  for (std::size_t g = 0; g < kNumGates; ++g) f(detail::gate_slot("lstm.wh", g), sets.wh[g]...);
  for (std::size_t g = 0; g < kNumGates; ++g) f(detail::gate_slot("lstm.b", g), sets.b[g]...);
  if (first.z_x) f(std::string("lstm.z_x"), *sets.z_x...);
  if (first.z_h) f(std::string("lstm.z_h"), *sets.z_h...);
  for (std::size_t g = 0; g < kNumGates; ++g)
    if (first.z_gate[g]) f(detail::gate_slot("lstm.z_gate", g), *sets.z_gate[g]...);
  f(std::string("out.w"), sets.w_out...);
  f(std::string("out.b"), sets.b_out...);
}

/// Builds a set of the same structure by transforming every slot.
template <class Q, class P, class F>
ParamSet<Q> map_slots(const ParamSet<P>& src, F&& f) {
  ParamSet<Q> out;
  auto opt = [&](const std::optional<P>& s) -> std::optional<Q> {
    if (!s) return std::nullopt;
    return f(*s);
  };
  out.emb = opt(src.emb);
  out.z_vocab = opt(src.z_vocab);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    out.wx[g] = f(src.wx[g]);
    out.wh[g] = f(src.wh[g]);
    out.b[g] = f(src.b[g]);
    out.z_gate[g] = opt(src.z_gate[g]);
  }
  out.z_x = opt(src.z_x);
  out.z_h = opt(src.z_h);
  out.w_out = f(src.w_out);
  out.b_out = f(src.b_out);
  return out;
}

template <class T>
struct Model {
  ModelShape shape;
  ParamSet<VariationalParam<T>> params;

  template <class U>
  Model<U> cast() const {
    Model<U> out;
    out.shape = shape;
    out.params = map_slots<VariationalParam<U>>(params, [](const VariationalParam<T>& p) {
      return VariationalParam<U>{p.name, p.kind, p.mean.template cast<U>(),
                                 p.log_sigma.template cast<U>()};
    });
    return out;
  }
};

/// Allocates every tensor the variant calls for. Weight means are zero, group
/// means are one, every variational log-σ is −3, biases are zero.
template <class T>
Model<T> make_model(const ModelShape& shape) {
  if (shape.hidden == 0 || shape.vocab == 0 || shape.classes == 0 ||
      (!shape.one_hot_input() && shape.emb_dim == 0)) {
    throw ShapeError("make_model: every dimension must be positive");
  }
  const std::size_t d = shape.input_dim(), h = shape.hidden;
  const ParamKind wkind = shape.weights_variational() ? ParamKind::Weight : ParamKind::Deterministic;
  auto weight = [&](std::string name, std::size_t r, std::size_t c) {
    if (wkind == ParamKind::Deterministic)
      return VariationalParam<T>::deterministic(std::move(name), Array2<T>(r, c));
    return VariationalParam<T>::variational(std::move(name), wkind, Array2<T>(r, c));
  };
  auto group = [&](std::string name, std::size_t n) {
    return VariationalParam<T>::variational(std::move(name), ParamKind::Group,
                                            Array2<T>(1, n, T(1)));
  };

  Model<T> m;
  m.shape = shape;
  auto& p = m.params;
  if (!shape.one_hot_input()) p.emb = weight("emb.table", shape.vocab, shape.emb_dim);
  if (shape.has_z_vocab()) p.z_vocab = group("emb.z_vocab", shape.vocab);
  for (std::size_t g = 0; g < kNumGates; ++g) {
    p.wx[g] = weight(detail::gate_slot("lstm.wx", g), h, d);
    p.wh[g] = weight(detail::gate_slot("lstm.wh", g), h, h);
    p.b[g] = VariationalParam<T>::deterministic(detail::gate_slot("lstm.b", g), Array2<T>(1, h));
    if (shape.has_gate_groups()) p.z_gate[g] = group(detail::gate_slot("lstm.z_gate", g), h);
  }
  if (shape.has_z_x()) p.z_x = group("lstm.z_x", d);
  if (shape.has_z_h()) p.z_h = group("lstm.z_h", h);
  p.w_out = weight("out.w", shape.classes, h);
  p.b_out = VariationalParam<T>::deterministic("out.b", Array2<T>(1, shape.classes));
  return m;
}

template <class T>
using DrawnWeights = ParamSet<Draw<T>>;

template <class T>
using Gradients = ParamSet<Array2<T>>;

/// One sampling event for the whole network.
template <class T>
DrawnWeights<T> draw_weights(const Model<T>& model, NoiseMode mode, Rng* rng) {
  return map_slots<Draw<T>>(model.params,
                            [&](const VariationalParam<T>& p) { return sample(p, mode, rng); });
}

template <class T>
Gradients<T> zero_gradients(const DrawnWeights<T>& d) {
  return map_slots<Array2<T>>(d, [](const Draw<T>& x) { return Array2<T>(x.value.rows(), x.value.cols()); });
}

// ---------------------------------------------------------------------------
// Batches and state
// ---------------------------------------------------------------------------

/// Token sequences padded on the right to `steps`. Rows shorter than `steps`
/// hold their state unchanged past their length.
struct Batch {
  std::size_t size = 0;
  std::size_t steps = 0;
  std::vector<std::int32_t> tokens;   // size×steps, row-major
  std::vector<std::size_t> lengths;   // per row, 1..steps
  std::vector<std::int32_t> labels;   // classification: one per row
  std::vector<std::int32_t> targets;  // language modeling: size×steps

  std::int32_t token(std::size_t b, std::size_t t) const { return tokens[b * steps + t]; }
  std::int32_t target(std::size_t b, std::size_t t) const { return targets[b * steps + t]; }
};

template <class T>
struct LstmState {
  Array2<T> h;  // B×H
  Array2<T> c;  // B×H
};

template <class T>
LstmState<T> zero_state(std::size_t batch, std::size_t hidden) {
  return {Array2<T>(batch, hidden), Array2<T>(batch, hidden)};
}

/// Intermediates of one timestep, all B×(·).
template <class T>
struct StepCache {
  Array2<T> x;                  // dense input before z^x (empty for one-hot input)
  Array2<T> xz;                 // x ⊙ z^x
  std::vector<std::int32_t> ids;  // one-hot input ids
  Array2<T> h_prev, hz, c_prev;
  std::array<Array2<T>, kNumGates> pre_z;  // W^x(x⊙z^x) + W^h(h⊙z^h), before ⊙ z^G
  std::array<Array2<T>, kNumGates> gate;   // activated gate values
  Array2<T> c, tanh_c, h;
  std::vector<std::uint8_t> active;
};

/// Input to the recurrent layer: either dense per-step matrices (B×D) or
/// per-step token ids read as one-hot vectors.
template <class T>
struct StepInputs {
  std::vector<Array2<T>> dense;
  std::vector<std::vector<std::int32_t>> ids;

  std::size_t steps() const { return dense.empty() ? ids.size() : dense.size(); }
};

template <class T>
bool x_is_dense(const StepCache<T>& s) {
  return !s.x.empty();
}

template <class T>
struct LstmPass {
  std::vector<StepCache<T>> steps;
  LstmState<T> final_state;
};

namespace detail {

template <class T>
const Array2<T>* opt_value(const std::optional<Draw<T>>& d) {
  return d ? &d->value : nullptr;
}

template <class T>
void check_finite(const Array2<T>& a, std::size_t t, const char* what) {
  if (!all_finite<T>(a.flat())) {
    throw NumericError(std::string("lstm_forward: non-finite ") + what + " at timestep " +
                       std::to_string(t));
  }
}

}  // namespace detail

/// Group-variable LSTM over a padded batch:
///   pre_G = (W^h_G (h_{t−1} ⊙ z^h) + W^x_G (x_t ⊙ z^x)) ⊙ z^G + b_G
///   c_t = f ⊙ c_{t−1} + i ⊙ g,  h_t = o ⊙ tanh(c_t)
/// Missing group vectors act as ones.
template <class T>
LstmPass<T> lstm_forward(const ModelShape& shape, const DrawnWeights<T>& w, const StepInputs<T>& x,
                         const std::vector<std::size_t>& lengths, const LstmState<T>* init) {
  const std::size_t B = lengths.size(), H = shape.hidden, D = shape.input_dim();
  const std::size_t T_steps = x.steps();
  const Array2<T>* zx = detail::opt_value(w.z_x);
  const Array2<T>* zh = detail::opt_value(w.z_h);

  LstmPass<T> pass;
  pass.final_state = init ? *init : zero_state<T>(B, H);
  if (pass.final_state.h.rows() != B || pass.final_state.h.cols() != H ||
      !pass.final_state.c.same_shape(pass.final_state.h)) {
    throw ShapeError("lstm_forward: initial state is " + shape_str(pass.final_state.h) +
                     ", expected " + shape_str(B, H));
  }
  pass.steps.resize(T_steps);

  for (std::size_t t = 0; t < T_steps; ++t) {
    StepCache<T>& s = pass.steps[t];
    s.h_prev = pass.final_state.h;
    s.c_prev = pass.final_state.c;
    s.active.resize(B);
    for (std::size_t b = 0; b < B; ++b) s.active[b] = t < lengths[b] ? 1 : 0;

    for (std::size_t g = 0; g < kNumGates; ++g) s.pre_z[g] = Array2<T>(B, H);
    if (!x.dense.empty()) {
      const Array2<T>& xt = x.dense[t];
      if (xt.rows() != B || xt.cols() != D) {
        throw ShapeError("lstm_forward: input at timestep " + std::to_string(t) + " is " +
                         shape_str(xt) + ", expected " + shape_str(B, D));
      }
      s.x = xt;
      s.xz = xt;
      if (zx)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < D; ++c) s.xz(b, c) *= (*zx)[c];
      for (std::size_t g = 0; g < kNumGates; ++g) gemm_nt_into(s.xz, w.wx[g].value, s.pre_z[g], false);
    } else {
      s.ids = x.ids[t];
      if (s.ids.size() != B) throw ShapeError("lstm_forward: id batch size mismatch");
      for (std::size_t b = 0; b < B; ++b) {
        const auto id = s.ids[b];
        if (id < 0 || static_cast<std::size_t>(id) >= D) {
          throw IndexError("lstm_forward: token id " + std::to_string(id) + " outside input width " +
                           std::to_string(D));
        }
        const T scale = zx ? (*zx)[static_cast<std::size_t>(id)] : T(1);
        for (std::size_t g = 0; g < kNumGates; ++g) {
          const Array2<T>& wxg = w.wx[g].value;
          for (std::size_t r = 0; r < H; ++r) s.pre_z[g](b, r) = wxg(r, static_cast<std::size_t>(id)) * scale;
        }
      }
    }

    s.hz = s.h_prev;
    if (zh)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < H; ++c) s.hz(b, c) *= (*zh)[c];
    for (std::size_t g = 0; g < kNumGates; ++g) {
      gemm_nt_into(s.hz, w.wh[g].value, s.pre_z[g], true);
      const Array2<T>* zg = detail::opt_value(w.z_gate[g]);
      const Array2<T>& bias = w.b[g].value;
      Array2<T> act(B, H);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < H; ++r) {
          const T a = s.pre_z[g](b, r);
          act(b, r) = (zg ? a * (*zg)[r] : a) + bias[r];
        }
      activate_inplace<T>(gate_activation(g), act.flat());
      s.gate[g] = std::move(act);
    }

    s.c = Array2<T>(B, H);
    s.tanh_c = Array2<T>(B, H);
    s.h = Array2<T>(B, H);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t r = 0; r < H; ++r) {
        if (!s.active[b]) {
          s.c(b, r) = s.c_prev(b, r);
          s.h(b, r) = s.h_prev(b, r);
          s.tanh_c(b, r) = std::tanh(s.c(b, r));
          continue;
        }
        const T c = s.gate[kGateF](b, r) * s.c_prev(b, r) + s.gate[kGateI](b, r) * s.gate[kGateG](b, r);
        s.c(b, r) = c;
        s.tanh_c(b, r) = std::tanh(c);
        s.h(b, r) = s.gate[kGateO](b, r) * s.tanh_c(b, r);
      }
    }
    detail::check_finite(s.c, t, "cell state");
    detail::check_finite(s.h, t, "hidden state");
    pass.final_state.h = s.h;
    pass.final_state.c = s.c;
  }
  return pass;
}

/// BPTT through the recurrent layer. `dh` holds ∂loss/∂h_t per step (empty
/// arrays mean zero). Gradients w.r.t. the drawn arrays are added to `grads`;
/// the returned per-step arrays are ∂loss/∂x_t for dense input (empty for
/// one-hot input).
template <class T>
std::vector<Array2<T>> lstm_backward(const ModelShape& shape, const DrawnWeights<T>& w,
                                     const LstmPass<T>& pass, const std::vector<Array2<T>>& dh,
                                     Gradients<T>& grads) {
  const std::size_t T_steps = pass.steps.size();
  if (dh.size() != T_steps) {
    throw StateError("lstm_backward: " + std::to_string(dh.size()) + " upstream gradients for " +
                     std::to_string(T_steps) + " cached timesteps");
  }
  if (T_steps == 0) return {};
  const std::size_t B = pass.steps[0].h.rows(), H = shape.hidden, D = shape.input_dim();
  const Array2<T>* zx = detail::opt_value(w.z_x);
  const Array2<T>* zh = detail::opt_value(w.z_h);

  std::vector<Array2<T>> dx(T_steps);
  Array2<T> dh_next(B, H), dc_next(B, H);
  std::array<Array2<T>, kNumGates> dpre;
  for (auto& a : dpre) a = Array2<T>(B, H);

  for (std::size_t t = T_steps; t-- > 0;) {
    const StepCache<T>& s = pass.steps[t];
    if (s.h.rows() != B) throw StateError("lstm_backward: cache batch size changed");
    if (!dh[t].empty() && (dh[t].rows() != B || dh[t].cols() != H)) {
      throw StateError("lstm_backward: upstream gradient at timestep " + std::to_string(t) +
                       " is " + shape_str(dh[t]));
    }
    Array2<T> dh_total = dh_next;
    if (!dh[t].empty())
      for (std::size_t i = 0; i < dh_total.size(); ++i) dh_total[i] += dh[t][i];

    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t r = 0; r < H; ++r) {
        if (!s.active[b]) {
          for (auto& a : dpre) a(b, r) = T(0);
          // dc_next unchanged: c passes through
          continue;
        }
        const T gi = s.gate[kGateI](b, r), gf = s.gate[kGateF](b, r);
        const T gg = s.gate[kGateG](b, r), go = s.gate[kGateO](b, r);
        const T tc = s.tanh_c(b, r);
        const T dht = dh_total(b, r);
        const T dct = dc_next(b, r) + dht * go * (T(1) - tc * tc);
        dpre[kGateO](b, r) = dht * tc * go * (T(1) - go);
        dpre[kGateF](b, r) = dct * s.c_prev(b, r) * gf * (T(1) - gf);
        dpre[kGateI](b, r) = dct * gg * gi * (T(1) - gi);
        dpre[kGateG](b, r) = dct * gi * (T(1) - gg * gg);
        dc_next(b, r) = dct * gf;
      }
    }

    Array2<T> dhz(B, H);
    Array2<T> dxz = x_is_dense(s) ? Array2<T>(B, D) : Array2<T>();
    for (std::size_t g = 0; g < kNumGates; ++g) {
      Array2<T>& da = dpre[g];
      for (std::size_t r = 0; r < H; ++r) {
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) acc += da(b, r);
        grads.b[g][r] += static_cast<T>(acc);
      }
      if (w.z_gate[g]) {
        const Array2<T>& zg = w.z_gate[g]->value;
        Array2<T>& dzg = *grads.z_gate[g];
        for (std::size_t r = 0; r < H; ++r) {
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b) acc += static_cast<double>(da(b, r)) * s.pre_z[g](b, r);
          dzg[r] += static_cast<T>(acc);
        }
        // da now holds ∂/∂pre_z
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t r = 0; r < H; ++r) da(b, r) *= zg[r];
      }
      gemm_tn_into(da, s.hz, grads.wh[g], true);
      gemm_into(da, w.wh[g].value, dhz, true);
      if (x_is_dense(s)) {
        gemm_tn_into(da, s.xz, grads.wx[g], true);
        gemm_into(da, w.wx[g].value, dxz, true);
      } else {
        const Array2<T>& wxg = w.wx[g].value;
        Array2<T>& dwx = grads.wx[g];
        for (std::size_t b = 0; b < B; ++b) {
          if (!s.active[b]) continue;
          const auto id = static_cast<std::size_t>(s.ids[b]);
          const T scale = zx ? (*zx)[id] : T(1);
          double dz = 0.0;
          for (std::size_t r = 0; r < H; ++r) {
            dwx(r, id) += da(b, r) * scale;
            dz += static_cast<double>(da(b, r)) * wxg(r, id);
          }
          if (zx) (*grads.z_x)[id] += static_cast<T>(dz);
        }
      }
    }

    if (x_is_dense(s)) {
      Array2<T> dxt = dxz;
      if (zx) {
        Array2<T>& dzx = *grads.z_x;
        for (std::size_t c = 0; c < D; ++c) {
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b) acc += static_cast<double>(dxz(b, c)) * s.x(b, c);
          dzx[c] += static_cast<T>(acc);
        }
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < D; ++c) dxt(b, c) *= (*zx)[c];
      }
      dx[t] = std::move(dxt);
    }

    if (zh) {
      Array2<T>& dzh = *grads.z_h;
      for (std::size_t c = 0; c < H; ++c) {
        double acc = 0.0;
        for (std::size_t b = 0; b < B; ++b) acc += static_cast<double>(dhz(b, c)) * s.h_prev(b, c);
        dzh[c] += static_cast<T>(acc);
      }
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t c = 0; c < H; ++c) dhz(b, c) *= (*zh)[c];
    }
    dh_next = std::move(dhz);
    for (std::size_t b = 0; b < B; ++b) {
      if (s.active[b]) continue;
      for (std::size_t r = 0; r < H; ++r) dh_next(b, r) = dh_total(b, r);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Embedding and output layers
// ---------------------------------------------------------------------------

/// Rows of the embedding table for every step, scaled by z^vocab when present.
template <class T>
std::vector<Array2<T>> embedding_forward(const ModelShape& shape, const DrawnWeights<T>& w,
                                         const Batch& batch) {
  if (!w.emb) throw ShapeError("embedding_forward: model has no embedding table");
  const Array2<T>& table = w.emb->value;
  const Array2<T>* zv = detail::opt_value(w.z_vocab);
  std::vector<Array2<T>> xs(batch.steps, Array2<T>(batch.size, shape.emb_dim));
  for (std::size_t t = 0; t < batch.steps; ++t) {
    for (std::size_t b = 0; b < batch.size; ++b) {
      const auto id = batch.token(b, t);
      if (id < 0 || static_cast<std::size_t>(id) >= shape.vocab) {
        throw IndexError("embedding_forward: token id " + std::to_string(id) + " >= vocabulary " +
                         std::to_string(shape.vocab));
      }
      const auto row = table.row(static_cast<std::size_t>(id));
      const T scale = zv ? (*zv)[static_cast<std::size_t>(id)] : T(1);
      auto out = xs[t].row(b);
      for (std::size_t d = 0; d < shape.emb_dim; ++d) out[d] = row[d] * scale;
    }
  }
  return xs;
}

/// Accumulates embedding gradients; only rows of tokens present get touched.
template <class T>
void embedding_backward(const ModelShape& shape, const DrawnWeights<T>& w, const Batch& batch,
                        const std::vector<Array2<T>>& dx, Gradients<T>& grads) {
  const Array2<T>& table = w.emb->value;
  const Array2<T>* zv = detail::opt_value(w.z_vocab);
  for (std::size_t t = 0; t < batch.steps; ++t) {
    for (std::size_t b = 0; b < batch.size; ++b) {
      if (t >= batch.lengths[b]) continue;
      const auto id = static_cast<std::size_t>(batch.token(b, t));
      const auto g = dx[t].row(b);
      const auto row = table.row(id);
      const T scale = zv ? (*zv)[id] : T(1);
      auto dst = grads.emb->row(id);
      double dz = 0.0;
      for (std::size_t d = 0; d < shape.emb_dim; ++d) {
        dst[d] += g[d] * scale;
        dz += static_cast<double>(g[d]) * row[d];
      }
      if (zv) (*grads.z_vocab)[id] += static_cast<T>(dz);
    }
  }
}

/// logits = W^out (h ⊙ z^h) + b^out for every row of `h` (N×H → N×K).
template <class T>
Array2<T> output_forward(const DrawnWeights<T>& w, const Array2<T>& h) {
  const Array2<T>& wout = w.w_out.value;
  if (h.cols() != wout.cols()) {
    throw ShapeError("output_forward: hidden " + shape_str(h) + " vs weights " + shape_str(wout));
  }
  Array2<T> hz = h;
  if (w.z_h)
    for (std::size_t n = 0; n < hz.rows(); ++n)
      for (std::size_t c = 0; c < hz.cols(); ++c) hz(n, c) *= w.z_h->value[c];
  Array2<T> logits(h.rows(), wout.rows());
  gemm_nt_into(hz, wout, logits, false);
  for (std::size_t n = 0; n < logits.rows(); ++n)
    for (std::size_t k = 0; k < logits.cols(); ++k) logits(n, k) += w.b_out.value[k];
  return logits;
}

/// Backward of output_forward; returns ∂loss/∂h.
template <class T>
Array2<T> output_backward(const DrawnWeights<T>& w, const Array2<T>& h, const Array2<T>& dlogits,
                          Gradients<T>& grads) {
  const Array2<T>& wout = w.w_out.value;
  Array2<T> hz = h;
  if (w.z_h)
    for (std::size_t n = 0; n < hz.rows(); ++n)
      for (std::size_t c = 0; c < hz.cols(); ++c) hz(n, c) *= w.z_h->value[c];
  gemm_tn_into(dlogits, hz, grads.w_out, true);
  for (std::size_t k = 0; k < dlogits.cols(); ++k) {
    double acc = 0.0;
    for (std::size_t n = 0; n < dlogits.rows(); ++n) acc += dlogits(n, k);
    grads.b_out[k] += static_cast<T>(acc);
  }
  Array2<T> dhz(h.rows(), h.cols());
  gemm_into(dlogits, wout, dhz, false);
  if (w.z_h) {
    Array2<T>& dzh = *grads.z_h;
    for (std::size_t c = 0; c < h.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < h.rows(); ++n) acc += static_cast<double>(dhz(n, c)) * h(n, c);
      dzh[c] += static_cast<T>(acc);
    }
    for (std::size_t n = 0; n < h.rows(); ++n)
      for (std::size_t c = 0; c < h.cols(); ++c) dhz(n, c) *= w.z_h->value[c];
  }
  return dhz;
}

// ---------------------------------------------------------------------------
// Whole network
// ---------------------------------------------------------------------------

template <class T>
struct ForwardPass {
  LstmPass<T> lstm;
  Array2<T> head_input;  // rows fed to the output layer
  Array2<T> logits;      // classification: B×K; LM: (steps·B)×K, row t·B + b
};

template <class T>
StepInputs<T> make_step_inputs(const ModelShape& shape, const DrawnWeights<T>& w, const Batch& batch) {
  StepInputs<T> in;
  if (shape.one_hot_input()) {
    in.ids.assign(batch.steps, std::vector<std::int32_t>(batch.size));
    for (std::size_t t = 0; t < batch.steps; ++t)
      for (std::size_t b = 0; b < batch.size; ++b) in.ids[t][b] = batch.token(b, t);
  } else {
    in.dense = embedding_forward(shape, w, batch);
  }
  return in;
}

template <class T>
ForwardPass<T> model_forward(const Model<T>& model, const DrawnWeights<T>& w, const Batch& batch,
                             const LstmState<T>* init = nullptr) {
  const ModelShape& shape = model.shape;
  if (batch.lengths.size() != batch.size || batch.tokens.size() != batch.size * batch.steps) {
    throw ShapeError("model_forward: malformed batch");
  }
  ForwardPass<T> fp;
  fp.lstm = lstm_forward(shape, w, make_step_inputs(shape, w, batch), batch.lengths, init);
  const std::size_t B = batch.size, H = shape.hidden;
  if (is_lm(shape.task)) {
    fp.head_input = Array2<T>(batch.steps * B, H);
    for (std::size_t t = 0; t < batch.steps; ++t)
      for (std::size_t b = 0; b < B; ++b) {
        const auto src = fp.lstm.steps[t].h.row(b);
        std::copy(src.begin(), src.end(), fp.head_input.row(t * B + b).begin());
      }
  } else {
    fp.head_input = fp.lstm.final_state.h;
  }
  fp.logits = output_forward(w, fp.head_input);
  return fp;
}

struct HeadLoss {
  double nll_sum = 0.0;
  std::size_t items = 0;
  std::size_t correct = 0;
};

/// Negative log-likelihood of the batch. When `dlogits` is non-null it
/// receives grad_scale·∂nll/∂logits.
template <class T>
HeadLoss head_loss(const ModelShape& shape, const ForwardPass<T>& fp, const Batch& batch,
                   double grad_scale, Array2<T>* dlogits) {
  HeadLoss out;
  if (dlogits) *dlogits = Array2<T>(fp.logits.rows(), fp.logits.cols());
  auto one = [&](std::size_t row, std::int32_t target) {
    if (target < 0) throw IndexError("head_loss: negative target");
    std::size_t am = 0;
    std::span<T> g = dlogits ? dlogits->row(row) : std::span<T>();
    out.nll_sum += softmax_cross_entropy_into<T>(fp.logits.row(row), static_cast<std::size_t>(target),
                                                 g, grad_scale, &am);
    out.correct += am == static_cast<std::size_t>(target) ? 1 : 0;
    ++out.items;
  };
  if (is_lm(shape.task)) {
    for (std::size_t t = 0; t < batch.steps; ++t)
      for (std::size_t b = 0; b < batch.size; ++b)
        if (t < batch.lengths[b]) one(t * batch.size + b, batch.target(b, t));
  } else {
    for (std::size_t b = 0; b < batch.size; ++b) one(b, batch.labels[b]);
  }
  return out;
}

/// Gradients of the loss w.r.t. every drawn array, given ∂loss/∂logits.
template <class T>
Gradients<T> model_backward(const Model<T>& model, const DrawnWeights<T>& w, const Batch& batch,
                            const ForwardPass<T>& fp, const Array2<T>& dlogits) {
  const ModelShape& shape = model.shape;
  Gradients<T> grads = zero_gradients(w);
  const Array2<T> dhead = output_backward(w, fp.head_input, dlogits, grads);
  const std::size_t B = batch.size, H = shape.hidden;
  std::vector<Array2<T>> dh(batch.steps);
  if (is_lm(shape.task)) {
    for (std::size_t t = 0; t < batch.steps; ++t) {
      dh[t] = Array2<T>(B, H);
      for (std::size_t b = 0; b < B; ++b) {
        const auto src = dhead.row(t * B + b);
        std::copy(src.begin(), src.end(), dh[t].row(b).begin());
      }
    }
  } else if (batch.steps > 0) {
    dh[batch.steps - 1] = dhead;
  }
  const auto dx = lstm_backward(shape, w, fp.lstm, dh, grads);
  if (!shape.one_hot_input()) embedding_backward(shape, w, batch, dx, grads);
  return grads;
}

// ---------------------------------------------------------------------------
// Row/column factorization
// ---------------------------------------------------------------------------

/// Dense matrices equivalent to the group-variable layer in deterministic mode:
///   ŵ^x_G[r][c] = W^x_G[r][c]·z^x[c]·z^G[r],  ŵ^h_G[r][c] = W^h_G[r][c]·z^h[c]·z^G[r],
///   ŵ^out[k][j] = W^out[k][j]·z^h[j],  embedding rows E[v]·z^vocab[v].
template <class T>
struct EffectiveWeights {
  std::optional<Array2<T>> emb;
  std::array<Array2<T>, kNumGates> wx, wh, b;
  Array2<T> w_out, b_out;
};

template <class T>
EffectiveWeights<T> effective_weights(const Model<T>& model) {
  const auto& p = model.params;
  auto opt_mean = [](const std::optional<VariationalParam<T>>& v) -> const Array2<T>* {
    return v ? &v->mean : nullptr;
  };
  const Array2<T>* zx = opt_mean(p.z_x);
  const Array2<T>* zh = opt_mean(p.z_h);
  EffectiveWeights<T> e;
  if (p.emb) {
    e.emb = p.emb->mean;
    if (p.z_vocab)
      for (std::size_t v = 0; v < e.emb->rows(); ++v)
        for (std::size_t d = 0; d < e.emb->cols(); ++d) (*e.emb)(v, d) *= p.z_vocab->mean[v];
  }
  for (std::size_t g = 0; g < kNumGates; ++g) {
    const Array2<T>* zg = opt_mean(p.z_gate[g]);
    e.wx[g] = p.wx[g].mean;
    e.wh[g] = p.wh[g].mean;
    e.b[g] = p.b[g].mean;
    for (std::size_t r = 0; r < e.wx[g].rows(); ++r) {
      const T rs = zg ? (*zg)[r] : T(1);
      for (std::size_t c = 0; c < e.wx[g].cols(); ++c) e.wx[g](r, c) *= (zx ? (*zx)[c] : T(1)) * rs;
      for (std::size_t c = 0; c < e.wh[g].cols(); ++c) e.wh[g](r, c) *= (zh ? (*zh)[c] : T(1)) * rs;
    }
  }
  e.w_out = p.w_out.mean;
  if (zh)
    for (std::size_t k = 0; k < e.w_out.rows(); ++k)
      for (std::size_t j = 0; j < e.w_out.cols(); ++j) e.w_out(k, j) *= (*zh)[j];
  e.b_out = p.b_out.mean;
  return e;
}

/// All tensors of the model visited in serialization order.
template <class T, class F>
void for_each_param(Model<T>& m, F&& f) {
  for_each_slot([&](const std::string&, VariationalParam<T>& p) { f(p); }, m.params);
}

template <class T, class F>
void for_each_param(const Model<T>& m, F&& f) {
  for_each_slot([&](const std::string&, const VariationalParam<T>& p) { f(p); }, m.params);
}

}  // namespace svdl
