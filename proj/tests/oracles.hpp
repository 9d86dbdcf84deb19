#pragma once

// Independent recounts used by both the unit suites and the acceptance
// binary. Nothing here calls the code paths it checks.

#include <cmath>
#include <optional>
#include <vector>

#include "svdl/compression.hpp"
#include "svdl/training.hpp"
#include "test_support.hpp"

namespace svdl::testing {

inline double kl_closed_form(double log_alpha) {
  const double k1 = 0.63576, k2 = 1.87320, k3 = 1.48695;
  const double s = 1.0 / (1.0 + std::exp(-(k2 + k3 * log_alpha)));
  return -(k1 * s - 0.5 * std::log(1.0 + std::exp(-log_alpha)) - k1);
}

inline double kept(const VariationalParam<double>& p, std::size_t i, double tau) {
  if (!p.is_variational()) return p.mean[i];
  const double s = std::exp(static_cast<double>(p.log_sigma[i]));
  const double m = p.mean[i];
  return m * m / (s * s) >= tau ? m : 0.0;
}

inline double opt_kept(const std::optional<VariationalParam<double>>& p, std::size_t i, double tau) {
  return p ? kept(*p, i, tau) : 1.0;
}

/// Means with every entry below τ zeroed, applied by hand.
inline Model<double> masked_dense(const Model<double>& m, double tau) {
  Model<double> o = m;
  for_each_param(o, [&](VariationalParam<double>& p) {
    for (std::size_t i = 0; i < p.mean.size(); ++i) p.mean[i] = kept(p, i, tau);
  });
  return o;
}

struct CountOracle {
  std::size_t total = 0, nonzero = 0;
  std::size_t inputs = 0, hidden = 0, nonconstant = 0;
  std::vector<std::vector<bool>> constant;  // [gate][unit]
  std::vector<std::vector<double>> value;
};

// Recount from raw means, log-σ and τ with plain loops.
inline CountOracle brute_force_counts(const Model<double>& m, double tau) {
  const auto& p = m.params;
  const std::size_t H = m.shape.hidden, D = m.shape.input_dim(), K = m.shape.classes;
  CountOracle o;
  std::vector<std::vector<std::vector<double>>> wx(4, std::vector<std::vector<double>>(H, std::vector<double>(D)));
  std::vector<std::vector<std::vector<double>>> wh(4, std::vector<std::vector<double>>(H, std::vector<double>(H)));
  for (int g = 0; g < 4; ++g)
    for (std::size_t r = 0; r < H; ++r) {
      const double zg = opt_kept(p.z_gate[g], r, tau);
      for (std::size_t c = 0; c < D; ++c) wx[g][r][c] = kept(p.wx[g], r * D + c, tau) * opt_kept(p.z_x, c, tau) * zg;
      for (std::size_t c = 0; c < H; ++c) wh[g][r][c] = kept(p.wh[g], r * H + c, tau) * opt_kept(p.z_h, c, tau) * zg;
    }
  std::vector<std::vector<double>> wo(K, std::vector<double>(H));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t j = 0; j < H; ++j) wo[k][j] = kept(p.w_out, k * H + j, tau) * opt_kept(p.z_h, j, tau);

  std::vector<bool> consumed(D, false);
  for (int g = 0; g < 4; ++g)
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < D; ++c)
        if (wx[g][r][c] != 0.0) consumed[c] = true;

  auto tally = [&](double v) {
    ++o.total;
    if (v != 0.0) ++o.nonzero;
  };
  if (p.emb) {
    const std::size_t E = m.shape.emb_dim;
    for (std::size_t v = 0; v < m.shape.vocab; ++v) {
      bool any = false;
      for (std::size_t d = 0; d < E; ++d) {
        const double e = consumed[d] ? kept(*p.emb, v * E + d, tau) * opt_kept(p.z_vocab, v, tau) * opt_kept(p.z_x, d, tau) : 0.0;
        tally(e);
        any = any || e != 0.0;
      }
      if (any) ++o.inputs;
    }
  } else {
    for (std::size_t c = 0; c < D; ++c)
      if (consumed[c]) ++o.inputs;
  }
  for (int g = 0; g < 4; ++g)
    for (std::size_t r = 0; r < H; ++r) {
      for (double v : wx[g][r]) tally(v);
      for (double v : wh[g][r]) tally(v);
    }
  for (const auto& row : wo)
    for (double v : row) tally(v);

  for (std::size_t j = 0; j < H; ++j) {
    if (opt_kept(p.z_h, j, tau) == 0.0) continue;
    bool used = false;
    for (int g = 0; g < 4; ++g)
      for (std::size_t r = 0; r < H; ++r) used = used || wh[g][r][j] != 0.0;
    for (std::size_t k = 0; k < K; ++k) used = used || wo[k][j] != 0.0;
    if (used) ++o.hidden;
  }

  o.constant.assign(4, std::vector<bool>(H));
  o.value.assign(4, std::vector<double>(H));
  for (int g = 0; g < 4; ++g)
    for (std::size_t j = 0; j < H; ++j) {
      bool any = false;
      for (double v : wx[g][j]) any = any || v != 0.0;
      for (double v : wh[g][j]) any = any || v != 0.0;
      const bool c = opt_kept(p.z_gate[g], j, tau) == 0.0 || !any;
      o.constant[g][j] = c;
      const double b = p.b[g].mean[j];
      o.value[g][j] = g == 2 ? std::tanh(b) : 1.0 / (1.0 + std::exp(-b));
      if (!c) ++o.nonconstant;
    }
  return o;
}

/// Mismatch description against the oracle, empty when everything agrees.
template <class T>
std::string compare_counts(const PrunedModel<T>& pruned, const CountOracle& o) {
  const auto rep = compression_rate(pruned);
  if (rep.total != o.total) return "total weights";
  if (rep.nonzero != o.nonzero) return "nonzero weights";
  if (rep.rate != static_cast<double>(o.total) / static_cast<double>(std::max<std::size_t>(o.nonzero, 1)))
    return "compression rate";
  const auto n = count_active_neurons(pruned);
  if (n.input != o.inputs) return "active inputs";
  if (n.hidden != o.hidden) return "active hidden";
  const auto [count, gs] = count_nonconstant_gates(pruned);
  if (count != o.nonconstant) return "non-constant gates";
  for (int g = 0; g < 4; ++g)
    for (std::size_t j = 0; j < gs.hidden(); ++j) {
      if (gs.units[g][j].constant != o.constant[g][j]) return "gate flag";
      if (o.constant[g][j] && std::abs(gs.units[g][j].value - o.value[g][j]) > 1e-12) return "gate value";
    }
  return {};
}

struct GradCheck {
  double worst = 0.0;
  std::size_t worst_index = 0, coords = 0;
  double analytic = 0.0, numeric = 0.0;  // at worst_index
};

/// Analytic ELBO gradient of every trainable scalar against central
/// differences at step 1e-5 (D=3, H=4, V=11, K=2, three ragged rows of T=5).
inline GradCheck elbo_gradient_check(Task task, Variant variant, bool per_sequence, std::uint64_t seed) {
  const auto shape = make_shape(task, variant, 3, 4, 11, 2);
  Rng rng(seed);
  auto model = random_model<double>(shape, rng);
  // keep log α off the clamp kink
  for_each_param(model, [](VariationalParam<double>& p) {
    if (p.is_variational())
      for (auto& v : p.mean.flat())
        if (std::abs(v) < 0.01) v = 0.05;
  });
  const Batch batch = random_batch(shape, rng, 3, 5, true);
  const Rng noise(seed + 1000);
  const double N = 40.0, kl_scale = 0.7;
  const auto* no_state = static_cast<const LstmState<double>*>(nullptr);
  auto* no_out = static_cast<LstmState<double>*>(nullptr);

  Rng r0 = noise;
  ParamGrads<double> grads;
  elbo_minibatch(model, batch, N, NoiseMode::Sampled, kl_scale, &r0, &grads, no_state, no_out, per_sequence);
  std::vector<double*> slots;
  std::vector<double> analytic;
  auto ps = trainable_arrays(model);
  auto gs = gradient_arrays(grads);
  for (std::size_t k = 0; k < ps.size(); ++k)
    for (std::size_t i = 0; i < ps[k]->size(); ++i) {
      slots.push_back(&(*ps[k])[i]);
      analytic.push_back((*gs[k])[i]);
    }
  std::vector<double> theta;
  for (auto* p : slots) theta.push_back(*p);
  const auto fd = finite_diff_gradient(
      [&](std::span<const double> th) {
        for (std::size_t i = 0; i < th.size(); ++i) *slots[i] = th[i];
        Rng r = noise;
        return elbo_minibatch(model, batch, N, NoiseMode::Sampled, kl_scale, &r, static_cast<ParamGrads<double>*>(nullptr),
                              no_state, no_out, per_sequence)
            .loss;
      },
      theta, 1e-5);
  for (std::size_t i = 0; i < slots.size(); ++i) *slots[i] = theta[i];
  GradCheck out;
  out.coords = fd.size();
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double e = relative_error(analytic[i], fd[i], 1e-4);
    if (e > out.worst || i == 0) out = {std::max(e, out.worst), i, fd.size(), analytic[i], fd[i]};
  }
  return out;
}

}  // namespace svdl::testing
