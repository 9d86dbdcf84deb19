#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "svdl/numerics.hpp"

namespace svdl {

/// How a parameter tensor is treated by the objective.
enum class ParamKind {
  Deterministic,  ///< point estimate: no log-σ, no KL, never pruned (biases, baseline weights)
  Weight,         ///< individually sparsified weight tensor
  Group,          ///< multiplicative group variable z (neuron, vocabulary entry or gate)
};

/// Fully factorized normal posterior N(mean, exp(log_sigma)²) over a tensor.
/// Deterministic parameters carry an empty log_sigma.
template <class T>
struct VariationalParam {
  std::string name;
  ParamKind kind = ParamKind::Deterministic;
  Array2<T> mean;
  Array2<T> log_sigma;

  static constexpr double kInitLogSigma = -3.0;

  static VariationalParam deterministic(std::string name, Array2<T> value) {
    return {std::move(name), ParamKind::Deterministic, std::move(value), {}};
  }

  static VariationalParam variational(std::string name, ParamKind kind, Array2<T> mean,
                                      double log_sigma = kInitLogSigma) {
    Array2<T> ls(mean.rows(), mean.cols(), static_cast<T>(log_sigma));
    return {std::move(name), kind, std::move(mean), std::move(ls)};
  }

  bool is_variational() const noexcept { return kind != ParamKind::Deterministic; }
  bool is_group() const noexcept { return kind == ParamKind::Group; }
};

/// Train passes draw noise; evaluation passes use the means.
enum class NoiseMode { Sampled, Deterministic };

/// One realization A = M + σ⊙ε. `noise` is kept for the log-σ gradient and is
/// empty when nothing was drawn.
template <class T>
struct Draw {
  Array2<T> value;
  Array2<T> noise;
};

template <class T>
Draw<T> sample(const VariationalParam<T>& p, NoiseMode mode, Rng* rng) {
  if (mode == NoiseMode::Deterministic || !p.is_variational()) return {p.mean, {}};
  if (rng == nullptr) throw Error("sample: sampled mode needs an rng");
  Draw<T> d{p.mean, gaussian_sample<T>(*rng, p.mean.rows(), p.mean.cols())};
  for (std::size_t i = 0; i < d.value.size(); ++i) {
    d.value[i] = static_cast<T>(p.mean[i] + std::exp(p.log_sigma[i]) * d.noise[i]);
  }
  return d;
}

/// Chain rule through the reparameterization: ∂/∂M = ∂/∂A, ∂/∂L = ∂/∂A ⊙ ε ⊙ σ.
template <class T>
void reparam_backward(const VariationalParam<T>& p, const Draw<T>& draw, const Array2<T>& grad_value,
                      Array2<T>& grad_mean, Array2<T>& grad_log_sigma) {
  for (std::size_t i = 0; i < grad_value.size(); ++i) grad_mean[i] += grad_value[i];
  if (draw.noise.empty() || grad_log_sigma.empty()) return;
  for (std::size_t i = 0; i < grad_value.size(); ++i) {
    grad_log_sigma[i] += static_cast<T>(static_cast<double>(grad_value[i]) * draw.noise[i] *
                                        std::exp(static_cast<double>(p.log_sigma[i])));
  }
}

// ---------------------------------------------------------------------------
// KL(q || log-uniform prior), sigmoid approximation in log α.
// ---------------------------------------------------------------------------

namespace kl {

inline constexpr double k1 = 0.63576;
inline constexpr double k2 = 1.87320;
inline constexpr double k3 = 1.48695;
inline constexpr double kLogAlphaClamp = 20.0;

/// log α = log σ² − log m², clamped. m = 0 lands on the upper bound.
inline double log_alpha(double mean, double log_sigma) {
  const double m2 = mean * mean;
  const double la = m2 > 0.0 ? 2.0 * log_sigma - std::log(m2)
                             : std::numeric_limits<double>::infinity();
  return std::clamp(la, -kLogAlphaClamp, kLogAlphaClamp);
}

/// Per-element divergence as a function of log α.
inline double value(double log_alpha) {
  const double s = sigmoid(k2 + k3 * log_alpha);
  // log(1 + α⁻¹) via log1p of exp(−log α) stays finite on the clamp range
  return -(k1 * s - 0.5 * std::log1p(std::exp(-log_alpha)) - k1);
}

/// d value / d log α.
inline double slope(double log_alpha) {
  const double s = sigmoid(k2 + k3 * log_alpha);
  return -k1 * k3 * s * (1.0 - s) - 0.5 * sigmoid(-log_alpha);
}

}  // namespace kl

/// Σ over elements of KL(N(m, σ²) || log-uniform). Deterministic params contribute 0.
template <class T>
double kl_log_uniform(const VariationalParam<T>& p) {
  if (!p.is_variational()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    total += kl::value(kl::log_alpha(p.mean[i], p.log_sigma[i]));
  }
  return total;
}

/// Adds scale·∂KL/∂(M, L) into the gradient buffers. Elements sitting on the
/// clamp get zero gradient.
template <class T>
void kl_log_uniform_backward(const VariationalParam<T>& p, double scale, Array2<T>& grad_mean,
                             Array2<T>& grad_log_sigma) {
  if (!p.is_variational() || scale == 0.0) return;
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    const double m = p.mean[i];
    const double m2 = m * m;
    if (m2 == 0.0) continue;
    const double raw = 2.0 * static_cast<double>(p.log_sigma[i]) - std::log(m2);
    if (raw >= kl::kLogAlphaClamp || raw <= -kl::kLogAlphaClamp) continue;
    const double d = scale * kl::slope(raw);
    grad_log_sigma[i] += static_cast<T>(2.0 * d);
    grad_mean[i] += static_cast<T>(-2.0 * d / m);
  }
}

// ---------------------------------------------------------------------------
// Signal-to-noise ratio and pruning
// ---------------------------------------------------------------------------

/// m² / σ² elementwise. Deterministic params have no noise; their SNR is +∞.
template <class T>
Array2<double> snr(const VariationalParam<T>& p) {
  Array2<double> out(p.mean.rows(), p.mean.cols(), std::numeric_limits<double>::infinity());
  if (!p.is_variational()) return out;
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    const double m = p.mean[i];
    out[i] = m * m * std::exp(-2.0 * static_cast<double>(p.log_sigma[i]));
  }
  return out;
}

/// Keep-mask of a tensor. An empty mask means "not prunable".
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> keep;

  bool empty() const noexcept { return keep.empty(); }
  bool operator()(std::size_t r, std::size_t c) const { return keep[r * cols + c] != 0; }
  std::size_t kept() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
  }

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// keep iff snr ≥ τ. Values exactly at τ survive.
template <class T>
Mask prune_mask(const VariationalParam<T>& p, double tau) {
  if (tau < 0.0 || std::isnan(tau)) throw Error("prune_mask: tau must be >= 0");
  const Array2<double> ratio = snr(p);
  Mask m{ratio.rows(), ratio.cols(), std::vector<std::uint8_t>(ratio.size())};
  for (std::size_t i = 0; i < ratio.size(); ++i) m.keep[i] = ratio[i] >= tau ? 1 : 0;
  return m;
}

}  // namespace svdl
