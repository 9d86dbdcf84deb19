#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "svdl/error.hpp"

namespace svdl {

/// Dense row-major matrix. The shape is fixed at construction.
template <class T>
class Array2 {
 public:
  using value_type = T;

  Array2() = default;

  Array2(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Array2(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Array2: " + std::to_string(data_.size()) + " elements for shape " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Array2 from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Array2::from_rows: ragged rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Array2(r, c, std::move(data));
  }

  /// 1×n row vector.
  static Array2 row_vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Array2(1, n, std::move(values));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> flat() { return data_; }
  std::span<const T> flat() const { return data_; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  bool same_shape(const Array2& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <class U>
  Array2<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Array2<U>(rows_, cols_, std::move(out));
  }

  friend bool operator==(const Array2& a, const Array2& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

template <class T>
using Array1 = std::vector<T>;

using Array2f = Array2<float>;
using Array2d = Array2<double>;

inline std::string shape_str(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

template <class T>
std::string shape_str(const Array2<T>& a) {
  return shape_str(a.rows(), a.cols());
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// xoshiro256** seeded through splitmix64. Normal draws use the Marsaglia
/// polar method so the sequence depends only on IEEE arithmetic, sqrt and log.
class Rng {
 public:
  static constexpr const char* kAlgorithm = "xoshiro256ss";

  struct State {
    std::array<std::uint64_t, 4> s{};
    bool has_spare = false;
    double spare = 0.0;

    friend bool operator==(const State&, const State&) = default;
  };

  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& w : state_.s) w = splitmix64(x);
    state_.has_spare = false;
    state_.spare = 0.0;
  }

  std::uint64_t next_u64() {
    auto& s = state_.s;
    const std::uint64_t result = std::rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = std::rotl(s[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw IndexError("Rng::below: empty range");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (state_.has_spare) {
      state_.has_spare = false;
      return state_.spare;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    state_.spare = v * f;
    state_.has_spare = true;
    return u * f;
  }

  /// Independent generator for a named purpose, derived from this one's seed stream.
  Rng fork(std::uint64_t stream) {
    return Rng(next_u64() ^ (stream * 0x9E3779B97F4A7C15ull));
  }

  const State& state() const noexcept { return state_; }
  void set_state(const State& s) { state_ = s; }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  State state_;
};

/// i.i.d. standard normal draws of the given shape.
template <class T = float>
Array2<T> gaussian_sample(Rng& rng, std::size_t rows, std::size_t cols) {
  Array2<T> out(rows, cols);
  for (auto& v : out.flat()) v = static_cast<T>(rng.normal());
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products. All reductions accumulate in double; the summation order
// per output element is the inner index in ascending order.
// ---------------------------------------------------------------------------

namespace detail {

// c (+)= a·b, row-axpy form so the innermost loop is contiguous in b and c.
template <class T>
void gemm_kernel(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate) {
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double ail = static_cast<double>(arow[l]);
      const T* brow = b + l * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += ail * static_cast<double>(brow[j]);
    }
    T* crow = c + i * n;
    if (accumulate) {
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(crow[j] + acc[j]);
    } else {
      for (std::size_t j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
    }
  }
}

}  // namespace detail

/// C = A·B.
template <class T>
Array2<T> gemm(const Array2<T>& a, const Array2<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("gemm: " + shape_str(a) + " times " + shape_str(b));
  }
  Array2<T> c(a.rows(), b.cols());
  detail::gemm_kernel(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols(), false);
  return c;
}

/// C (+)= A·B into an existing output.
template <class T>
void gemm_into(const Array2<T>& a, const Array2<T>& b, Array2<T>& c, bool accumulate) {
  if (a.cols() != b.rows() || c.rows() != a.rows() || c.cols() != b.cols()) {
    throw ShapeError("gemm_into: " + shape_str(a) + " times " + shape_str(b) + " into " +
                     shape_str(c));
  }
  detail::gemm_kernel(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols(), accumulate);
}

template <class T>
Array2<T> transpose(const Array2<T>& a) {
  Array2<T> t(a.cols(), a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
  return t;
}

/// C (+)= A·Bᵀ.
template <class T>
void gemm_nt_into(const Array2<T>& a, const Array2<T>& b, Array2<T>& c, bool accumulate) {
  if (a.cols() != b.cols() || c.rows() != a.rows() || c.cols() != b.rows()) {
    throw ShapeError("gemm_nt_into: " + shape_str(a) + " times transpose of " + shape_str(b) +
                     " into " + shape_str(c));
  }
  const Array2<T> bt = transpose(b);
  detail::gemm_kernel(a.data(), bt.data(), c.data(), a.rows(), a.cols(), bt.cols(), accumulate);
}

/// C (+)= Aᵀ·B.
template <class T>
void gemm_tn_into(const Array2<T>& a, const Array2<T>& b, Array2<T>& c, bool accumulate) {
  if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
    throw ShapeError("gemm_tn_into: transpose of " + shape_str(a) + " times " + shape_str(b) +
                     " into " + shape_str(c));
  }
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t l = 0; l < k; ++l) {
      const double ali = static_cast<double>(a(l, i));
      const T* brow = b.data() + l * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += ali * static_cast<double>(brow[j]);
    }
    auto crow = c.row(i);
    for (std::size_t j = 0; j < n; ++j)
      crow[j] = static_cast<T>(accumulate ? crow[j] + acc[j] : acc[j]);
  }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { Sigmoid, Tanh };

template <class T>
T sigmoid(T x) {
  // Both branches avoid exp overflow; the result stays strictly inside (0, 1)
  // in double and saturates to the representable bound in float.
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T activate(Activation kind, T x) {
  return kind == Activation::Sigmoid ? sigmoid(x) : std::tanh(x);
}

template <class T>
void activate_inplace(Activation kind, std::span<T> xs) {
  if (kind == Activation::Sigmoid) {
    for (auto& v : xs) v = sigmoid(v);
  } else {
    for (auto& v : xs) v = std::tanh(v);
  }
}

template <class T>
Array2<T> activation(Activation kind, Array2<T> x) {
  activate_inplace<T>(kind, x.flat());
  return x;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

template <class T>
struct CrossEntropy {
  double loss = 0.0;
  Array1<T> grad;
  std::size_t argmax = 0;
};

/// −log softmax(logits)[target] with the max-subtracted log-sum-exp, and its
/// gradient softmax(logits) − onehot(target) written to `grad`.
template <class T>
double softmax_cross_entropy_into(std::span<const T> logits, std::size_t target,
                                  std::span<T> grad, double grad_scale = 1.0,
                                  std::size_t* argmax = nullptr) {
  const std::size_t k = logits.size();
  if (target >= k) {
    throw IndexError("softmax_cross_entropy: target " + std::to_string(target) +
                     " out of range for " + std::to_string(k) + " classes");
  }
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits[j] > logits[best]) best = j;
  const double mx = static_cast<double>(logits[best]);
  double sum = 0.0;
  for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(logits[j]) - mx);
  const double lse = mx + std::log(sum);
  if (!grad.empty()) {
    for (std::size_t j = 0; j < k; ++j) {
      double p = std::exp(static_cast<double>(logits[j]) - lse);
      if (j == target) p -= 1.0;
      grad[j] = static_cast<T>(grad_scale * p);
    }
  }
  if (argmax) *argmax = best;
  return lse - static_cast<double>(logits[target]);
}

template <class T>
CrossEntropy<T> softmax_cross_entropy(std::span<const T> logits, std::size_t target) {
  CrossEntropy<T> out;
  out.grad.assign(logits.size(), T{});
  out.loss = softmax_cross_entropy_into<T>(logits, target, out.grad, 1.0, &out.argmax);
  return out;
}

// ---------------------------------------------------------------------------
// Verification
// ---------------------------------------------------------------------------

/// Central differences (f(θ+εe_i) − f(θ−εe_i)) / 2ε for every coordinate.
inline std::vector<double> finite_diff_gradient(
    const std::function<double(std::span<const double>)>& f, std::vector<double> theta,
    double eps) {
  if (!(eps > 0.0)) throw Error("finite_diff_gradient: eps must be positive");
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + eps;
    const double up = f(theta);
    theta[i] = keep - eps;
    const double down = f(theta);
    theta[i] = keep;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw NumericError("finite_diff_gradient: non-finite objective at coordinate " +
                         std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

/// |a − b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-6) {
  const double den = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / den;
}

template <class T>
bool all_finite(std::span<const T> xs) {
  for (const auto& v : xs)
    if (!std::isfinite(v)) return false;
  return true;
}

/// Six significant digits, as used in every text report.
inline std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

}  // namespace svdl
