#include <gtest/gtest.h>

#include <cmath>

#include "svdl/variational.hpp"

using namespace svdl;

namespace {

VariationalParam<double> random_param(Rng& rng, std::size_t r, std::size_t c) {
  VariationalParam<double> p =
      VariationalParam<double>::variational("w", ParamKind::Weight, Array2d(r, c));
  for (std::size_t i = 0; i < p.mean.size(); ++i) {
    p.mean[i] = rng.uniform(-1.0, 1.0);
    p.log_sigma[i] = rng.uniform(-4.0, 1.0);
  }
  return p;
}

// Closed form written out independently of kl::value.
double kl_closed_form(double log_alpha) {
  const double k1 = 0.63576, k2 = 1.87320, k3 = 1.48695;
  const double s = 1.0 / (1.0 + std::exp(-(k2 + k3 * log_alpha)));
  return -(k1 * s - 0.5 * std::log(1.0 + std::exp(-log_alpha)) - k1);
}

}  // namespace

TEST(Sample, VanishingNoiseReturnsMean) {
  Rng rng(1);
  auto p = VariationalParam<float>::variational("w", ParamKind::Weight,
                                                Array2f::from_rows({{0.5f, -1.25f, 3.0f}}), -30.0);
  const auto d = sample(p, NoiseMode::Sampled, &rng);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(d.value[i], p.mean[i], 1e-6);
}

TEST(Sample, DeterministicModeIsExactAndRngFree) {
  Rng rng(1);
  auto p = VariationalParam<float>::variational("w", ParamKind::Weight,
                                                Array2f::from_rows({{0.1f, 0.2f}}), 0.0);
  const auto before = rng.state();
  const auto a = sample(p, NoiseMode::Deterministic, &rng);
  const auto b = sample(p, NoiseMode::Deterministic, nullptr);
  EXPECT_EQ(a.value, p.mean);
  EXPECT_EQ(b.value, p.mean);
  EXPECT_TRUE(a.noise.empty());
  EXPECT_EQ(rng.state(), before);
}

TEST(Sample, MonteCarloMoments) {
  Rng rng(42);
  auto p = VariationalParam<double>::variational("z", ParamKind::Group, Array2d(1, 1, 2.0), 0.0);
  const int n = 10000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double v = sample(p, NoiseMode::Sampled, &rng).value[0];
    sum += v;
    sq += v * v;
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  EXPECT_NEAR(mean, 2.0, 0.05);
  EXPECT_NEAR(sd, 1.0, 0.05);
}

TEST(Sample, ReparamGradientMapsToMeanAndLogSigma) {
  auto p = VariationalParam<double>::variational("w", ParamKind::Weight, Array2d(1, 2, 0.3), -1.0);
  Rng rng(3);
  const auto d = sample(p, NoiseMode::Sampled, &rng);
  Array2d gv = Array2d::from_rows({{2.0, -1.0}});
  Array2d gm(1, 2), gl(1, 2);
  reparam_backward(p, d, gv, gm, gl);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(gm[i], gv[i]);
    EXPECT_DOUBLE_EQ(gl[i], gv[i] * d.noise[i] * std::exp(-1.0));
  }
}

TEST(KlLogUniform, VanishesAtUpperClamp) {
  EXPECT_NEAR(kl::value(20.0), 0.0, 1e-3);
  EXPECT_NEAR(kl::value(20.0), kl_closed_form(20.0), 1e-15);
}

TEST(KlLogUniform, MonotoneDecreasingAndNonNegativeOnGrid) {
  double prev = kl::value(-20.0);
  for (int i = 1; i <= 40000; ++i) {
    const double la = -20.0 + 40.0 * i / 40000.0;
    const double v = kl::value(la);
    ASSERT_LT(v, prev) << "at log alpha " << la;
    ASSERT_GE(v, -1e-3);
    ASSERT_NEAR(v, kl_closed_form(la), 1e-12);
    prev = v;
  }
}

TEST(KlLogUniform, ZeroMeanUsesClamp) {
  auto p = VariationalParam<double>::variational("w", ParamKind::Weight, Array2d(1, 3, 0.0), -3.0);
  const double v = kl_log_uniform(p);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, 3.0 * kl::value(20.0), 1e-15);
  Array2d gm(1, 3), gl(1, 3);
  kl_log_uniform_backward(p, 1.0, gm, gl);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(gm[i], 0.0);
    EXPECT_EQ(gl[i], 0.0);
  }
}

TEST(KlLogUniform, DeterministicParamsContributeNothing) {
  auto p = VariationalParam<double>::deterministic("b", Array2d(1, 4, 0.7));
  EXPECT_EQ(kl_log_uniform(p), 0.0);
}

TEST(KlLogUniform, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  auto p = random_param(rng, 3, 4);
  const std::size_t n = p.mean.size();
  Array2d gm(3, 4), gl(3, 4);
  kl_log_uniform_backward(p, 1.0, gm, gl);

  std::vector<double> theta;
  for (std::size_t i = 0; i < n; ++i) theta.push_back(p.mean[i]);
  for (std::size_t i = 0; i < n; ++i) theta.push_back(p.log_sigma[i]);
  const auto fd = finite_diff_gradient(
      [&](std::span<const double> th) {
        auto q = p;
        for (std::size_t i = 0; i < n; ++i) {
          q.mean[i] = th[i];
          q.log_sigma[i] = th[n + i];
        }
        return kl_log_uniform(q);
      },
      theta, 1e-4);
  for (std::size_t i = 0; i < n; ++i) {
    const double la = kl::log_alpha(p.mean[i], p.log_sigma[i]);
    if (std::abs(la) > 19.0) continue;
    EXPECT_LT(relative_error(gm[i], fd[i]), 1e-3) << "mean " << i;
    EXPECT_LT(relative_error(gl[i], fd[n + i]), 1e-3) << "log sigma " << i;
  }
}

TEST(Snr, Examples) {
  auto p = VariationalParam<double>::variational(
      "w", ParamKind::Weight, Array2d::from_rows({{0.0, 1.0, 0.5}}), 0.0);
  p.log_sigma[2] = -3.0;
  const auto s = snr(p);
  EXPECT_EQ(s[0], 0.0);
  EXPECT_DOUBLE_EQ(s[1], 1.0);
  EXPECT_NEAR(s[2], 0.25 / std::exp(-6.0), 1e-9);
  EXPECT_NEAR(s[2], 100.857, 1e-3);
}

TEST(PruneMask, TauZeroKeepsAll) {
  Rng rng(2);
  auto p = random_param(rng, 4, 5);
  p.mean[0] = 0.0;
  EXPECT_EQ(prune_mask(p, 0.0).kept(), p.mean.size());
}

TEST(PruneMask, BoundaryIsKept) {
  // log σ = 0 so snr = m²; pick m² straddling 0.05
  auto p = VariationalParam<double>::variational(
      "w", ParamKind::Weight,
      Array2d::from_rows({{std::sqrt(0.04), std::sqrt(0.05), std::sqrt(0.06)}}), 0.0);
  const double at = snr(p)[1];
  const auto m = prune_mask(p, at);
  EXPECT_FALSE(m(0, 0));
  EXPECT_TRUE(m(0, 1));
  EXPECT_TRUE(m(0, 2));
  const auto m5 = prune_mask(p, 0.05);
  EXPECT_FALSE(m5(0, 0));
  EXPECT_TRUE(m5(0, 2));
}

TEST(PruneMask, InfiniteTauDropsEverything) {
  Rng rng(6);
  auto p = random_param(rng, 3, 3);
  EXPECT_EQ(prune_mask(p, std::numeric_limits<double>::infinity()).kept(), 0u);
  EXPECT_THROW(prune_mask(p, -1.0), Error);
}

TEST(PruneMask, KeptCountMatchesRecountAndIsMonotone) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    auto p = random_param(rng, 6, 7);
    const double tau = rng.uniform(0.0, 2.0);
    const auto m = prune_mask(p, tau);
    std::size_t recount = 0;
    for (std::size_t i = 0; i < p.mean.size(); ++i) {
      const double ratio = p.mean[i] * p.mean[i] / std::exp(2.0 * p.log_sigma[i]);
      if (!(ratio < tau)) ++recount;
    }
    EXPECT_EQ(m.kept(), recount);

    const double higher = tau + rng.uniform(0.0, 1.0);
    const auto tight = prune_mask(p, higher);
    for (std::size_t i = 0; i < m.keep.size(); ++i) {
      if (tight.keep[i]) {
        EXPECT_TRUE(m.keep[i]);
      }
    }
  }
}
