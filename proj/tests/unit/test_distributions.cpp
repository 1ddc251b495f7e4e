#include "oracles.hpp"
#include "svflow/distributions.hpp"
#include "svflow/geometry.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

using namespace svflow;

namespace {

constexpr double kPi = std::numbers::pi;

Vec vec(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

Vec random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  Vec v(static_cast<Eigen::Index>(d));
  for (auto& c : v) c = n(rng);
  return v / v.norm();
}

}  // namespace

TEST(VmfNormalizer, ClosedFormInThreeDimensions) {
  EXPECT_NEAR(vmf_log_normalizer(3, 1.0), std::log(1.0 / (4 * kPi * std::sinh(1.0))), 1e-14);
  for (double k : {0.01, 0.3, 2.0, 15.0, 300.0}) {
    // log(κ/(4π sinh κ)) written stably for large κ.
    const double ref = std::log(k) - std::log(2 * kPi) - k - std::log1p(-std::exp(-2 * k));
    EXPECT_NEAR(vmf_log_normalizer(3, k), ref, 1e-12 * std::max(1.0, std::abs(ref))) << "kappa " << k;
  }
}

TEST(VmfNormalizer, UniformLimit) {
  EXPECT_NEAR(vmf_log_normalizer(3, 1e-12), std::log(1.0 / (4 * kPi)), 1e-12);
  EXPECT_NEAR(vmf_log_normalizer(3, 0.0), std::log(1.0 / (4 * kPi)), 1e-14);
}

TEST(VmfNormalizer, HighDimensionLargeKappaMatchesSeries) {
  const double v = vmf_log_normalizer(64, 1e5);
  ASSERT_TRUE(std::isfinite(v));
  const double ref = oracles::vmf_log_normalizer_series(64, 1e5);
  EXPECT_LE(std::abs(v - ref) / std::abs(ref), 1e-6);
}

TEST(VmfNormalizer, MonotoneDecreasingInKappa) {
  for (std::size_t d : {3, 8, 64, 512}) {
    double prev = vmf_log_normalizer(d, 1e-6);
    for (double k = 1e-3; k < 1e5; k *= 1.37) {
      const double cur = vmf_log_normalizer(d, k);
      EXPECT_LT(cur, prev) << "d " << d << " kappa " << k;
      prev = cur;
    }
  }
}

TEST(VmfNormalizer, RejectsNegativeKappa) { EXPECT_THROW(vmf_log_normalizer(3, -1.0), DomainError); }

TEST(VmfMeanResultant, IsMinusDerivativeOfLogNormalizer) {
  for (std::size_t d : {3, 16}) {
    for (double k : {0.5, 4.0, 40.0}) {
      const double h = 1e-5 * k;
      const double fd = -(vmf_log_normalizer(d, k + h) - vmf_log_normalizer(d, k - h)) / (2 * h);
      EXPECT_NEAR(vmf_mean_resultant(d, k), fd, 1e-7);
    }
  }
}

TEST(VmfDensity, UniformAtZeroKappa) {
  const VmfParams p{vec({0, 0, 1}), 0.0};
  EXPECT_NEAR(vmf_log_density(vec({1, 0, 0}), p), std::log(1.0 / (4 * kPi)), 1e-14);
}

TEST(VmfDensity, PoleDifferenceIsTwoKappa) {
  const VmfParams p{vec({0.6, 0, 0.8}), 3.7};
  EXPECT_NEAR(vmf_log_density(p.mu, p) - vmf_log_density(-p.mu, p), 2 * 3.7, 1e-13);
}

TEST(VmfDensity, IntegratesToOneOnTwoSphere) {
  using Rule = boost::math::quadrature::gauss<double, 150>;
  std::mt19937_64 rng(2);
  const Vec mu = random_unit(3, rng);
  for (double kappa : {0.5, 5.0, 50.0}) {
    const VmfParams p{mu, kappa};
    // Product rule: Gauss–Legendre in cos θ, periodic trapezoid in φ.
    const int nphi = 256;
    double total = 0.0;
    for (int j = 0; j < nphi; ++j) {
      const double phi = 2 * kPi * j / nphi;
      total += Rule::integrate(
                   [&](double t) {
                     const double s = std::sqrt(std::max(0.0, 1 - t * t));
                     return std::exp(vmf_log_density(vec({s * std::cos(phi), s * std::sin(phi), t}), p));
                   },
                   -1.0, 1.0) *
               (2 * kPi / nphi);
    }
    EXPECT_NEAR(total, 1.0, 1e-4) << "kappa " << kappa;
  }
}

TEST(VmfScore, ConstantKappaMu) {
  EXPECT_LE((vmf_score({vec({0, 0, 1}), 2.5}) - vec({0, 0, 2.5})).norm(), 0.0);
  EXPECT_LE(vmf_score({vec({0, 1, 0}), 0.0}).norm(), 0.0);
}

TEST(VmfScore, MatchesTangentialFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const VmfParams p{random_unit(5, rng), 0.5 + 10.0 * std::uniform_real_distribution<double>()(rng)};
    const Vec x = random_unit(5, rng);
    // Extending the density radially makes its ambient gradient tangent.
    const Vec fd =
        oracles::central_gradient([&](const Vec& y) { return vmf_log_density(y / y.norm(), p); }, x, 1e-6);
    const Vec a = geometry::tangent_project(x, vmf_score(p)).v;
    const Vec& b = fd;
    EXPECT_LE((a - b).norm() / b.norm(), 1e-6);
  }
}

TEST(Gaussian, ScoreZeroAtMean) {
  const DiagGaussianParams p{vec({0.3, -1.2}), vec({0.1, -0.4})};
  EXPECT_LE(gaussian_score(p.mean, p).norm(), 0.0);
}

TEST(Gaussian, StandardNormalAtOrigin) {
  const DiagGaussianParams p{vec({0.0}), vec({0.0})};
  EXPECT_NEAR(gaussian_log_density(vec({0.0}), p), -0.5 * std::log(2 * kPi), 1e-15);
}

TEST(Gaussian, ScoreMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 20; ++trial) {
    DiagGaussianParams p{Vec(3), Vec(3)};
    Vec x(3);
    for (int i = 0; i < 3; ++i) {
      p.mean[i] = n(rng);
      p.log_std[i] = 0.3 * n(rng);
      x[i] = n(rng);
    }
    const Vec fd = oracles::central_gradient([&](const Vec& y) { return gaussian_log_density(y, p); }, x, 1e-5);
    const Vec s = gaussian_score(x, p);
    EXPECT_LE((s - fd).norm() / s.norm(), 1e-7);
  }
}

TEST(Softmax, EqualLogits) {
  const auto q = softmax(vec({0, 0}));
  EXPECT_DOUBLE_EQ(q[0], 0.5);
  EXPECT_DOUBLE_EQ(q[1], 0.5);
}

TEST(Softmax, ShiftInvariant) {
  const Vec l = vec({0.3, -2.0, 1.7, 0.0});
  const auto a = softmax(l);
  const auto b = softmax((l.array() + 123.4).matrix());
  EXPECT_LE((a.values() - b.values()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Softmax, NoOverflow) {
  const auto q = softmax(vec({1000, 0}));
  EXPECT_DOUBLE_EQ(q[0], 1.0);
  EXPECT_GE(q[1], 0.0);
  EXPECT_LT(q[1], 1e-300);
}

TEST(ProbVector, RejectsInvalid) {
  EXPECT_THROW(ProbVector(vec({0.5, 0.6})), Error);
  EXPECT_THROW(ProbVector(vec({1.5, -0.5})), Error);
}

TEST(CategoricalKl, ZeroForEqualArguments) {
  const ProbVector q(vec({0.2, 0.5, 0.3}));
  EXPECT_DOUBLE_EQ(categorical_kl(q, q), 0.0);
}

TEST(CategoricalKl, TwoPointValue) {
  // 0.7 log 1.4 + 0.3 log 0.6
  EXPECT_NEAR(categorical_kl(ProbVector(vec({0.7, 0.3})), ProbVector::uniform(2)), 0.0822828785, 1e-9);
}

TEST(CategoricalKl, InfiniteOnSupportMismatch) {
  EXPECT_EQ(categorical_kl(ProbVector::one_hot(3, 2), ProbVector(vec({0.5, 0.5, 0.0}))), kInf);
}

TEST(CategoricalKl, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 500; ++trial) {
    Vec a(6), b(6);
    for (int i = 0; i < 6; ++i) {
      a[i] = 3 * n(rng);
      b[i] = 3 * n(rng);
    }
    const auto q = softmax(a), p = softmax(b);
    const double kl = categorical_kl(q, p);
    EXPECT_GE(kl, 0.0);
    if ((q.values() - p.values()).cwiseAbs().maxCoeff() > 1e-12) {
      EXPECT_GT(kl, 0.0);
    }
  }
}

TEST(KlToUniform, Extremes) {
  EXPECT_NEAR(kl_to_uniform(ProbVector::uniform(8)), 0.0, 1e-15);
  EXPECT_NEAR(kl_to_uniform(ProbVector::one_hot(8, 3)), std::log(8.0), 1e-15);
}

TEST(KlToUniform, MatchesCategoricalKl) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  for (int trial = 0; trial < 200; ++trial) {
    Vec a(8);
    for (auto& c : a) c = 2 * n(rng);
    const auto q = softmax(a);
    const double v = kl_to_uniform(q);
    EXPECT_NEAR(v, categorical_kl(q, ProbVector::uniform(8)), 1e-12);
    EXPECT_LE(v, std::log(8.0));
  }
}

TEST(LogBessel, AgreesWithSeriesAcrossRegimes) {
  for (double nu : {0.5, 1.0, 6.5, 31.0}) {
    for (double x : {1e-3, 0.5, 7.0, bessel_switch_point(nu), 250.0, 1e4}) {
      const double ref = oracles::log_bessel_i_series(nu, x);
      EXPECT_LE(std::abs(log_bessel_i(nu, x) - ref) / std::max(1.0, std::abs(ref)), 1e-10)
          << "nu " << nu << " x " << x;
    }
  }
}
