#include "oracles.hpp"

#include <boost/math/constants/constants.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>

#include <cmath>
#include <numbers>

namespace svflow::oracles {

namespace mp = boost::multiprecision;
using real = mp::cpp_bin_float_50;

double log_bessel_i_series(double nu, double x) {
  if (!(x > 0.0)) throw DomainError("log_bessel_i_series: x must be positive");
  // I_ν(x) = Σ_m (x/2)^{2m+ν} / (m! Γ(m+ν+1)); all terms are positive.
  const real half = real(x) / 2;
  const real q = half * half;
  real term = mp::pow(half, real(nu)) / mp::tgamma(real(nu) + 1);
  real sum = term;
  for (long m = 1;; ++m) {
    term *= q / (real(m) * (real(m) + real(nu)));
    sum += term;
    // Beyond m ≈ x/2 the terms shrink geometrically, so once a term is this
    // small the remaining tail is negligible.
    if (2.0 * static_cast<double>(m) > x && term < sum * real(1e-45)) break;
  }
  return static_cast<double>(mp::log(sum));
}

double vmf_log_normalizer_series(std::size_t d, double kappa) {
  const double nu = 0.5 * static_cast<double>(d) - 1.0;
  const real lk = mp::log(real(kappa));
  const real l2pi = mp::log(2 * boost::math::constants::pi<real>());
  return static_cast<double>(real(nu) * lk - real(nu + 1.0) * l2pi) - log_bessel_i_series(nu, kappa);
}

Vec conditional_log_densities(const FlowModel& m, std::size_t step, const Vec& x) {
  const std::size_t Z = m.num_components();
  const std::size_t d = m.dim();
  Vec out(static_cast<Eigen::Index>(Z));
  const long double log2pi = std::log(2.0L * std::numbers::pi_v<long double>);
  for (std::size_t z = 0; z < Z; ++z) {
    const auto th = m.theta(step, z);
    long double acc = 0.0L;
    if (m.family() == Family::gaussian) {
      for (std::size_t i = 0; i < d; ++i) {
        const long double mean = th[i], ls = th[d + i];
        const long double u = (static_cast<long double>(x[static_cast<Eigen::Index>(i)]) - mean) / std::exp(ls);
        acc += -0.5L * log2pi - ls - 0.5L * u * u;
      }
    } else {
      long double dot = 0.0L;
      for (std::size_t i = 0; i < d; ++i) dot += static_cast<long double>(th[i]) * x[static_cast<Eigen::Index>(i)];
      const double kappa = th[d];
      const long double logc = kappa > 0.0 ? vmf_log_normalizer_series(d, kappa)
                                           : std::lgamma(0.5L * d) - std::log(2.0L) - 0.5L * d * std::log(std::numbers::pi_v<long double>);
      acc = logc + kappa * dot;
    }
    out[static_cast<Eigen::Index>(z)] = static_cast<double>(acc);
  }
  return out;
}

double marginal_log_density(const FlowModel& m, std::size_t step, const Vec& x) {
  const Vec lp = oracles::conditional_log_densities(m, step, x);
  const long double mx = lp.maxCoeff();
  long double s = 0.0L;
  for (Eigen::Index i = 0; i < lp.size(); ++i) s += std::exp(static_cast<long double>(lp[i]) - mx);
  return static_cast<double>(mx + std::log(s) - std::log(static_cast<long double>(lp.size())));
}

Vec central_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h) {
  Vec g(x.size());
  Vec y = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    y[i] = x[i] + h;
    const double fp = f(y);
    y[i] = x[i] - h;
    const double fm = f(y);
    y[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::vector<double> central_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x, double h) {
  std::vector<double> g(x.size());
  std::vector<double> y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] + h;
    const double fp = f(y);
    y[i] = x[i] - h;
    const double fm = f(y);
    y[i] = x[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  require_same_size(a.size(), b.size(), "relative_error");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

}  // namespace svflow::oracles
