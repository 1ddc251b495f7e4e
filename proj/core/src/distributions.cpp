#include "svflow/distributions.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace svflow {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2π)
constexpr double kUnitTol = 1e-10;

// Power series Σ_k (x/2)^{2k+ν} / (k! Γ(k+ν+1)), summed in log space.
double log_bessel_series(double nu, double x) {
  const double log_half_x = std::log(0.5 * x);
  const double quarter_x2 = 0.25 * x * x;
  double log_term = nu * log_half_x - std::lgamma(nu + 1.0);
  // Running sum scaled by exp(-ref).
  double ref = log_term;
  double sum = 1.0;
  double term_rel = 1.0;  // current term / exp(ref)
  const double peak = 0.5 * (std::sqrt(nu * nu + x * x) - nu);
  for (int k = 1; k < 1000000; ++k) {
    const double ratio = quarter_x2 / (static_cast<double>(k) * (static_cast<double>(k) + nu));
    term_rel *= ratio;
    if (term_rel > 1e100) {
      // Rebase to keep the scaled sum representable.
      const double shift = std::log(term_rel);
      ref += shift;
      sum *= std::exp(-shift);
      term_rel = 1.0;
    }
    sum += term_rel;
    if (static_cast<double>(k) > peak && term_rel < 1e-18 * sum) break;
  }
  return ref + std::log(sum);
}

// Large-argument expansion
//   I_ν(x) ≈ e^x / √(2πx) · Σ_k (−1)^k a_k(ν) / x^k,
//   a_k(ν) = Π_{j=1..k} (4ν² − (2j−1)²) / (k! 8^k).
double log_bessel_asymptotic(double nu, double x) {
  const double mu = 4.0 * nu * nu;
  double term = 1.0;
  double sum = 1.0;
  double prev_abs = 1.0;
  for (int k = 1; k < 200; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (static_cast<double>(k) * 8.0 * x);
    const double a = std::abs(term);
    if (a > prev_abs) break;  // asymptotic series started to diverge
    sum += term;
    if (a < 1e-17 * std::abs(sum)) break;
    prev_abs = a;
  }
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
}
}  // namespace

// ---------------------------------------------------------------------------

ProbVector::ProbVector(Vec probs, double tol) : probs_(std::move(probs)) {
  if (probs_.size() == 0) throw PreconditionError("ProbVector: empty support");
  for (Eigen::Index i = 0; i < probs_.size(); ++i) {
    if (!(probs_[i] >= 0.0)) throw PreconditionError("ProbVector: negative or NaN entry");
  }
  if (std::abs(probs_.sum() - 1.0) > tol) {
    throw PreconditionError("ProbVector: entries sum to " + std::to_string(probs_.sum()));
  }
}

ProbVector ProbVector::uniform(std::size_t n) {
  require(n > 0, "ProbVector::uniform: empty support");
  return ProbVector(Vec::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
}

ProbVector ProbVector::one_hot(std::size_t n, std::size_t index) {
  require(index < n, "ProbVector::one_hot: index out of range");
  Vec v = Vec::Zero(static_cast<Eigen::Index>(n));
  v[static_cast<Eigen::Index>(index)] = 1.0;
  return ProbVector(std::move(v));
}

void VmfParams::validate() const {
  if (std::abs(mu.norm() - 1.0) > kUnitTol) throw PreconditionError("VmfParams: mean direction is not unit norm");
  if (!(kappa >= 0.0)) throw DomainError("VmfParams: negative concentration");
}

void DiagGaussianParams::validate() const {
  require_same_size(static_cast<std::size_t>(mean.size()), static_cast<std::size_t>(log_std.size()),
                    "DiagGaussianParams: mean/log_std size mismatch");
  if (!mean.allFinite() || !log_std.allFinite()) throw PreconditionError("DiagGaussianParams: non-finite entry");
}

// ---------------------------------------------------------------------------

double bessel_switch_point(double nu) { return 50.0 * std::max(nu, 1.0); }

double log_bessel_i(double nu, double x) {
  if (nu < 0.0) throw DomainError("log_bessel_i: negative order");
  if (x < 0.0 || std::isnan(x)) throw DomainError("log_bessel_i: negative argument");
  if (x == 0.0) return nu == 0.0 ? 0.0 : -kInf;
  if (x < bessel_switch_point(nu)) return log_bessel_series(nu, x);
  return log_bessel_asymptotic(nu, x);
}

double vmf_log_normalizer(std::size_t d, double kappa) {
  if (d < 2) throw DomainError("vmf_log_normalizer: dimension must be ≥ 2");
  if (kappa < 0.0 || std::isnan(kappa)) throw DomainError("vmf_log_normalizer: negative concentration");
  const double nu = 0.5 * static_cast<double>(d) - 1.0;
  if (kappa == 0.0) {
    // κ→0⁺ limit: 1/|S^{d-1}|.
    return nu * std::log(2.0) + std::lgamma(nu + 1.0) - (nu + 1.0) * kLog2Pi;
  }
  return nu * std::log(kappa) - (nu + 1.0) * kLog2Pi - log_bessel_i(nu, kappa);
}

double vmf_mean_resultant(std::size_t d, double kappa) {
  if (d < 2) throw DomainError("vmf_mean_resultant: dimension must be ≥ 2");
  if (kappa < 0.0) throw DomainError("vmf_mean_resultant: negative concentration");
  if (kappa == 0.0) return 0.0;
  const double nu = 0.5 * static_cast<double>(d) - 1.0;
  if (kappa < 1e-8) return kappa / static_cast<double>(d);
  return std::exp(log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa));
}

double vmf_log_density(const Vec& x, const VmfParams& p) {
  p.validate();
  require_same_size(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(p.mu.size()), "vmf_log_density");
  if (std::abs(x.norm() - 1.0) > kUnitTol) throw PreconditionError("vmf_log_density: x is not on the unit sphere");
  return vmf_log_normalizer(static_cast<std::size_t>(x.size()), p.kappa) + p.kappa * p.mu.dot(x);
}

Vec vmf_score(const VmfParams& p) {
  p.validate();
  return p.kappa * p.mu;
}

double gaussian_log_density(const Vec& x, const DiagGaussianParams& p) {
  p.validate();
  require_same_size(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(p.mean.size()),
                    "gaussian_log_density");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double z = (x[i] - p.mean[i]) * std::exp(-p.log_std[i]);
    acc += -0.5 * kLog2Pi - p.log_std[i] - 0.5 * z * z;
  }
  return acc;
}

Vec gaussian_score(const Vec& x, const DiagGaussianParams& p) {
  p.validate();
  require_same_size(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(p.mean.size()), "gaussian_score");
  Vec s(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) s[i] = -(x[i] - p.mean[i]) * std::exp(-2.0 * p.log_std[i]);
  return s;
}

// ---------------------------------------------------------------------------

double logsumexp(std::span<const double> v) {
  if (v.empty()) return -kInf;
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

double logsumexp(const Vec& v) { return logsumexp(std::span<const double>(v.data(), static_cast<std::size_t>(v.size()))); }

Vec log_softmax(const Vec& logits) {
  if (logits.size() == 0) throw PreconditionError("log_softmax: empty logits");
  if (!logits.allFinite()) throw PreconditionError("log_softmax: non-finite logits");
  return logits.array() - logsumexp(logits);
}

ProbVector softmax(const Vec& logits) {
  Vec p = log_softmax(logits).array().exp();
  p /= p.sum();
  return ProbVector(std::move(p));
}

double entropy(const ProbVector& q) {
  double h = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] > 0.0) h -= q[i] * std::log(q[i]);
  }
  return h;
}

double categorical_kl(const ProbVector& q, const ProbVector& p) {
  require_same_size(q.size(), p.size(), "categorical_kl: support mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] == 0.0) continue;
    if (p[i] == 0.0) return kInf;
    kl += q[i] * (std::log(q[i]) - std::log(p[i]));
  }
  return std::max(kl, 0.0);
}

double kl_to_uniform(const ProbVector& q) {
  const double v = std::log(static_cast<double>(q.size())) - entropy(q);
  return std::max(v, 0.0);
}

}  // namespace svflow
