#pragma once

#include "svflow/common.hpp"

#include <span>

namespace svflow {

/// Nonnegative vector summing to one over a finite latent set.
class ProbVector {
 public:
  ProbVector() = default;

  /// Validates entries ≥ 0 and Σ = 1 within `tol`.
  explicit ProbVector(Vec probs, double tol = 1e-9);

  static ProbVector uniform(std::size_t n);
  static ProbVector one_hot(std::size_t n, std::size_t index);

  std::size_t size() const { return static_cast<std::size_t>(probs_.size()); }
  double operator[](std::size_t i) const { return probs_[static_cast<Eigen::Index>(i)]; }
  const Vec& values() const { return probs_; }

 private:
  Vec probs_;
};

/// von Mises–Fisher conditional: mean direction and concentration.
struct VmfParams {
  Vec mu;
  double kappa = 0.0;

  void validate() const;
};

/// Axis-aligned Gaussian, parameterized by log standard deviation.
struct DiagGaussianParams {
  Vec mean;
  Vec log_std;

  void validate() const;
};

// ---------------------------------------------------------------------------
// Bessel / vMF normalizer

/// Concentration above which log I_ν switches from the power series to the
/// large-argument expansion.
double bessel_switch_point(double nu);

/// log I_ν(x) for ν ≥ 0, x ≥ 0. Finite for any finite x.
double log_bessel_i(double nu, double x);

/// log C_d(κ) = (d/2−1) log κ − (d/2) log 2π − log I_{d/2−1}(κ).
double vmf_log_normalizer(std::size_t d, double kappa);

/// A_d(κ) = I_{d/2}(κ)/I_{d/2−1}(κ) = −d/dκ log C_d(κ).
double vmf_mean_resultant(std::size_t d, double kappa);

double vmf_log_density(const Vec& x, const VmfParams& p);

/// ∇_x log p_vMF(x) = κμ, independent of x.
Vec vmf_score(const VmfParams& p);

double gaussian_log_density(const Vec& x, const DiagGaussianParams& p);
Vec gaussian_score(const Vec& x, const DiagGaussianParams& p);

// ---------------------------------------------------------------------------
// Categorical utilities

double logsumexp(std::span<const double> v);
double logsumexp(const Vec& v);
Vec log_softmax(const Vec& logits);
ProbVector softmax(const Vec& logits);

double entropy(const ProbVector& q);

/// KL(q‖p). Returns +∞ when q puts mass where p has none.
double categorical_kl(const ProbVector& q, const ProbVector& p);

/// KL(q‖U) = log|Z| − H(q).
double kl_to_uniform(const ProbVector& q);

}  // namespace svflow
