#pragma once

#include "svflow/common.hpp"
#include "svflow/distributions.hpp"

#include <span>
#include <string>
#include <vector>

namespace svflow {

enum class Family { gaussian, vmf };
enum class PosteriorMode { tied, untied };

/// How one Euler step is applied.
///  - euclidean:         x + h v(x)
///  - spherical:         (x + h v)/‖x + h v‖   (residual + RMSNorm, no tangent projection)
///  - spherical_strict:  retract(x, h (I − xxᵀ) v)
enum class StepMode { euclidean, spherical, spherical_strict };

std::string to_string(Family f);
std::string to_string(PosteriorMode m);
std::string to_string(StepMode m);
Family family_from_string(const std::string& s);
PosteriorMode posterior_mode_from_string(const std::string& s);
StepMode step_mode_from_string(const std::string& s);

/// A discretized score-based variational flow.
///
/// Time is split into L Euler steps of size h; every step owns its own
/// conditional parameters θ_ℓ[z] and, in untied mode, posterior logits
/// g_ℓ(x) = W_ℓ x + b_ℓ. In tied mode the posterior is the Bayes posterior
/// of θ_ℓ itself. The prior over components is uniform and fixed.
///
/// Parameter storage is flat, per (step, component) block:
///   gaussian θ block: [mean (d), log_std (d)]
///   vmf θ block:      [mu (d), kappa]
///   φ block (untied): [W row (d), bias]
class FlowModel {
 public:
  FlowModel() = default;
  FlowModel(Family family, std::size_t dim, std::size_t num_components, std::size_t num_steps, double step_size,
            PosteriorMode mode);

  Family family() const { return family_; }
  PosteriorMode posterior_mode() const { return mode_; }
  std::size_t dim() const { return dim_; }
  std::size_t num_components() const { return num_components_; }
  std::size_t num_steps() const { return num_steps_; }
  double step_size() const { return step_size_; }
  double horizon() const { return step_size_ * static_cast<double>(num_steps_); }

  std::size_t theta_block_size() const;
  std::size_t phi_block_size() const { return mode_ == PosteriorMode::untied ? dim_ + 1 : 0; }

  std::span<double> theta(std::size_t step, std::size_t z);
  std::span<const double> theta(std::size_t step, std::size_t z) const;
  std::span<double> phi(std::size_t step, std::size_t z);
  std::span<const double> phi(std::size_t step, std::size_t z) const;

  std::vector<double>& theta_data() { return theta_; }
  const std::vector<double>& theta_data() const { return theta_; }
  std::vector<double>& phi_data() { return phi_; }
  const std::vector<double>& phi_data() const { return phi_; }

  DiagGaussianParams gaussian(std::size_t step, std::size_t z) const;
  void set_gaussian(std::size_t step, std::size_t z, const DiagGaussianParams& p);
  VmfParams vmf(std::size_t step, std::size_t z) const;
  void set_vmf(std::size_t step, std::size_t z, const VmfParams& p);

  /// Untied posterior logits for one step: W is |Z|×d, b has |Z| entries.
  Mat posterior_weights(std::size_t step) const;
  Vec posterior_bias(std::size_t step) const;
  void set_posterior_logits(std::size_t step, const Mat& W, const Vec& b);

  void check_step(std::size_t step) const;

  /// Throws if an invariant is broken (non-finite entries, non-unit μ, κ < 0).
  void validate() const;

 private:
  Family family_ = Family::gaussian;
  PosteriorMode mode_ = PosteriorMode::tied;
  std::size_t dim_ = 0;
  std::size_t num_components_ = 0;
  std::size_t num_steps_ = 0;
  double step_size_ = 0.0;
  std::vector<double> theta_;
  std::vector<double> phi_;
};

/// States x_0..x_L of one integrated sample.
struct Trajectory {
  std::vector<Vec> states;
};

/// Output of the gradient-decomposition check ∇L = v + ε.
struct GradDecomposition {
  Vec grad_elbo;
  Vec v;
  Vec eps;

  double residual() const { return (grad_elbo - v - eps).norm(); }
  double relative_residual() const;
};

/// log p_θℓ(x|z) for every z.
Vec conditional_log_densities(const FlowModel& m, std::size_t step, const Vec& x);
/// Column z holds ∇_x log p_θℓ(x|z).
Mat conditional_scores(const FlowModel& m, std::size_t step, const Vec& x);
/// Logits g_ℓ(x) of the variational posterior.
Vec posterior_logits(const FlowModel& m, std::size_t step, const Vec& x);

ProbVector posterior(const FlowModel& m, std::size_t step, const Vec& x);
ProbVector true_posterior(const FlowModel& m, std::size_t step, const Vec& x);

/// Σ_z q(z|x) ∇_x log p(x|z).
Vec vector_field(const FlowModel& m, std::size_t step, const Vec& x);

Vec euler_step(const FlowModel& m, std::size_t step, const Vec& x, StepMode mode);
Trajectory integrate(const FlowModel& m, const Vec& x0, StepMode mode);

/// E_q[log p(x|z)] − KL(q ‖ uniform prior).
double elbo(const FlowModel& m, std::size_t step, const Vec& x);

/// log Σ_z p(x|z)/|Z|, computed with log-sum-exp.
double marginal_log_density(const FlowModel& m, std::size_t step, const Vec& x);
/// Same quantity through the identity elbo + KL(q ‖ p(z|x)).
double marginal_log_density_via_elbo(const FlowModel& m, std::size_t step, const Vec& x);

/// ε(x) = E_q[log(p(z|x)/q(z|x)) ∇_x log q(z|x)] in closed form.
Vec variational_error(const FlowModel& m, std::size_t step, const Vec& x);

/// Central-difference ∇_x elbo together with v and ε.
GradDecomposition grad_decomposition(const FlowModel& m, std::size_t step, const Vec& x, double fd_step = 1e-5);

// JSON document {family, dim, L, h, num_components, posterior_mode, theta, phi}.
std::string flow_model_to_json(const FlowModel& m);
FlowModel flow_model_from_json(const std::string& text);

}  // namespace svflow
