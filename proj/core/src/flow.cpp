#include "svflow/flow.hpp"

#include "step_kernel.hpp"
#include "svflow/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace svflow {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;
}

// ---------------------------------------------------------------------------
// enum <-> string

std::string to_string(Family f) { return f == Family::gaussian ? "gaussian" : "vmf"; }
std::string to_string(PosteriorMode m) { return m == PosteriorMode::tied ? "tied" : "untied"; }
std::string to_string(StepMode m) {
  switch (m) {
    case StepMode::euclidean: return "euclidean";
    case StepMode::spherical: return "spherical";
    case StepMode::spherical_strict: return "spherical_strict";
  }
  return "?";
}

Family family_from_string(const std::string& s) {
  if (s == "gaussian") return Family::gaussian;
  if (s == "vmf") return Family::vmf;
  throw ConfigError("unknown family '" + s + "'");
}

PosteriorMode posterior_mode_from_string(const std::string& s) {
  if (s == "tied") return PosteriorMode::tied;
  if (s == "untied") return PosteriorMode::untied;
  throw ConfigError("unknown posterior_mode '" + s + "'");
}

StepMode step_mode_from_string(const std::string& s) {
  if (s == "euclidean") return StepMode::euclidean;
  if (s == "spherical") return StepMode::spherical;
  if (s == "spherical_strict") return StepMode::spherical_strict;
  throw ConfigError("unknown step mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel::FlowModel(Family family, std::size_t dim, std::size_t num_components, std::size_t num_steps,
                     double step_size, PosteriorMode mode)
    : family_(family),
      mode_(mode),
      dim_(dim),
      num_components_(num_components),
      num_steps_(num_steps),
      step_size_(step_size) {
  require(dim >= 1, "FlowModel: dim must be ≥ 1");
  require(num_components >= 1, "FlowModel: need at least one component");
  require(num_steps >= 1, "FlowModel: need at least one step");
  require(step_size > 0.0, "FlowModel: step size must be positive");
  if (family == Family::vmf) require(dim >= 2, "FlowModel: vmf family needs dim ≥ 2");
  theta_.assign(num_steps * num_components * theta_block_size(), 0.0);
  phi_.assign(num_steps * num_components * phi_block_size(), 0.0);
  for (std::size_t l = 0; l < num_steps; ++l) {
    for (std::size_t z = 0; z < num_components; ++z) {
      if (family == Family::vmf) theta(l, z)[0] = 1.0;  // μ = e1, κ = 0
    }
  }
}

std::size_t FlowModel::theta_block_size() const { return family_ == Family::gaussian ? 2 * dim_ : dim_ + 1; }

void FlowModel::check_step(std::size_t step) const {
  if (step >= num_steps_) {
    throw PreconditionError("step " + std::to_string(step) + " out of range [0, " + std::to_string(num_steps_) + ")");
  }
}

std::span<double> FlowModel::theta(std::size_t step, std::size_t z) {
  const std::size_t b = theta_block_size();
  return {theta_.data() + (step * num_components_ + z) * b, b};
}
std::span<const double> FlowModel::theta(std::size_t step, std::size_t z) const {
  const std::size_t b = theta_block_size();
  return {theta_.data() + (step * num_components_ + z) * b, b};
}
std::span<double> FlowModel::phi(std::size_t step, std::size_t z) {
  const std::size_t b = phi_block_size();
  return {phi_.data() + (step * num_components_ + z) * b, b};
}
std::span<const double> FlowModel::phi(std::size_t step, std::size_t z) const {
  const std::size_t b = phi_block_size();
  return {phi_.data() + (step * num_components_ + z) * b, b};
}

DiagGaussianParams FlowModel::gaussian(std::size_t step, std::size_t z) const {
  require(family_ == Family::gaussian, "FlowModel::gaussian on a vmf model");
  check_step(step);
  auto t = theta(step, z);
  DiagGaussianParams p;
  p.mean = Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(dim_));
  p.log_std = Eigen::Map<const Vec>(t.data() + dim_, static_cast<Eigen::Index>(dim_));
  return p;
}

void FlowModel::set_gaussian(std::size_t step, std::size_t z, const DiagGaussianParams& p) {
  require(family_ == Family::gaussian, "FlowModel::set_gaussian on a vmf model");
  check_step(step);
  p.validate();
  require_same_size(static_cast<std::size_t>(p.mean.size()), dim_, "FlowModel::set_gaussian");
  auto t = theta(step, z);
  std::copy(p.mean.data(), p.mean.data() + dim_, t.begin());
  std::copy(p.log_std.data(), p.log_std.data() + dim_, t.begin() + static_cast<std::ptrdiff_t>(dim_));
}

VmfParams FlowModel::vmf(std::size_t step, std::size_t z) const {
  require(family_ == Family::vmf, "FlowModel::vmf on a gaussian model");
  check_step(step);
  auto t = theta(step, z);
  VmfParams p;
  p.mu = Eigen::Map<const Vec>(t.data(), static_cast<Eigen::Index>(dim_));
  p.kappa = t[dim_];
  return p;
}

void FlowModel::set_vmf(std::size_t step, std::size_t z, const VmfParams& p) {
  require(family_ == Family::vmf, "FlowModel::set_vmf on a gaussian model");
  check_step(step);
  p.validate();
  require_same_size(static_cast<std::size_t>(p.mu.size()), dim_, "FlowModel::set_vmf");
  auto t = theta(step, z);
  std::copy(p.mu.data(), p.mu.data() + dim_, t.begin());
  t[dim_] = p.kappa;
}

Mat FlowModel::posterior_weights(std::size_t step) const {
  require(mode_ == PosteriorMode::untied, "posterior_weights: model is tied");
  check_step(step);
  Mat W(static_cast<Eigen::Index>(num_components_), static_cast<Eigen::Index>(dim_));
  for (std::size_t z = 0; z < num_components_; ++z) {
    auto p = phi(step, z);
    for (std::size_t i = 0; i < dim_; ++i) W(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(i)) = p[i];
  }
  return W;
}

Vec FlowModel::posterior_bias(std::size_t step) const {
  require(mode_ == PosteriorMode::untied, "posterior_bias: model is tied");
  check_step(step);
  Vec b(static_cast<Eigen::Index>(num_components_));
  for (std::size_t z = 0; z < num_components_; ++z) b[static_cast<Eigen::Index>(z)] = phi(step, z)[dim_];
  return b;
}

void FlowModel::set_posterior_logits(std::size_t step, const Mat& W, const Vec& b) {
  require(mode_ == PosteriorMode::untied, "set_posterior_logits: model is tied");
  check_step(step);
  if (static_cast<std::size_t>(W.rows()) != num_components_ || static_cast<std::size_t>(W.cols()) != dim_ ||
      static_cast<std::size_t>(b.size()) != num_components_) {
    throw DimensionError("set_posterior_logits: expected W |Z|×d and b of size |Z|");
  }
  for (std::size_t z = 0; z < num_components_; ++z) {
    auto p = phi(step, z);
    for (std::size_t i = 0; i < dim_; ++i) p[i] = W(static_cast<Eigen::Index>(z), static_cast<Eigen::Index>(i));
    p[dim_] = b[static_cast<Eigen::Index>(z)];
  }
}

void FlowModel::validate() const {
  for (double v : theta_) {
    if (!std::isfinite(v)) throw PreconditionError("FlowModel: non-finite θ entry");
  }
  for (double v : phi_) {
    if (!std::isfinite(v)) throw PreconditionError("FlowModel: non-finite φ entry");
  }
  if (family_ == Family::vmf) {
    for (std::size_t l = 0; l < num_steps_; ++l) {
      for (std::size_t z = 0; z < num_components_; ++z) vmf(l, z).validate();
    }
  }
}

// ---------------------------------------------------------------------------
// StepKernel

namespace detail {

void StepKernel::reset(const FlowModel& m, std::size_t step) {
  m.check_step(step);
  family_ = m.family();
  tied_ = m.posterior_mode() == PosteriorMode::tied;
  d_ = m.dim();
  Z_ = m.num_components();
  mean_.assign(Z_ * d_, 0.0);
  log_norm_.assign(Z_, 0.0);
  if (family_ == Family::gaussian) {
    inv_var_.assign(Z_ * d_, 0.0);
    for (std::size_t z = 0; z < Z_; ++z) {
      auto t = m.theta(step, z);
      double ln = -0.5 * kLog2Pi * static_cast<double>(d_);
      for (std::size_t i = 0; i < d_; ++i) {
        mean_[z * d_ + i] = t[i];
        inv_var_[z * d_ + i] = std::exp(-2.0 * t[d_ + i]);
        ln -= t[d_ + i];
      }
      log_norm_[z] = ln;
    }
  } else {
    kappa_.assign(Z_, 0.0);
    resultant_.assign(Z_, 0.0);
    for (std::size_t z = 0; z < Z_; ++z) {
      auto t = m.theta(step, z);
      for (std::size_t i = 0; i < d_; ++i) mean_[z * d_ + i] = t[i];
      kappa_[z] = t[d_];
      log_norm_[z] = vmf_log_normalizer(d_, kappa_[z]);
      resultant_[z] = vmf_mean_resultant(d_, kappa_[z]);
    }
  }
  if (!tied_) {
    W_.assign(Z_ * d_, 0.0);
    b_.assign(Z_, 0.0);
    for (std::size_t z = 0; z < Z_; ++z) {
      auto p = m.phi(step, z);
      for (std::size_t i = 0; i < d_; ++i) W_[z * d_ + i] = p[i];
      b_[z] = p[d_];
    }
  }
}

void StepKernel::evaluate(const double* x, StepEval& out) const {
  if (out.logp.size() != Z_ || out.v.size() != d_) out.resize(d_, Z_);
  switch (d_) {
    case 2: evaluate_fixed<2>(x, out); break;
    case 3: evaluate_fixed<3>(x, out); break;
    default: evaluate_fixed<0>(x, out); break;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public operations

namespace {

detail::StepEval eval_at(const FlowModel& m, std::size_t step, const Vec& x) {
  m.check_step(step);
  require_same_size(static_cast<std::size_t>(x.size()), m.dim(), "flow: state dimension");
  if (!x.allFinite()) throw PreconditionError("flow: non-finite state");
  detail::StepKernel k(m, step);
  detail::StepEval e;
  e.resize(m.dim(), m.num_components());
  k.evaluate(x.data(), e);
  return e;
}

Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

ProbVector to_prob(const std::vector<double>& v) { return ProbVector(to_vec(v)); }

double kl_from_logs(const detail::StepEval& e) {
  double kl = 0.0;
  for (std::size_t z = 0; z < e.q.size(); ++z) {
    if (e.q[z] > 0.0) kl += e.q[z] * (e.logq[z] - e.logpost[z]);
  }
  return std::max(kl, 0.0);
}

}  // namespace

Vec conditional_log_densities(const FlowModel& m, std::size_t step, const Vec& x) {
  return to_vec(eval_at(m, step, x).logp);
}

Mat conditional_scores(const FlowModel& m, std::size_t step, const Vec& x) {
  const auto e = eval_at(m, step, x);
  Mat s(static_cast<Eigen::Index>(m.dim()), static_cast<Eigen::Index>(m.num_components()));
  for (std::size_t z = 0; z < m.num_components(); ++z) {
    for (std::size_t i = 0; i < m.dim(); ++i) {
      s(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(z)) = e.score[z * m.dim() + i];
    }
  }
  return s;
}

Vec posterior_logits(const FlowModel& m, std::size_t step, const Vec& x) { return to_vec(eval_at(m, step, x).logits); }

ProbVector posterior(const FlowModel& m, std::size_t step, const Vec& x) { return to_prob(eval_at(m, step, x).q); }

ProbVector true_posterior(const FlowModel& m, std::size_t step, const Vec& x) {
  return to_prob(eval_at(m, step, x).post);
}

Vec vector_field(const FlowModel& m, std::size_t step, const Vec& x) { return to_vec(eval_at(m, step, x).v); }

Vec euler_step(const FlowModel& m, std::size_t step, const Vec& x, StepMode mode) {
  const Vec v = vector_field(m, step, x);
  const double h = m.step_size();
  switch (mode) {
    case StepMode::euclidean:
      return x + h * v;
    case StepMode::spherical: {
      if (!geometry::is_unit(x, 1e-10)) throw PreconditionError("euler_step: spherical mode needs a unit state");
      const Vec u = x + h * v;
      const double n = u.norm();
      if (n < geometry::tolerances().degenerate) throw DegenerateError("euler_step: ‖x + h v‖ vanishes");
      return u / n;
    }
    case StepMode::spherical_strict: {
      if (!geometry::is_unit(x, 1e-10)) throw PreconditionError("euler_step: spherical mode needs a unit state");
      const Vec xs = x / x.norm();
      const Vec t = h * (v - xs * xs.dot(v));
      return geometry::retract(xs, t);
    }
  }
  return x;
}

Trajectory integrate(const FlowModel& m, const Vec& x0, StepMode mode) {
  if (mode != StepMode::euclidean && !geometry::is_unit(x0, 1e-10)) {
    throw PreconditionError("integrate: spherical mode needs a unit initial state");
  }
  Trajectory t;
  t.states.reserve(m.num_steps() + 1);
  t.states.push_back(x0);
  for (std::size_t l = 0; l < m.num_steps(); ++l) t.states.push_back(euler_step(m, l, t.states.back(), mode));
  return t;
}

double elbo(const FlowModel& m, std::size_t step, const Vec& x) {
  const auto e = eval_at(m, step, x);
  const double log_prior = -std::log(static_cast<double>(m.num_components()));
  // Σ_z q [log p(x|z) + log p(z) − log q]
  double acc = 0.0;
  for (std::size_t z = 0; z < e.q.size(); ++z) {
    if (e.q[z] > 0.0) acc += e.q[z] * (e.logp[z] + log_prior - e.logq[z]);
  }
  return acc;
}

double marginal_log_density(const FlowModel& m, std::size_t step, const Vec& x) {
  const auto e = eval_at(m, step, x);
  return e.lse_logp - std::log(static_cast<double>(m.num_components()));
}

double marginal_log_density_via_elbo(const FlowModel& m, std::size_t step, const Vec& x) {
  const auto e = eval_at(m, step, x);
  return elbo(m, step, x) + kl_from_logs(e);
}

Vec variational_error(const FlowModel& m, std::size_t step, const Vec& x) {
  const auto e = eval_at(m, step, x);
  const std::size_t d = m.dim();
  const std::size_t Z = m.num_components();
  // ∇ log q(z|x) = ∇g_z − Σ_z' q_z' ∇g_z'
  auto grad_logit = [&](std::size_t z) -> Vec {
    if (m.posterior_mode() == PosteriorMode::tied) {
      return Eigen::Map<const Vec>(e.score.data() + z * d, static_cast<Eigen::Index>(d));
    }
    Vec w(static_cast<Eigen::Index>(d));
    auto p = m.phi(step, z);
    for (std::size_t i = 0; i < d; ++i) w[static_cast<Eigen::Index>(i)] = p[i];
    return w;
  };
  Vec mean_grad = Vec::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t z = 0; z < Z; ++z) mean_grad += e.q[z] * grad_logit(z);
  Vec eps = Vec::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t z = 0; z < Z; ++z) {
    const double lr = e.logpost[z] - e.logq[z];
    if (e.q[z] == 0.0 || lr == 0.0) continue;
    eps += e.q[z] * lr * (grad_logit(z) - mean_grad);
  }
  return eps;
}

double GradDecomposition::relative_residual() const {
  const double scale = std::max(grad_elbo.norm(), 1e-300);
  return residual() / scale;
}

GradDecomposition grad_decomposition(const FlowModel& m, std::size_t step, const Vec& x, double fd_step) {
  require(fd_step > 0.0, "grad_decomposition: finite-difference step must be positive");
  GradDecomposition out;
  out.grad_elbo.resize(x.size());
  Vec xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    xp[i] = x[i] + fd_step;
    const double up = elbo(m, step, xp);
    xp[i] = x[i] - fd_step;
    const double dn = elbo(m, step, xp);
    xp[i] = x[i];
    out.grad_elbo[i] = (up - dn) / (2.0 * fd_step);
  }
  out.v = vector_field(m, step, x);
  out.eps = variational_error(m, step, x);
  return out;
}

}  // namespace svflow
