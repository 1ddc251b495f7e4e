#pragma once

// Per-step evaluation of the flow on raw buffers. Shared by the public flow
// API and by the training engine, which calls it once per (sample, step).

#include "svflow/flow.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

namespace svflow::detail {

/// Everything the forward and backward passes need at one (x, step).
struct StepEval {
  std::vector<double> logp;     // log p(x|z)                 [Z]
  std::vector<double> score;    // ∇ log p(x|z), row-major    [Z*d]
  std::vector<double> logits;   // g(x)                       [Z]
  std::vector<double> logq;     // log q(z|x)                 [Z]
  std::vector<double> q;        //                            [Z]
  std::vector<double> logpost;  // log p(z|x)                 [Z]
  std::vector<double> post;     //                            [Z]
  std::vector<double> v;        // Σ q s                      [d]
  double lse_logp = 0.0;        // log Σ_z p(x|z)

  void resize(std::size_t d, std::size_t Z) {
    logp.assign(Z, 0.0);
    score.assign(Z * d, 0.0);
    logits.assign(Z, 0.0);
    logq.assign(Z, 0.0);
    q.assign(Z, 0.0);
    logpost.assign(Z, 0.0);
    post.assign(Z, 0.0);
    v.assign(d, 0.0);
  }
};

inline double softplus(double r) { return r > 30.0 ? r : std::log1p(std::exp(r)); }
inline double softplus_inverse(double k) {
  if (k <= 0.0) return -1e300;
  return k > 30.0 ? k : std::log(std::expm1(k));
}
/// dκ/dρ for κ = softplus(ρ), written in terms of κ.
inline double softplus_slope_from_value(double k) { return -std::expm1(-k); }

/// Precomputed, x-independent quantities of one step.
class StepKernel {
 public:
  StepKernel() = default;
  StepKernel(const FlowModel& m, std::size_t step) { reset(m, step); }

  void reset(const FlowModel& m, std::size_t step);

  std::size_t dim() const { return d_; }
  std::size_t components() const { return Z_; }
  Family family() const { return family_; }
  bool tied() const { return tied_; }

  /// Fills every field of `out` for the point x (length d).
  void evaluate(const double* x, StepEval& out) const;
  /// Same, with the dimension fixed at compile time (D = 0 means runtime d).
  /// `out` must already be sized.
  template <int D>
  void evaluate_fixed(const double* x, StepEval& out) const;

  // Gaussian: 1/σ² per (z, i); vmf: κ per z, μ per (z, i), A_d(κ) per z.
  const double* inv_var(std::size_t z) const { return inv_var_.data() + z * d_; }
  const double* mean(std::size_t z) const { return mean_.data() + z * d_; }
  const double* mu(std::size_t z) const { return mean_.data() + z * d_; }
  double kappa(std::size_t z) const { return kappa_[z]; }
  double resultant(std::size_t z) const { return resultant_[z]; }
  const double* W(std::size_t z) const { return W_.data() + z * d_; }
  double b(std::size_t z) const { return b_[z]; }
  double log_norm(std::size_t z) const { return log_norm_[z]; }

 private:
  Family family_ = Family::gaussian;
  bool tied_ = true;
  std::size_t d_ = 0;
  std::size_t Z_ = 0;
  std::vector<double> mean_;      // gaussian mean or vmf mu
  std::vector<double> inv_var_;   // gaussian only
  std::vector<double> log_norm_;  // per component constant of log p(x|z)
  std::vector<double> kappa_;     // vmf only
  std::vector<double> resultant_; // vmf only
  std::vector<double> W_;         // untied only
  std::vector<double> b_;
};

/// exp(x) for x in [−700, 0], branch-free so lane loops vectorize.
/// Relative error is a few ulp.
inline double exp_bounded(double x) {
  constexpr double kShift = 6755399441055744.0;  // 1.5·2^52: rounds to integer
  constexpr double kInvLn2 = 1.4426950408889634;
  constexpr double kLn2Hi = 6.93147180369123816490e-01;
  constexpr double kLn2Lo = 1.90821492927058770002e-10;
  const double kf = x * kInvLn2 + kShift;
  const double k = kf - kShift;
  const double r = (x - k * kLn2Hi) - k * kLn2Lo;
  // Taylor series to degree 12 on |r| ≤ ln2/2.
  double p = 1.0 / 479001600.0;
  p = p * r + 1.0 / 39916800.0;
  p = p * r + 1.0 / 3628800.0;
  p = p * r + 1.0 / 362880.0;
  p = p * r + 1.0 / 40320.0;
  p = p * r + 1.0 / 5040.0;
  p = p * r + 1.0 / 720.0;
  p = p * r + 1.0 / 120.0;
  p = p * r + 1.0 / 24.0;
  p = p * r + 1.0 / 6.0;
  p = p * r + 0.5;
  p = p * r + 1.0;
  p = p * r + 1.0;
  // The low mantissa bits of kf hold k; move k + 1023 into the exponent field.
  const std::uint64_t bits = (std::bit_cast<std::uint64_t>(kf) + 1023u) << 52;
  return p * std::bit_cast<double>(bits);
}

/// Softmax terms exp(in[i] − m) for in[i] ≤ m. Arguments below −700 are
/// clamped, which is far below the resolution of a normalized softmax.
inline void shifted_exp(const double* in, double m, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const double t = in[i] - m;
    out[i] = t < -700.0 ? -700.0 : t;
  }
  for (std::size_t i = 0; i < n; ++i) out[i] = exp_bounded(out[i]);
}

/// log-softmax of `in` into `out_log`, softmax into `out_p`; returns log Σ exp.
inline double log_softmax_into(const std::vector<double>& in, std::vector<double>& out_log,
                               std::vector<double>& out_p) {
  const std::size_t n = in.size();
  double m = in[0];
  for (std::size_t i = 1; i < n; ++i) m = in[i] > m ? in[i] : m;
  const double* dst = out_p.data();
  shifted_exp(in.data(), m, out_p.data(), n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += dst[i];
  const double lse = m + std::log(s);
  const double inv = 1.0 / s;
  for (std::size_t i = 0; i < n; ++i) {
    out_log[i] = in[i] - lse;
    out_p[i] *= inv;
  }
  return lse;
}

template <int D>
constexpr std::size_t fixed_dim(std::size_t runtime) {
  return D > 0 ? static_cast<std::size_t>(D) : runtime;
}

template <int D>
void StepKernel::evaluate_fixed(const double* x, StepEval& out) const {
  const std::size_t d = fixed_dim<D>(d_);
  if (family_ == Family::gaussian) {
    for (std::size_t z = 0; z < Z_; ++z) {
      const double* mz = mean_.data() + z * d;
      const double* iv = inv_var_.data() + z * d;
      double* sz = out.score.data() + z * d;
      double quad = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = x[i] - mz[i];
        sz[i] = -diff * iv[i];
        quad += diff * diff * iv[i];
      }
      out.logp[z] = log_norm_[z] - 0.5 * quad;
    }
  } else {
    for (std::size_t z = 0; z < Z_; ++z) {
      const double* mz = mean_.data() + z * d;
      double* sz = out.score.data() + z * d;
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        sz[i] = kappa_[z] * mz[i];
        dot += mz[i] * x[i];
      }
      out.logp[z] = log_norm_[z] + kappa_[z] * dot;
    }
  }
  out.lse_logp = log_softmax_into(out.logp, out.logpost, out.post);
  if (tied_) {
    std::copy(out.logp.begin(), out.logp.end(), out.logits.begin());
    std::copy(out.logpost.begin(), out.logpost.end(), out.logq.begin());
    std::copy(out.post.begin(), out.post.end(), out.q.begin());
  } else {
    for (std::size_t z = 0; z < Z_; ++z) {
      const double* w = W_.data() + z * d;
      double g = b_[z];
      for (std::size_t i = 0; i < d; ++i) g += w[i] * x[i];
      out.logits[z] = g;
    }
    log_softmax_into(out.logits, out.logq, out.q);
  }
  double v[D > 0 ? D : 1] = {};
  if constexpr (D > 0) {
    for (std::size_t z = 0; z < Z_; ++z) {
      const double qz = out.q[z];
      const double* sz = out.score.data() + z * d;
      for (std::size_t i = 0; i < d; ++i) v[i] += qz * sz[i];
    }
    for (std::size_t i = 0; i < d; ++i) out.v[i] = v[i];
  } else {
    std::fill(out.v.begin(), out.v.end(), 0.0);
    for (std::size_t z = 0; z < Z_; ++z) {
      const double qz = out.q[z];
      const double* sz = out.score.data() + z * d;
      for (std::size_t i = 0; i < d; ++i) out.v[i] += qz * sz[i];
    }
  }
}

}  // namespace svflow::detail
