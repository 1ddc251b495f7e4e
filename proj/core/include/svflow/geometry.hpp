#pragma once

#include "svflow/common.hpp"

namespace svflow::geometry {

/// Tolerances used by the sphere primitives. Tests may tighten or relax them.
struct Tolerances {
  double unit_norm = 1e-12;     // |‖x‖ - 1| accepted as "on the sphere"
  double tangent = 1e-10;       // |x·v| accepted as "tangent"
  double zero_step = 1e-12;     // ‖v‖ below which exp_map returns x
  double degenerate = 1e-12;    // ‖x+v‖ below which retraction fails
};

const Tolerances& tolerances();
void set_tolerances(const Tolerances& t);

/// A vector v in the tangent space of the unit sphere at `base`.
struct TangentVector {
  Vec base;
  Vec v;
};

bool is_unit(const Vec& x, double tol = tolerances().unit_norm);

/// (I - x xᵀ) v. Throws PreconditionError if x is not unit norm.
TangentVector tangent_project(const Vec& x, const Vec& v);

/// Geodesic step cos(‖v‖) x + sin(‖v‖) v/‖v‖.
Vec exp_map(const Vec& x, const TangentVector& v);
Vec exp_map(const Vec& x, const Vec& v);

/// First-order retraction (x + v)/‖x + v‖.
Vec retract(const Vec& x, const TangentVector& v);
Vec retract(const Vec& x, const Vec& v);

/// √d · x/‖x‖, i.e. RMSNorm without a learned gain.
Vec rms_normalize(const Vec& x, std::size_t d);
inline Vec rms_normalize(const Vec& x) { return rms_normalize(x, static_cast<std::size_t>(x.size())); }

/// ‖ rms_normalize(x + v)/√d − retract(x, tangent_project(x, v)) ‖
///
/// Measures how far the residual + RMSNorm update drifts from a proper
/// retraction of the tangential part of v. Second order in ‖v‖.
double relaxed_retraction_residual(const Vec& x, const Vec& v);

}  // namespace svflow::geometry
