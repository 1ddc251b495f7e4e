#include "svflow/geometry.hpp"

#include <cmath>
#include <string>

namespace svflow::geometry {

namespace {
Tolerances g_tolerances{};

void require_unit(const Vec& x, const char* who) {
  if (!is_unit(x)) {
    throw PreconditionError(std::string(who) + ": base point is not unit norm (‖x‖ = " +
                            std::to_string(x.norm()) + ")");
  }
}

void require_tangent(const Vec& x, const Vec& v, const char* who) {
  require_same_size(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(v.size()), who);
  const double dot = x.dot(v);
  if (std::abs(dot) > g_tolerances.tangent * std::max(1.0, v.norm())) {
    throw PreconditionError(std::string(who) + ": vector is not tangent at x (x·v = " + std::to_string(dot) + ")");
  }
}
}  // namespace

const Tolerances& tolerances() { return g_tolerances; }
void set_tolerances(const Tolerances& t) { g_tolerances = t; }

bool is_unit(const Vec& x, double tol) { return x.size() > 0 && std::abs(x.norm() - 1.0) <= tol; }

TangentVector tangent_project(const Vec& x, const Vec& v) {
  require_unit(x, "tangent_project");
  require_same_size(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(v.size()), "tangent_project");
  return TangentVector{x, v - x * x.dot(v)};
}

Vec exp_map(const Vec& x, const Vec& v) {
  require_unit(x, "exp_map");
  require_tangent(x, v, "exp_map");
  const double n = v.norm();
  if (n < g_tolerances.zero_step) return x;
  Vec out = std::cos(n) * x + (std::sin(n) / n) * v;
  return out / out.norm();
}

Vec exp_map(const Vec& x, const TangentVector& v) { return exp_map(x, v.v); }

Vec retract(const Vec& x, const Vec& v) {
  require_same_size(static_cast<std::size_t>(x.size()), static_cast<std::size_t>(v.size()), "retract");
  Vec s = x + v;
  const double n = s.norm();
  if (n < g_tolerances.degenerate) throw DegenerateError("retract: ‖x + v‖ vanishes");
  return s / n;
}

Vec retract(const Vec& x, const TangentVector& v) {
  require_unit(x, "retract");
  require_tangent(x, v.v, "retract");
  return retract(x, v.v);
}

Vec rms_normalize(const Vec& x, std::size_t d) {
  const double n = x.norm();
  if (!(n > 0.0)) throw DegenerateError("rms_normalize: zero vector");
  return (std::sqrt(static_cast<double>(d)) / n) * x;
}

double relaxed_retraction_residual(const Vec& x, const Vec& v) {
  const auto d = static_cast<std::size_t>(x.size());
  const Vec relaxed = rms_normalize(x + v, d) / std::sqrt(static_cast<double>(d));
  const Vec strict = retract(x, tangent_project(x, v));
  return (relaxed - strict).norm();
}

}  // namespace svflow::geometry
