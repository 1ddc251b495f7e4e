#pragma once

// Independent reference computations used by the invariant suite. None of
// these call into the library routines they are meant to check.

#include "svflow/flow.hpp"

#include <functional>

namespace svflow::oracles {

/// log I_ν(x) from the power series in 50-digit arithmetic.
double log_bessel_i_series(double nu, double x);

/// log C_d(κ) = (d/2 − 1) log κ − (d/2) log 2π − log I_{d/2−1}(κ) via the series.
double vmf_log_normalizer_series(std::size_t d, double kappa);

/// log p(x|z) for every component, from the raw parameters in long double.
Vec conditional_log_densities(const FlowModel& m, std::size_t step, const Vec& x);

/// log (1/|Z|) Σ_z p(x|z), accumulated in long double.
double marginal_log_density(const FlowModel& m, std::size_t step, const Vec& x);

/// Central differences of a scalar function of a vector.
Vec central_gradient(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-5);

/// Same for a flat parameter vector.
std::vector<double> central_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& x, double h = 1e-5);

/// ‖a − b‖ / ‖b‖.
double relative_error(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace svflow::oracles
