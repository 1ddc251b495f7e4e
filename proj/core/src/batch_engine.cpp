#include "batch_engine.hpp"

#include <algorithm>
#include <cmath>

namespace svflow::detail {

namespace generic_isa {
#include "batch_engine_impl.inc"
}  // namespace generic_isa

#if defined(__GNUC__) && !defined(__clang__) && defined(__x86_64__)
#define SVFLOW_HAVE_AVX2_ENGINE 1
#pragma GCC push_options
#pragma GCC target("avx2")
namespace avx2_isa {
#include "batch_engine_impl.inc"
}  // namespace avx2_isa
#pragma GCC pop_options
#endif

namespace {

// Both builds perform identical per-lane arithmetic (no contraction), so the
// choice only affects speed.
bool use_avx2() {
#ifdef SVFLOW_HAVE_AVX2_ENGINE
  static const bool ok = __builtin_cpu_supports("avx2");
  return ok;
#else
  return false;
#endif
}

template <int D>
void run_range(const BatchProblem& p, const LabeledPoints& batch, std::size_t lo, std::size_t hi, bool grads,
               BatchTotals& out) {
#ifdef SVFLOW_HAVE_AVX2_ENGINE
  if (use_avx2()) {
    avx2_isa::run_range<D>(p, batch, lo, hi, grads, out);
    return;
  }
#endif
  generic_isa::run_range<D>(p, batch, lo, hi, grads, out);
}

}  // namespace

void init_totals(const BatchProblem& p, bool grads, BatchTotals& out) {
  out = BatchTotals{};
  out.usage.assign(p.m.num_components(), 0.0);
  if (grads) {
    out.g_theta.assign(p.m.theta_data().size(), 0.0);
    out.g_phi.assign(p.m.phi_data().size(), 0.0);
    out.g_head.assign((p.m.dim() + 1) * p.head.num_classes(), 0.0);
  }
}

void run_sample_range(const BatchProblem& p, const LabeledPoints& batch, std::size_t lo, std::size_t hi, bool grads,
                      BatchTotals& out) {
  switch (p.m.dim()) {
    case 2: run_range<2>(p, batch, lo, hi, grads, out); break;
    case 3: run_range<3>(p, batch, lo, hi, grads, out); break;
    default: run_range<0>(p, batch, lo, hi, grads, out); break;
  }
}

}  // namespace svflow::detail

