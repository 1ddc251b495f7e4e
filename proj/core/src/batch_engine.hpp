#pragma once

// Blocked forward/backward pass used by evaluate_hybrid. Samples are
// processed in lanes of a fixed-width block so that every inner loop runs
// over independent samples.

#include "step_kernel.hpp"
#include "svflow/train.hpp"

#include <vector>

namespace svflow::detail {

struct BatchTotals {
  double j_align = 0.0;
  double j_var = 0.0;
  double kl_sum = 0.0;
  std::size_t correct = 0;
  std::vector<double> usage;
  std::vector<double> g_theta, g_phi, g_head;
};

struct BatchProblem {
  const FlowModel& m;
  const ClassifierHead& head;
  const ObjectiveConfig& obj;
  const std::vector<StepKernel>& kernels;
  std::size_t n_total;  // batch size used for the 1/N normalization
};

/// Sizes the accumulators of `out` for problem `p`.
void init_totals(const BatchProblem& p, bool grads, BatchTotals& out);

/// Runs samples [lo, hi) of `batch` and adds their contributions to `out`.
void run_sample_range(const BatchProblem& p, const LabeledPoints& batch, std::size_t lo, std::size_t hi, bool grads,
                      BatchTotals& out);

}  // namespace svflow::detail
