#pragma once

#include "svflow/distributions.hpp"

#include <cstddef>
#include <vector>

namespace svflow {

struct TokenMetrics {
  double neg_log_p = 0.0;  // nats per dimension
  double kl_qp = 0.0;      // nats
  double kl_qU = 0.0;
  double kl_pU = 0.0;
};

/// Metrics of one evaluation point from the variational posterior q and the
/// conditional log densities log p(x|z) under a uniform prior. Throws
/// DomainError if the logsumexp route and the −ELBO − KL route for −log p
/// disagree by more than 1e-9.
TokenMetrics svflow_metrics(const ProbVector& q, const Vec& cond_log_densities, std::size_t d);

/// Expected calibration error in percent over equal-width bins on [0, 1].
/// A confidence on a bin edge goes to the lower bin; 0 goes to the first.
double ece(const std::vector<double>& confidences, const std::vector<bool>& correct, std::size_t bins = 15);

/// Mean per-token negative log-likelihood (nats).
double log_ppl(const std::vector<double>& per_token_nll);

struct CalibrationReport {
  double ece = 0.0;  // percent
  double log_ppl = 0.0;
  std::vector<std::size_t> bin_counts;
};

CalibrationReport calibration_report(const std::vector<double>& confidences, const std::vector<bool>& correct,
                                     const std::vector<double>& per_token_nll, std::size_t bins = 15);

struct ShuffleRate {
  double r = 0.0;
  bool excluded = false;  // position inside the shuffled prefix
};

/// r = min(1, ⌊pN⌋/n) for the 1-indexed position n.
ShuffleRate shuffle_rate(double p, std::size_t N, std::size_t n);

/// Bin of r over (0, .25], (.25, .5], (.5, .75], (.75, 1); −1 for r = 0 or r ≥ 1.
int shuffle_bin(double r);

struct AggregatedMetrics {
  TokenMetrics mean;
  std::size_t count = 0;
  std::size_t saturated = 0;  // entries with an infinite KL, left out of the means
};

/// Arithmetic mean of `rows`; infinite KL entries are excluded per field.
AggregatedMetrics mean_metrics(const std::vector<TokenMetrics>& rows);

/// Mean over the last ⌈fraction · layers⌉ layers.
AggregatedMetrics aggregate_deep(const std::vector<TokenMetrics>& layer_metrics, double fraction = 1.0 / 3.0);

/// Spearman rank correlation with tied ranks averaged.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace svflow
