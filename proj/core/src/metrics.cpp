#include "svflow/metrics.hpp"

#include "svflow/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace svflow {

TokenMetrics svflow_metrics(const ProbVector& q, const Vec& cond_log_densities, std::size_t d) {
  require_same_size(q.size(), static_cast<std::size_t>(cond_log_densities.size()), "svflow_metrics: |q| vs |Z|");
  if (d == 0) throw PreconditionError("svflow_metrics: d must be ≥ 1");
  const double Z = static_cast<double>(q.size());
  const double log_prior = -std::log(Z);
  const double dd = static_cast<double>(d);

  const double lse = logsumexp(cond_log_densities);
  const Vec log_p = cond_log_densities.array() - lse;
  Vec pv = log_p.array().exp();
  pv /= pv.sum();
  const ProbVector p(pv);

  TokenMetrics m;
  m.neg_log_p = -(lse + log_prior) / dd;
  double kl = 0.0, elbo = 0.0;
  for (std::size_t z = 0; z < q.size(); ++z) {
    const double qz = q[z];
    if (qz == 0.0) continue;
    const auto zi = static_cast<Eigen::Index>(z);
    kl += qz * (std::log(qz) - log_p[zi]);
    elbo += qz * (cond_log_densities[zi] + log_prior - std::log(qz));
  }
  m.kl_qp = std::isfinite(kl) ? std::max(kl, 0.0) : kInf;
  m.kl_qU = kl_to_uniform(q);
  m.kl_pU = kl_to_uniform(p);

  if (std::isfinite(kl) && std::isfinite(elbo)) {
    const double alt = -(elbo + kl) / dd;
    if (std::abs(alt - m.neg_log_p) > 1e-9 * std::max(1.0, std::abs(m.neg_log_p))) {
      throw DomainError("svflow_metrics: −log p routes disagree (" + std::to_string(m.neg_log_p) + " vs " +
                        std::to_string(alt) + ")");
    }
  }
  return m;
}

namespace {

std::size_t conf_bin(double c, std::size_t bins) {
  if (c <= 0.0) return 0;
  const double pos = std::ceil(c * static_cast<double>(bins)) - 1.0;
  return static_cast<std::size_t>(std::clamp(pos, 0.0, static_cast<double>(bins - 1)));
}

}  // namespace

CalibrationReport calibration_report(const std::vector<double>& confidences, const std::vector<bool>& correct,
                                     const std::vector<double>& per_token_nll, std::size_t bins) {
  CalibrationReport r;
  r.ece = ece(confidences, correct, bins);
  r.log_ppl = log_ppl(per_token_nll);
  r.bin_counts.assign(bins, 0);
  for (double c : confidences) ++r.bin_counts[conf_bin(c, bins)];
  return r;
}

double ece(const std::vector<double>& confidences, const std::vector<bool>& correct, std::size_t bins) {
  if (confidences.empty()) throw PreconditionError("ece: empty input");
  require_same_size(confidences.size(), correct.size(), "ece: confidences vs correct");
  if (bins == 0) throw PreconditionError("ece: need at least one bin");
  std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
  std::vector<std::size_t> count(bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("ece: confidence outside [0, 1]");
    const std::size_t b = conf_bin(c, bins);
    conf_sum[b] += c;
    acc_sum[b] += correct[i] ? 1.0 : 0.0;
    ++count[b];
  }
  const double N = static_cast<double>(confidences.size());
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b) {
    if (count[b] == 0) continue;
    const double n = static_cast<double>(count[b]);
    e += (n / N) * std::abs(acc_sum[b] / n - conf_sum[b] / n);
  }
  return 100.0 * e;
}

double log_ppl(const std::vector<double>& per_token_nll) {
  if (per_token_nll.empty()) throw PreconditionError("log_ppl: empty input");
  return std::accumulate(per_token_nll.begin(), per_token_nll.end(), 0.0) /
         static_cast<double>(per_token_nll.size());
}

ShuffleRate shuffle_rate(double p, std::size_t N, std::size_t n) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("shuffle_rate: p must lie in [0, 1]");
  if (n < 1 || n > N) throw PreconditionError("shuffle_rate: position must satisfy 1 ≤ n ≤ N");
  const std::size_t k = shuffled_prefix_length(N, p);
  ShuffleRate s;
  s.r = std::min(1.0, static_cast<double>(k) / static_cast<double>(n));
  s.excluded = k > 0 && n <= k;
  return s;
}

int shuffle_bin(double r) {
  if (!(r > 0.0) || r >= 1.0) return -1;
  if (r <= 0.25) return 0;
  if (r <= 0.5) return 1;
  if (r <= 0.75) return 2;
  return 3;
}

AggregatedMetrics mean_metrics(const std::vector<TokenMetrics>& rows) {
  AggregatedMetrics a;
  a.count = rows.size();
  if (rows.empty()) return a;
  double nlp = 0.0, qp = 0.0, qu = 0.0, pu = 0.0;
  std::size_t nqp = 0, nqu = 0, npu = 0;
  auto add = [](double v, double& sum, std::size_t& n) {
    if (std::isfinite(v)) {
      sum += v;
      ++n;
      return false;
    }
    return true;
  };
  for (const auto& r : rows) {
    nlp += r.neg_log_p;
    bool sat = add(r.kl_qp, qp, nqp);
    sat = add(r.kl_qU, qu, nqu) || sat;
    sat = add(r.kl_pU, pu, npu) || sat;
    if (sat) ++a.saturated;
  }
  auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : kInf; };
  a.mean.neg_log_p = nlp / static_cast<double>(rows.size());
  a.mean.kl_qp = mean(qp, nqp);
  a.mean.kl_qU = mean(qu, nqu);
  a.mean.kl_pU = mean(pu, npu);
  return a;
}

AggregatedMetrics aggregate_deep(const std::vector<TokenMetrics>& layer_metrics, double fraction) {
  if (layer_metrics.empty()) throw PreconditionError("aggregate_deep: no layers");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DomainError("aggregate_deep: fraction must lie in (0, 1]");
  const std::size_t L = layer_metrics.size();
  // The tolerance keeps exact fractions such as 8/24 from rounding up.
  auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(L) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, L);
  return mean_metrics(std::vector<TokenMetrics>(layer_metrics.end() - static_cast<std::ptrdiff_t>(k),
                                                layer_metrics.end()));
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  require_same_size(a.size(), b.size(), "spearman: sample sizes");
  if (a.size() < 2) throw PreconditionError("spearman: need at least two samples");
  const std::vector<double> ra = ranks(a), rb = ranks(b);
  const Eigen::Map<const Vec> x(ra.data(), static_cast<Eigen::Index>(ra.size()));
  const Eigen::Map<const Vec> y(rb.data(), static_cast<Eigen::Index>(rb.size()));
  const Vec xc = x.array() - x.mean();
  const Vec yc = y.array() - y.mean();
  const double den = std::sqrt(xc.squaredNorm() * yc.squaredNorm());
  if (den == 0.0) throw DegenerateError("spearman: constant input");
  return xc.dot(yc) / den;
}

}  // namespace svflow
