#include "svflow/attention.hpp"

#include "svflow/data.hpp"
#include "svflow/geometry.hpp"

#include <boost/math/special_functions/legendre.hpp>

#include <cmath>
#include <numbers>

namespace svflow {

namespace {

void require_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw DomainError(std::string(what) + ": non-finite entries");
}

void require_kv(const std::vector<Vec>& keys, const std::vector<Vec>& values, const char* who) {
  if (keys.empty()) throw PreconditionError(std::string(who) + ": empty key set");
  require_same_size(keys.size(), values.size(), who);
}

Vec attention_logits(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys) {
  if (keys.empty()) throw PreconditionError("attention: empty key set");
  require_same_size(static_cast<std::size_t>(x_q.size()), head.dim(), "attention: query size");
  // xᵀ QK k_z for every key, via the query-side product QKᵀ x.
  const Vec qk = head.QK.transpose() * x_q;
  Vec logits(static_cast<Eigen::Index>(keys.size()));
  for (std::size_t z = 0; z < keys.size(); ++z) {
    require_same_size(static_cast<std::size_t>(keys[z].size()), head.dim(), "attention: key size");
    logits[static_cast<Eigen::Index>(z)] = qk.dot(keys[z]);
  }
  return logits;
}

}  // namespace

void AttentionHead::validate() const {
  if (QK.rows() != QK.cols() || OV.rows() != OV.cols() || QK.rows() != OV.rows() || QK.rows() == 0) {
    throw DimensionError("AttentionHead: QK and OV must be square d×d");
  }
  require_finite(QK, "AttentionHead.QK");
  require_finite(OV, "AttentionHead.OV");
}

ProbVector MhaLayer::head_distribution() const {
  if (head_weights.size() == 0) return ProbVector::uniform(heads.size());
  return ProbVector(head_weights);
}

void MhaLayer::validate() const {
  if (heads.empty()) throw PreconditionError("MhaLayer: no heads");
  for (const auto& h : heads) {
    h.validate();
    require_same_size(h.dim(), heads.front().dim(), "MhaLayer: head dimension");
  }
  if (head_weights.size() != 0) {
    require_same_size(static_cast<std::size_t>(head_weights.size()), heads.size(), "MhaLayer: head_weights");
    (void)ProbVector(head_weights);
  }
}

Vec Expert::operator()(const Vec& x) const {
  const Vec h = (W1 * x + b1).array().tanh().matrix();
  return W2 * h + b2;
}

void MoeLayer::validate() const {
  if (experts.empty()) throw PreconditionError("MoeLayer: no experts");
  const auto E = static_cast<Eigen::Index>(experts.size());
  const Eigen::Index d = gate_W.cols();
  if (gate_W.rows() != E || gate_b.size() != E) throw DimensionError("MoeLayer: gate must map d → E logits");
  for (const auto& e : experts) {
    if (e.W1.cols() != d || e.W2.rows() != d || e.W1.rows() != e.W2.cols() || e.b1.size() != e.W1.rows() ||
        e.b2.size() != d) {
      throw DimensionError("MoeLayer: expert shape mismatch");
    }
  }
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ConfigError("MoeLayer: ema_decay must lie in [0, 1)");
  if (!ema_mean.empty()) require_same_size(ema_mean.size(), experts.size(), "MoeLayer: ema_mean");
}

MeanDirection mean_direction_decompose(const Vec& w) {
  const double k = w.norm();
  if (k == 0.0) {
    Vec e1 = Vec::Zero(std::max<Eigen::Index>(w.size(), 1));
    e1[0] = 1.0;
    return {e1, 0.0};
  }
  return {w / k, k};
}

ProbVector attention_posterior(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys) {
  return softmax(attention_logits(head, x_q, keys));
}

Vec head_field(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys,
               const std::vector<Vec>& values) {
  require_kv(keys, values, "head_field");
  const ProbVector q = attention_posterior(head, x_q, keys);
  Vec v = Vec::Zero(static_cast<Eigen::Index>(head.dim()));
  for (std::size_t z = 0; z < keys.size(); ++z) {
    const MeanDirection s = mean_direction_decompose(head.OV * values[z]);
    v += (q[z] * s.kappa) * s.mu;
  }
  return v;
}

Vec head_literal(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys,
                 const std::vector<Vec>& values) {
  require_kv(keys, values, "head_literal");
  const auto n = static_cast<Eigen::Index>(keys.size());
  const auto d = static_cast<Eigen::Index>(head.dim());
  Mat K(n, d), V(n, d);
  for (Eigen::Index z = 0; z < n; ++z) {
    K.row(z) = keys[static_cast<std::size_t>(z)].transpose();
    V.row(z) = values[static_cast<std::size_t>(z)].transpose();
  }
  const Vec scores = K * (head.QK.transpose() * x_q);
  const Vec a = softmax(scores).values();
  return head.OV * (V.transpose() * a);
}

Vec mha_forward(const MhaLayer& layer, const Vec& x_q, const std::vector<Vec>& keys, const std::vector<Vec>& values,
                MhaForm form) {
  layer.validate();
  Vec out = Vec::Zero(x_q.size());
  if (form == MhaForm::literal) {
    for (const auto& h : layer.heads) out += head_literal(h, x_q, keys, values);
    return out;
  }
  const ProbVector qh = layer.head_distribution();
  for (std::size_t h = 0; h < layer.heads.size(); ++h) {
    if (qh[h] == 0.0) continue;
    out += qh[h] * head_field(layer.heads[h], x_q, keys, values);
  }
  return static_cast<double>(layer.heads.size()) * out;
}

std::vector<MoeOutput> moe_forward_batch(MoeLayer& layer, const std::vector<Vec>& xs, bool update_ema) {
  layer.validate();
  const std::size_t E = layer.num_experts();
  const auto d = static_cast<Eigen::Index>(layer.dim());
  if (layer.ema_center && layer.ema_mean.empty()) layer.ema_mean.assign(E, Vec::Zero(d));

  std::vector<MoeOutput> out;
  out.reserve(xs.size());
  std::vector<Vec> batch_mean(E, Vec::Zero(d));
  for (const Vec& x : xs) {
    require_same_size(static_cast<std::size_t>(x.size()), layer.dim(), "moe_forward: input size");
    ProbVector g = softmax(layer.gate_W * x + layer.gate_b);
    Vec y = Vec::Zero(d);
    for (std::size_t i = 0; i < E; ++i) {
      const Vec e = layer.experts[i](x);
      batch_mean[i] += e;
      y += g[i] * (layer.ema_center ? Vec(e - layer.ema_mean[i]) : e);
    }
    out.push_back({std::move(y), std::move(g)});
  }
  if (layer.ema_center && update_ema && !xs.empty()) {
    const double rho = layer.ema_decay;
    for (std::size_t i = 0; i < E; ++i) {
      layer.ema_mean[i] = rho * layer.ema_mean[i] + (1.0 - rho) * (batch_mean[i] / static_cast<double>(xs.size()));
    }
  }
  return out;
}

MoeOutput moe_forward(MoeLayer& layer, const Vec& x, bool update_ema) {
  return std::move(moe_forward_batch(layer, {x}, update_ema).front());
}

double load_balance_loss(const std::vector<ProbVector>& routings) {
  if (routings.empty()) throw PreconditionError("load_balance_loss: empty batch");
  const std::size_t E = routings.front().size();
  Vec f = Vec::Zero(static_cast<Eigen::Index>(E));
  Vec P = Vec::Zero(static_cast<Eigen::Index>(E));
  for (const auto& r : routings) {
    require_same_size(r.size(), E, "load_balance_loss: routing size");
    Eigen::Index best = 0;
    r.values().maxCoeff(&best);  // first maximum on ties
    f[best] += 1.0;
    P += r.values();
  }
  const double n = static_cast<double>(routings.size());
  return (f / n).dot(P / n);
}

Vec transformer_layer(const Vec& x, const std::function<Vec(const Vec&)>& f) {
  const double d = static_cast<double>(x.size());
  if (std::abs(x.norm() - std::sqrt(d)) > 1e-9 * std::sqrt(d)) {
    throw PreconditionError("transformer_layer: input is not on the √d sphere");
  }
  const Vec fx = f(x);
  require_same_size(static_cast<std::size_t>(fx.size()), static_cast<std::size_t>(x.size()), "transformer_layer");
  return geometry::rms_normalize(x + fx, static_cast<std::size_t>(x.size()));
}

// ---------------------------------------------------------------------------
// Kernel-smoothing limit

KeySampler vmf_key_sampler(const Vec& mu, double kappa) {
  const auto d = static_cast<std::size_t>(mu.size());
  if (d != 2 && d != 3) throw PreconditionError("vmf_key_sampler: key domain must be S¹ or S²");
  if (!(kappa >= 0.0)) throw DomainError("vmf_key_sampler: kappa must be ≥ 0");
  const Vec m = mu.normalized();
  KeySampler s;
  s.dim = d;
  s.sample = [m, kappa](std::mt19937_64& rng) { return sample_vmf(m, kappa, rng); };
  s.density = [m, kappa](const Vec& k) { return std::exp(vmf_log_density(k, VmfParams{m, kappa})); };
  return s;
}

namespace {

struct QuadNode {
  Vec k;
  double w;
};

// Product rule on the sphere: Gauss–Legendre in cos θ times the periodic
// trapezoid rule in φ; the plain trapezoid rule on the circle.
std::vector<QuadNode> sphere_rule(std::size_t dim, std::size_t n) {
  std::vector<QuadNode> nodes;
  const double two_pi = 2.0 * std::numbers::pi;
  if (dim == 2) {
    const std::size_t m = 4 * n;
    for (std::size_t j = 0; j < m; ++j) {
      const double a = two_pi * static_cast<double>(j) / static_cast<double>(m);
      Vec k(2);
      k << std::cos(a), std::sin(a);
      nodes.push_back({k, two_pi / static_cast<double>(m)});
    }
    return nodes;
  }
  const auto pos = boost::math::legendre_p_zeros<double>(static_cast<int>(n));
  std::vector<double> t, w;
  for (double x : pos) {
    const double dp = boost::math::legendre_p_prime<double>(static_cast<int>(n), x);
    const double wx = 2.0 / ((1.0 - x * x) * dp * dp);
    t.push_back(x);
    w.push_back(wx);
    if (x != 0.0) {
      t.push_back(-x);
      w.push_back(wx);
    }
  }
  const std::size_t m = 2 * n;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double s = std::sqrt(std::max(0.0, 1.0 - t[i] * t[i]));
    for (std::size_t j = 0; j < m; ++j) {
      const double a = two_pi * static_cast<double>(j) / static_cast<double>(m);
      Vec k(3);
      k << s * std::cos(a), s * std::sin(a), t[i];
      nodes.push_back({k, w[i] * two_pi / static_cast<double>(m)});
    }
  }
  return nodes;
}

// Weighted mean Σ w_i f_i / Σ w_i with log-weights, anchored at f_0 so a
// constant f is reproduced exactly.
double anchored_mean(const std::vector<double>& logw, const std::vector<double>& fv) {
  double m = logw[0];
  for (double l : logw) m = std::max(m, l);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < logw.size(); ++i) {
    const double w = std::exp(logw[i] - m);
    num += w * (fv[i] - fv[0]);
    den += w;
  }
  return fv[0] + num / den;
}

double quadrature_mean(const AttentionHead& head, const Vec& x_q, const KeySampler& sampler,
                       const std::function<double(const Vec&)>& f, std::size_t n) {
  const Vec qk = head.QK.transpose() * x_q;
  std::vector<double> logw, fv;
  for (const auto& node : sphere_rule(sampler.dim, n)) {
    const double p = sampler.density(node.k);
    if (!(p > 0.0) || node.w <= 0.0) continue;
    logw.push_back(qk.dot(node.k) + std::log(p) + std::log(node.w));
    fv.push_back(f(node.k));
  }
  if (logw.empty()) throw DegenerateError("kernel_limit_error: key density vanishes on every quadrature node");
  return anchored_mean(logw, fv);
}

}  // namespace

KernelLimitResult kernel_limit_error(const AttentionHead& head, const Vec& x_q, const KeySampler& sampler,
                                     const std::function<double(const Vec&)>& f, std::size_t N,
                                     std::size_t quad_resolution, std::size_t num_seeds, std::uint64_t seed) {
  head.validate();
  if (sampler.dim != 2 && sampler.dim != 3) throw PreconditionError("kernel_limit_error: key domain must have d ≤ 3");
  require_same_size(head.dim(), sampler.dim, "kernel_limit_error: head vs key dimension");
  if (N == 0 || num_seeds == 0) throw PreconditionError("kernel_limit_error: need N ≥ 1 and at least one seed");
  if (quad_resolution < 2) throw PreconditionError("kernel_limit_error: quad_resolution must be ≥ 2");

  KernelLimitResult res;
  const double coarse = quadrature_mean(head, x_q, sampler, f, quad_resolution);
  res.reference = quadrature_mean(head, x_q, sampler, f, 2 * quad_resolution);
  res.quadrature_converged = std::abs(coarse - res.reference) <= 1e-10 * std::max(1.0, std::abs(res.reference));

  const Vec qk = head.QK.transpose() * x_q;
  std::vector<double> logw(N), fv(N);
  for (std::size_t s = 0; s < num_seeds; ++s) {
    std::mt19937_64 rng(seed + 0x632be59bd9b4e019ULL * (s + 1));
    for (std::size_t z = 0; z < N; ++z) {
      const Vec k = sampler.sample(rng);
      logw[z] = qk.dot(k);
      fv[z] = f(k);
    }
    res.seed_errors.push_back(std::abs(anchored_mean(logw, fv) - res.reference));
  }
  double sum = 0.0;
  for (double e : res.seed_errors) sum += e;
  res.error = sum / static_cast<double>(num_seeds);
  return res;
}

}  // namespace svflow
