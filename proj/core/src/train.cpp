#include "svflow/train.hpp"

#include "batch_engine.hpp"
#include "step_kernel.hpp"
#include "svflow/geometry.hpp"

#include <algorithm>
#include <exception>
#include <cmath>
#include <numeric>
#include <thread>

namespace svflow {

// ---------------------------------------------------------------------------
// Small value types

ClassifierHead::ClassifierHead(std::size_t dim, std::size_t num_classes)
    : W(Mat::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(num_classes))),
      bias(Vec::Zero(static_cast<Eigen::Index>(num_classes))) {
  require(num_classes >= 1, "ClassifierHead: need at least one class");
}

ObjectiveConfig ObjectiveConfig::hybrid(double beta, StepMode mode) {
  ObjectiveConfig c;
  c.beta = beta;
  c.mode = mode;
  return c;
}

ObjectiveConfig ObjectiveConfig::variational_only(StepMode mode) {
  ObjectiveConfig c;
  c.var_only = true;
  c.beta = kInf;
  c.mode = mode;
  return c;
}

void ObjectiveConfig::validate(std::size_t num_steps) const {
  if (!var_only && !(beta >= 0.0 && std::isfinite(beta))) {
    throw ConfigError("objective: beta must be finite and ≥ 0 (use var_only for the J_var-only limit)");
  }
  if (mode == StepMode::spherical_strict) throw ConfigError("objective: training supports euclidean/spherical steps");
  if (!lambda_weights.empty()) {
    if (lambda_weights.size() != num_steps) throw ConfigError("objective: lambda_weights must have one entry per step");
    double s = 0.0;
    for (double w : lambda_weights) {
      if (!(w >= 0.0)) throw ConfigError("objective: lambda weights must be nonnegative");
      s += w;
    }
    if (std::abs(s / static_cast<double>(num_steps) - 1.0) > 1e-9) {
      throw ConfigError("objective: lambda weights must have mean 1");
    }
  }
}

Vec centered(const Vec& a, const Vec& q) {
  require_same_size(static_cast<std::size_t>(a.size()), static_cast<std::size_t>(q.size()), "centered");
  return a.array() - q.dot(a);
}

// ---------------------------------------------------------------------------
// Packing

std::vector<double> pack_theta(const FlowModel& m) {
  std::vector<double> out = m.theta_data();
  if (m.family() == Family::vmf) {
    const std::size_t b = m.theta_block_size();
    for (std::size_t i = 0; i < out.size(); i += b) out[i + m.dim()] = detail::softplus_inverse(out[i + m.dim()]);
  }
  return out;
}

void unpack_theta(FlowModel& m, std::span<const double> packed) {
  require_same_size(packed.size(), m.theta_data().size(), "unpack_theta");
  auto& t = m.theta_data();
  std::copy(packed.begin(), packed.end(), t.begin());
  if (m.family() == Family::vmf) {
    const std::size_t b = m.theta_block_size();
    const std::size_t d = m.dim();
    for (std::size_t i = 0; i < t.size(); i += b) {
      double n = 0.0;
      for (std::size_t j = 0; j < d; ++j) n += t[i + j] * t[i + j];
      n = std::sqrt(n);
      if (!(n > 0.0)) throw DegenerateError("unpack_theta: zero vmf direction");
      for (std::size_t j = 0; j < d; ++j) t[i + j] /= n;
      t[i + d] = detail::softplus(t[i + d]);
    }
  }
}

std::vector<double> pack_phi(const FlowModel& m) { return m.phi_data(); }

void unpack_phi(FlowModel& m, std::span<const double> packed) {
  require_same_size(packed.size(), m.phi_data().size(), "unpack_phi");
  std::copy(packed.begin(), packed.end(), m.phi_data().begin());
}

std::vector<double> pack_head(const ClassifierHead& head) {
  const std::size_t d = head.dim();
  std::vector<double> out;
  out.reserve((d + 1) * head.num_classes());
  for (std::size_t c = 0; c < head.num_classes(); ++c) {
    for (std::size_t i = 0; i < d; ++i) out.push_back(head.W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)));
    out.push_back(head.bias[static_cast<Eigen::Index>(c)]);
  }
  return out;
}

void unpack_head(ClassifierHead& head, std::span<const double> packed) {
  const std::size_t d = head.dim();
  require_same_size(packed.size(), (d + 1) * head.num_classes(), "unpack_head");
  std::size_t k = 0;
  for (std::size_t c = 0; c < head.num_classes(); ++c) {
    for (std::size_t i = 0; i < d; ++i) head.W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = packed[k++];
    head.bias[static_cast<Eigen::Index>(c)] = packed[k++];
  }
}

// ---------------------------------------------------------------------------
// Engine

namespace {

struct StepRecord {
  detail::StepEval eval;
  double unorm = 1.0;  // ‖x + h v‖ (spherical mode)
};

// Read-only, per-batch view of the model.
struct Engine {
  const FlowModel& m;
  const ClassifierHead& head;
  const ObjectiveConfig& obj;
  std::vector<detail::StepKernel> kernels;
  std::size_t d, Z, L, C;
  double h;
  bool spherical;
  bool untied;
  double wa, wb, inv_n;

  Engine(const FlowModel& model, const ClassifierHead& hd, const ObjectiveConfig& o, std::size_t n)
      : m(model),
        head(hd),
        obj(o),
        d(model.dim()),
        Z(model.num_components()),
        L(model.num_steps()),
        C(hd.num_classes()),
        h(model.step_size()),
        spherical(o.mode == StepMode::spherical),
        untied(model.posterior_mode() == PosteriorMode::untied),
        wa(o.align_weight()),
        wb(o.var_weight()),
        inv_n(n > 0 ? 1.0 / static_cast<double>(n) : 0.0) {
    o.validate(L);
    if (hd.dim() != d) throw DimensionError("classifier head dimension does not match the flow");
    kernels.reserve(L);
    for (std::size_t l = 0; l < L; ++l) kernels.emplace_back(model, l);
  }

  // c_ℓ: weight of KL_ℓ in the batch-mean J_var.
  double var_coeff(std::size_t l) const { return obj.lambda(l) * inv_n / static_cast<double>(L); }
};

struct Worker {
  std::vector<double> states;  // (L+1)·d
  std::vector<StepRecord> recs;
  std::vector<double> kls;     // per step
  // accumulators
  double j_align = 0.0;
  double j_var = 0.0;
  double kl_sum = 0.0;
  std::size_t correct = 0;
  std::vector<double> usage;
  std::vector<double> g_theta, g_phi, g_head;
  // scratch
  std::vector<double> ga, gv, gu_a, gu_v, gv_a, gv_v, gv_t, nga, ngv, A, B, At, R, eta, logits, pi;

  explicit Worker(const Engine& e, bool grads) {
    states.assign((e.L + 1) * e.d, 0.0);
    recs.resize(e.L);
    for (auto& r : recs) r.eval.resize(e.d, e.Z);
    kls.assign(e.L, 0.0);
    usage.assign(e.Z, 0.0);
    if (grads) {
      g_theta.assign(e.m.theta_data().size(), 0.0);
      g_phi.assign(e.m.phi_data().size(), 0.0);
      g_head.assign((e.d + 1) * e.C, 0.0);
    }
    for (auto* v : {&ga, &gv, &gu_a, &gu_v, &gv_a, &gv_v, &gv_t, &nga, &ngv}) v->assign(e.d, 0.0);
    for (auto* v : {&A, &B, &At, &R, &eta}) v->assign(e.Z, 0.0);
    logits.assign(e.C, 0.0);
    pi.assign(e.C, 0.0);
  }
};

double* state(Worker& w, const Engine& e, std::size_t l) { return w.states.data() + l * e.d; }

// Forward pass of one sample; fills states/recs and returns −log p(y|x_L).
template <int D>
double forward_sample(const Engine& e, Worker& w, const Vec& x0, int label) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  std::copy(x0.data(), x0.data() + d, w.states.begin());
  for (std::size_t l = 0; l < e.L; ++l) {
    const double* x = state(w, e, l);
    double* y = state(w, e, l + 1);
    StepRecord& r = w.recs[l];
    e.kernels[l].template evaluate_fixed<D>(x, r.eval);
    double nn = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      y[i] = x[i] + e.h * r.eval.v[i];
      nn += y[i] * y[i];
    }
    if (e.spherical) {
      r.unorm = std::sqrt(nn);
      if (r.unorm < 1e-12) throw DegenerateError("euler_step: ‖x + h v‖ vanishes");
      for (std::size_t i = 0; i < d; ++i) y[i] /= r.unorm;
    }
    double kl = 0.0;
    if (e.untied) {
      for (std::size_t z = 0; z < e.Z; ++z) {
        if (r.eval.q[z] > 0.0) kl += r.eval.q[z] * (r.eval.logq[z] - r.eval.logpost[z]);
      }
    }
    w.kls[l] = std::max(kl, 0.0);
  }
  const double* xL = state(w, e, e.L);
  for (std::size_t c = 0; c < e.C; ++c) {
    double s = e.head.bias[static_cast<Eigen::Index>(c)];
    for (std::size_t i = 0; i < d; ++i) s += e.head.W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) * xL[i];
    w.logits[c] = s;
  }
  std::vector<double> logpi(e.C);
  detail::log_softmax_into(w.logits, logpi, w.pi);
  if (label < 0 || static_cast<std::size_t>(label) >= e.C) throw PreconditionError("label out of range");
  return -logpi[static_cast<std::size_t>(label)];
}

// g_u from g_y through the optional renormalization y = u/‖u‖.
template <int D>
void pull_norm(const Engine& e, const StepRecord& r, const double* y, const std::vector<double>& gy,
               std::vector<double>& gu) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  if (!e.spherical) {
    std::copy(gy.begin(), gy.end(), gu.begin());
    return;
  }
  double yg = 0.0;
  for (std::size_t i = 0; i < d; ++i) yg += y[i] * gy[i];
  for (std::size_t i = 0; i < d; ++i) gu[i] = (gy[i] - y[i] * yg) / r.unorm;
}

// ∇_x g_z(x): W_z (untied) or s_z (tied).
template <int D>
const double* grad_logit(const Engine& e, const StepRecord& r, std::size_t l, std::size_t z) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  return e.untied ? e.kernels[l].W(z) : r.eval.score.data() + z * d;
}

// out = g_u + Σ_z q_z J_szᵀ g_v + Σ_z q_z (a_z − ā) ∇g_z, with a_z = g_v·s_z stored into `a`.
template <int D>
void pull_velocity(const Engine& e, const StepRecord& r, std::size_t l, const std::vector<double>& gu,
                   const std::vector<double>& gv, std::vector<double>& a, std::vector<double>& out) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  const auto& ev = r.eval;
  double abar = 0.0;
  for (std::size_t z = 0; z < e.Z; ++z) {
    const double* s = ev.score.data() + z * d;
    double az = 0.0;
    for (std::size_t i = 0; i < d; ++i) az += gv[i] * s[i];
    a[z] = az;
    abar += ev.q[z] * az;
  }
  std::copy(gu.begin(), gu.end(), out.begin());
  if (e.m.family() == Family::gaussian) {
    for (std::size_t z = 0; z < e.Z; ++z) {
      const double* iv = e.kernels[l].inv_var(z);
      const double qz = ev.q[z];
      for (std::size_t i = 0; i < d; ++i) out[i] -= qz * iv[i] * gv[i];
    }
  }
  for (std::size_t z = 0; z < e.Z; ++z) {
    const double coef = ev.q[z] * (a[z] - abar);
    if (coef == 0.0) continue;
    const double* gz = grad_logit<D>(e, r, l, z);
    for (std::size_t i = 0; i < d; ++i) out[i] += coef * gz[i];
  }
}

// out += c [Σ q_z (R_z − R̄) ∇g_z + Σ (p_z − q_z) s_z]; R is filled with log q/p.
template <int D>
void add_local_var_grad(const Engine& e, const StepRecord& r, std::size_t l, double c, std::vector<double>& R,
                        std::vector<double>& out) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  if (!e.untied) {
    std::fill(R.begin(), R.end(), 0.0);
    return;
  }
  const auto& ev = r.eval;
  double rbar = 0.0;
  for (std::size_t z = 0; z < e.Z; ++z) {
    R[z] = ev.logq[z] - ev.logpost[z];
    rbar += ev.q[z] * R[z];
  }
  for (std::size_t z = 0; z < e.Z; ++z) {
    const double c1 = c * ev.q[z] * (R[z] - rbar);
    const double c2 = c * (ev.post[z] - ev.q[z]);
    const double* gz = grad_logit<D>(e, r, l, z);
    const double* s = ev.score.data() + z * d;
    for (std::size_t i = 0; i < d; ++i) out[i] += c1 * gz[i] + c2 * s[i];
  }
}

// Accumulates ∂/∂θ_ℓ and ∂/∂φ_ℓ given the pulled-back velocity signals and
// the advantages already stored in w.A (task) / w.B (future variational) /
// w.R (self variational).
template <int D>
void accumulate_params(const Engine& e, Worker& w, std::size_t l, const double* x, double c) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  const auto& ev = w.recs[l].eval;
  const auto& k = e.kernels[l];
  
  for (std::size_t i = 0; i < d; ++i) w.gv_t[i] = w.gv_a[i] + e.wb * w.gv_v[i];
  double at_bar = 0.0, r_bar = 0.0;
  for (std::size_t z = 0; z < e.Z; ++z) {
    w.At[z] = w.A[z] + e.wb * w.B[z];
    at_bar += ev.q[z] * w.At[z];
    r_bar += ev.q[z] * w.R[z];
  }
  for (std::size_t z = 0; z < e.Z; ++z) w.eta[z] = (w.At[z] - at_bar) + e.wb * c * (w.R[z] - r_bar);

  const std::size_t tb = e.m.theta_block_size();
  for (std::size_t z = 0; z < e.Z; ++z) {
    double* gt = w.g_theta.data() + (l * e.Z + z) * tb;
    const double qz = ev.q[z];
    const double* s = ev.score.data() + z * d;
    // Coefficient on ∂log p(x|z)/∂θ_z: consistency term (untied) or the
    // posterior path through shared parameters (tied).
    const double wlog = e.untied ? e.wb * c * (ev.post[z] - ev.q[z]) : qz * w.eta[z];
    if (e.m.family() == Family::gaussian) {
      const double* iv = k.inv_var(z);
      const double* mz = k.mean(z);
      for (std::size_t i = 0; i < d; ++i) {
        const double diff = x[i] - mz[i];
        gt[i] += qz * w.gv_t[i] * iv[i] - wlog * s[i];
        gt[d + i] += qz * w.gv_t[i] * (-2.0 * s[i]) + wlog * (-1.0 + diff * diff * iv[i]);
      }
    } else {
      const double* mu = k.mu(z);
      const double kap = k.kappa(z);
      const double slope = detail::softplus_slope_from_value(kap);
      double proj = 0.0, mx = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        proj += mu[i] * w.gv_t[i];
        mx += mu[i] * x[i];
      }
      for (std::size_t i = 0; i < d; ++i) {
        gt[i] += qz * kap * (w.gv_t[i] - mu[i] * proj) + wlog * kap * (x[i] - mu[i] * mx);
      }
      gt[d] += qz * slope * proj + wlog * slope * (mx - k.resultant(z));
    }
    if (e.untied) {
      double* gp = w.g_phi.data() + (l * e.Z + z) * (d + 1);
      const double coef = qz * w.eta[z];
      for (std::size_t i = 0; i < d; ++i) gp[i] += coef * x[i];
      gp[d] += coef;
    }
  }
}

// Classifier loss gradient: fills w.ga with δ_L and accumulates head grads.
template <int D>
void head_backward(const Engine& e, Worker& w, int label, bool grads) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  const double* xL = state(w, e, e.L);
  std::fill(w.ga.begin(), w.ga.end(), 0.0);
  for (std::size_t c = 0; c < e.C; ++c) {
    const double dl = e.wa * e.inv_n * (w.pi[c] - (static_cast<int>(c) == label ? 1.0 : 0.0));
    for (std::size_t i = 0; i < d; ++i) w.ga[i] += e.head.W(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) * dl;
    if (grads) {
      double* gh = w.g_head.data() + c * (d + 1);
      for (std::size_t i = 0; i < d; ++i) gh[i] += dl * xL[i];
      gh[d] += dl;
    }
  }
}

// Reverse sweep for one sample (after forward_sample), keeping the align
// and variational streams apart so both can be recorded.
template <int D>
void backward_sample(const Engine& e, Worker& w, int label, bool grads, SampleSignals& rec) {
  const std::size_t d = detail::fixed_dim<D>(e.d);
  head_backward<D>(e, w, label, grads);
  std::fill(w.gv.begin(), w.gv.end(), 0.0);
  SampleSignals* record = &rec;
  record->delta.assign(e.L + 1, Vec());
  record->var_total.assign(e.L + 1, Vec());
  record->delta[e.L] = Eigen::Map<const Vec>(w.ga.data(), static_cast<Eigen::Index>(d));
  record->var_total[e.L] = Vec::Zero(static_cast<Eigen::Index>(d));
  for (std::size_t l = e.L; l-- > 0;) {
    const StepRecord& r = w.recs[l];
    const double* x = state(w, e, l);
    const double* y = state(w, e, l + 1);
    const double c = e.var_coeff(l);
    pull_norm<D>(e, r, y, w.ga, w.gu_a);
    pull_norm<D>(e, r, y, w.gv, w.gu_v);
    for (std::size_t i = 0; i < d; ++i) {
      w.gv_a[i] = e.h * w.gu_a[i];
      w.gv_v[i] = e.h * w.gu_v[i];
    }
    pull_velocity<D>(e, r, l, w.gu_a, w.gv_a, w.A, w.nga);
    pull_velocity<D>(e, r, l, w.gu_v, w.gv_v, w.B, w.ngv);
    add_local_var_grad<D>(e, r, l, c, w.R, w.ngv);
    if (grads) accumulate_params<D>(e, w, l, x, c);
    std::swap(w.ga, w.nga);
    std::swap(w.gv, w.ngv);
    record->delta[l] = Eigen::Map<const Vec>(w.ga.data(), static_cast<Eigen::Index>(d));
    record->var_total[l] = Eigen::Map<const Vec>(w.gv.data(), static_cast<Eigen::Index>(d));
  }
}

void check_inputs(const Engine& e, const LabeledPoints& batch) {
  batch.validate();
  require(batch.size() > 0, "empty batch");
  for (const auto& p : batch.points) {
    require_same_size(static_cast<std::size_t>(p.size()), e.d, "batch point dimension");
    if (e.spherical && !geometry::is_unit(p, 1e-10)) throw PreconditionError("spherical mode needs unit inputs");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Public objective API

std::vector<Trajectory> integrate_batch(const FlowModel& m, const LabeledPoints& batch, StepMode mode) {
  std::vector<Trajectory> out;
  out.reserve(batch.size());
  for (const auto& p : batch.points) out.push_back(integrate(m, p, mode));
  return out;
}

double j_var(const FlowModel& m, const std::vector<Trajectory>& trajectories, const ObjectiveConfig& obj) {
  obj.validate(m.num_steps());
  if (trajectories.empty()) return 0.0;
  if (m.posterior_mode() == PosteriorMode::tied) return 0.0;
  double acc = 0.0;
  for (const auto& t : trajectories) {
    require_same_size(t.states.size(), m.num_steps() + 1, "j_var: trajectory length");
    for (std::size_t l = 0; l < m.num_steps(); ++l) {
      acc += obj.lambda(l) * categorical_kl(posterior(m, l, t.states[l]), true_posterior(m, l, t.states[l]));
    }
  }
  return acc / (static_cast<double>(trajectories.size()) * static_cast<double>(m.num_steps()));
}

double j_align(const FlowModel& m, const ClassifierHead& head, const LabeledPoints& batch, StepMode mode) {
  batch.validate();
  require(batch.size() > 0, "j_align: empty batch");
  double acc = 0.0;
  for (std::size_t n = 0; n < batch.size(); ++n) {
    const int y = batch.labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= head.num_classes()) throw PreconditionError("j_align: label out of range");
    const Vec xL = integrate(m, batch.points[n], mode).states.back();
    acc -= log_softmax(head.logits(xL))[y];
  }
  return acc / static_cast<double>(batch.size());
}

HybridEvaluation evaluate_hybrid(const FlowModel& m, const ClassifierHead& head, const LabeledPoints& batch,
                                 const ObjectiveConfig& obj, bool with_gradients, unsigned threads) {
  Engine e(m, head, obj, batch.size());
  check_inputs(e, batch);
  const std::size_t N = batch.size();
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(N)));

  const detail::BatchProblem prob{m, head, obj, e.kernels, N};
  std::vector<detail::BatchTotals> parts(threads);
  for (auto& p : parts) detail::init_totals(prob, with_gradients, p);
  auto run_chunk = [&](unsigned t) {
    detail::run_sample_range(prob, batch, N * t / threads, N * (t + 1) / threads, with_gradients, parts[t]);
  };
  if (threads == 1) {
    run_chunk(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          run_chunk(t);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }

  // Ordered reduction keeps results independent of scheduling.
  HybridEvaluation out;
  out.usage = Vec::Zero(static_cast<Eigen::Index>(e.Z));
  std::size_t correct = 0;
  double kl_sum = 0.0;
  GradientTable g;
  if (with_gradients) {
    g.theta.assign(m.theta_data().size(), 0.0);
    g.phi.assign(m.phi_data().size(), 0.0);
    g.head.assign((e.d + 1) * e.C, 0.0);
  }
  for (const auto& p : parts) {
    out.j_align += p.j_align;
    out.j_var += p.j_var;
    kl_sum += p.kl_sum;
    correct += p.correct;
    for (std::size_t z = 0; z < e.Z; ++z) out.usage[static_cast<Eigen::Index>(z)] += p.usage[z];
    if (with_gradients) {
      for (std::size_t i = 0; i < g.theta.size(); ++i) g.theta[i] += p.g_theta[i];
      for (std::size_t i = 0; i < g.phi.size(); ++i) g.phi[i] += p.g_phi[i];
      for (std::size_t i = 0; i < g.head.size(); ++i) g.head[i] += p.g_head[i];
    }
  }
  const double steps_total = static_cast<double>(N) * static_cast<double>(e.L);
  out.usage /= steps_total;
  out.mean_kl = kl_sum / steps_total;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(N);
  out.j_hybrid = e.wa * out.j_align + e.wb * out.j_var;
  if (with_gradients) out.grads = std::move(g);
  return out;
}

ErrorSignals backward_signals(const FlowModel& m, const ClassifierHead& head, const LabeledPoints& batch,
                              const ObjectiveConfig& obj, bool full_gamma) {
  Engine e(m, head, obj, batch.size());
  check_inputs(e, batch);
  Worker w(e, false);
  ErrorSignals out;
  out.has_gamma = full_gamma;
  out.samples.resize(batch.size());
  for (std::size_t n = 0; n < batch.size(); ++n) {
    forward_sample<0>(e, w, batch.points[n], batch.labels[n]);
    SampleSignals& s = out.samples[n];
    backward_sample<0>(e, w, batch.labels[n], false, s);
    s.trajectory.states.resize(e.L + 1);
    for (std::size_t l = 0; l <= e.L; ++l) {
      s.trajectory.states[l] = Eigen::Map<const Vec>(state(w, e, l), static_cast<Eigen::Index>(e.d));
    }
    if (full_gamma) {
      s.gamma.assign(e.L, {});
      for (std::size_t k = 0; k < e.L; ++k) {
        s.gamma[k].assign(k + 1, Vec());
        std::vector<double> g(e.d, 0.0);
        add_local_var_grad<0>(e, w.recs[k], k, e.var_coeff(k), w.R, g);
        s.gamma[k][k] = Eigen::Map<const Vec>(g.data(), static_cast<Eigen::Index>(e.d));
        for (std::size_t l = k; l-- > 0;) {
          pull_norm<0>(e, w.recs[l], state(w, e, l + 1), g, w.gu_v);
          for (std::size_t i = 0; i < e.d; ++i) w.gv_v[i] = e.h * w.gu_v[i];
          pull_velocity<0>(e, w.recs[l], l, w.gu_v, w.gv_v, w.B, g);
          s.gamma[k][l] = Eigen::Map<const Vec>(g.data(), static_cast<Eigen::Index>(e.d));
        }
      }
    }
  }
  return out;
}

namespace {

// Re-runs the forward pass of sample n and primes the worker's velocity
// signals for step l from the recorded error signals.
void prime_step(const Engine& e, Worker& w, const SampleSignals& s, std::size_t l) {
  const std::vector<double> ga(s.delta[l + 1].data(), s.delta[l + 1].data() + e.d);
  const std::vector<double> gv(s.var_total[l + 1].data(), s.var_total[l + 1].data() + e.d);
  const StepRecord& r = w.recs[l];
  const double* y = state(w, e, l + 1);
  pull_norm<0>(e, r, y, ga, w.gu_a);
  pull_norm<0>(e, r, y, gv, w.gu_v);
  for (std::size_t i = 0; i < e.d; ++i) {
    w.gv_a[i] = e.h * w.gu_a[i];
    w.gv_v[i] = e.h * w.gu_v[i];
  }
  pull_velocity<0>(e, r, l, w.gu_a, w.gv_a, w.A, w.nga);
  pull_velocity<0>(e, r, l, w.gu_v, w.gv_v, w.B, w.ngv);
  std::fill(w.ngv.begin(), w.ngv.end(), 0.0);
  add_local_var_grad<0>(e, r, l, e.var_coeff(l), w.R, w.ngv);
}

void replay_forward(const Engine& e, Worker& w, const SampleSignals& s) {
  require_same_size(s.trajectory.states.size(), e.L + 1, "error signals: trajectory length");
  const auto& x0 = s.trajectory.states[0];
  std::copy(x0.data(), x0.data() + e.d, w.states.begin());
  for (std::size_t l = 0; l < e.L; ++l) {
    const double* x = state(w, e, l);
    double* y = state(w, e, l + 1);
    StepRecord& r = w.recs[l];
    e.kernels[l].evaluate(x, r.eval);
    double nn = 0.0;
    for (std::size_t i = 0; i < e.d; ++i) {
      y[i] = x[i] + e.h * r.eval.v[i];
      nn += y[i] * y[i];
    }
    if (e.spherical) {
      r.unorm = std::sqrt(nn);
      for (std::size_t i = 0; i < e.d; ++i) y[i] /= r.unorm;
    }
  }
}

GradientTable grads_from_signals(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj) {
  ClassifierHead dummy(m.dim(), 1);
  Engine e(m, dummy, obj, signals.samples.size());
  Worker w(e, true);
  for (const auto& s : signals.samples) {
    replay_forward(e, w, s);
    for (std::size_t l = 0; l < e.L; ++l) {
      prime_step(e, w, s, l);
      accumulate_params<0>(e, w, l, state(w, e, l), e.var_coeff(l));
    }
  }
  return GradientTable{std::move(w.g_theta), std::move(w.g_phi), {}};
}

}  // namespace

AdvantageSet advantages(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj,
                        std::size_t sample, std::size_t step) {
  m.check_step(step);
  require(sample < signals.samples.size(), "advantages: sample index out of range");
  ClassifierHead dummy(m.dim(), 1);
  Engine e(m, dummy, obj, signals.samples.size());
  Worker w(e, true);
  const SampleSignals& s = signals.samples[sample];
  replay_forward(e, w, s);
  prime_step(e, w, s, step);

  const auto& ev = w.recs[step].eval;
  const auto Z = static_cast<Eigen::Index>(e.Z);
  AdvantageSet out;
  out.q = Eigen::Map<const Vec>(ev.q.data(), Z);
  out.A = Eigen::Map<const Vec>(w.A.data(), Z);
  out.R = Eigen::Map<const Vec>(w.R.data(), Z);
  const Vec b_running = Eigen::Map<const Vec>(w.B.data(), Z);
  const double c = e.var_coeff(step);
  out.eta = centered(out.A, out.q) + e.wb * c * centered(out.R, out.q) + e.wb * centered(b_running, out.q);
  if (signals.has_gamma) {
    for (std::size_t k = step + 1; k < e.L; ++k) {
      std::vector<double> g(s.gamma[k][step + 1].data(), s.gamma[k][step + 1].data() + e.d);
      pull_norm<0>(e, w.recs[step], state(w, e, step + 1), g, w.gu_v);
      Vec bk(Z);
      for (std::size_t z = 0; z < e.Z; ++z) {
        double acc = 0.0;
        for (std::size_t i = 0; i < e.d; ++i) acc += e.h * w.gu_v[i] * ev.score[z * e.d + i];
        bk[static_cast<Eigen::Index>(z)] = acc;
      }
      out.B.push_back(std::move(bk));
    }
  }
  return out;
}

std::vector<double> grad_phi(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj) {
  require(m.posterior_mode() == PosteriorMode::untied,
          "grad_phi: tied models route the posterior gradient into grad_theta");
  return grads_from_signals(m, signals, obj).phi;
}

std::vector<double> grad_theta(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj) {
  return grads_from_signals(m, signals, obj).theta;
}

std::vector<double> finite_diff_oracle(const std::function<double(std::span<const double>)>& loss,
                                       std::span<const double> params, double h) {
  require(h >= 1e-7 && h <= 1e-3, "finite_diff_oracle: step must lie in [1e-7, 1e-3]");
  std::vector<double> p(params.begin(), params.end());
  std::vector<double> g(p.size(), 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double orig = p[i];
    p[i] = orig + h;
    const double up = loss(p);
    p[i] = orig - h;
    const double dn = loss(p);
    p[i] = orig;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

double hybrid_loss_theta(FlowModel m, const ClassifierHead& head, const LabeledPoints& batch,
                         const ObjectiveConfig& obj, std::span<const double> theta) {
  unpack_theta(m, theta);
  return evaluate_hybrid(m, head, batch, obj, false).j_hybrid;
}

double hybrid_loss_phi(FlowModel m, const ClassifierHead& head, const LabeledPoints& batch, const ObjectiveConfig& obj,
                       std::span<const double> phi) {
  unpack_phi(m, phi);
  return evaluate_hybrid(m, head, batch, obj, false).j_hybrid;
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg) {
  require_same_size(params.size(), grads.size(), "adam_step: params/grads");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  require_same_size(params.size(), state.m.size(), "adam_step: optimizer state");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

}  // namespace svflow
