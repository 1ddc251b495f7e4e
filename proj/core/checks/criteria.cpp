#include "criteria.hpp"

#include "oracles.hpp"

#include "svflow/attention.hpp"
#include "svflow/distributions.hpp"
#include "svflow/experiments.hpp"
#include "svflow/flow.hpp"
#include "svflow/geometry.hpp"
#include "svflow/metrics.hpp"
#include "svflow/train.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

namespace svflow::checks {

namespace {

// Seed of the reference shuffle-probe run that criterion 11 is frozen on.
constexpr std::uint64_t kShuffleReferenceSeed = 0;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

SubCheck sub(std::string name, bool pass, std::string detail, bool known_red = false) {
  return {std::move(name), pass, std::move(detail), known_red};
}

Vec random_unit(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec v(static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = g(rng);
  return v / v.norm();
}

FlowModel random_model(Family fam, PosteriorMode mode, std::size_t d, std::size_t Z, std::size_t L,
                       std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  FlowModel m(fam, d, Z, L, 0.1, mode);
  const auto dd = static_cast<Eigen::Index>(d);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t z = 0; z < Z; ++z) {
      if (fam == Family::gaussian) {
        Vec mean(dd), ls(dd);
        for (Eigen::Index i = 0; i < dd; ++i) {
          mean[i] = 1.5 * g(rng);
          ls[i] = -1.0 + 1.5 * u(rng);
        }
        m.set_gaussian(l, z, {mean, ls});
      } else {
        m.set_vmf(l, z, {random_unit(d, rng), 20.0 * u(rng)});
      }
    }
    if (mode == PosteriorMode::untied) {
      Mat W(static_cast<Eigen::Index>(Z), dd);
      Vec b(static_cast<Eigen::Index>(Z));
      for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = g(rng);
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = g(rng);
      m.set_posterior_logits(l, W, b);
    }
  }
  return m;
}

Vec random_point(const FlowModel& m, std::mt19937_64& rng) {
  if (m.family() == Family::vmf) return random_unit(m.dim(), rng);
  std::normal_distribution<double> g(0.0, 1.5);
  Vec x(static_cast<Eigen::Index>(m.dim()));
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = g(rng);
  return x;
}

// ---------------------------------------------------------------------------

CriterionResult c1_elbo_bound() {
  CriterionResult r;
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> coin(0, 1);
  double worst_bound = -kInf, worst_tied = 0.0, worst_oracle = 0.0;
  std::size_t draws = 0;
  for (Family fam : {Family::gaussian, Family::vmf}) {
    for (int i = 0; i < 600; ++i) {
      const PosteriorMode mode = coin(rng) ? PosteriorMode::tied : PosteriorMode::untied;
      const std::size_t d = fam == Family::gaussian ? 2 + rng() % 5 : 3 + rng() % 6;
      const std::size_t Z = 2 + rng() % 7, L = 1 + rng() % 5;
      const FlowModel m = random_model(fam, mode, d, Z, L, rng);
      const std::size_t step = rng() % L;
      const Vec x = random_point(m, rng);
      const double e = elbo(m, step, x);
      const double lm = marginal_log_density(m, step, x);
      worst_bound = std::max(worst_bound, e - lm);
      if (mode == PosteriorMode::tied) worst_tied = std::max(worst_tied, std::abs(e - lm));
      if (i % 20 == 0) {
        const double ref = oracles::marginal_log_density(m, step, x);
        worst_oracle = std::max(worst_oracle, std::abs(lm - ref) / std::max(1.0, std::abs(ref)));
      }
      ++draws;
    }
  }
  r.checks.push_back(sub("elbo ≤ log p + 1e-9 over " + std::to_string(draws) + " draws", worst_bound <= 1e-9,
                         "max(elbo − log p) = " + fmt(worst_bound)));
  r.checks.push_back(sub("tied gap ≤ 1e-9", worst_tied <= 1e-9, "max |gap| = " + fmt(worst_tied)));
  r.checks.push_back(
      sub("log p matches long-double oracle", worst_oracle <= 1e-10, "max rel. diff = " + fmt(worst_oracle)));
  return r;
}

CriterionResult c2_grad_decomposition() {
  CriterionResult r;
  std::mt19937_64 rng(202);
  double worst = 0.0;
  const int instances = 24;
  for (int i = 0; i < instances; ++i) {
    const std::size_t Z = 2 + rng() % 7;
    const FlowModel m = random_model(Family::gaussian, PosteriorMode::untied, 2, Z, 1, rng);
    const Vec x = random_point(m, rng);
    const Vec g = oracles::central_gradient([&](const Vec& y) { return elbo(m, 0, y); }, x);
    const Vec rhs = vector_field(m, 0, x) + variational_error(m, 0, x);
    worst = std::max(worst, (g - rhs).norm() / std::max(g.norm(), 1e-300));
  }
  r.checks.push_back(sub("‖∇L − v − ε‖/‖∇L‖ ≤ 1e-5 on " + std::to_string(instances) + " mixtures", worst <= 1e-5,
                         "max = " + fmt(worst)));
  return r;
}

CriterionResult c3_training_gradients() {
  CriterionResult r;
  std::mt19937_64 rng(303);
  std::normal_distribution<double> g(0.0, 1.0);
  for (double beta : {0.0, 0.1, 0.5}) {
    double worst_theta = 0.0, worst_phi = 0.0;
    for (int i = 0; i < 4; ++i) {
      const PosteriorMode mode = i % 2 ? PosteriorMode::tied : PosteriorMode::untied;
      const std::size_t Z = 2 + rng() % 7, L = 1 + rng() % 10;
      const FlowModel m = random_model(Family::gaussian, mode, 2, Z, L, rng);
      ClassifierHead head(2, 2);
      for (Eigen::Index k = 0; k < head.W.size(); ++k) head.W.data()[k] = g(rng);
      for (Eigen::Index k = 0; k < head.bias.size(); ++k) head.bias[k] = g(rng);
      LabeledPoints batch;
      for (int b = 0; b < 5; ++b) {
        batch.points.push_back(random_point(m, rng));
        batch.labels.push_back(static_cast<int>(rng() % 2));
      }
      const ObjectiveConfig obj = ObjectiveConfig::hybrid(beta);
      const ErrorSignals sig = backward_signals(m, head, batch, obj);
      const std::vector<double> th = pack_theta(m);
      const auto fd_t = oracles::central_gradient(
          [&](const std::vector<double>& p) { return hybrid_loss_theta(m, head, batch, obj, p); }, th);
      worst_theta = std::max(worst_theta, oracles::relative_error(grad_theta(m, sig, obj), fd_t));
      if (mode == PosteriorMode::untied) {
        const std::vector<double> ph = pack_phi(m);
        const auto fd_p = oracles::central_gradient(
            [&](const std::vector<double>& p) { return hybrid_loss_phi(m, head, batch, obj, p); }, ph);
        worst_phi = std::max(worst_phi, oracles::relative_error(grad_phi(m, sig, obj), fd_p));
      }
    }
    r.checks.push_back(sub("β=" + fmt(beta) + " grad_theta vs FD ≤ 1e-5", worst_theta <= 1e-5,
                           "max rel. err = " + fmt(worst_theta)));
    r.checks.push_back(sub("β=" + fmt(beta) + " grad_phi vs FD ≤ 1e-5", worst_phi <= 1e-5,
                           "max rel. err = " + fmt(worst_phi)));
  }
  return r;
}

CriterionResult c4_retraction_order() {
  CriterionResult r;
  std::mt19937_64 rng(404);
  double lo = kInf, hi = -kInf;
  for (std::size_t d : {3, 16, 64}) {
    for (int i = 0; i < 10; ++i) {
      const Vec x = random_unit(d, rng);
      const Vec dir = random_unit(d, rng);
      std::vector<double> ns, res;
      for (int k = 0; k <= 8; ++k) {
        const double n = std::pow(10.0, -1.0 - 0.5 * k);  // 1e-1 … 1e-5
        ns.push_back(n);
        res.push_back(geometry::relaxed_retraction_residual(x, n * dir));
      }
      const double s = log_log_slope(ns, res);
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
  }
  r.checks.push_back(sub("log-log slope over 4 decades ∈ [1.9, 2.1]", lo >= 1.9 && hi <= 2.1,
                         "slopes in [" + fmt(lo) + ", " + fmt(hi) + "]"));
  return r;
}

CriterionResult c5_mha_equivalence() {
  CriterionResult r;
  std::mt19937_64 rng(505);
  std::normal_distribution<double> g(0.0, 1.0);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const std::size_t H = 1 + rng() % 8, d = 2 + rng() % 31;
    const auto dd = static_cast<Eigen::Index>(d);
    MhaLayer layer;
    for (std::size_t h = 0; h < H; ++h) {
      AttentionHead head{Mat(dd, dd), Mat(dd, dd)};
      for (Eigen::Index k = 0; k < head.QK.size(); ++k) {
        head.QK.data()[k] = 2.0 * g(rng) / std::sqrt(static_cast<double>(d));
        head.OV.data()[k] = g(rng) / std::sqrt(static_cast<double>(d));
      }
      layer.heads.push_back(head);
    }
    std::vector<Vec> keys, values;
    for (int k = 0; k < 64; ++k) {
      keys.push_back(random_unit(d, rng));
      values.push_back(random_unit(d, rng));
    }
    const Vec xq = random_unit(d, rng);
    const Vec a = mha_forward(layer, xq, keys, values, MhaForm::literal);
    const Vec b = mha_forward(layer, xq, keys, values, MhaForm::svflow);
    worst = std::max(worst, (a - b).cwiseAbs().maxCoeff());
  }
  r.checks.push_back(sub("literal vs svflow ≤ 1e-12 on 100 configurations", worst <= 1e-12, "max |Δ| = " + fmt(worst)));
  return r;
}

CriterionResult c6_toy2d() {
  CriterionResult r;
  ExperimentConfig cfg = default_config(Experiment::toy2d);
  const Toy2dResult res = run_toy2d(cfg);
  const Toy2dCell *b0 = nullptr, *b01 = nullptr, *b05 = nullptr, *var = nullptr;
  for (const auto& c : res.cells) {
    if (c.var_only) var = &c;
    else if (c.beta == 0.0) b0 = &c;
    else if (c.beta == 0.1) b01 = &c;
    else if (c.beta == 0.5) b05 = &c;
  }
  if (!b0 || !b01 || !b05 || !var) throw PreconditionError("criterion 6: missing a toy2d cell");
  r.checks.push_back(sub("J_var-only max component usage ≥ 0.99", var->max_usage >= 0.99,
                         "max usage = " + fmt(var->max_usage), true));
  r.checks.push_back(sub("β=0 moons accuracy ≥ 0.95", b0->accuracy >= 0.95, "accuracy = " + fmt(b0->accuracy)));
  r.checks.push_back(sub("KL(q‖p) ordered β=0 > 0.1 > 0.5", b0->mean_kl > b01->mean_kl && b01->mean_kl > b05->mean_kl,
                         fmt(b0->mean_kl) + " > " + fmt(b01->mean_kl) + " > " + fmt(b05->mean_kl)));
  r.checks.push_back(sub("runtime < 600 s", res.seconds < 600.0,
                         fmt(res.seconds) + " s on " + std::to_string(resolve_threads(0)) + " worker(s)", true));
  return r;
}

CriterionResult c7_balancing_loss() {
  CriterionResult r;
  std::mt19937_64 rng(707);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  // With hard routings f = P, so the loss is Σ f_z² and Cauchy–Schwarz gives
  // the 1/E floor. Soft routings can dip below it; only the ceiling holds there.
  double hard_lo = kInf, hard_hi = -kInf, soft_hi = -kInf;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t E = 2 + rng() % 15, B = 1 + rng() % 64;
    const double scale = std::pow(10.0, u(rng));
    std::vector<ProbVector> soft, hard;
    for (std::size_t b = 0; b < B; ++b) {
      Vec logits(static_cast<Eigen::Index>(E));
      for (Eigen::Index k = 0; k < logits.size(); ++k) logits[k] = scale * g(rng);
      soft.push_back(softmax(logits));
      hard.push_back(ProbVector::one_hot(E, rng() % E));
    }
    const double floor = 1.0 / static_cast<double>(E);
    const double lh = load_balance_loss(hard);
    hard_lo = std::min(hard_lo, lh - floor);
    hard_hi = std::max(hard_hi, lh - 1.0);
    soft_hi = std::max(soft_hi, load_balance_loss(soft) - 1.0);
  }
  r.checks.push_back(sub("1/E ≤ loss ≤ 1 on 10³ random hard-routing batches", hard_lo >= -1e-15 && hard_hi <= 1e-15,
                         "min(loss − 1/E) = " + fmt(hard_lo) + ", max(loss − 1) = " + fmt(hard_hi)));
  r.checks.push_back(sub("loss ≤ 1 on 10³ random soft-routing batches", soft_hi <= 1e-15,
                         "max(loss − 1) = " + fmt(soft_hi)));

  double worst_bal = 0.0;
  bool collapse_exact = true;
  for (std::size_t E = 1; E <= 16; ++E) {
    for (std::size_t k = 1; k <= 4; ++k) {
      std::vector<ProbVector> balanced, collapsed;
      for (std::size_t i = 0; i < k * E; ++i) {
        balanced.push_back(ProbVector::one_hot(E, i % E));
        collapsed.push_back(ProbVector::one_hot(E, (k - 1) % E));
      }
      worst_bal = std::max(worst_bal, std::abs(load_balance_loss(balanced) - 1.0 / static_cast<double>(E)));
      collapse_exact = collapse_exact && load_balance_loss(collapsed) == 1.0;
    }
  }
  r.checks.push_back(sub("balanced hard routing gives 1/E", worst_bal <= 1e-15, "max |loss − 1/E| = " + fmt(worst_bal)));
  r.checks.push_back(sub("full collapse gives exactly 1", collapse_exact, collapse_exact ? "exact" : "mismatch"));
  return r;
}

CriterionResult c8_kernel_limit() {
  CriterionResult r;
  double lo = kInf, hi = -kInf;
  bool conv = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ExperimentConfig cfg = default_config(Experiment::kernel);
    cfg.seed = seed;
    const KernelResult k = run_kernel_limit(cfg);
    lo = std::min(lo, k.slope);
    hi = std::max(hi, k.slope);
    conv = conv && k.quadrature_converged;
  }
  r.checks.push_back(sub("error slope vs N within −0.5 ± 0.15 for 5 seeds", lo >= -0.65 && hi <= -0.35,
                         "slopes in [" + fmt(lo) + ", " + fmt(hi) + "]"));
  r.checks.push_back(sub("reference quadrature converged", conv, conv ? "n vs 2n within 1e-10" : "not converged"));
  return r;
}

ProbVector near_uniform(std::size_t Z, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Vec logits(static_cast<Eigen::Index>(Z));
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits[i] = g(rng);
  // Shrink until the distribution is within 1e-3 of uniform.
  for (double s = 0.2;; s *= 0.7) {
    const ProbVector p = softmax(s * logits);
    if (kl_to_uniform(p) <= 1e-3 && p.values().minCoeff() >= 0.5 / static_cast<double>(Z)) return p;
  }
}

ProbVector one_hot_like(std::size_t Z, std::size_t at, double leak) {
  Vec v = Vec::Constant(static_cast<Eigen::Index>(Z), leak / static_cast<double>(Z - 1));
  v[static_cast<Eigen::Index>(at)] = 1.0 - leak;
  return ProbVector(v);
}

CriterionResult c9_dichotomy() {
  CriterionResult r;
  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_uniform = 0.0, worst_disjoint = kInf;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t Z = 2 + rng() % 63;
    worst_uniform = std::max(worst_uniform, categorical_kl(near_uniform(Z, rng), near_uniform(Z, rng)));
    const std::size_t a = rng() % Z, b = (a + 1 + rng() % (Z - 1)) % Z;
    const double leak = std::pow(10.0, -5.0 - 7.0 * u(rng));
    worst_disjoint = std::min(worst_disjoint, categorical_kl(one_hot_like(Z, a, leak), one_hot_like(Z, b, leak)));
  }
  r.checks.push_back(sub("near-uniform pairs: KL(q‖p) ≤ 0.1", worst_uniform <= 0.1, "max = " + fmt(worst_uniform)));
  r.checks.push_back(
      sub("concentrated disjoint pairs: KL(q‖p) > 10", worst_disjoint > 10.0, "min = " + fmt(worst_disjoint)));
  return r;
}

CriterionResult c10_bessel() {
  CriterionResult r;
  for (std::size_t d : {3, 64}) {
    double worst = 0.0;
    bool finite = true;
    const double nu = 0.5 * static_cast<double>(d) - 1.0;
    std::vector<double> ks;
    for (int k = 0; k <= 32; ++k) ks.push_back(std::pow(10.0, -3.0 + 0.25 * k));  // 1e-3 … 1e5
    const double sw = bessel_switch_point(nu);
    for (double f : {0.999, 1.0, 1.001}) ks.push_back(f * sw);
    for (double k : ks) {
      const double v = vmf_log_normalizer(d, k);
      finite = finite && std::isfinite(v);
      const double ref = oracles::vmf_log_normalizer_series(d, k);
      worst = std::max(worst, std::abs(v - ref) / std::max(1.0, std::abs(ref)));
    }
    r.checks.push_back(sub("d=" + std::to_string(d) + ": finite and within 1e-6 of the series for κ ≤ 1e5",
                           finite && worst <= 1e-6, "max rel. err = " + fmt(worst)));
  }
  return r;
}

CriterionResult c11_shuffle() {
  CriterionResult r;
  ExperimentConfig cfg = default_config(Experiment::shuffle);
  cfg.seed = kShuffleReferenceSeed;
  const ShuffleResult s = run_shuffle_probe(cfg);
  std::string bins;
  for (double v : s.delta_log_ppl) bins += (bins.empty() ? "" : ", ") + fmt(v);
  r.checks.push_back(sub("Δ logPPL increasing across the four r-bins", s.monotone(), "[" + bins + "]"));
  r.checks.push_back(sub("deep-third |Δ(−log p)| ≥ shallow-third", s.deep_dominates(),
                         fmt(s.deep_abs_delta) + " vs " + fmt(s.shallow_abs_delta)));
  return r;
}

}  // namespace

bool CriterionResult::pass() const {
  for (const auto& c : checks) {
    if (!c.pass) return false;
  }
  return !checks.empty();
}

bool CriterionResult::acceptable() const {
  for (const auto& c : checks) {
    if (!c.pass && !c.known_red) return false;
  }
  return !checks.empty();
}

std::string CriterionResult::line() const {
  std::ostringstream os;
  os << (pass() ? "PASS" : "FAIL") << "  criterion " << std::setw(2) << id << "  " << title << "  ("
     << std::fixed << std::setprecision(1) << seconds << " s)";
  for (const auto& c : checks) {
    os << "\n        " << (c.pass ? "ok  " : (c.known_red ? "RED " : "FAIL")) << ' ' << c.name << ": " << c.detail;
    if (!c.pass && c.known_red) os << " [known red]";
  }
  return os.str();
}

const std::vector<CriterionInfo>& criteria() {
  static const std::vector<CriterionInfo> list = {
      {1, "ELBO bound", true},
      {2, "gradient decomposition", true},
      {3, "analytic training gradients", true},
      {4, "retraction order", true},
      {5, "MHA equivalence", true},
      {6, "toy 2D reproduction", false},
      {7, "balancing-loss bounds", true},
      {8, "kernel-smoothing limit", true},
      {9, "concentration-divergence dichotomy", true},
      {10, "Bessel stability", true},
      {11, "toy shuffle probe", true},
  };
  return list;
}

CriterionResult run_criterion(int id) {
  using Fn = CriterionResult (*)();
  static const Fn table[] = {c1_elbo_bound,       c2_grad_decomposition, c3_training_gradients, c4_retraction_order,
                             c5_mha_equivalence,  c6_toy2d,              c7_balancing_loss,     c8_kernel_limit,
                             c9_dichotomy,        c10_bessel,            c11_shuffle};
  if (id < 1 || id > 11) throw PreconditionError("criterion id must lie in 1..11");
  const auto t0 = std::chrono::steady_clock::now();
  CriterionResult r;
  try {
    r = table[id - 1]();
  } catch (const std::exception& e) {
    r.checks.push_back(sub("ran without error", false, e.what()));
  }
  r.id = id;
  r.title = criteria()[static_cast<std::size_t>(id - 1)].title;
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<SubCheck> run_invariants() {
  std::vector<SubCheck> out;
  std::mt19937_64 rng(1111);

  // Spherical steps keep states on the unit sphere.
  {
    double worst = 0.0;
    for (int i = 0; i < 50; ++i) {
      const FlowModel m = random_model(Family::vmf, PosteriorMode::untied, 3 + rng() % 10, 4, 6, rng);
      const Trajectory t = integrate(m, random_point(m, rng), StepMode::spherical);
      for (const Vec& x : t.states) worst = std::max(worst, std::abs(x.norm() - 1.0));
    }
    out.push_back(sub("spherical trajectories stay unit-norm", worst <= 1e-12, "max deviation = " + fmt(worst)));
  }
  // log marginal through the elbo + KL identity.
  {
    double worst = 0.0;
    for (int i = 0; i < 200; ++i) {
      const FlowModel m = random_model(i % 2 ? Family::vmf : Family::gaussian, PosteriorMode::untied,
                                       3 + rng() % 4, 2 + rng() % 7, 1, rng);
      const Vec x = random_point(m, rng);
      const double a = marginal_log_density(m, 0, x), b = marginal_log_density_via_elbo(m, 0, x);
      worst = std::max(worst, std::abs(a - b) / std::max(1.0, std::abs(a)));
    }
    out.push_back(sub("log p = elbo + KL(q‖p)", worst <= 1e-10, "max rel. diff = " + fmt(worst)));
  }
  // kl_to_uniform ≤ log|Z| with equality at one-hot.
  {
    bool ok = true;
    std::normal_distribution<double> g(0.0, 3.0);
    for (int i = 0; i < 500; ++i) {
      const std::size_t Z = 2 + rng() % 30;
      Vec logits(static_cast<Eigen::Index>(Z));
      for (Eigen::Index k = 0; k < logits.size(); ++k) logits[k] = g(rng);
      ok = ok && kl_to_uniform(softmax(logits)) <= std::log(static_cast<double>(Z)) + 1e-12;
      ok = ok && std::abs(kl_to_uniform(ProbVector::one_hot(Z, rng() % Z)) - std::log(static_cast<double>(Z))) <= 1e-12;
    }
    out.push_back(sub("kl_to_uniform ≤ log|Z|, equal at one-hot", ok, ok ? "holds" : "violated"));
  }
  // svflow_metrics: −log p routes agree (it throws otherwise).
  {
    bool ok = true;
    std::string what = "holds";
    std::normal_distribution<double> g(0.0, 2.0);
    try {
      for (int i = 0; i < 500; ++i) {
        const std::size_t Z = 2 + rng() % 30;
        Vec logits(static_cast<Eigen::Index>(Z)), lp(static_cast<Eigen::Index>(Z));
        for (Eigen::Index k = 0; k < logits.size(); ++k) {
          logits[k] = g(rng);
          lp[k] = 5.0 * g(rng);
        }
        svflow_metrics(softmax(logits), lp, 1 + rng() % 64);
      }
    } catch (const std::exception& e) {
      ok = false;
      what = e.what();
    }
    out.push_back(sub("svflow_metrics −log p routes agree ≤ 1e-9", ok, what));
  }
  // vMF normalizer decreases in κ for d ≥ 3.
  {
    bool ok = true;
    for (std::size_t d : {3, 8, 64}) {
      double prev = vmf_log_normalizer(d, 0.0);
      for (int k = 1; k <= 200; ++k) {
        const double v = vmf_log_normalizer(d, std::pow(10.0, -3.0 + 8.0 * k / 200.0));
        ok = ok && v < prev;
        prev = v;
      }
    }
    out.push_back(sub("vmf_log_normalizer decreasing in κ", ok, ok ? "holds on the grid" : "violated"));
  }
  return out;
}

}  // namespace svflow::checks
