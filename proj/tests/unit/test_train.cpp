#include "oracles.hpp"
#include "svflow/data.hpp"
#include "svflow/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace svflow;

namespace {

Vec randn(std::size_t d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Vec v(static_cast<Eigen::Index>(d));
  for (auto& c : v) c = n(rng);
  return v;
}

FlowModel random_gaussian(std::size_t d, std::size_t Z, std::size_t L, PosteriorMode mode, std::mt19937_64& rng,
                          double h = 0.1) {
  FlowModel m(Family::gaussian, d, Z, L, h, mode);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t z = 0; z < Z; ++z) m.set_gaussian(l, z, {randn(d, rng), randn(d, rng, 0.3)});
    if (mode == PosteriorMode::untied) {
      Mat W(static_cast<Eigen::Index>(Z), static_cast<Eigen::Index>(d));
      for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = randn(1, rng)[0];
      m.set_posterior_logits(l, W, randn(Z, rng));
    }
  }
  return m;
}

FlowModel random_vmf(std::size_t d, std::size_t Z, std::size_t L, std::mt19937_64& rng) {
  FlowModel m(Family::vmf, d, Z, L, 0.1, PosteriorMode::untied);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t z = 0; z < Z; ++z) {
      const Vec u = randn(d, rng);
      m.set_vmf(l, z, {u / u.norm(), 0.5 + 2.0 * std::abs(randn(1, rng)[0])});
    }
    Mat W(static_cast<Eigen::Index>(Z), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = randn(1, rng)[0];
    m.set_posterior_logits(l, W, randn(Z, rng));
  }
  return m;
}

ClassifierHead random_head(std::size_t d, std::size_t C, std::mt19937_64& rng) {
  ClassifierHead head(d, C);
  for (Eigen::Index i = 0; i < head.W.size(); ++i) head.W.data()[i] = randn(1, rng)[0];
  head.bias = randn(C, rng, 0.5);
  return head;
}

LabeledPoints random_batch(std::size_t n, std::size_t d, std::size_t C, std::mt19937_64& rng, bool sphere = false) {
  LabeledPoints b;
  for (std::size_t i = 0; i < n; ++i) {
    Vec x = randn(d, rng);
    if (sphere) x /= x.norm();
    b.points.push_back(x);
    b.labels.push_back(static_cast<int>(rng() % C));
  }
  return b;
}

double rel(const std::vector<double>& a, const std::vector<double>& b) { return oracles::relative_error(a, b); }

// Direct KL(q‖p) along trajectories from the independent density oracle.
double j_var_oracle(const FlowModel& m, const std::vector<Trajectory>& ts) {
  double acc = 0.0;
  for (const auto& t : ts) {
    for (std::size_t l = 0; l < m.num_steps(); ++l) {
      const Vec lp = oracles::conditional_log_densities(m, l, t.states[l]);
      const Vec g = posterior_logits(m, l, t.states[l]);
      const Vec lq = g.array() - std::log((g.array() - g.maxCoeff()).exp().sum()) - g.maxCoeff();
      const Vec lpost = lp.array() - std::log((lp.array() - lp.maxCoeff()).exp().sum()) - lp.maxCoeff();
      for (Eigen::Index z = 0; z < g.size(); ++z) acc += std::exp(lq[z]) * (lq[z] - lpost[z]);
    }
  }
  return acc / static_cast<double>(ts.size() * m.num_steps());
}

}  // namespace

TEST(JVar, ZeroForTiedPosterior) {
  std::mt19937_64 rng(1);
  const auto m = random_gaussian(2, 4, 3, PosteriorMode::tied, rng);
  const auto b = random_batch(8, 2, 2, rng);
  EXPECT_EQ(j_var(m, integrate_batch(m, b, StepMode::euclidean)), 0.0);
}

TEST(JVar, ZeroForSingleComponent) {
  std::mt19937_64 rng(2);
  const auto m = random_gaussian(2, 1, 3, PosteriorMode::untied, rng);
  const auto b = random_batch(8, 2, 2, rng);
  EXPECT_EQ(j_var(m, integrate_batch(m, b, StepMode::euclidean)), 0.0);
}

TEST(JVar, MatchesEnumeration) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_gaussian(2, 5, 4, PosteriorMode::untied, rng);
    const auto ts = integrate_batch(m, random_batch(6, 2, 2, rng), StepMode::euclidean);
    EXPECT_NEAR(j_var(m, ts), j_var_oracle(m, ts), 1e-12);
  }
}

TEST(JAlign, ZeroHeadGivesLogClasses) {
  std::mt19937_64 rng(4);
  const auto m = random_gaussian(2, 3, 2, PosteriorMode::untied, rng);
  EXPECT_NEAR(j_align(m, ClassifierHead(2, 5), random_batch(10, 2, 5, rng)), std::log(5.0), 1e-14);
}

TEST(JAlign, LargeMarginSaturates) {
  FlowModel m(Family::gaussian, 1, 1, 1, 1e-9, PosteriorMode::tied);
  m.set_gaussian(0, 0, {Vec::Zero(1), Vec::Zero(1)});
  ClassifierHead head(1, 2);
  head.W(0, 0) = -100.0;
  head.W(0, 1) = 100.0;
  LabeledPoints b{{Vec::Constant(1, -1.0), Vec::Constant(1, 1.0)}, {0, 1}};
  EXPECT_LT(j_align(m, head, b), 1e-80);
}

TEST(JAlign, TwoClassLogitGap) {
  FlowModel m(Family::gaussian, 1, 1, 1, 1e-12, PosteriorMode::tied);
  m.set_gaussian(0, 0, {Vec::Zero(1), Vec::Zero(1)});
  for (double g : {-3.0, -0.5, 0.0, 1.0, 7.0}) {
    ClassifierHead head(1, 2);
    head.bias << 0.0, g;  // state is ~0, so the logit gap is the bias gap
    LabeledPoints b{{Vec::Zero(1)}, {1}};
    EXPECT_NEAR(j_align(m, head, b), std::log1p(std::exp(-g)), 1e-12) << "gap " << g;
  }
}

TEST(BackwardSignals, ZeroFieldAndHeadGiveZeroDeltas) {
  FlowModel m(Family::gaussian, 2, 2, 3, 0.1, PosteriorMode::tied);
  for (std::size_t l = 0; l < 3; ++l)
    for (std::size_t z = 0; z < 2; ++z) m.set_gaussian(l, z, {Vec::Zero(2), Vec::Zero(2)});
  LabeledPoints b{{Vec::Zero(2)}, {0}};
  const auto s = backward_signals(m, ClassifierHead(2, 2), b, ObjectiveConfig::hybrid(0.0));
  for (const auto& d : s.samples[0].delta) EXPECT_EQ(d.norm(), 0.0);
}

TEST(BackwardSignals, SingleStepChainRule) {
  std::mt19937_64 rng(5);
  const auto m = random_gaussian(2, 3, 1, PosteriorMode::untied, rng, 0.2);
  const auto head = random_head(2, 3, rng);
  const auto b = random_batch(1, 2, 3, rng);
  const auto s = backward_signals(m, head, b, ObjectiveConfig::hybrid(0.0));
  const Vec x0 = b.points[0];
  Mat J(2, 2);
  for (Eigen::Index j = 0; j < 2; ++j) {
    J.col(j) = oracles::central_gradient([&](const Vec& y) { return vector_field(m, 0, y)[j]; }, x0).transpose();
  }
  // J above holds ∂v_j/∂x as columns, i.e. (∂v/∂x)ᵀ.
  const Vec expect = (Mat::Identity(2, 2) + m.step_size() * J.transpose()).transpose() * s.samples[0].delta[1];
  EXPECT_LE((s.samples[0].delta[0] - expect).norm(), 1e-8 * std::max(1.0, expect.norm()));
}

TEST(BackwardSignals, DeltasMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto m = random_gaussian(2, 4, 5, PosteriorMode::untied, rng);
  const auto head = random_head(2, 2, rng);
  const auto b = random_batch(1, 2, 2, rng);
  const auto s = backward_signals(m, head, b, ObjectiveConfig::hybrid(0.0));
  const auto& states = s.samples[0].trajectory.states;
  for (std::size_t l = 0; l <= m.num_steps(); ++l) {
    auto tail_loss = [&](const Vec& x) {
      Vec y = x;
      for (std::size_t k = l; k < m.num_steps(); ++k) y = euler_step(m, k, y, StepMode::euclidean);
      return -log_softmax(head.logits(y))[b.labels[0]];
    };
    const Vec fd = oracles::central_gradient(tail_loss, states[l]);
    EXPECT_LE((s.samples[0].delta[l] - fd).norm() / fd.norm(), 1e-5) << "step " << l;
  }
}

TEST(Advantages, NoSelfTermWhenPosteriorIsExact) {
  std::mt19937_64 rng(7);
  const auto m = random_gaussian(2, 4, 3, PosteriorMode::tied, rng);
  const auto obj = ObjectiveConfig::hybrid(0.5);
  const auto s = backward_signals(m, random_head(2, 2, rng), random_batch(2, 2, 2, rng), obj);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_LE(advantages(m, s, obj, 1, l).R.cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Advantages, CenteringUnderUniformQ) {
  const Vec A = (Vec(3) << 1, 2, 3).finished();
  const Vec q = Vec::Constant(3, 1.0 / 3.0);
  const Vec c = centered(A, q);
  EXPECT_NEAR(c[0], -1.0, 1e-15);
  EXPECT_NEAR(c[1], 0.0, 1e-15);
  EXPECT_NEAR(c[2], 1.0, 1e-15);
  EXPECT_LE((centered((A.array() + 17.5).matrix(), q) - c).norm(), 1e-14);
}

TEST(Advantages, EtaIsCenteredAndMatchesFullGamma) {
  std::mt19937_64 rng(8);
  const auto m = random_gaussian(2, 4, 4, PosteriorMode::untied, rng);
  const auto head = random_head(2, 2, rng);
  const auto b = random_batch(3, 2, 2, rng);
  const auto obj = ObjectiveConfig::hybrid(0.3);
  const auto fast = backward_signals(m, head, b, obj, false);
  const auto full = backward_signals(m, head, b, obj, true);
  ASSERT_TRUE(full.has_gamma);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t l = 0; l < 4; ++l) {
      const auto a = advantages(m, fast, obj, n, l);
      const auto f = advantages(m, full, obj, n, l);
      EXPECT_LE((a.eta - f.eta).norm(), 1e-12);
      EXPECT_NEAR(a.q.dot(a.eta), 0.0, 1e-12);
      EXPECT_EQ(f.B.size(), 4 - l - 1);
    }
  }
}

TEST(GradPhi, ZeroWhenAdvantagesVanish) {
  std::mt19937_64 rng(9);
  const auto m = random_gaussian(2, 4, 3, PosteriorMode::untied, rng);
  const auto obj = ObjectiveConfig::hybrid(0.0);
  const auto s = backward_signals(m, ClassifierHead(2, 2), random_batch(4, 2, 2, rng), obj);
  for (double g : grad_phi(m, s, obj)) EXPECT_EQ(g, 0.0);
}

TEST(GradPhi, MatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t Z = 2 + rng() % 7, L = 1 + rng() % 10;
    const auto m = random_gaussian(2, Z, L, PosteriorMode::untied, rng, 0.05);
    const auto head = random_head(2, 2, rng);
    const auto b = random_batch(3, 2, 2, rng);
    const auto obj = ObjectiveConfig::hybrid(trial % 2 ? 0.5 : 0.1);
    const auto analytic = grad_phi(m, backward_signals(m, head, b, obj), obj);
    const auto fd = finite_diff_oracle(
        [&](std::span<const double> p) { return hybrid_loss_phi(m, head, b, obj, p); }, pack_phi(m));
    EXPECT_LE(rel(analytic, fd), 1e-5) << "Z " << Z << " L " << L;
  }
}

TEST(GradPhi, CollapsedPosteriorFreezesUpdates) {
  std::mt19937_64 rng(11);
  auto m = random_gaussian(2, 3, 2, PosteriorMode::untied, rng);
  for (std::size_t l = 0; l < 2; ++l) {
    Vec bias = Vec::Zero(3);
    bias[0] = 80.0;  // q is one-hot on component 0 to double precision
    m.set_posterior_logits(l, Mat::Zero(3, 2), bias);
  }
  const auto obj = ObjectiveConfig::hybrid(0.5);
  const auto g = grad_phi(m, backward_signals(m, random_head(2, 2, rng), random_batch(4, 2, 2, rng), obj), obj);
  for (double v : g) EXPECT_LE(std::abs(v), 1e-30);
}

TEST(GradTheta, MatchesFiniteDifferencesGaussian) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t Z = 1 + rng() % 8, L = 1 + rng() % 10;
    const auto mode = trial % 3 == 0 ? PosteriorMode::tied : PosteriorMode::untied;
    const auto m = random_gaussian(2, Z, L, mode, rng, 0.05);
    const auto head = random_head(2, 2, rng);
    const auto b = random_batch(3, 2, 2, rng);
    const auto obj = ObjectiveConfig::hybrid(0.25);
    const auto analytic = grad_theta(m, backward_signals(m, head, b, obj), obj);
    const auto fd = finite_diff_oracle(
        [&](std::span<const double> p) { return hybrid_loss_theta(m, head, b, obj, p); }, pack_theta(m));
    EXPECT_LE(rel(analytic, fd), 1e-5) << "Z " << Z << " L " << L;
  }
}

TEST(GradTheta, MatchesFiniteDifferencesSpherical) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 10; ++trial) {
    const auto m = random_vmf(3, 3, 4, rng);
    const auto head = random_head(3, 3, rng);
    const auto b = random_batch(3, 3, 3, rng, true);
    const auto obj = ObjectiveConfig::hybrid(0.1, StepMode::spherical);
    const auto analytic = grad_theta(m, backward_signals(m, head, b, obj), obj);
    const auto fd = finite_diff_oracle(
        [&](std::span<const double> p) { return hybrid_loss_theta(m, head, b, obj, p); }, pack_theta(m));
    EXPECT_LE(rel(analytic, fd), 1e-5);
  }
}

TEST(GradTheta, ConsistencyTermVanishesWhenTied) {
  std::mt19937_64 rng(14);
  const auto m = random_gaussian(2, 4, 3, PosteriorMode::tied, rng);
  const auto head = random_head(2, 2, rng);
  const auto b = random_batch(4, 2, 2, rng);
  const auto o0 = ObjectiveConfig::hybrid(0.0), o1 = ObjectiveConfig::hybrid(0.5);
  const auto g0 = grad_theta(m, backward_signals(m, head, b, o0), o0);
  const auto g1 = grad_theta(m, backward_signals(m, head, b, o1), o1);
  EXPECT_LE(rel(g1, g0), 1e-12);
}

TEST(GradTheta, EvaluateHybridAgrees) {
  std::mt19937_64 rng(15);
  const auto m = random_gaussian(2, 5, 6, PosteriorMode::untied, rng);
  const auto head = random_head(2, 2, rng);
  const auto b = random_batch(16, 2, 2, rng);
  const auto obj = ObjectiveConfig::hybrid(0.1);
  const auto s = backward_signals(m, head, b, obj);
  for (unsigned threads : {1u, 3u}) {
    const auto e = evaluate_hybrid(m, head, b, obj, true, threads);
    ASSERT_TRUE(e.grads.has_value());
    EXPECT_LE(rel(e.grads->theta, grad_theta(m, s, obj)), 1e-12);
    EXPECT_LE(rel(e.grads->phi, grad_phi(m, s, obj)), 1e-12);
    EXPECT_NEAR(e.j_align, j_align(m, head, b), 1e-12);
  }
}

TEST(FiniteDiffOracle, QuadraticAndLinear) {
  const std::vector<double> p = {0.3, -1.2, 2.5, 0.0};
  const auto g = finite_diff_oracle(
      [](std::span<const double> x) {
        double s = 0;
        for (double v : x) s += 0.5 * v * v;
        return s;
      },
      p);
  EXPECT_LE(rel(g, p), 1e-8);
  const std::vector<double> c = {1.0, -2.0, 0.5, 3.0};
  const auto gl = finite_diff_oracle(
      [&](std::span<const double> x) {
        double s = 0;
        for (std::size_t i = 0; i < x.size(); ++i) s += c[i] * x[i];
        return s;
      },
      p, 1e-3);
  EXPECT_LE(rel(gl, c), 1e-12);  // exact up to rounding
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> p = {1.0, -2.0}, g = {0.0, 0.0};
  AdamState st;
  adam_step(p, g, st, {});
  EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, FirstStepIsSignedLearningRate) {
  std::vector<double> p = {0.0, 0.0, 0.0}, g = {3.0, -0.01, 250.0};
  AdamState st;
  const AdamConfig cfg{0.05, 0.9, 0.999, 1e-8};
  adam_step(p, g, st, cfg);
  EXPECT_NEAR(p[0], -0.05, 1e-8);
  EXPECT_NEAR(p[1], 0.05, 1e-6);
  EXPECT_NEAR(p[2], -0.05, 1e-8);
}

TEST(Adam, Deterministic) {
  std::mt19937_64 rng(16);
  std::vector<double> p(20), g(20);
  for (auto& v : p) v = randn(1, rng)[0];
  auto p2 = p;
  AdamState s1, s2;
  for (int it = 0; it < 5; ++it) {
    for (auto& v : g) v = randn(1, rng)[0];
    adam_step(p, g, s1, {});
    adam_step(p2, g, s2, {});
  }
  EXPECT_EQ(p, p2);
}

TEST(TrainRun, SameSeedSameHistory) {
  TrainConfig cfg;
  cfg.num_components = 3;
  cfg.num_steps = 5;
  cfg.step_size = 0.05;
  cfg.batch_size = 32;
  cfg.train_steps = 20;
  cfg.log_every = 5;
  cfg.seed = 42;
  cfg.objective = ObjectiveConfig::hybrid(0.1);
  const auto data = make_moons(128, 0.06, 1);
  const auto a = train_run(cfg, data);
  const auto b = train_run(cfg, data);
  ASSERT_EQ(a.history.size(), b.history.size());
  EXPECT_EQ(history_to_csv(a.history), history_to_csv(b.history));
  EXPECT_EQ(a.model.theta_data(), b.model.theta_data());
  cfg.seed = 43;
  EXPECT_NE(history_to_csv(train_run(cfg, data).history), history_to_csv(a.history));
}

TEST(TrainRun, ObserverSeesEveryStep) {
  TrainConfig cfg;
  cfg.num_components = 2;
  cfg.num_steps = 2;
  cfg.batch_size = 8;
  cfg.train_steps = 7;
  cfg.log_every = 7;
  std::vector<std::size_t> seen;
  train_run(cfg, make_moons(32, 0.06, 2), [&](std::size_t step, const TrainResult&) { seen.push_back(step); });
  ASSERT_EQ(seen.size(), 8u);
  for (std::size_t i = 0; i < seen.size(); ++i) EXPECT_EQ(seen[i], i);
}

TEST(TrainRun, LearnsMoonsWithAlignmentObjective) {
  TrainConfig cfg;
  cfg.num_steps = 20;
  cfg.step_size = 0.05;
  cfg.batch_size = 128;
  cfg.train_steps = 600;
  cfg.log_every = 600;
  cfg.objective = ObjectiveConfig::hybrid(0.0);
  const auto data = make_moons(512, 0.06, 3);
  const auto r = train_run(cfg, data);
  const auto e = evaluate_hybrid(r.model, r.head, data, cfg.objective, false);
  EXPECT_GE(e.accuracy, 0.95);
}

TEST(Objective, RejectsBadLambda) {
  ObjectiveConfig o = ObjectiveConfig::hybrid(0.1);
  o.lambda_weights = {1.0, 1.0};
  EXPECT_THROW(o.validate(3), Error);
  EXPECT_THROW(ObjectiveConfig::hybrid(-1.0).validate(3), Error);
}
