#include "oracles.hpp"
#include "svflow/attention.hpp"
#include "svflow/geometry.hpp"

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

Mat randm(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<Vec> randvs(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::vector<Vec> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(randn(d, rng));
  return out;
}

AttentionHead random_head(std::size_t d, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  return {randm(d, d, rng, s), randm(d, d, rng, s)};
}

Expert random_expert(std::size_t d, std::size_t hidden, std::mt19937_64& rng) {
  return {randm(hidden, d, rng), randn(hidden, rng), randm(d, hidden, rng), randn(d, rng)};
}

ProbVector pv(std::initializer_list<double> xs) {
  Vec v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return ProbVector(v);
}

}  // namespace

TEST(MeanDirection, Decompose) {
  const auto md = mean_direction_decompose((Vec(3) << 0, 0, 3).finished());
  EXPECT_EQ(md.mu, (Vec(3) << 0, 0, 1).finished());
  EXPECT_EQ(md.kappa, 3.0);
}

TEST(MeanDirection, Recomposes) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const Vec w = randn(7, rng, 5.0);
    const auto md = mean_direction_decompose(w);
    EXPECT_LE((md.kappa * md.mu - w).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_NEAR(md.mu.norm(), 1.0, 1e-15);
  }
}

TEST(MeanDirection, ZeroVector) { EXPECT_EQ(mean_direction_decompose(Vec::Zero(4)).kappa, 0.0); }

TEST(AttentionPosterior, UniformCases) {
  std::mt19937_64 rng(2);
  const auto head = random_head(4, rng);
  const Vec xq = randn(4, rng);
  const Vec k = randn(4, rng);
  const auto same = attention_posterior(head, xq, {k, k, k});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(same[i], 1.0 / 3.0, 1e-15);
  const AttentionHead flat{Mat::Zero(4, 4), head.OV};
  const auto u = attention_posterior(flat, xq, randvs(5, 4, rng));
  for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(u[i], 0.2);
  EXPECT_DOUBLE_EQ(attention_posterior(head, xq, {k})[0], 1.0);
}

TEST(HeadField, SingleKeyValue) {
  std::mt19937_64 rng(3);
  const auto head = random_head(5, rng);
  const Vec v = randn(5, rng);
  EXPECT_LE((head_field(head, randn(5, rng), {randn(5, rng)}, {v}) - head.OV * v).norm(), 1e-14);
}

TEST(HeadField, ZeroValues) {
  std::mt19937_64 rng(4);
  const auto head = random_head(5, rng);
  const std::vector<Vec> zeros(4, Vec::Zero(5));
  EXPECT_EQ(head_field(head, randn(5, rng), randvs(4, 5, rng), zeros).norm(), 0.0);
}

TEST(HeadField, EqualsLiteralAttention) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 + rng() % 10, n = 1 + rng() % 12;
    const auto head = random_head(d, rng);
    const Vec xq = randn(d, rng);
    const auto ks = randvs(n, d, rng), vs = randvs(n, d, rng);
    EXPECT_LE((head_field(head, xq, ks, vs) - head_literal(head, xq, ks, vs)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Mha, SingleHeadFormsAgree) {
  std::mt19937_64 rng(6);
  MhaLayer layer{{random_head(6, rng)}, {}};
  const Vec xq = randn(6, rng);
  const auto ks = randvs(5, 6, rng), vs = randvs(5, 6, rng);
  EXPECT_LE((mha_forward(layer, xq, ks, vs, MhaForm::literal) - mha_forward(layer, xq, ks, vs, MhaForm::svflow))
                .cwiseAbs()
                .maxCoeff(),
            1e-14);
}

TEST(Mha, FourHeadsEightDimensions) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    MhaLayer layer;
    for (int h = 0; h < 4; ++h) layer.heads.push_back(random_head(8, rng));
    const Vec xq = randn(8, rng);
    const auto ks = randvs(10, 8, rng), vs = randvs(10, 8, rng);
    EXPECT_LE((mha_forward(layer, xq, ks, vs, MhaForm::literal) - mha_forward(layer, xq, ks, vs, MhaForm::svflow))
                  .cwiseAbs()
                  .maxCoeff(),
              1e-12);
  }
}

TEST(Mha, OneHotHeadWeightsSelectHead) {
  std::mt19937_64 rng(8);
  MhaLayer layer;
  for (int h = 0; h < 3; ++h) layer.heads.push_back(random_head(4, rng));
  layer.head_weights = Vec::Zero(3);
  layer.head_weights[1] = 1.0;
  const Vec xq = randn(4, rng);
  const auto ks = randvs(6, 4, rng), vs = randvs(6, 4, rng);
  const Vec expect = 3.0 * head_field(layer.heads[1], xq, ks, vs);
  EXPECT_LE((mha_forward(layer, xq, ks, vs, MhaForm::svflow) - expect).norm(), 1e-13);
}

TEST(Moe, SingleExpertIsPlainFeedForward) {
  std::mt19937_64 rng(9);
  MoeLayer layer;
  layer.experts = {random_expert(4, 6, rng)};
  layer.gate_W = randm(1, 4, rng);
  layer.gate_b = randn(1, rng);
  const Vec x = randn(4, rng);
  const auto out = moe_forward(layer, x);
  EXPECT_DOUBLE_EQ(out.routing[0], 1.0);
  EXPECT_LE((out.output - layer.experts[0](x)).norm(), 1e-15);
}

TEST(Moe, IdenticalExpertsIgnoreRouting) {
  std::mt19937_64 rng(10);
  const Expert e = random_expert(4, 6, rng);
  MoeLayer a, b;
  a.experts = b.experts = {e, e, e};
  a.gate_W = randm(3, 4, rng);
  b.gate_W = randm(3, 4, rng, 10.0);
  a.gate_b = randn(3, rng);
  b.gate_b = randn(3, rng);
  const Vec x = randn(4, rng);
  EXPECT_LE((moe_forward(a, x).output - moe_forward(b, x).output).norm(), 1e-13);
}

TEST(Moe, EmaCenteringDecaysConstantOutputs) {
  std::mt19937_64 rng(11);
  MoeLayer layer;
  for (int i = 0; i < 2; ++i) {
    Expert e{Mat::Zero(3, 4), Vec::Zero(3), Mat::Zero(4, 3), randn(4, rng)};  // constant output b2
    layer.experts.push_back(e);
  }
  layer.gate_W = randm(2, 4, rng);
  layer.gate_b = Vec::Zero(2);
  layer.ema_center = true;
  layer.ema_decay = 0.9;
  const Vec x = randn(4, rng);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 400; ++step) {
    const double n = moe_forward(layer, x).output.norm();
    if (step == 0) first = n;
    last = n;
    if (step == 10) {
      // Geometric decay: the centered output after k updates is 0.9^k of the first.
      EXPECT_NEAR(n, first * std::pow(0.9, 10), 1e-12 * first);
    }
  }
  EXPECT_GT(first, 0.0);
  EXPECT_LT(last, 1e-12 * first);
}

TEST(LoadBalance, CollapsedRoutingGivesOne) {
  EXPECT_DOUBLE_EQ(load_balance_loss({pv({1, 0, 0}), pv({1, 0, 0}), pv({1, 0, 0})}), 1.0);
}

TEST(LoadBalance, BalancedHardRoutingGivesInverseE) {
  for (std::size_t E : {2, 4, 8}) {
    std::vector<ProbVector> rs;
    for (std::size_t rep = 0; rep < 3; ++rep)
      for (std::size_t e = 0; e < E; ++e) rs.push_back(ProbVector::one_hot(E, e));
    EXPECT_NEAR(load_balance_loss(rs), 1.0 / static_cast<double>(E), 1e-15);
  }
}

TEST(LoadBalance, HardRoutingBounds) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t E = 2 + rng() % 7, n = 1 + rng() % 40;
    std::vector<ProbVector> rs;
    for (std::size_t i = 0; i < n; ++i) rs.push_back(ProbVector::one_hot(E, rng() % E));
    const double loss = load_balance_loss(rs);
    EXPECT_GE(loss, 1.0 / static_cast<double>(E) - 1e-15);
    EXPECT_LE(loss, 1.0 + 1e-15);
  }
}

TEST(LoadBalance, SoftRoutingUpperBound) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t E = 2 + rng() % 7, n = 1 + rng() % 40;
    std::vector<ProbVector> rs;
    for (std::size_t i = 0; i < n; ++i) rs.push_back(softmax(randn(E, rng, 3.0)));
    const double loss = load_balance_loss(rs);
    EXPECT_GE(loss, 0.0);
    EXPECT_LE(loss, 1.0 + 1e-15);
  }
}

TEST(LoadBalance, SoftRoutingCanDipBelowInverseE) {
  // The 1/E floor needs f = P. With soft routing the argmax fractions can sit
  // on the experts that carry the least mean probability.
  const double loss = load_balance_loss({pv({0.6, 0.4, 0.0}), pv({0.0, 0.4, 0.6})});
  EXPECT_NEAR(loss, 0.3, 1e-15);
  EXPECT_LT(loss, 1.0 / 3.0);
}

TEST(TransformerLayer, ZeroUpdate) {
  std::mt19937_64 rng(14);
  Vec x = randn(6, rng);
  x *= std::sqrt(6.0) / x.norm();
  EXPECT_LE((transformer_layer(x, [](const Vec& y) { return Vec(Vec::Zero(y.size())); }) - x).norm(), 1e-14);
}

TEST(TransformerLayer, StaysOnRadiusSqrtD) {
  std::mt19937_64 rng(15);
  const Mat A = randm(6, 6, rng);
  for (int i = 0; i < 50; ++i) {
    Vec x = randn(6, rng);
    x *= std::sqrt(6.0) / x.norm();
    EXPECT_NEAR(transformer_layer(x, [&](const Vec& y) { return Vec(A * y); }).norm(), std::sqrt(6.0), 1e-10);
  }
}

TEST(TransformerLayer, MatchesSphericalEulerStep) {
  std::mt19937_64 rng(16);
  const std::size_t d = 5;
  FlowModel m(Family::vmf, d, 3, 1, 0.3, PosteriorMode::untied);
  for (std::size_t z = 0; z < 3; ++z) {
    const Vec u = randn(d, rng);
    m.set_vmf(0, z, {u / u.norm(), 2.0 + z});
  }
  m.set_posterior_logits(0, randm(3, d, rng), randn(3, rng));
  const double sd = std::sqrt(static_cast<double>(d));
  for (int i = 0; i < 20; ++i) {
    Vec u = randn(d, rng);
    u /= u.norm();
    const Vec layer = transformer_layer(sd * u, [&](const Vec& x) {
      return Vec(sd * m.step_size() * vector_field(m, 0, x / sd));
    });
    EXPECT_LE((layer / sd - euler_step(m, 0, u, StepMode::spherical)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(KernelLimit, ConstantFunctionIsExact) {
  std::mt19937_64 rng(17);
  const AttentionHead head{randm(3, 3, rng), Mat::Identity(3, 3)};
  const auto sampler = vmf_key_sampler((Vec(3) << 0, 0, 1).finished(), 2.0);
  const auto r = kernel_limit_error(head, (Vec(3) << 1, 0, 0).finished(), sampler, [](const Vec&) { return 0.7; },
                                    64, 32, 8, 1);
  EXPECT_LE(r.error, 1e-12);
}

TEST(KernelLimit, MoreKeysMostlyReduceError) {
  std::mt19937_64 rng(18);
  const AttentionHead head{randm(3, 3, rng), Mat::Identity(3, 3)};
  const auto sampler = vmf_key_sampler((Vec(3) << 0, 0, 1).finished(), 2.0);
  const Vec xq = (Vec(3) << 1, 0, 0).finished();
  auto f = [](const Vec& k) { return k[0]; };
  const auto small = kernel_limit_error(head, xq, sampler, f, 64, 64, 64, 100);
  const auto large = kernel_limit_error(head, xq, sampler, f, 4096, 64, 64, 200);
  ASSERT_TRUE(small.quadrature_converged);
  std::size_t wins = 0;
  for (std::size_t s = 0; s < 64; ++s) wins += large.seed_errors[s] < small.seed_errors[s];
  EXPECT_GE(static_cast<double>(wins) / 64.0, 0.9);
}

TEST(KernelLimit, RejectsUnsupportedKeyDomain) {
  EXPECT_THROW(vmf_key_sampler(Vec::Ones(4), 1.0), PreconditionError);
}

namespace {

ToyTransformerShape small_shape(const std::string& layout) {
  ToyTransformerShape s;
  s.dim = 4;
  s.window = 3;
  s.num_classes = 3;
  s.num_heads = 2;
  s.layout = layout;
  s.num_slots = 3;
  s.init_scale = 0.5;
  return s;
}

}  // namespace

TEST(ToyTransformer, StatesStayOnSphere) {
  const auto model = make_toy_transformer(small_shape("ame"), 1);
  const auto corpus = make_sequence_task(3, 10, 4, 2, 1, 3);
  const auto tr = transformer_forward(model, corpus.sequences[0].embeddings, true);
  ASSERT_EQ(tr.states.size(), 4u);
  for (const auto& layer : tr.states)
    for (const auto& x : layer) EXPECT_NEAR(x.norm(), 2.0, 1e-10);
  for (const auto& p : tr.class_probs) EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(ToyTransformer, LossGradientMatchesFiniteDifferences) {
  for (const std::string layout : {"aa", "ame"}) {
    const auto model = make_toy_transformer(small_shape(layout), 3);
    const auto corpus = make_sequence_task(3, 6, 4, 4, 2, 3);
    std::vector<std::vector<Vec>> inputs;
    std::vector<std::vector<int>> targets;
    for (const auto& s : corpus.sequences) {
      inputs.push_back(s.embeddings);
      targets.push_back(s.targets);
    }
    const TransformerObjective obj{0.01};
    ToyTransformer grad = model;
    transformer_loss(model, inputs, targets, obj, &grad);
    const auto analytic = pack_transformer(grad);
    const auto params = pack_transformer(model);
    const auto fd = oracles::central_gradient(
        [&](const std::vector<double>& p) {
          ToyTransformer m = model;
          unpack_transformer(m, p);
          return transformer_loss(m, inputs, targets, obj).total;
        },
        params, 1e-6);
    EXPECT_LE(oracles::relative_error(analytic, fd), 1e-6) << layout;
  }
}

TEST(ToyTransformer, JsonRoundTrip) {
  const auto model = make_toy_transformer(small_shape("ame"), 5);
  const auto back = transformer_from_json(transformer_to_json(model));
  EXPECT_EQ(pack_transformer(back), pack_transformer(model));
  EXPECT_EQ(back.window, model.window);
}

TEST(ToyTransformer, TrainingIsDeterministic) {
  const auto corpus = make_sequence_task(3, 12, 4, 6, 16, 3);
  TransformerTrainConfig cfg;
  cfg.steps = 15;
  cfg.batch_sequences = 4;
  cfg.log_every = 5;
  for (auto opt : {TransformerOptimizer::adam, TransformerOptimizer::sgd}) {
    cfg.optimizer = opt;
    auto a = make_toy_transformer(small_shape("ae"), 7);
    auto b = a;
    const auto ha = train_transformer(a, corpus, cfg);
    const auto hb = train_transformer(b, corpus, cfg);
    EXPECT_EQ(pack_transformer(a), pack_transformer(b));
    ASSERT_EQ(ha.size(), hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) EXPECT_EQ(ha[i].task, hb[i].task);
  }
}

TEST(ToyTransformer, RejectsNonPositiveSgdRate) {
  const auto corpus = make_sequence_task(3, 12, 4, 6, 4, 3);
  auto m = make_toy_transformer(small_shape("a"), 1);
  TransformerTrainConfig cfg;
  cfg.optimizer = TransformerOptimizer::sgd;
  cfg.sgd_lr = 0.0;
  EXPECT_THROW(train_transformer(m, corpus, cfg), ConfigError);
}
