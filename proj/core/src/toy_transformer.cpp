#include "svflow/attention.hpp"

#include "svflow/distributions.hpp"

#include "json.hpp"

#include <cmath>
#include <random>

namespace svflow {

using json = nlohmann::json;

std::size_t TransformerLayer::routing_size() const {
  if (kind == Kind::moe) return moe.num_experts();
  return static_cast<std::size_t>(memory.rows());
}

void ToyTransformer::validate() const {
  if (dim == 0) throw PreconditionError("ToyTransformer: dim must be ≥ 1");
  const auto d = static_cast<Eigen::Index>(dim);
  for (const auto& l : layers) {
    if (l.kind == TransformerLayer::Kind::attention) {
      l.mha.validate();
      require_same_size(l.mha.heads.front().dim(), dim, "ToyTransformer: attention dimension");
      if (l.memory.rows() > 0 && l.memory.cols() != d) throw DimensionError("ToyTransformer: memory width");
    } else {
      l.moe.validate();
      require_same_size(l.moe.dim(), dim, "ToyTransformer: moe dimension");
    }
  }
  if (head_W.cols() != d || head_W.rows() == 0 || head_b.size() != head_W.rows()) {
    throw DimensionError("ToyTransformer: classifier head shape");
  }
}

ToyTransformer make_toy_transformer(const ToyTransformerShape& shape, std::uint64_t seed) {
  if (shape.dim < 2 || shape.num_classes < 2 || shape.num_heads < 1 || shape.num_slots < 1) {
    throw ConfigError("toy transformer: need dim ≥ 2, ≥ 2 classes, ≥ 1 head and ≥ 1 slot");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  const auto d = static_cast<Eigen::Index>(shape.dim);
  auto randn = [&](Eigen::Index r, Eigen::Index c, double s) {
    Mat m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * g(rng);
    return m;
  };
  const double s = shape.init_scale;

  ToyTransformer t;
  t.dim = shape.dim;
  t.window = shape.window;
  for (char c : shape.layout) {
    TransformerLayer l;
    if (c == 'a' || c == 'm') {
      const std::size_t H = c == 'm' ? 1 : shape.num_heads;
      for (std::size_t h = 0; h < H; ++h) l.mha.heads.push_back({randn(d, d, s), randn(d, d, s)});
      if (c == 'm') l.memory = randn(static_cast<Eigen::Index>(shape.num_slots), d, 1.0 / std::sqrt(double(d)));
    } else if (c == 'e') {
      l.kind = TransformerLayer::Kind::moe;
      const Eigen::Index hidden = 2 * d;
      for (std::size_t i = 0; i < shape.num_slots; ++i) {
        l.moe.experts.push_back({randn(hidden, d, 1.0), Vec::Zero(hidden), randn(d, hidden, s / std::sqrt(2.0)),
                                 Vec::Zero(d)});
      }
      l.moe.gate_W = randn(static_cast<Eigen::Index>(shape.num_slots), d, s);
      l.moe.gate_b = Vec::Zero(static_cast<Eigen::Index>(shape.num_slots));
    } else {
      throw ConfigError(std::string("toy transformer: unknown layer code '") + c + "'");
    }
    t.layers.push_back(std::move(l));
  }
  t.head_W = randn(static_cast<Eigen::Index>(shape.num_classes), d, 0.1);
  t.head_b = Vec::Zero(static_cast<Eigen::Index>(shape.num_classes));
  t.validate();
  return t;
}

namespace {

std::size_t window_start(std::size_t n, std::size_t w) { return n > w ? n - w : 0; }

// Everything the backward pass needs from one sequence.
struct LayerCache {
  Mat U;                             // N × d unit input directions
  std::vector<double> ynorm;         // ‖x + f‖ per position
  std::vector<std::vector<Vec>> a;   // attention weights [head][position]
  std::vector<Vec> gate;             // moe routing per position
  std::vector<std::vector<Vec>> hid; // moe hidden activations [position][expert]
  std::vector<std::vector<Vec>> eout;// centered expert outputs [position][expert]
};

struct SeqCache {
  std::vector<Mat> X;  // [layer + 1], N × d, rows on the √d sphere
  std::vector<LayerCache> layers;
  Mat probs;           // N × C
};

void forward_seq(const ToyTransformer& m, const std::vector<Vec>& emb, SeqCache& c, LayerTrace* traces) {
  const std::size_t N = emb.size();
  const auto d = static_cast<Eigen::Index>(m.dim);
  const double sd = std::sqrt(static_cast<double>(m.dim));
  c.X.assign(m.layers.size() + 1, Mat());
  c.layers.assign(m.layers.size(), LayerCache{});
  c.X[0].resize(static_cast<Eigen::Index>(N), d);
  for (std::size_t n = 0; n < N; ++n) {
    require_same_size(static_cast<std::size_t>(emb[n].size()), m.dim, "transformer: embedding size");
    c.X[0].row(static_cast<Eigen::Index>(n)) = (sd / emb[n].norm()) * emb[n].transpose();
  }

  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const TransformerLayer& L = m.layers[li];
    LayerCache& lc = c.layers[li];
    const Mat& X = c.X[li];
    lc.U = X / sd;
    Mat F = Mat::Zero(static_cast<Eigen::Index>(N), d);
    LayerTrace* tr = traces ? &traces[li] : nullptr;

    if (L.kind == TransformerLayer::Kind::attention) {
      const std::size_t H = L.mha.heads.size();
      lc.a.assign(H, std::vector<Vec>(N));
      if (tr && !L.uses_memory()) {
        tr->q.assign(H, std::vector<Vec>(N));
        tr->logp.assign(H, std::vector<Vec>(N));
      }
      for (std::size_t h = 0; h < H; ++h) {
        const AttentionHead& hd = L.mha.heads[h];
        // Keys as rows: either the context directions or the memory.
        const Mat& K = L.uses_memory() ? L.memory : lc.U;
        const Mat KQ = K * hd.QK.transpose();  // row j: (QK k_j)ᵀ
        const Mat KV = K * hd.OV.transpose();  // row j: (OV k_j)ᵀ
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t lo = L.uses_memory() ? 0 : window_start(n, m.window);
          const std::size_t hi = L.uses_memory() ? static_cast<std::size_t>(K.rows()) : n + 1;
          const auto cnt = static_cast<Eigen::Index>(hi - lo);
          const auto lo_i = static_cast<Eigen::Index>(lo);
          const Vec logits = KQ.middleRows(lo_i, cnt) * lc.U.row(static_cast<Eigen::Index>(n)).transpose();
          Vec a = softmax(logits).values();
          F.row(static_cast<Eigen::Index>(n)) += a.transpose() * KV.middleRows(lo_i, cnt);
          if (tr && !L.uses_memory()) {
            Vec lp(cnt);
            for (Eigen::Index j = 0; j < cnt; ++j) {
              const double kappa = KQ.row(lo_i + j).norm();
              lp[j] = vmf_log_normalizer(m.dim, kappa) + logits[j];
            }
            tr->q[h][n] = a;
            tr->logp[h][n] = std::move(lp);
          }
          if (tr && L.uses_memory() && h == 0) {
            tr->routing.resize(N);
            tr->routing[n] = a;
          }
          lc.a[h][n] = std::move(a);
        }
      }
    } else {
      const MoeLayer& moe = L.moe;
      const std::size_t E = moe.num_experts();
      lc.gate.resize(N);
      lc.hid.assign(N, std::vector<Vec>(E));
      lc.eout.assign(N, std::vector<Vec>(E));
      if (tr) tr->routing.resize(N);
      for (std::size_t n = 0; n < N; ++n) {
        const Vec u = lc.U.row(static_cast<Eigen::Index>(n)).transpose();
        Vec gate = softmax(moe.gate_W * u + moe.gate_b).values();
        Vec f = Vec::Zero(d);
        for (std::size_t i = 0; i < E; ++i) {
          const Expert& e = moe.experts[i];
          Vec h = (e.W1 * u + e.b1).array().tanh().matrix();
          Vec o = e.W2 * h + e.b2;
          if (moe.ema_center && !moe.ema_mean.empty()) o -= moe.ema_mean[i];
          f += gate[static_cast<Eigen::Index>(i)] * o;
          lc.hid[n][i] = std::move(h);
          lc.eout[n][i] = std::move(o);
        }
        F.row(static_cast<Eigen::Index>(n)) = f.transpose();
        if (tr) tr->routing[n] = gate;
        lc.gate[n] = std::move(gate);
      }
    }

    Mat Y = X + F;
    lc.ynorm.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
      const double yn = Y.row(static_cast<Eigen::Index>(n)).norm();
      if (!(yn > 0.0) || !std::isfinite(yn)) throw DegenerateError("transformer_layer: degenerate residual norm");
      lc.ynorm[n] = yn;
      Y.row(static_cast<Eigen::Index>(n)) *= sd / yn;
    }
    c.X[li + 1] = std::move(Y);
  }

  const Mat UL = c.X.back() / sd;
  c.probs.resize(static_cast<Eigen::Index>(N), m.head_W.rows());
  for (std::size_t n = 0; n < N; ++n) {
    const Vec logits = m.head_W * UL.row(static_cast<Eigen::Index>(n)).transpose() + m.head_b;
    c.probs.row(static_cast<Eigen::Index>(n)) = softmax(logits).values().transpose();
  }
}

ToyTransformer zero_like(const ToyTransformer& m) {
  ToyTransformer z = m;
  for (auto& l : z.layers) {
    for (auto& h : l.mha.heads) {
      h.QK.setZero();
      h.OV.setZero();
    }
    l.memory.setZero();
    for (auto& e : l.moe.experts) {
      e.W1.setZero();
      e.b1.setZero();
      e.W2.setZero();
      e.b2.setZero();
    }
    l.moe.gate_W.setZero();
    l.moe.gate_b.setZero();
  }
  z.head_W.setZero();
  z.head_b.setZero();
  return z;
}

// balance[li] holds λ f_z / M for routing layer li (empty otherwise).
void backward_seq(const ToyTransformer& m, const SeqCache& c, const Mat& dlogits,
                  const std::vector<Vec>& balance, ToyTransformer& g) {
  const std::size_t N = static_cast<std::size_t>(dlogits.rows());
  const double sd = std::sqrt(static_cast<double>(m.dim));
  const Mat UL = c.X.back() / sd;
  g.head_W += dlogits.transpose() * UL;
  g.head_b += dlogits.colwise().sum().transpose();
  Mat gX = (dlogits * m.head_W) / sd;

  for (std::size_t li = m.layers.size(); li-- > 0;) {
    const TransformerLayer& L = m.layers[li];
    TransformerLayer& GL = g.layers[li];
    const LayerCache& lc = c.layers[li];
    const Mat& Xout = c.X[li + 1];
    // Through x' = √d y/‖y‖.
    Mat gY(gX.rows(), gX.cols());
    for (std::size_t n = 0; n < N; ++n) {
      const auto r = static_cast<Eigen::Index>(n);
      const Vec yhat = Xout.row(r).transpose() / sd;
      const Vec gx = gX.row(r).transpose();
      gY.row(r) = ((sd / lc.ynorm[n]) * (gx - yhat * yhat.dot(gx))).transpose();
    }
    Mat gU = Mat::Zero(gY.rows(), gY.cols());
    const Mat& gF = gY;

    if (L.kind == TransformerLayer::Kind::attention) {
      const bool mem = L.uses_memory();
      const Mat& K = mem ? L.memory : lc.U;
      Mat gK = Mat::Zero(K.rows(), K.cols());
      for (std::size_t h = 0; h < L.mha.heads.size(); ++h) {
        const AttentionHead& hd = L.mha.heads[h];
        AttentionHead& gh = GL.mha.heads[h];
        const Mat W = gF * hd.OV;  // row n: (OVᵀ gF_n)ᵀ
        Mat gQrows = Mat::Zero(K.rows(), K.cols());  // Σ_n ds_{nj} u_n per key j
        for (std::size_t n = 0; n < N; ++n) {
          const auto r = static_cast<Eigen::Index>(n);
          const std::size_t lo = mem ? 0 : window_start(n, m.window);
          const auto lo_i = static_cast<Eigen::Index>(lo);
          const Vec& a = lc.a[h][n];
          const Eigen::Index cnt = a.size();
          const auto Kw = K.middleRows(lo_i, cnt);
          // Value path.
          gh.OV += gF.row(r).transpose() * (a.transpose() * Kw);
          gK.middleRows(lo_i, cnt) += a * W.row(r);
          // Posterior path.
          Vec da = Kw * W.row(r).transpose();
          if (mem && h == 0 && balance[li].size() > 0) da += balance[li];
          const Vec ds = a.cwiseProduct(da - Vec::Constant(cnt, a.dot(da)));
          const Vec kbar = Kw.transpose() * ds;       // Σ_j ds_j k_j
          gh.QK += lc.U.row(r).transpose() * kbar.transpose();
          gU.row(r) += (hd.QK * kbar).transpose();
          gQrows.middleRows(lo_i, cnt) += ds * lc.U.row(r);
        }
        // ∂(u_nᵀ QK k_j)/∂k_j = QKᵀ u_n.
        gK += gQrows * hd.QK;
      }
      if (mem) {
        GL.memory += gK;
      } else {
        gU += gK;
      }
    } else {
      const MoeLayer& moe = L.moe;
      MoeLayer& gm = GL.moe;
      const std::size_t E = moe.num_experts();
      for (std::size_t n = 0; n < N; ++n) {
        const auto r = static_cast<Eigen::Index>(n);
        const Vec u = lc.U.row(r).transpose();
        const Vec gf = gF.row(r).transpose();
        const Vec& gate = lc.gate[n];
        Vec dg(static_cast<Eigen::Index>(E));
        Vec gu = Vec::Zero(u.size());
        for (std::size_t i = 0; i < E; ++i) {
          const auto ii = static_cast<Eigen::Index>(i);
          const Expert& e = moe.experts[i];
          Expert& ge = gm.experts[i];
          const Vec de = gate[ii] * gf;
          const Vec& h = lc.hid[n][i];
          ge.W2 += de * h.transpose();
          ge.b2 += de;
          const Vec dpre = (e.W2.transpose() * de).cwiseProduct((1.0 - h.array().square()).matrix());
          ge.W1 += dpre * u.transpose();
          ge.b1 += dpre;
          gu += e.W1.transpose() * dpre;
          dg[ii] = gf.dot(lc.eout[n][i]);
        }
        if (balance[li].size() > 0) dg += balance[li];
        const Vec dl = gate.cwiseProduct(dg - Vec::Constant(dg.size(), gate.dot(dg)));
        gm.gate_W += dl * u.transpose();
        gm.gate_b += dl;
        gu += moe.gate_W.transpose() * dl;
        gU.row(r) += gu.transpose();
      }
    }
    gX = gY + gU / sd;
  }
}

}  // namespace

ForwardTrace transformer_forward(const ToyTransformer& model, const std::vector<Vec>& embeddings,
                                 bool record_metrics) {
  model.validate();
  if (embeddings.empty()) throw PreconditionError("transformer_forward: empty sequence");
  SeqCache c;
  ForwardTrace out;
  out.layers.assign(model.layers.size(), LayerTrace{});
  forward_seq(model, embeddings, c, record_metrics ? out.layers.data() : nullptr);
  if (!record_metrics) {
    // Routing is cheap to keep and useful even without the vMF terms.
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
      const auto& L = model.layers[li];
      if (L.kind == TransformerLayer::Kind::moe) {
        out.layers[li].routing = c.layers[li].gate;
      } else if (L.uses_memory()) {
        out.layers[li].routing = c.layers[li].a[0];
      }
    }
  }
  const std::size_t N = embeddings.size();
  out.states.assign(c.X.size(), std::vector<Vec>(N));
  for (std::size_t l = 0; l < c.X.size(); ++l) {
    for (std::size_t n = 0; n < N; ++n) out.states[l][n] = c.X[l].row(static_cast<Eigen::Index>(n)).transpose();
  }
  out.class_probs.resize(N);
  for (std::size_t n = 0; n < N; ++n) out.class_probs[n] = c.probs.row(static_cast<Eigen::Index>(n)).transpose();
  return out;
}

TransformerLoss transformer_loss(const ToyTransformer& model, const std::vector<std::vector<Vec>>& inputs,
                                 const std::vector<std::vector<int>>& targets, const TransformerObjective& obj,
                                 ToyTransformer* grad) {
  model.validate();
  require_same_size(inputs.size(), targets.size(), "transformer_loss: inputs vs targets");
  if (inputs.empty()) throw PreconditionError("transformer_loss: empty batch");
  if (!(obj.balance_weight >= 0.0) || !std::isfinite(obj.balance_weight)) {
    throw ConfigError("transformer_loss: balance_weight must be finite and ≥ 0");
  }
  const std::size_t S = inputs.size();
  const std::size_t C = model.num_classes();
  std::vector<SeqCache> caches(S);
  TransformerLoss res;
  for (std::size_t s = 0; s < S; ++s) {
    require_same_size(inputs[s].size(), targets[s].size(), "transformer_loss: sequence vs targets");
    forward_seq(model, inputs[s], caches[s], nullptr);
    for (std::size_t n = 0; n < targets[s].size(); ++n) {
      const int y = targets[s][n];
      if (y < 0) continue;
      if (static_cast<std::size_t>(y) >= C) throw PreconditionError("transformer_loss: target out of range");
      const Eigen::RowVectorXd p = caches[s].probs.row(static_cast<Eigen::Index>(n));
      res.task -= std::log(std::max(p[y], 1e-300));
      Eigen::Index best = 0;
      p.maxCoeff(&best);
      res.correct += best == y ? 1 : 0;
      ++res.counted;
    }
  }
  if (res.counted == 0) throw PreconditionError("transformer_loss: no labeled positions");
  res.task /= static_cast<double>(res.counted);

  // Balancing loss per routing layer over every position in the batch.
  std::vector<Vec> balance(model.layers.size());
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const auto& L = model.layers[li];
    const std::size_t E = L.routing_size();
    if (E == 0) continue;
    Vec f = Vec::Zero(static_cast<Eigen::Index>(E)), P = Vec::Zero(static_cast<Eigen::Index>(E));
    std::size_t M = 0;
    for (const auto& c : caches) {
      const auto& rows = L.kind == TransformerLayer::Kind::moe ? c.layers[li].gate : c.layers[li].a[0];
      for (const Vec& r : rows) {
        Eigen::Index best = 0;
        r.maxCoeff(&best);
        f[best] += 1.0;
        P += r;
        ++M;
      }
    }
    f /= static_cast<double>(M);
    P /= static_cast<double>(M);
    res.balance += f.dot(P);
    if (obj.balance_weight > 0.0) balance[li] = (obj.balance_weight / static_cast<double>(M)) * f;
  }
  res.total = res.task + obj.balance_weight * res.balance;

  if (grad) {
    *grad = zero_like(model);
    for (std::size_t s = 0; s < S; ++s) {
      Mat dl = caches[s].probs;
      for (std::size_t n = 0; n < targets[s].size(); ++n) {
        const int y = targets[s][n];
        if (y < 0) {
          dl.row(static_cast<Eigen::Index>(n)).setZero();
        } else {
          dl(static_cast<Eigen::Index>(n), y) -= 1.0;
        }
      }
      dl /= static_cast<double>(res.counted);
      backward_seq(model, caches[s], dl, balance, *grad);
    }
  }
  return res;
}

std::vector<Vec> mean_routing(const ToyTransformer& model, const std::vector<std::vector<Vec>>& inputs) {
  std::vector<Vec> out;
  std::vector<std::size_t> layers;
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    const std::size_t E = model.layers[li].routing_size();
    if (E == 0) continue;
    layers.push_back(li);
    out.push_back(Vec::Zero(static_cast<Eigen::Index>(E)));
  }
  std::size_t count = 0;
  for (const auto& seq : inputs) {
    const ForwardTrace tr = transformer_forward(model, seq);
    for (std::size_t k = 0; k < layers.size(); ++k) {
      for (const Vec& r : tr.layers[layers[k]].routing) out[k] += r;
    }
    count += seq.size();
  }
  if (count > 0) {
    for (Vec& v : out) v /= static_cast<double>(count);
  }
  return out;
}

std::vector<TransformerHistoryRow> train_transformer(ToyTransformer& model, const SequenceCorpus& corpus,
                                                     const TransformerTrainConfig& cfg) {
  if (corpus.sequences.empty()) throw PreconditionError("train_transformer: empty corpus");
  if (cfg.batch_sequences == 0 || cfg.steps == 0) throw ConfigError("train_transformer: empty schedule");
  if (cfg.optimizer == TransformerOptimizer::sgd && !(cfg.sgd_lr > 0.0)) {
    throw ConfigError("train_transformer: sgd_lr must be positive");
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.sequences.size() - 1);
  std::vector<double> params = pack_transformer(model);
  AdamState st;
  std::vector<TransformerHistoryRow> history;
  std::vector<std::vector<Vec>> inputs(cfg.batch_sequences);
  std::vector<std::vector<int>> targets(cfg.batch_sequences);
  ToyTransformer grad;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t b = 0; b < cfg.batch_sequences; ++b) {
      const TokenSequence& s = corpus.sequences[pick(rng)];
      inputs[b] = s.embeddings;
      targets[b] = s.targets;
    }
    const TransformerLoss loss = transformer_loss(model, inputs, targets, cfg.objective, &grad);
    if (!std::isfinite(loss.total) || std::abs(loss.total) > 1e6) {
      throw DivergenceError("train_transformer: loss diverged at step " + std::to_string(step));
    }
    const bool log_now = cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps);
    if (log_now) {
      TransformerHistoryRow row{step, loss.task, loss.balance,
                                static_cast<double>(loss.correct) / static_cast<double>(loss.counted), {}};
      for (const Vec& r : mean_routing(model, inputs)) {
        row.concentration.push_back(kl_to_uniform(ProbVector(r / r.sum())));
      }
      history.push_back(std::move(row));
    }
    const std::vector<double> g = pack_transformer(grad);
    if (cfg.optimizer == TransformerOptimizer::adam) {
      adam_step(params, g, st, cfg.adam);
    } else {
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= cfg.sgd_lr * g[i];
    }
    unpack_transformer(model, params);
  }
  return history;
}

namespace {

template <class Model, class F>
void for_each_param(Model& m, F&& f) {
  for (auto& l : m.layers) {
    if (l.kind == TransformerLayer::Kind::attention) {
      for (auto& h : l.mha.heads) {
        f(h.QK.data(), h.QK.size());
        f(h.OV.data(), h.OV.size());
      }
      f(l.memory.data(), l.memory.size());
    } else {
      for (auto& e : l.moe.experts) {
        f(e.W1.data(), e.W1.size());
        f(e.b1.data(), e.b1.size());
        f(e.W2.data(), e.W2.size());
        f(e.b2.data(), e.b2.size());
      }
      f(l.moe.gate_W.data(), l.moe.gate_W.size());
      f(l.moe.gate_b.data(), l.moe.gate_b.size());
    }
  }
  f(m.head_W.data(), m.head_W.size());
  f(m.head_b.data(), m.head_b.size());
}

json mat_json(const Mat& m) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  }
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", v}};
}

Mat json_mat(const json& j) {
  const auto r = j.at("rows").get<Eigen::Index>();
  const auto c = j.at("cols").get<Eigen::Index>();
  const auto v = j.at("data").get<std::vector<double>>();
  if (r < 0 || c < 0 || static_cast<std::size_t>(r * c) != v.size()) throw ConfigError("matrix: size mismatch");
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    for (Eigen::Index k = 0; k < c; ++k) m(i, k) = v[static_cast<std::size_t>(i * c + k)];
  }
  return m;
}

json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec json_vec(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

std::vector<double> pack_transformer(const ToyTransformer& model) {
  std::vector<double> out;
  for_each_param(model, [&](const double* p, Eigen::Index n) { out.insert(out.end(), p, p + n); });
  return out;
}

void unpack_transformer(ToyTransformer& model, const std::vector<double>& params) {
  std::size_t total = 0;
  for_each_param(model, [&](double*, Eigen::Index n) { total += static_cast<std::size_t>(n); });
  require_same_size(params.size(), total, "unpack_transformer: parameter count");
  std::size_t off = 0;
  for_each_param(model, [&](double* p, Eigen::Index n) {
    std::copy(params.begin() + static_cast<std::ptrdiff_t>(off), params.begin() + static_cast<std::ptrdiff_t>(off + n), p);
    off += static_cast<std::size_t>(n);
  });
}

std::string transformer_to_json(const ToyTransformer& model) {
  json layers = json::array();
  for (const auto& l : model.layers) {
    json jl;
    if (l.kind == TransformerLayer::Kind::attention) {
      jl["type"] = "attention";
      json heads = json::array();
      for (const auto& h : l.mha.heads) heads.push_back({{"QK", mat_json(h.QK)}, {"OV", mat_json(h.OV)}});
      jl["heads"] = heads;
      jl["head_weights"] = vec_json(l.mha.head_weights);
      jl["memory"] = mat_json(l.memory);
    } else {
      jl["type"] = "moe";
      json experts = json::array();
      for (const auto& e : l.moe.experts) {
        experts.push_back({{"W1", mat_json(e.W1)}, {"b1", vec_json(e.b1)}, {"W2", mat_json(e.W2)},
                           {"b2", vec_json(e.b2)}});
      }
      jl["experts"] = experts;
      jl["gate_W"] = mat_json(l.moe.gate_W);
      jl["gate_b"] = vec_json(l.moe.gate_b);
      jl["ema_center"] = l.moe.ema_center;
      jl["ema_decay"] = l.moe.ema_decay;
      json means = json::array();
      for (const auto& v : l.moe.ema_mean) means.push_back(vec_json(v));
      jl["ema_mean"] = means;
    }
    layers.push_back(jl);
  }
  json j = {{"dim", model.dim},
            {"window", model.window},
            {"layers", layers},
            {"head_W", mat_json(model.head_W)},
            {"head_b", vec_json(model.head_b)}};
  return j.dump();
}

ToyTransformer transformer_from_json(const std::string& text) {
  ToyTransformer m;
  try {
    const json j = json::parse(text);
    m.dim = j.at("dim").get<std::size_t>();
    m.window = j.at("window").get<std::size_t>();
    for (const auto& jl : j.at("layers")) {
      TransformerLayer l;
      const auto type = jl.at("type").get<std::string>();
      if (type == "attention") {
        for (const auto& h : jl.at("heads")) l.mha.heads.push_back({json_mat(h.at("QK")), json_mat(h.at("OV"))});
        l.mha.head_weights = json_vec(jl.at("head_weights"));
        l.memory = json_mat(jl.at("memory"));
      } else if (type == "moe") {
        l.kind = TransformerLayer::Kind::moe;
        for (const auto& e : jl.at("experts")) {
          l.moe.experts.push_back({json_mat(e.at("W1")), json_vec(e.at("b1")), json_mat(e.at("W2")),
                                   json_vec(e.at("b2"))});
        }
        l.moe.gate_W = json_mat(jl.at("gate_W"));
        l.moe.gate_b = json_vec(jl.at("gate_b"));
        l.moe.ema_center = jl.at("ema_center").get<bool>();
        l.moe.ema_decay = jl.at("ema_decay").get<double>();
        for (const auto& v : jl.at("ema_mean")) l.moe.ema_mean.push_back(json_vec(v));
      } else {
        throw ConfigError("transformer json: unknown layer type '" + type + "'");
      }
      m.layers.push_back(std::move(l));
    }
    m.head_W = json_mat(j.at("head_W"));
    m.head_b = json_vec(j.at("head_b"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("transformer json: ") + e.what());
  }
  m.validate();
  return m;
}

}  // namespace svflow
