#include "svflow/attention.hpp"
#include "svflow/data.hpp"
#include "svflow/experiments.hpp"
#include "svflow/flow.hpp"
#include "svflow/metrics.hpp"
#include "svflow/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

namespace svflow {

namespace {

namespace fs = std::filesystem;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::ostringstream csv_stream() {
  std::ostringstream os;
  os << std::setprecision(17);
  return os;
}

void write_output(const ExperimentConfig& cfg, const std::string& name, const std::string& body,
                  std::vector<std::string>& files) {
  if (cfg.out_dir.empty()) return;
  const fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + cfg.out_dir + "': " + ec.message());
  const fs::path path = dir / name;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << kSchemaHeader << '\n' << body;
  files.push_back(path.string());
}

OracleCheck at_most(std::string name, double value, double tolerance) {
  return {std::move(name), value, tolerance, std::isfinite(value) && value <= tolerance};
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the first error.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::string beta_label(double beta) {
  std::ostringstream os;
  os << "beta_" << beta;
  return os.str();
}

// ---------------------------------------------------------------------------
// toy2d

struct Toy2dCellOutput {
  Toy2dCell cell;
  std::string history, snapshots, grid;
  double max_elbo_violation = -kInf;
  double max_identity_gap = 0.0;
};

Toy2dCellOutput run_toy2d_cell(const ExperimentConfig& cfg, const LabeledPoints& data, double beta, bool var_only) {
  const auto& p = cfg.toy2d;
  const auto t0 = std::chrono::steady_clock::now();
  TrainConfig tc;
  tc.family = Family::gaussian;
  tc.posterior_mode = PosteriorMode::untied;
  tc.dim = 2;
  tc.num_components = p.num_components;
  tc.num_steps = p.num_steps;
  tc.step_size = p.step_size;
  tc.num_classes = 2;
  tc.objective = var_only ? ObjectiveConfig::variational_only() : ObjectiveConfig::hybrid(beta);
  tc.adam.lr = p.lr;
  tc.batch_size = p.batch_size;
  tc.train_steps = p.train_steps;
  tc.log_every = p.log_every;
  tc.seed = cfg.seed;
  tc.threads = 1;
  const TrainResult res = train_run(tc, data);

  Toy2dCellOutput out;
  out.cell.label = var_only ? "var_only" : beta_label(beta);
  out.cell.beta = beta;
  out.cell.var_only = var_only;
  const HybridEvaluation ev = evaluate_hybrid(res.model, res.head, data, tc.objective, false);
  out.cell.accuracy = ev.accuracy;
  out.cell.max_usage = ev.usage.maxCoeff();
  out.cell.mean_kl = ev.mean_kl;
  out.history = history_to_csv(res.history);

  const FlowModel& m = res.model;
  const std::size_t L = m.num_steps();
  std::vector<std::size_t> snap_steps;
  for (int k = 1; k <= 5; ++k) {
    snap_steps.push_back(static_cast<std::size_t>(std::lround(0.2 * k * static_cast<double>(L))));
  }

  auto bound_check = [&](std::size_t step, const Vec& x) {
    const std::size_t s = std::min(step, L - 1);
    const double e = elbo(m, s, x);
    const double lm = marginal_log_density(m, s, x);
    out.max_elbo_violation = std::max(out.max_elbo_violation, e - lm);
    out.max_identity_gap =
        std::max(out.max_identity_gap, std::abs(marginal_log_density_via_elbo(m, s, x) - lm) / std::max(1.0, std::abs(lm)));
  };

  // Trajectory snapshots of the first points, at t = 0.2, ..., 1.0 of the horizon.
  auto snaps = csv_stream();
  snaps << "t,point,label,x,y\n";
  const std::size_t npts = std::min(p.snapshot_points, data.size());
  for (std::size_t i = 0; i < npts; ++i) {
    const Trajectory tr = integrate(m, data.points[i], tc.objective.mode);
    for (std::size_t s : snap_steps) {
      const Vec& x = tr.states[s];
      snaps << static_cast<double>(s) / static_cast<double>(L) << ',' << i << ',' << data.labels[i] << ',' << x[0]
            << ',' << x[1] << '\n';
      bound_check(s, x);
    }
  }
  out.snapshots = snaps.str();

  // ELBO and vector field on a regular grid over the data's bounding box.
  Vec lo = data.points.front(), hi = data.points.front();
  for (const Vec& x : data.points) {
    lo = lo.cwiseMin(x);
    hi = hi.cwiseMax(x);
  }
  lo.array() -= 0.5;
  hi.array() += 0.5;
  auto grid = csv_stream();
  grid << "t,x,y,elbo,log_marginal,vx,vy\n";
  const std::size_t G = p.grid_resolution;
  for (std::size_t s : snap_steps) {
    const std::size_t step = std::min(s, L - 1);
    for (std::size_t a = 0; a < G; ++a) {
      for (std::size_t b = 0; b < G; ++b) {
        Vec x(2);
        x[0] = lo[0] + (hi[0] - lo[0]) * static_cast<double>(a) / static_cast<double>(G - 1);
        x[1] = lo[1] + (hi[1] - lo[1]) * static_cast<double>(b) / static_cast<double>(G - 1);
        const Vec v = vector_field(m, step, x);
        grid << static_cast<double>(s) / static_cast<double>(L) << ',' << x[0] << ',' << x[1] << ','
             << elbo(m, step, x) << ',' << marginal_log_density(m, step, x) << ',' << v[0] << ',' << v[1] << '\n';
        bound_check(step, x);
      }
    }
  }
  out.grid = grid.str();
  out.cell.seconds = seconds_since(t0);
  return out;
}

// ---------------------------------------------------------------------------
// sequence-task helpers

struct SplitTask {
  SequenceCorpus train;
  std::vector<TokenSequence> test;
};

SplitTask make_split(const SequenceTaskConfig& t, std::uint64_t seed) {
  SplitTask s;
  s.train = make_sequence_task(t.vocab, t.length, t.dim, seed, t.train_sequences + t.test_sequences, t.window);
  s.test.assign(s.train.sequences.begin() + static_cast<std::ptrdiff_t>(t.train_sequences), s.train.sequences.end());
  s.train.sequences.resize(t.train_sequences);
  return s;
}

void unpack(const std::vector<TokenSequence>& seqs, std::vector<std::vector<Vec>>& in,
            std::vector<std::vector<int>>& tg) {
  in.clear();
  tg.clear();
  for (const auto& s : seqs) {
    in.push_back(s.embeddings);
    tg.push_back(s.targets);
  }
}

// Directional finite-difference check of transformer_loss gradients.
double transformer_fd_error(const ToyTransformer& model, const std::vector<std::vector<Vec>>& in,
                            const std::vector<std::vector<int>>& tg, const TransformerObjective& obj,
                            std::uint64_t seed) {
  ToyTransformer grad;
  transformer_loss(model, in, tg, obj, &grad);
  const std::vector<double> g = pack_transformer(grad);
  const std::vector<double> p0 = pack_transformer(model);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double h = 1e-5;
  double worst = 0.0;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> u(p0.size());
    for (double& x : u) x = gauss(rng);
    double analytic = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) analytic += g[i] * u[i];
    auto loss_at = [&](double t) {
      ToyTransformer m = model;
      std::vector<double> p = p0;
      for (std::size_t i = 0; i < p.size(); ++i) p[i] += t * u[i];
      unpack_transformer(m, p);
      return transformer_loss(m, in, tg, obj).total;
    };
    const double fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(fd), 1e-8));
  }
  return worst;
}

double first_routing_concentration(const ToyTransformer& model, const std::vector<std::vector<Vec>>& in) {
  const std::vector<Vec> r = mean_routing(model, in);
  if (r.empty()) throw PreconditionError("coupling: model has no routing layer");
  return kl_to_uniform(ProbVector(r.front() / r.front().sum()));
}

double accuracy_of(const TransformerLoss& l) {
  return l.counted ? static_cast<double>(l.correct) / static_cast<double>(l.counted) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------

Toy2dResult run_toy2d(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const auto& p = cfg.toy2d;
  const LabeledPoints data = make_moons(p.num_points, p.noise, cfg.seed);

  std::vector<std::pair<double, bool>> specs;
  for (double b : p.betas) specs.emplace_back(b, false);
  if (p.var_only_run) specs.emplace_back(0.0, true);

  std::vector<Toy2dCellOutput> outs(specs.size());
  parallel_for(specs.size(), resolve_threads(cfg.threads),
               [&](std::size_t i) { outs[i] = run_toy2d_cell(cfg, data, specs[i].first, specs[i].second); });

  Toy2dResult res;
  double worst_bound = -kInf, worst_gap = 0.0;
  auto summary = csv_stream();
  summary << "label,beta,var_only,accuracy,max_usage,mean_kl\n";
  for (auto& o : outs) {
    res.cells.push_back(o.cell);
    worst_bound = std::max(worst_bound, o.max_elbo_violation);
    worst_gap = std::max(worst_gap, o.max_identity_gap);
    summary << o.cell.label << ',' << o.cell.beta << ',' << (o.cell.var_only ? 1 : 0) << ',' << o.cell.accuracy
            << ',' << o.cell.max_usage << ',' << o.cell.mean_kl << '\n';
    write_output(cfg, "history_" + o.cell.label + ".csv", o.history, res.files);
    write_output(cfg, "snapshots_" + o.cell.label + ".csv", o.snapshots, res.files);
    write_output(cfg, "grid_" + o.cell.label + ".csv", o.grid, res.files);
  }
  write_output(cfg, "summary.csv", summary.str(), res.files);
  res.oracles.push_back(at_most("elbo minus log marginal", worst_bound, 1e-9));
  res.oracles.push_back(at_most("log marginal identity gap", worst_gap, 1e-8));
  res.seconds = seconds_since(t0);
  require_oracles(res.oracles, "toy2d");
  return res;
}

VmfRunResult run_vmf_flow(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto& p = cfg.vmf;
  const LabeledPoints all = make_vmf_clusters(p.num_points, p.dim, p.num_clusters, p.kappa_data, cfg.seed);
  const auto n_test = static_cast<std::size_t>(std::llround(p.test_fraction * static_cast<double>(all.size())));
  if (n_test == 0 || n_test >= all.size()) throw ConfigError("vmf: test split is empty or covers everything");
  std::vector<std::size_t> train_idx, test_idx, probe_idx;
  for (std::size_t i = 0; i < all.size(); ++i) (i < all.size() - n_test ? train_idx : test_idx).push_back(i);
  for (std::size_t i = 0; i < std::min(p.fd_probe_points, train_idx.size()); ++i) probe_idx.push_back(train_idx[i]);
  const LabeledPoints train = all.subset(train_idx), test = all.subset(test_idx), probe = all.subset(probe_idx);

  TrainConfig tc;
  tc.family = Family::vmf;
  tc.posterior_mode = PosteriorMode::untied;
  tc.dim = p.dim;
  tc.num_components = p.num_components;
  tc.num_steps = p.num_steps;
  tc.step_size = p.step_size;
  tc.num_classes = p.num_clusters;
  tc.objective = ObjectiveConfig::hybrid(p.beta, StepMode::spherical);
  tc.adam.lr = p.lr;
  tc.batch_size = p.batch_size;
  tc.train_steps = p.train_steps;
  tc.log_every = p.log_every;
  tc.seed = cfg.seed;
  tc.threads = resolve_threads(cfg.threads);
  tc.init_logit_scale = 1.0;

  VmfRunResult res;
  const std::size_t mid = p.train_steps / 2;
  auto fd = csv_stream();
  fd << "step,rel_error_theta,rel_error_phi\n";
  const TrainResult tr = train_run(tc, train, [&](std::size_t step, const TrainResult& st) {
    if (step != 0 && step != mid && step != p.train_steps) return;
    const HybridEvaluation ev = evaluate_hybrid(st.model, st.head, probe, tc.objective, true);
    const std::vector<double> th = pack_theta(st.model), ph = pack_phi(st.model);
    const auto ft = finite_diff_oracle(
        [&](std::span<const double> x) { return hybrid_loss_theta(st.model, st.head, probe, tc.objective, x); }, th);
    const auto fp = finite_diff_oracle(
        [&](std::span<const double> x) { return hybrid_loss_phi(st.model, st.head, probe, tc.objective, x); }, ph);
    const double et = rel_error(ev.grads->theta, ft), ep = rel_error(ev.grads->phi, fp);
    fd << step << ',' << et << ',' << ep << '\n';
    res.fd_steps.push_back(step);
    res.fd_rel_error.push_back(std::max(et, ep));
  });

  const HybridEvaluation ev = evaluate_hybrid(tr.model, tr.head, test, tc.objective, false, tc.threads);
  res.test_accuracy = ev.accuracy;

  auto metrics = csv_stream();
  metrics << "step,mean_neg_log_p,mean_kl_qp,mean_kl_qU,mean_kl_pU\n";
  res.max_norm_deviation = 0.0;
  std::vector<std::vector<TokenMetrics>> per_step(p.num_steps);
  for (const Vec& x0 : test.points) {
    const Trajectory t = integrate(tr.model, x0, StepMode::spherical);
    for (std::size_t l = 0; l < t.states.size(); ++l) {
      const Vec& x = t.states[l];
      res.max_norm_deviation = std::max(res.max_norm_deviation, std::abs(x.norm() - 1.0));
      if (l == p.num_steps) continue;
      res.max_elbo_violation =
          std::max(res.max_elbo_violation, elbo(tr.model, l, x) - marginal_log_density(tr.model, l, x));
      per_step[l].push_back(svflow_metrics(posterior(tr.model, l, x), conditional_log_densities(tr.model, l, x), p.dim));
    }
  }
  for (std::size_t l = 0; l < p.num_steps; ++l) {
    const AggregatedMetrics a = mean_metrics(per_step[l]);
    metrics << l << ',' << a.mean.neg_log_p << ',' << a.mean.kl_qp << ',' << a.mean.kl_qU << ',' << a.mean.kl_pU
            << '\n';
  }

  auto summary = csv_stream();
  summary << "test_accuracy,max_norm_deviation,max_elbo_violation\n"
          << res.test_accuracy << ',' << res.max_norm_deviation << ',' << res.max_elbo_violation << '\n';
  write_output(cfg, "history.csv", history_to_csv(tr.history), res.files);
  write_output(cfg, "fd_checks.csv", fd.str(), res.files);
  write_output(cfg, "metrics.csv", metrics.str(), res.files);
  write_output(cfg, "summary.csv", summary.str(), res.files);

  for (std::size_t i = 0; i < res.fd_steps.size(); ++i) {
    res.oracles.push_back(
        at_most("gradient vs FD at step " + std::to_string(res.fd_steps[i]), res.fd_rel_error[i], p.fd_tolerance));
  }
  res.oracles.push_back(at_most("unit-norm deviation", res.max_norm_deviation, 1e-10));
  res.oracles.push_back(at_most("elbo minus log marginal", res.max_elbo_violation, 1e-9));
  require_oracles(res.oracles, "vmf");
  return res;
}

CouplingResult run_coupling_contrast(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto& p = cfg.coupling;
  const SplitTask task = make_split(p.task, cfg.seed);
  std::vector<std::vector<Vec>> test_in;
  std::vector<std::vector<int>> test_tg;
  unpack(task.test, test_in, test_tg);

  struct Spec {
    const char* label;
    const char* layout;
    double balance;
  };
  const Spec specs[] = {{"coupled", "am", 0.0}, {"decoupled", "ae", 0.0}, {"decoupled_balanced", "ae", p.balance_weight}};

  CouplingResult res;
  auto traces = csv_stream();
  traces << "run,step,task_loss,balance_loss,batch_accuracy,concentration\n";
  double worst_fd = 0.0;
  for (const Spec& s : specs) {
    ToyTransformerShape shape;
    shape.dim = p.task.dim;
    shape.window = p.task.window;
    shape.num_classes = p.task.vocab;
    shape.num_heads = p.num_heads;
    shape.layout = s.layout;
    shape.num_slots = p.num_slots;
    shape.init_scale = p.init_scale;
    ToyTransformer model = make_toy_transformer(shape, cfg.seed + 1);

    TransformerTrainConfig tc;
    tc.steps = p.train_steps;
    tc.batch_sequences = p.batch_sequences;
    tc.log_every = p.log_every;
    tc.seed = cfg.seed;
    tc.optimizer = p.optimizer == "sgd" ? TransformerOptimizer::sgd : TransformerOptimizer::adam;
    tc.sgd_lr = p.lr;
    tc.adam.lr = p.lr;
    tc.objective.balance_weight = s.balance;

    // Gradient oracle at initialization on two training sequences.
    std::vector<std::vector<Vec>> fd_in;
    std::vector<std::vector<int>> fd_tg;
    unpack({task.train.sequences[0], task.train.sequences[1]}, fd_in, fd_tg);
    worst_fd = std::max(worst_fd, transformer_fd_error(model, fd_in, fd_tg, tc.objective, cfg.seed));

    const auto hist = train_transformer(model, task.train, tc);
    for (const auto& r : hist) {
      traces << s.label << ',' << r.step << ',' << r.task << ',' << r.balance << ',' << r.accuracy << ','
             << (r.concentration.empty() ? 0.0 : r.concentration.front()) << '\n';
    }
    const TransformerLoss test_loss = transformer_loss(model, test_in, test_tg, {});
    res.runs.push_back({s.label, s.balance, first_routing_concentration(model, test_in), accuracy_of(test_loss)});
  }

  auto summary = csv_stream();
  summary << "run,balance_weight,final_concentration,test_accuracy\n";
  for (const auto& r : res.runs) {
    summary << r.label << ',' << r.balance_weight << ',' << r.final_concentration << ',' << r.test_accuracy << '\n';
  }
  write_output(cfg, "traces.csv", traces.str(), res.files);
  write_output(cfg, "summary.csv", summary.str(), res.files);
  res.oracles.push_back(at_most("transformer gradient vs FD", worst_fd, 1e-6));
  require_oracles(res.oracles, "coupling");
  return res;
}

ShuffleResult run_shuffle_probe(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto& p = cfg.shuffle;
  const SplitTask task = make_split(p.task, cfg.seed);

  ToyTransformerShape shape;
  shape.dim = p.task.dim;
  shape.window = p.task.window;
  shape.num_classes = p.task.vocab;
  shape.num_heads = p.num_heads;
  shape.layout = p.layout;
  shape.init_scale = p.init_scale;
  ToyTransformer model = make_toy_transformer(shape, cfg.seed + 1);
  TransformerTrainConfig tc;
  tc.steps = p.train_steps;
  tc.batch_sequences = p.batch_sequences;
  tc.log_every = 0;
  tc.seed = cfg.seed;
  tc.adam.lr = p.lr;
  train_transformer(model, task.train, tc);

  const std::size_t NL = model.layers.size();
  const std::size_t N = p.task.length;
  const std::size_t d = model.dim;

  ShuffleResult res;
  res.proportions = p.proportions;

  // Head-averaged metrics of every layer at one position.
  auto layer_metrics = [&](const ForwardTrace& tr, std::size_t l, std::size_t n) {
    const LayerTrace& lt = tr.layers[l];
    std::vector<TokenMetrics> heads;
    for (std::size_t h = 0; h < lt.q.size(); ++h) {
      heads.push_back(svflow_metrics(ProbVector(lt.q[h][n] / lt.q[h][n].sum()), lt.logp[h][n], d));
    }
    return mean_metrics(heads).mean;
  };

  // [layer][bin] rows for baseline and shuffled inputs.
  std::vector<std::array<std::vector<TokenMetrics>, 4>> base_rows(NL), shuf_rows(NL);
  std::array<std::vector<double>, 4> base_nll, shuf_nll;
  std::vector<double> base_conf, shuf_conf;
  std::vector<bool> base_ok, shuf_ok;
  std::vector<double> all_base_nll;
  double zero_delta = 0.0;
  double worst_equiv = 0.0;

  for (std::size_t si = 0; si < task.test.size(); ++si) {
    const TokenSequence& seq = task.test[si];
    const ForwardTrace base = transformer_forward(model, seq.embeddings, true);
    for (std::size_t i = 0; i < N; ++i) {
      if (seq.targets[i] >= 0) all_base_nll.push_back(-std::log(base.class_probs[i][seq.targets[i]]));
    }

    // The literal and posterior-weighted forms of the first layer must agree.
    {
      const std::vector<Vec>& X = base.states[0];
      const std::size_t n = N - 1;
      std::vector<Vec> keys;
      for (std::size_t j = n > model.window ? n - model.window : 0; j <= n; ++j) {
        keys.push_back(X[j] / std::sqrt(static_cast<double>(d)));
      }
      const Vec u = X[n] / std::sqrt(static_cast<double>(d));
      const Vec a = mha_forward(model.layers[0].mha, u, keys, keys, MhaForm::literal);
      const Vec b = mha_forward(model.layers[0].mha, u, keys, keys, MhaForm::svflow);
      worst_equiv = std::max(worst_equiv, (a - b).norm() / std::max(1.0, a.norm()));
    }

    // p = 0 control: nothing moves.
    {
      const TokenSequence same = prefix_shuffle(seq, 0.0, cfg.seed);
      const ForwardTrace tr = transformer_forward(model, same.embeddings, true);
      for (std::size_t i = 0; i < N; ++i) {
        zero_delta = std::max(zero_delta, (tr.class_probs[i] - base.class_probs[i]).cwiseAbs().maxCoeff());
        for (std::size_t l = 0; l < NL; ++l) {
          zero_delta = std::max(zero_delta, std::abs(layer_metrics(tr, l, i).neg_log_p -
                                                     layer_metrics(base, l, i).neg_log_p));
        }
      }
    }

    for (std::size_t pi = 0; pi < p.proportions.size(); ++pi) {
      const double prop = p.proportions[pi];
      const TokenSequence sh = prefix_shuffle(seq, prop, cfg.seed * 1000003ULL + si * 131ULL + pi);
      const ForwardTrace tr = transformer_forward(model, sh.embeddings, true);
      for (std::size_t n = 1; n <= N; ++n) {
        const ShuffleRate rate = shuffle_rate(prop, N, n);
        if (rate.excluded) continue;
        const int bin = shuffle_bin(rate.r);
        if (bin < 0) continue;
        const std::size_t i = n - 1;
        const auto b = static_cast<std::size_t>(bin);
        const int y = seq.targets[i];
        if (y >= 0) {
          base_nll[b].push_back(-std::log(base.class_probs[i][y]));
          shuf_nll[b].push_back(-std::log(tr.class_probs[i][y]));
          Eigen::Index arg = 0;
          base_conf.push_back(base.class_probs[i].maxCoeff(&arg));
          base_ok.push_back(arg == y);
          shuf_conf.push_back(tr.class_probs[i].maxCoeff(&arg));
          shuf_ok.push_back(arg == y);
        }
        for (std::size_t l = 0; l < NL; ++l) {
          base_rows[l][b].push_back(layer_metrics(base, l, i));
          shuf_rows[l][b].push_back(layer_metrics(tr, l, i));
        }
      }
    }
  }

  auto bins_csv = csv_stream();
  bins_csv << "bin,r_low,r_high,tokens,baseline_log_ppl,shuffled_log_ppl,delta_log_ppl\n";
  const double edges[] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (std::size_t b = 0; b < 4; ++b) {
    if (base_nll[b].empty()) throw DegenerateError("shuffle: r-bin " + std::to_string(b) + " received no tokens");
    const double lb = log_ppl(base_nll[b]), ls = log_ppl(shuf_nll[b]);
    res.delta_log_ppl[b] = ls - lb;
    res.bin_tokens[b] = base_nll[b].size();
    bins_csv << b << ',' << edges[b] << ',' << edges[b + 1] << ',' << base_nll[b].size() << ',' << lb << ',' << ls
             << ',' << ls - lb << '\n';
  }

  auto heat = csv_stream();
  heat << "layer,bin,delta_neg_log_p,delta_kl_qp,delta_kl_qU,delta_kl_pU\n";
  std::vector<TokenMetrics> abs_delta(NL);
  res.delta_neg_log_p.resize(NL);
  for (std::size_t l = 0; l < NL; ++l) {
    for (std::size_t b = 0; b < 4; ++b) {
      const TokenMetrics mb = mean_metrics(base_rows[l][b]).mean, ms = mean_metrics(shuf_rows[l][b]).mean;
      const TokenMetrics dm{ms.neg_log_p - mb.neg_log_p, ms.kl_qp - mb.kl_qp, ms.kl_qU - mb.kl_qU,
                            ms.kl_pU - mb.kl_pU};
      res.delta_neg_log_p[l][b] = dm.neg_log_p;
      heat << l << ',' << b << ',' << dm.neg_log_p << ',' << dm.kl_qp << ',' << dm.kl_qU << ',' << dm.kl_pU << '\n';
      abs_delta[l].neg_log_p += std::abs(dm.neg_log_p) / 4.0;
      abs_delta[l].kl_qp += std::abs(dm.kl_qp) / 4.0;
      abs_delta[l].kl_qU += std::abs(dm.kl_qU) / 4.0;
      abs_delta[l].kl_pU += std::abs(dm.kl_pU) / 4.0;
    }
  }
  const AggregatedMetrics deep = aggregate_deep(abs_delta, p.deep_fraction);
  const AggregatedMetrics shallow =
      aggregate_deep(std::vector<TokenMetrics>(abs_delta.rbegin(), abs_delta.rend()), p.deep_fraction);
  res.deep_abs_delta = deep.mean.neg_log_p;
  res.shallow_abs_delta = shallow.mean.neg_log_p;
  res.baseline_log_ppl = log_ppl(all_base_nll);
  res.delta_ece = ece(shuf_conf, shuf_ok, p.ece_bins) - ece(base_conf, base_ok, p.ece_bins);
  res.zero_shuffle_max_delta = zero_delta;

  auto summary = csv_stream();
  summary << "baseline_log_ppl,delta_ece,deep_abs_delta_neg_log_p,shallow_abs_delta_neg_log_p,monotone,deep_dominates\n"
          << res.baseline_log_ppl << ',' << res.delta_ece << ',' << res.deep_abs_delta << ','
          << res.shallow_abs_delta << ',' << (res.monotone() ? 1 : 0) << ',' << (res.deep_dominates() ? 1 : 0) << '\n';
  write_output(cfg, "bins.csv", bins_csv.str(), res.files);
  write_output(cfg, "layer_heatmap.csv", heat.str(), res.files);
  write_output(cfg, "summary.csv", summary.str(), res.files);

  res.oracles.push_back(at_most("p = 0 shuffle delta", res.zero_shuffle_max_delta, 0.0));
  res.oracles.push_back(at_most("literal vs posterior-weighted attention", worst_equiv, 1e-12));
  require_oracles(res.oracles, "shuffle");
  return res;
}

KernelResult run_kernel_limit(const ExperimentConfig& cfg) {
  validate(cfg);
  const auto& p = cfg.kernel;
  const auto d = static_cast<Eigen::Index>(p.dim);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  AttentionHead head{Mat(d, d), Mat::Identity(d, d)};
  for (Eigen::Index i = 0; i < head.QK.size(); ++i) head.QK.data()[i] = p.qk_scale * gauss(rng);
  Vec mu = Vec::Zero(d);
  mu[d - 1] = 1.0;
  Vec xq = Vec::Zero(d);
  xq[0] = 1.0;
  const KeySampler sampler = vmf_key_sampler(mu, p.key_kappa);
  const auto f = [](const Vec& k) { return k[0]; };

  KernelResult res;
  res.key_counts = p.key_counts;
  auto table = csv_stream();
  table << "num_keys,seed_index,error\n";
  double reference = 0.0;
  for (std::size_t N : p.key_counts) {
    const KernelLimitResult r = kernel_limit_error(head, xq, sampler, f, N, p.quad_resolution, p.num_seeds, cfg.seed);
    res.errors.push_back(r.error);
    res.seed_errors.push_back(r.seed_errors);
    res.quadrature_converged = res.quadrature_converged && r.quadrature_converged;
    reference = r.reference;
    for (std::size_t s = 0; s < r.seed_errors.size(); ++s) table << N << ',' << s << ',' << r.seed_errors[s] << '\n';
  }
  std::vector<double> xs(p.key_counts.begin(), p.key_counts.end());
  res.slope = log_log_slope(xs, res.errors);

  auto summary = csv_stream();
  summary << "num_keys,mean_error\n";
  for (std::size_t i = 0; i < xs.size(); ++i) summary << p.key_counts[i] << ',' << res.errors[i] << '\n';
  auto fit = csv_stream();
  fit << "slope,target,tolerance,reference\n"
      << res.slope << ',' << p.slope_target << ',' << p.slope_tolerance << ',' << reference << '\n';
  write_output(cfg, "errors.csv", table.str(), res.files);
  write_output(cfg, "summary.csv", summary.str(), res.files);
  write_output(cfg, "slope.csv", fit.str(), res.files);

  // A constant test function is reproduced exactly by any normalized weights.
  const KernelLimitResult flat =
      kernel_limit_error(head, xq, sampler, [](const Vec&) { return 1.0; }, 64, p.quad_resolution, 1, cfg.seed);
  res.oracles.push_back(at_most("constant-function error", flat.error, 1e-12));
  res.oracles.push_back({"quadrature converged", res.quadrature_converged ? 1.0 : 0.0, 1.0, res.quadrature_converged});
  require_oracles(res.oracles, "kernel");
  return res;
}

}  // namespace svflow
