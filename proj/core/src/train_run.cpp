#include "svflow/train.hpp"

#include <cmath>
#include <iomanip>
#include <random>
#include <sstream>

namespace svflow {

TrainResult initialize_training(const TrainConfig& cfg, const LabeledPoints& data) {
  data.validate();
  require(data.size() > 0, "train: empty dataset");
  if (cfg.dim < 1 || cfg.num_components < 1 || cfg.num_steps < 1) throw ConfigError("train: empty model shape");
  if (cfg.num_classes < 1) throw ConfigError("train: num_classes must be ≥ 1");
  if (cfg.batch_size < 1) throw ConfigError("train: batch_size must be ≥ 1");
  cfg.objective.validate(cfg.num_steps);
  if (cfg.family == Family::vmf && cfg.objective.mode != StepMode::spherical) {
    throw ConfigError("train: the vmf family trains with spherical steps");
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);

  FlowModel m(cfg.family, cfg.dim, cfg.num_components, cfg.num_steps, cfg.step_size, cfg.posterior_mode);
  const auto d = static_cast<Eigen::Index>(cfg.dim);

  // Component parameters start out shared across steps. Gaussian means sit
  // on randomly chosen data points, jittered by init_mean_scale · 0.1.
  std::vector<DiagGaussianParams> gparams;
  std::vector<VmfParams> vparams;
  for (std::size_t z = 0; z < cfg.num_components; ++z) {
    if (cfg.family == Family::gaussian) {
      Vec mean = data.points[pick(rng)];
      for (Eigen::Index i = 0; i < d; ++i) mean[i] += 0.1 * cfg.init_mean_scale * gauss(rng);
      gparams.push_back({mean, Vec::Constant(d, cfg.init_log_std)});
    } else {
      Vec mu(d);
      for (Eigen::Index i = 0; i < d; ++i) mu[i] = gauss(rng);
      vparams.push_back({mu / mu.norm(), cfg.init_kappa});
    }
  }
  Mat W = Mat::Zero(static_cast<Eigen::Index>(cfg.num_components), d);
  if (cfg.posterior_mode == PosteriorMode::untied) {
    for (Eigen::Index z = 0; z < W.rows(); ++z) {
      for (Eigen::Index i = 0; i < d; ++i) W(z, i) = cfg.init_logit_scale * gauss(rng);
    }
  }
  for (std::size_t l = 0; l < cfg.num_steps; ++l) {
    for (std::size_t z = 0; z < cfg.num_components; ++z) {
      if (cfg.family == Family::gaussian) {
        m.set_gaussian(l, z, gparams[z]);
      } else {
        m.set_vmf(l, z, vparams[z]);
      }
    }
    if (cfg.posterior_mode == PosteriorMode::untied) {
      m.set_posterior_logits(l, W, Vec::Zero(static_cast<Eigen::Index>(cfg.num_components)));
    }
  }

  ClassifierHead head(cfg.dim, cfg.num_classes);
  for (Eigen::Index i = 0; i < head.W.size(); ++i) head.W.data()[i] = 0.1 * gauss(rng);
  return TrainResult{std::move(m), std::move(head), {}};
}

TrainResult train_run(const TrainConfig& cfg, const LabeledPoints& data, const TrainObserver& observe) {
  TrainResult res = initialize_training(cfg, data);
  for (int y : data.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cfg.num_classes) throw PreconditionError("train: label out of range");
  }
  // Separate stream so the init draws do not shift the minibatch sequence.
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);

  std::vector<double> theta = pack_theta(res.model);
  std::vector<double> phi = pack_phi(res.model);
  std::vector<double> headp = pack_head(res.head);
  AdamState st_theta, st_phi, st_head;
  const bool train_head = cfg.objective.align_weight() > 0.0;

  std::vector<std::size_t> idx(cfg.batch_size);
  LabeledPoints batch;
  batch.points.resize(cfg.batch_size);
  batch.labels.resize(cfg.batch_size);

  for (std::size_t step = 0; step < cfg.train_steps; ++step) {
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = pick(rng);
      batch.points[b] = data.points[i];
      batch.labels[b] = data.labels[i];
    }
    HybridEvaluation ev = evaluate_hybrid(res.model, res.head, batch, cfg.objective, true, cfg.threads);
    if (!std::isfinite(ev.j_hybrid) || std::abs(ev.j_hybrid) > 1e6) {
      std::ostringstream os;
      os << "training diverged at step " << step << " (J_align=" << ev.j_align << ", J_var=" << ev.j_var << ")";
      throw DivergenceError(os.str());
    }
    const bool log_now = cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.train_steps);
    if (log_now) {
      res.history.push_back({step, ev.j_align, ev.j_var, ev.j_hybrid, ev.accuracy, ev.mean_kl, ev.usage});
    }
    if (observe) observe(step, res);
    const GradientTable& g = *ev.grads;
    adam_step(theta, g.theta, st_theta, cfg.adam);
    unpack_theta(res.model, theta);
    if (!phi.empty()) {
      adam_step(phi, g.phi, st_phi, cfg.adam);
      unpack_phi(res.model, phi);
    }
    if (train_head) {
      adam_step(headp, g.head, st_head, cfg.adam);
      unpack_head(res.head, headp);
    }
  }
  if (observe) observe(cfg.train_steps, res);
  return res;
}

std::string history_to_csv(const std::vector<HistoryRow>& history) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "step,j_align,j_var,j_hybrid,accuracy,max_component_usage";
  const Eigen::Index Z = history.empty() ? 0 : history.front().usage.size();
  for (Eigen::Index z = 0; z < Z; ++z) os << ",usage_" << z;
  os << '\n';
  for (const auto& r : history) {
    os << r.step << ',' << r.j_align << ',' << r.j_var << ',' << r.j_hybrid << ',' << r.accuracy << ','
       << r.max_usage();
    for (Eigen::Index z = 0; z < Z; ++z) os << ',' << r.usage[z];
    os << '\n';
  }
  return os.str();
}

}  // namespace svflow
