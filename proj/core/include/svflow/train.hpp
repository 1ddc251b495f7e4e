#pragma once

#include "svflow/common.hpp"
#include "svflow/data.hpp"
#include "svflow/flow.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace svflow {

/// Softmax classifier on the terminal state: p(y|x) = softmax(Wᵀx + b).
struct ClassifierHead {
  Mat W;     // d × num_classes
  Vec bias;  // num_classes

  ClassifierHead() = default;
  ClassifierHead(std::size_t dim, std::size_t num_classes);

  std::size_t dim() const { return static_cast<std::size_t>(W.rows()); }
  std::size_t num_classes() const { return static_cast<std::size_t>(W.cols()); }
  Vec logits(const Vec& x) const { return W.transpose() * x + bias; }
};

/// J_hybrid = align_weight · J_align + β · J_var.
struct ObjectiveConfig {
  double beta = 0.0;
  /// J_var only (the β → ∞ limit): align term dropped, J_var weighted by 1.
  bool var_only = false;
  /// Per-step weights λ_ℓ, mean 1. Empty means λ ≡ 1.
  std::vector<double> lambda_weights;
  StepMode mode = StepMode::euclidean;

  static ObjectiveConfig hybrid(double beta, StepMode mode = StepMode::euclidean);
  static ObjectiveConfig variational_only(StepMode mode = StepMode::euclidean);

  double align_weight() const { return var_only ? 0.0 : 1.0; }
  double var_weight() const { return var_only ? 1.0 : beta; }
  double lambda(std::size_t step) const { return lambda_weights.empty() ? 1.0 : lambda_weights[step]; }
  void validate(std::size_t num_steps) const;
};

/// ∂J_align/∂x^ℓ and the variational signals for one sample.
struct SampleSignals {
  std::vector<Vec> delta;      // ℓ = 0..L, δ_L is the classifier gradient
  std::vector<Vec> var_total;  // ℓ = 0..L, Σ_{k ≥ ℓ} ∂J_var^k/∂x^ℓ (zero at L)
  /// gamma[k][ℓ] = ∂J_var^k/∂x^ℓ for ℓ ≤ k; only filled on request.
  std::vector<std::vector<Vec>> gamma;
  Trajectory trajectory;
};

struct ErrorSignals {
  std::vector<SampleSignals> samples;
  bool has_gamma = false;
};

/// Per-component advantages at one (sample, step).
struct AdvantageSet {
  Vec A;               // task advantage (∂J_align/∂v)ᵀ s_z
  Vec R;               // self variational advantage log q/p
  std::vector<Vec> B;  // future variational advantages, one per k > ℓ
  Vec eta;             // total, centered under q
  Vec q;
};

/// Subtract the q-expectation.
Vec centered(const Vec& a, const Vec& q);

/// Gradients in the training parameterization (see pack_theta).
struct GradientTable {
  std::vector<double> theta;
  std::vector<double> phi;
  std::vector<double> head;
};

struct HybridEvaluation {
  double j_align = 0.0;
  double j_var = 0.0;
  double j_hybrid = 0.0;
  double accuracy = 0.0;
  double mean_kl = 0.0;  // unweighted mean over samples and steps of KL(q‖p)
  Vec usage;             // E over samples and steps of q(z|x)
  std::optional<GradientTable> grads;
};

// ---------------------------------------------------------------------------
// Parameter packing. Gaussian θ and untied φ are used as stored. vMF θ
// blocks become [u (d), ρ] with μ = u/‖u‖ and κ = softplus(ρ).

std::vector<double> pack_theta(const FlowModel& m);
void unpack_theta(FlowModel& m, std::span<const double> packed);
std::vector<double> pack_phi(const FlowModel& m);
void unpack_phi(FlowModel& m, std::span<const double> packed);
/// Per class c: [W[:, c] (d), b_c].
std::vector<double> pack_head(const ClassifierHead& head);
void unpack_head(ClassifierHead& head, std::span<const double> packed);

// ---------------------------------------------------------------------------
// Objectives

std::vector<Trajectory> integrate_batch(const FlowModel& m, const LabeledPoints& batch, StepMode mode);

/// Mean over samples and steps of λ_ℓ KL(q_ℓ ‖ p_ℓ) along the given trajectories.
double j_var(const FlowModel& m, const std::vector<Trajectory>& trajectories, const ObjectiveConfig& obj = {});

/// Mean of −log softmax(Wᵀx_L + b)_y.
double j_align(const FlowModel& m, const ClassifierHead& head, const LabeledPoints& batch,
               StepMode mode = StepMode::euclidean);

/// Forward + (optionally) analytic reverse pass over a batch.
HybridEvaluation evaluate_hybrid(const FlowModel& m, const ClassifierHead& head, const LabeledPoints& batch,
                                 const ObjectiveConfig& obj, bool with_gradients, unsigned threads = 1);

/// Per-sample error signals; `full_gamma` also fills every γ_{k,ℓ} (O(L²)).
ErrorSignals backward_signals(const FlowModel& m, const ClassifierHead& head, const LabeledPoints& batch,
                              const ObjectiveConfig& obj, bool full_gamma = false);

/// Advantages for one sample and step. B is filled only when the signals
/// carry the full γ table; η uses the running sum either way.
AdvantageSet advantages(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj,
                        std::size_t sample, std::size_t step);

/// ∂J_hybrid/∂φ assembled as Σ_z q η ∂g_z/∂φ (untied models only).
std::vector<double> grad_phi(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj);

/// ∂J_hybrid/∂θ: flow-path term plus β-weighted consistency term. For tied
/// models this also carries the posterior path through the shared θ.
std::vector<double> grad_theta(const FlowModel& m, const ErrorSignals& signals, const ObjectiveConfig& obj);

/// Central differences of `loss` around `params`, one coordinate at a time.
std::vector<double> finite_diff_oracle(const std::function<double(std::span<const double>)>& loss,
                                       std::span<const double> params, double h = 1e-5);

/// J_hybrid as a function of the packed θ / φ / head vectors, for gradient checks.
double hybrid_loss_theta(FlowModel m, const ClassifierHead& head, const LabeledPoints& batch,
                         const ObjectiveConfig& obj, std::span<const double> theta);
double hybrid_loss_phi(FlowModel m, const ClassifierHead& head, const LabeledPoints& batch, const ObjectiveConfig& obj,
                       std::span<const double> phi);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long step = 0;
};

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  Family family = Family::gaussian;
  PosteriorMode posterior_mode = PosteriorMode::untied;
  std::size_t dim = 2;
  std::size_t num_components = 8;
  std::size_t num_steps = 100;
  double step_size = 0.01;
  std::size_t num_classes = 2;
  ObjectiveConfig objective{};
  AdamConfig adam{};
  std::size_t batch_size = 512;
  std::size_t train_steps = 10000;
  std::size_t log_every = 100;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  // Initialization scales.
  double init_mean_scale = 1.0;
  double init_log_std = std::log(0.5);
  double init_logit_scale = 0.1;
  double init_kappa = 1.0;
};

struct HistoryRow {
  std::size_t step = 0;
  double j_align = 0.0;
  double j_var = 0.0;
  double j_hybrid = 0.0;
  double accuracy = 0.0;
  double mean_kl = 0.0;
  Vec usage;

  double max_usage() const { return usage.size() ? usage.maxCoeff() : 0.0; }
};

struct TrainResult {
  FlowModel model;
  ClassifierHead head;
  std::vector<HistoryRow> history;
};

/// Initial model and head for a config (seeded).
TrainResult initialize_training(const TrainConfig& cfg, const LabeledPoints& data);

/// Called with the current state before each update (step < train_steps)
/// and once more after the last one (step == train_steps).
using TrainObserver = std::function<void(std::size_t step, const TrainResult& state)>;

/// Runs the full loop on `data` with seeded uniform minibatches. Aborts with
/// DivergenceError if a loss turns NaN or exceeds 1e6 in magnitude.
TrainResult train_run(const TrainConfig& cfg, const LabeledPoints& data, const TrainObserver& observe = {});

/// step, j_align, j_var, j_hybrid, accuracy, max_component_usage, usage_0..usage_{Z-1}
std::string history_to_csv(const std::vector<HistoryRow>& history);

}  // namespace svflow
