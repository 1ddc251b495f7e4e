#pragma once

#include "svflow/data.hpp"
#include "svflow/distributions.hpp"
#include "svflow/train.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace svflow {

/// One attention head with its projections stored pre-merged:
/// QK = W_q W_kᵀ and OV = W_o W_vᵀ.
struct AttentionHead {
  Mat QK;
  Mat OV;

  std::size_t dim() const { return static_cast<std::size_t>(QK.rows()); }
  void validate() const;
};

struct MhaLayer {
  std::vector<AttentionHead> heads;
  Vec head_weights;  // q(h|x); empty means uniform

  std::size_t num_heads() const { return heads.size(); }
  /// head_weights, or the uniform distribution when unset.
  ProbVector head_distribution() const;
  void validate() const;
};

enum class MhaForm { literal, svflow };

/// Single-hidden-layer expert e(x) = W2 tanh(W1 x + b1) + b2.
struct Expert {
  Mat W1;  // hidden × d
  Vec b1;
  Mat W2;  // d × hidden
  Vec b2;

  Vec operator()(const Vec& x) const;
};

struct MoeLayer {
  std::vector<Expert> experts;
  Mat gate_W;  // E × d
  Vec gate_b;  // E
  bool ema_center = false;
  double ema_decay = 0.99;
  std::vector<Vec> ema_mean;  // one running mean per expert

  std::size_t num_experts() const { return experts.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(gate_W.cols()); }
  void validate() const;
};

struct MeanDirection {
  Vec mu;
  double kappa = 0.0;
};

/// (w/‖w‖, ‖w‖). The zero vector maps to (e1, 0).
MeanDirection mean_direction_decompose(const Vec& w);

/// softmax over z of x_qᵀ QK k_z.
ProbVector attention_posterior(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys);

/// Σ_z q(z|x_q) κ'_z μ'_z with κ'_z μ'_z = OV v_z.
Vec head_field(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys,
               const std::vector<Vec>& values);

/// Standard single-head attention written with matrix products:
/// OV · (Vᵀ softmax(K QKᵀ x_q)).
Vec head_literal(const AttentionHead& head, const Vec& x_q, const std::vector<Vec>& keys,
                 const std::vector<Vec>& values);

/// literal: Σ_h head_literal. svflow: H · Σ_h q(h|x_q) head_field, so the
/// two agree under uniform head weights.
Vec mha_forward(const MhaLayer& layer, const Vec& x_q, const std::vector<Vec>& keys, const std::vector<Vec>& values,
                MhaForm form);

struct MoeOutput {
  Vec output;
  ProbVector routing;
};

/// Gated expert sum. With ema_center on, each expert output has its running
/// mean subtracted; the means are then updated with the batch mean of the raw
/// expert outputs (one update per call, in input order).
std::vector<MoeOutput> moe_forward_batch(MoeLayer& layer, const std::vector<Vec>& xs, bool update_ema = true);
MoeOutput moe_forward(MoeLayer& layer, const Vec& x, bool update_ema = true);

/// Σ_z f_z P_z with f_z the fraction of argmax routings on z (ties to the
/// lowest index) and P_z the mean routing probability.
double load_balance_loss(const std::vector<ProbVector>& routings);

/// rms_normalize(x + f(x)) for x on the √d sphere.
Vec transformer_layer(const Vec& x, const std::function<Vec(const Vec&)>& f);

/// Key distribution on the unit circle (dim 2) or the unit sphere S² (dim 3).
struct KeySampler {
  std::size_t dim = 3;
  std::function<Vec(std::mt19937_64&)> sample;
  std::function<double(const Vec&)> density;  // w.r.t. surface measure
};

/// vMF(μ, κ) keys on S^{d−1}, d ∈ {2, 3}.
KeySampler vmf_key_sampler(const Vec& mu, double kappa);

struct KernelLimitResult {
  double error = 0.0;                // mean over seeds
  std::vector<double> seed_errors;
  double reference = 0.0;            // quadrature value of the kernel-smoothed mean
  bool quadrature_converged = true;  // resolution n vs 2n agree
};

/// |Σ_z f(k_z) q(z|x_q) − ∫ f ψ p_key / ∫ ψ p_key| with ψ(x, k) = exp(xᵀ QK k)
/// and N keys drawn from the sampler, averaged over `num_seeds` key sets.
KernelLimitResult kernel_limit_error(const AttentionHead& head, const Vec& x_q, const KeySampler& sampler,
                                     const std::function<double(const Vec&)>& f, std::size_t N,
                                     std::size_t quad_resolution, std::size_t num_seeds = 1,
                                     std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Toy spherical transformer

/// Attention layers read their keys and values either from the current
/// context window or, when `memory` has rows, from a learned memory whose
/// rows serve as both keys and values.
struct TransformerLayer {
  enum class Kind { attention, moe };
  Kind kind = Kind::attention;
  MhaLayer mha;
  Mat memory;  // slots × d
  MoeLayer moe;

  bool uses_memory() const { return kind == Kind::attention && memory.rows() > 0; }
  /// Number of routing components: experts or memory slots (0 for context attention).
  std::size_t routing_size() const;
};

/// Positions n attend to keys at positions [n − window, n]. States live on the
/// √d sphere; attention, gating and experts read the unit direction x/√d.
struct ToyTransformer {
  std::size_t dim = 0;
  std::size_t window = 8;
  std::vector<TransformerLayer> layers;
  Mat head_W;  // classes × d
  Vec head_b;

  std::size_t num_classes() const { return static_cast<std::size_t>(head_W.rows()); }
  void validate() const;
};

struct ToyTransformerShape {
  std::size_t dim = 16;
  std::size_t window = 8;
  std::size_t num_classes = 8;
  std::size_t num_heads = 2;
  /// Layer kinds in order: 'a' context attention, 'm' memory attention, 'e' MoE.
  std::string layout = "aa";
  std::size_t num_slots = 8;    // memory rows or experts
  double init_scale = 0.5;
};

ToyTransformer make_toy_transformer(const ToyTransformerShape& shape, std::uint64_t seed);

/// Per-position record of one forward pass.
struct LayerTrace {
  // Context attention: per head, per position, the posterior over the key
  // window and the matching vMF conditional log densities of the query.
  std::vector<std::vector<Vec>> q;     // [head][position]
  std::vector<std::vector<Vec>> logp;  // [head][position]
  // Memory attention (head 0) or MoE gate routing per position.
  std::vector<Vec> routing;
};

struct ForwardTrace {
  std::vector<std::vector<Vec>> states;  // [layer + 1][position], on the √d sphere
  std::vector<LayerTrace> layers;
  std::vector<Vec> class_probs;          // [position]
};

/// Forward pass over embeddings (unit vectors). EMA means are read, not updated.
ForwardTrace transformer_forward(const ToyTransformer& model, const std::vector<Vec>& embeddings,
                                 bool record_metrics = false);

struct TransformerObjective {
  double balance_weight = 0.0;  // weight of load_balance_loss on routing layers
};

struct TransformerLoss {
  double task = 0.0;     // mean NLL over positions with a target
  double balance = 0.0;  // Σ over routing layers of load_balance_loss
  double total = 0.0;
  std::size_t counted = 0;
  std::size_t correct = 0;
};

/// Loss over a batch of sequences, with its gradient written into `grad`
/// (same shape as the model, overwritten) when non-null.
TransformerLoss transformer_loss(const ToyTransformer& model, const std::vector<std::vector<Vec>>& inputs,
                                 const std::vector<std::vector<int>>& targets, const TransformerObjective& obj,
                                 ToyTransformer* grad = nullptr);

/// Flat parameter views, in a fixed layer order.
std::vector<double> pack_transformer(const ToyTransformer& model);
void unpack_transformer(ToyTransformer& model, const std::vector<double>& params);

enum class TransformerOptimizer { adam, sgd };

struct TransformerTrainConfig {
  std::size_t steps = 1500;
  std::size_t batch_sequences = 8;
  std::size_t log_every = 50;
  std::uint64_t seed = 0;
  TransformerOptimizer optimizer = TransformerOptimizer::adam;
  AdamConfig adam{};
  // Plain SGD keeps gradient magnitudes intact, so rarely routed components
  // really do learn slowly; Adam rescales that away.
  double sgd_lr = 0.5;
  TransformerObjective objective{};
};

struct TransformerHistoryRow {
  std::size_t step = 0;
  double task = 0.0;
  double balance = 0.0;
  double accuracy = 0.0;
  /// kl_to_uniform of the batch-mean routing, one entry per routing layer.
  std::vector<double> concentration;
};

/// Minibatch Adam on `model` over sequences drawn uniformly from the corpus.
std::vector<TransformerHistoryRow> train_transformer(ToyTransformer& model, const SequenceCorpus& corpus,
                                                     const TransformerTrainConfig& cfg);

/// Per-position routing of every routing layer, averaged over positions.
std::vector<Vec> mean_routing(const ToyTransformer& model, const std::vector<std::vector<Vec>>& inputs);

std::string transformer_to_json(const ToyTransformer& model);
ToyTransformer transformer_from_json(const std::string& text);

}  // namespace svflow
