#pragma once

#include "svflow/common.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace svflow {

inline constexpr const char* kSchemaHeader = "# svflow-lab schema v1";

enum class Experiment { toy2d, vmf, coupling, shuffle, kernel };

std::string to_string(Experiment e);
Experiment experiment_from_string(const std::string& s);

struct Toy2dConfig {
  std::size_t num_points = 2000;
  double noise = 0.06;
  std::size_t num_components = 8;
  std::size_t num_steps = 100;
  double step_size = 0.01;
  std::size_t batch_size = 512;
  double lr = 0.01;
  std::size_t train_steps = 10000;
  std::size_t log_every = 100;
  std::vector<double> betas{0.0, 0.1, 0.5};
  bool var_only_run = true;
  std::size_t grid_resolution = 41;   // ELBO and vector-field grids
  std::size_t snapshot_points = 256;  // trajectories recorded per cell
};

struct VmfRunConfig {
  std::size_t dim = 16;
  std::size_t num_clusters = 4;
  double kappa_data = 20.0;
  std::size_t num_points = 3000;
  double test_fraction = 1.0 / 3.0;
  std::size_t num_components = 4;
  std::size_t num_steps = 10;
  double step_size = 0.1;
  double beta = 0.1;
  std::size_t batch_size = 128;
  double lr = 0.01;
  std::size_t train_steps = 400;
  std::size_t log_every = 20;
  std::size_t fd_probe_points = 4;
  double fd_tolerance = 1e-5;
};

struct SequenceTaskConfig {
  std::size_t vocab = 8;
  std::size_t length = 32;
  std::size_t dim = 16;
  std::size_t window = 8;
  std::size_t train_sequences = 256;
  std::size_t test_sequences = 64;
};

struct CouplingConfig {
  SequenceTaskConfig task{};
  std::size_t num_slots = 8;
  std::size_t num_heads = 2;
  double init_scale = 0.5;
  std::size_t train_steps = 3000;
  std::size_t batch_sequences = 8;
  std::string optimizer = "sgd";  // "sgd" or "adam"
  double lr = 0.5;
  double balance_weight = 0.01;
  std::size_t log_every = 50;
};

struct ShuffleConfig {
  SequenceTaskConfig task{};
  std::string layout = "aaaaaa";
  std::size_t num_heads = 2;
  double init_scale = 0.5;
  std::size_t train_steps = 1500;
  std::size_t batch_sequences = 8;
  double lr = 0.01;
  std::vector<double> proportions{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  double deep_fraction = 1.0 / 3.0;
  std::size_t ece_bins = 15;
};

struct KernelConfig {
  std::vector<std::size_t> key_counts{64, 256, 1024, 4096};
  std::size_t num_seeds = 64;
  std::size_t dim = 3;
  double key_kappa = 2.0;
  double qk_scale = 1.0;
  std::size_t quad_resolution = 64;
  double slope_target = -0.5;
  double slope_tolerance = 0.15;
};

struct ExperimentConfig {
  Experiment experiment = Experiment::toy2d;
  std::uint64_t seed = 0;
  std::string out_dir;
  unsigned threads = 0;  // 0: SVFLOW_THREADS or hardware concurrency
  Toy2dConfig toy2d{};
  VmfRunConfig vmf{};
  CouplingConfig coupling{};
  ShuffleConfig shuffle{};
  KernelConfig kernel{};
};

/// Defaults for one experiment.
ExperimentConfig default_config(Experiment e);

/// Strict JSON: {"experiment", "seed", "out", "threads", "params": {...}}.
/// Unknown keys anywhere are rejected with ConfigError naming the key.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

/// `key=value` with key either a top-level field or a params field (e.g.
/// `train_steps=200`, `task.dim=8`). The value is parsed as JSON, falling
/// back to a plain string.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);

/// Range and consistency checks; throws ConfigError.
void validate(const ExperimentConfig& cfg);

std::string config_to_json(const ExperimentConfig& cfg);

/// Worker count: cfg.threads, else SVFLOW_THREADS, else hardware concurrency.
unsigned resolve_threads(unsigned requested);

// ---------------------------------------------------------------------------
// Runner results. Every runner also writes CSV files under out_dir when it is
// non-empty, each starting with kSchemaHeader.

struct OracleCheck {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Throws DivergenceError listing the failed oracles, if any.
void require_oracles(const std::vector<OracleCheck>& checks, const std::string& runner);

struct Toy2dCell {
  std::string label;  // "beta_0", "beta_0.1", ..., "var_only"
  double beta = 0.0;
  bool var_only = false;
  double accuracy = 0.0;     // final-step batch accuracy
  double max_usage = 0.0;    // max component usage at the final step
  double mean_kl = 0.0;      // mean trajectory KL(q ‖ p) at the final step
  double seconds = 0.0;
};

struct Toy2dResult {
  std::vector<Toy2dCell> cells;
  std::vector<OracleCheck> oracles;
  std::vector<std::string> files;
  double seconds = 0.0;  // wall time
};

struct VmfRunResult {
  double test_accuracy = 0.0;
  double max_norm_deviation = 0.0;  // over every recorded state
  double max_elbo_violation = -kInf;
  std::vector<std::size_t> fd_steps;
  std::vector<double> fd_rel_error;  // max of θ and φ per checkpoint
  std::vector<OracleCheck> oracles;
  std::vector<std::string> files;
};

struct CouplingRun {
  std::string label;  // coupled, decoupled, decoupled_balanced
  double balance_weight = 0.0;
  double final_concentration = 0.0;
  double test_accuracy = 0.0;
};

struct CouplingResult {
  std::vector<CouplingRun> runs;  // in the order above
  std::vector<OracleCheck> oracles;
  std::vector<std::string> files;
};

struct ShuffleResult {
  std::vector<double> proportions;
  std::array<double, 4> delta_log_ppl{};           // per r-bin
  std::array<std::size_t, 4> bin_tokens{};
  std::vector<std::array<double, 4>> delta_neg_log_p;  // [layer][bin]
  double deep_abs_delta = 0.0;     // mean over bins of |Δ(−log p)|, deepest layers
  double shallow_abs_delta = 0.0;  // same for the shallowest layers
  double delta_ece = 0.0;
  double baseline_log_ppl = 0.0;
  double zero_shuffle_max_delta = 0.0;  // p = 0 control
  std::vector<OracleCheck> oracles;
  std::vector<std::string> files;

  bool monotone() const;
  bool deep_dominates() const { return deep_abs_delta >= shallow_abs_delta; }
};

struct KernelResult {
  std::vector<std::size_t> key_counts;
  std::vector<double> errors;  // mean over seeds
  std::vector<std::vector<double>> seed_errors;
  double slope = 0.0;
  bool quadrature_converged = true;
  std::vector<OracleCheck> oracles;
  std::vector<std::string> files;

  bool slope_ok(double target, double tolerance) const;
};

Toy2dResult run_toy2d(const ExperimentConfig& cfg);
VmfRunResult run_vmf_flow(const ExperimentConfig& cfg);
CouplingResult run_coupling_contrast(const ExperimentConfig& cfg);
ShuffleResult run_shuffle_probe(const ExperimentConfig& cfg);
KernelResult run_kernel_limit(const ExperimentConfig& cfg);

/// Least-squares slope of log y against log x.
double log_log_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace svflow
