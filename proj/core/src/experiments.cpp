#include "svflow/experiments.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

namespace svflow {

using json = nlohmann::json;

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::toy2d: return "toy2d";
    case Experiment::vmf: return "vmf";
    case Experiment::coupling: return "coupling";
    case Experiment::shuffle: return "shuffle";
    case Experiment::kernel: return "kernel";
  }
  return "?";
}

Experiment experiment_from_string(const std::string& s) {
  for (Experiment e : {Experiment::toy2d, Experiment::vmf, Experiment::coupling, Experiment::shuffle,
                       Experiment::kernel}) {
    if (to_string(e) == s) return e;
  }
  throw ConfigError("unknown experiment '" + s + "'");
}

namespace {

json task_json(const SequenceTaskConfig& t) {
  return {{"vocab", t.vocab},   {"length", t.length},
          {"dim", t.dim},       {"window", t.window},
          {"train_sequences", t.train_sequences}, {"test_sequences", t.test_sequences}};
}

void task_from(const json& j, SequenceTaskConfig& t) {
  t.vocab = j.at("vocab");
  t.length = j.at("length");
  t.dim = j.at("dim");
  t.window = j.at("window");
  t.train_sequences = j.at("train_sequences");
  t.test_sequences = j.at("test_sequences");
}

json params_json(const ExperimentConfig& c) {
  switch (c.experiment) {
    case Experiment::toy2d: {
      const auto& p = c.toy2d;
      return {{"num_points", p.num_points},
              {"noise", p.noise},
              {"num_components", p.num_components},
              {"num_steps", p.num_steps},
              {"step_size", p.step_size},
              {"batch_size", p.batch_size},
              {"lr", p.lr},
              {"train_steps", p.train_steps},
              {"log_every", p.log_every},
              {"betas", p.betas},
              {"var_only_run", p.var_only_run},
              {"grid_resolution", p.grid_resolution},
              {"snapshot_points", p.snapshot_points}};
    }
    case Experiment::vmf: {
      const auto& p = c.vmf;
      return {{"dim", p.dim},
              {"num_clusters", p.num_clusters},
              {"kappa_data", p.kappa_data},
              {"num_points", p.num_points},
              {"test_fraction", p.test_fraction},
              {"num_components", p.num_components},
              {"num_steps", p.num_steps},
              {"step_size", p.step_size},
              {"beta", p.beta},
              {"batch_size", p.batch_size},
              {"lr", p.lr},
              {"train_steps", p.train_steps},
              {"log_every", p.log_every},
              {"fd_probe_points", p.fd_probe_points},
              {"fd_tolerance", p.fd_tolerance}};
    }
    case Experiment::coupling: {
      const auto& p = c.coupling;
      return {{"task", task_json(p.task)},
              {"num_slots", p.num_slots},
              {"num_heads", p.num_heads},
              {"init_scale", p.init_scale},
              {"train_steps", p.train_steps},
              {"batch_sequences", p.batch_sequences},
              {"optimizer", p.optimizer},
              {"lr", p.lr},
              {"balance_weight", p.balance_weight},
              {"log_every", p.log_every}};
    }
    case Experiment::shuffle: {
      const auto& p = c.shuffle;
      return {{"task", task_json(p.task)},
              {"layout", p.layout},
              {"num_heads", p.num_heads},
              {"init_scale", p.init_scale},
              {"train_steps", p.train_steps},
              {"batch_sequences", p.batch_sequences},
              {"lr", p.lr},
              {"proportions", p.proportions},
              {"deep_fraction", p.deep_fraction},
              {"ece_bins", p.ece_bins}};
    }
    case Experiment::kernel: {
      const auto& p = c.kernel;
      return {{"key_counts", p.key_counts},
              {"num_seeds", p.num_seeds},
              {"dim", p.dim},
              {"key_kappa", p.key_kappa},
              {"qk_scale", p.qk_scale},
              {"quad_resolution", p.quad_resolution},
              {"slope_target", p.slope_target},
              {"slope_tolerance", p.slope_tolerance}};
    }
  }
  return json::object();
}

void params_from(const json& j, ExperimentConfig& c) {
  switch (c.experiment) {
    case Experiment::toy2d: {
      auto& p = c.toy2d;
      p.num_points = j.at("num_points");
      p.noise = j.at("noise");
      p.num_components = j.at("num_components");
      p.num_steps = j.at("num_steps");
      p.step_size = j.at("step_size");
      p.batch_size = j.at("batch_size");
      p.lr = j.at("lr");
      p.train_steps = j.at("train_steps");
      p.log_every = j.at("log_every");
      p.betas = j.at("betas").get<std::vector<double>>();
      p.var_only_run = j.at("var_only_run");
      p.grid_resolution = j.at("grid_resolution");
      p.snapshot_points = j.at("snapshot_points");
      break;
    }
    case Experiment::vmf: {
      auto& p = c.vmf;
      p.dim = j.at("dim");
      p.num_clusters = j.at("num_clusters");
      p.kappa_data = j.at("kappa_data");
      p.num_points = j.at("num_points");
      p.test_fraction = j.at("test_fraction");
      p.num_components = j.at("num_components");
      p.num_steps = j.at("num_steps");
      p.step_size = j.at("step_size");
      p.beta = j.at("beta");
      p.batch_size = j.at("batch_size");
      p.lr = j.at("lr");
      p.train_steps = j.at("train_steps");
      p.log_every = j.at("log_every");
      p.fd_probe_points = j.at("fd_probe_points");
      p.fd_tolerance = j.at("fd_tolerance");
      break;
    }
    case Experiment::coupling: {
      auto& p = c.coupling;
      task_from(j.at("task"), p.task);
      p.num_slots = j.at("num_slots");
      p.num_heads = j.at("num_heads");
      p.init_scale = j.at("init_scale");
      p.train_steps = j.at("train_steps");
      p.batch_sequences = j.at("batch_sequences");
      p.optimizer = j.at("optimizer");
      p.lr = j.at("lr");
      p.balance_weight = j.at("balance_weight");
      p.log_every = j.at("log_every");
      break;
    }
    case Experiment::shuffle: {
      auto& p = c.shuffle;
      task_from(j.at("task"), p.task);
      p.layout = j.at("layout");
      p.num_heads = j.at("num_heads");
      p.init_scale = j.at("init_scale");
      p.train_steps = j.at("train_steps");
      p.batch_sequences = j.at("batch_sequences");
      p.lr = j.at("lr");
      p.proportions = j.at("proportions").get<std::vector<double>>();
      p.deep_fraction = j.at("deep_fraction");
      p.ece_bins = j.at("ece_bins");
      break;
    }
    case Experiment::kernel: {
      auto& p = c.kernel;
      p.key_counts = j.at("key_counts").get<std::vector<std::size_t>>();
      p.num_seeds = j.at("num_seeds");
      p.dim = j.at("dim");
      p.key_kappa = j.at("key_kappa");
      p.qk_scale = j.at("qk_scale");
      p.quad_resolution = j.at("quad_resolution");
      p.slope_target = j.at("slope_target");
      p.slope_tolerance = j.at("slope_tolerance");
      break;
    }
  }
}

json full_json(const ExperimentConfig& c) {
  return {{"experiment", to_string(c.experiment)},
          {"seed", c.seed},
          {"out", c.out_dir},
          {"threads", c.threads},
          {"params", params_json(c)}};
}

bool compatible(const json& def, const json& v) {
  if (def.is_number_unsigned()) return v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0);
  if (def.is_number()) return v.is_number();
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (def.is_array()) {
    if (!v.is_array()) return false;
    if (def.empty()) return true;
    for (const auto& e : v) {
      if (!compatible(def.front(), e)) return false;
    }
    return true;
  }
  if (def.is_object()) return v.is_object();
  return false;
}

// Overlays `src` on `dst`, refusing keys that `dst` does not already have.
void merge_strict(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) throw ConfigError("config: unknown key '" + key + "'");
    json& d = dst[it.key()];
    if (d.is_object()) {
      merge_strict(d, it.value(), key);
    } else {
      if (!compatible(d, it.value())) throw ConfigError("config: wrong type for '" + key + "'");
      d = it.value();
    }
  }
}

ExperimentConfig from_full_json(const json& j) {
  ExperimentConfig c = default_config(experiment_from_string(j.at("experiment").get<std::string>()));
  c.seed = j.at("seed");
  c.out_dir = j.at("out");
  c.threads = j.at("threads");
  params_from(j.at("params"), c);
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

ExperimentConfig default_config(Experiment e) {
  ExperimentConfig c;
  c.experiment = e;
  return c;
}

ExperimentConfig parse_config(const std::string& json_text) {
  json in;
  try {
    in = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!in.is_object()) throw ConfigError("config: top level must be an object");
  if (!in.contains("experiment") || !in["experiment"].is_string()) {
    throw ConfigError("config: missing string field 'experiment'");
  }
  json full = full_json(default_config(experiment_from_string(in["experiment"].get<std::string>())));
  merge_strict(full, in, "");
  ExperimentConfig c = from_full_json(full);
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(read_file(path)); }

void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  if (key == "experiment") throw ConfigError("override: the experiment cannot be changed");

  // Build a nested patch {"params": {"a": {"b": value}}} or {"seed": value}.
  json full = full_json(cfg);
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  const bool top = full.contains(parts.front()) && parts.front() != "params";
  json patch = value;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  if (!top && parts.front() != "params") patch = json{{"params", patch}};
  merge_strict(full, patch, "");
  ExperimentConfig next = from_full_json(full);
  validate(next);
  cfg = next;
}

void validate(const ExperimentConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  auto task_ok = [&](const SequenceTaskConfig& t) {
    need(t.vocab >= 2, "task.vocab must be ≥ 2");
    need(t.dim >= 4, "task.dim must be ≥ 4");
    need(t.length >= 2, "task.length must be ≥ 2");
    need(t.train_sequences >= 1 && t.test_sequences >= 1, "task needs train and test sequences");
  };
  switch (c.experiment) {
    case Experiment::toy2d: {
      const auto& p = c.toy2d;
      need(p.num_points >= 2 && p.noise >= 0.0, "toy2d dataset");
      need(p.num_components >= 1 && p.num_steps >= 1 && p.step_size > 0.0, "toy2d model shape");
      need(p.batch_size >= 1 && p.train_steps >= 1 && p.lr > 0.0, "toy2d schedule");
      for (double b : p.betas) need(b >= 0.0 && std::isfinite(b), "toy2d betas must be finite and ≥ 0");
      need(!p.betas.empty() || p.var_only_run, "toy2d has no runs");
      need(p.grid_resolution >= 2, "toy2d grid_resolution must be ≥ 2");
      break;
    }
    case Experiment::vmf: {
      const auto& p = c.vmf;
      need(p.dim >= 4 && p.dim <= 64, "vmf dim must lie in [4, 64]");
      need(p.num_clusters >= 2 && p.kappa_data > 0.0, "vmf dataset");
      need(p.test_fraction > 0.0 && p.test_fraction < 1.0, "vmf test_fraction must lie in (0, 1)");
      need(p.num_components >= 1 && p.num_steps >= 1 && p.step_size > 0.0, "vmf model shape");
      need(p.beta >= 0.0 && p.lr > 0.0 && p.batch_size >= 1 && p.train_steps >= 2, "vmf schedule");
      need(p.fd_probe_points >= 1 && p.fd_tolerance > 0.0, "vmf fd check");
      break;
    }
    case Experiment::coupling: {
      const auto& p = c.coupling;
      task_ok(p.task);
      need(p.num_slots >= 2 && p.num_heads >= 1, "coupling needs ≥ 2 slots and ≥ 1 head");
      need(p.optimizer == "sgd" || p.optimizer == "adam", "coupling optimizer must be sgd or adam");
      need(p.lr > 0.0 && p.train_steps >= 1 && p.batch_sequences >= 1, "coupling schedule");
      need(p.balance_weight > 0.0, "coupling balance_weight must be positive");
      break;
    }
    case Experiment::shuffle: {
      const auto& p = c.shuffle;
      task_ok(p.task);
      need(!p.layout.empty() && p.layout.find_first_not_of("a") == std::string::npos,
           "shuffle layout must be context attention layers ('a') only");
      need(p.layout.size() >= 3, "shuffle needs ≥ 3 layers to compare depth");
      need(p.lr > 0.0 && p.train_steps >= 1 && p.batch_sequences >= 1, "shuffle schedule");
      need(!p.proportions.empty(), "shuffle proportions are empty");
      for (double q : p.proportions) need(q > 0.0 && q < 1.0, "shuffle proportions must lie in (0, 1)");
      need(p.deep_fraction > 0.0 && p.deep_fraction <= 0.5, "shuffle deep_fraction must lie in (0, 0.5]");
      need(p.ece_bins >= 1, "shuffle ece_bins must be ≥ 1");
      break;
    }
    case Experiment::kernel: {
      const auto& p = c.kernel;
      need(p.dim == 2 || p.dim == 3, "kernel dim must be 2 or 3");
      need(p.key_counts.size() >= 2, "kernel needs ≥ 2 key counts");
      for (std::size_t n : p.key_counts) need(n >= 1, "kernel key counts must be ≥ 1");
      need(p.num_seeds >= 1 && p.quad_resolution >= 4, "kernel seeds / quadrature");
      need(p.key_kappa >= 0.0 && p.slope_tolerance > 0.0, "kernel sampler / tolerance");
      break;
    }
  }
}

std::string config_to_json(const ExperimentConfig& cfg) { return full_json(cfg).dump(2); }

unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SVFLOW_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

void require_oracles(const std::vector<OracleCheck>& checks, const std::string& runner) {
  std::string failed;
  for (const auto& c : checks) {
    if (!c.pass) {
      std::ostringstream os;
      os << (failed.empty() ? "" : "; ") << c.name << " = " << c.value << " (tolerance " << c.tolerance << ")";
      failed += os.str();
    }
  }
  if (!failed.empty()) throw DivergenceError(runner + ": oracle check failed: " + failed);
}

double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  require_same_size(x.size(), y.size(), "log_log_slope: sizes");
  if (x.size() < 2) throw PreconditionError("log_log_slope: need ≥ 2 points");
  double mx = 0.0, my = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0 && y[i] > 0.0)) throw DomainError("log_log_slope: values must be positive");
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0.0) throw DegenerateError("log_log_slope: constant x");
  return sxy / sxx;
}

bool ShuffleResult::monotone() const {
  for (std::size_t b = 1; b < 4; ++b) {
    if (!(delta_log_ppl[b] > delta_log_ppl[b - 1])) return false;
  }
  return true;
}

bool KernelResult::slope_ok(double target, double tolerance) const {
  return std::abs(slope - target) <= tolerance;
}

}  // namespace svflow
