#include "criteria.hpp"

#include "svflow/experiments.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <iomanip>
#include <iostream>
#include <optional>

using namespace svflow;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::vector<std::string> overrides;
  unsigned threads = 0;
  bool full = false;
  std::vector<int> only;
};

void print_oracles(const std::vector<OracleCheck>& checks) {
  for (const auto& c : checks) {
    std::cout << "  oracle " << (c.pass ? "ok   " : "FAIL ") << c.name << " = " << c.value << " (tolerance "
              << c.tolerance << ")\n";
  }
}

void print_files(const std::vector<std::string>& files) {
  for (const auto& f : files) std::cout << "  wrote " << f << '\n';
}

void require_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite result: ") + what);
}

ExperimentConfig build_config(Experiment e, const Options& o) {
  ExperimentConfig cfg = o.config_path.empty() ? default_config(e) : load_config(o.config_path);
  if (cfg.experiment != e) {
    throw ConfigError("config '" + o.config_path + "' is for experiment '" + to_string(cfg.experiment) +
                      "', not '" + to_string(e) + "'");
  }
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  if (o.threads > 0) cfg.threads = o.threads;
  for (const auto& a : o.overrides) apply_override(cfg, a);
  validate(cfg);
  return cfg;
}

int run_experiment(Experiment e, const Options& o) {
  const ExperimentConfig cfg = build_config(e, o);
  std::cout << std::setprecision(6);
  std::cout << "svflow-lab " << to_string(e) << " (seed " << cfg.seed << ")\n";
  switch (e) {
    case Experiment::toy2d: {
      const Toy2dResult r = run_toy2d(cfg);
      for (const auto& c : r.cells) {
        require_finite(c.mean_kl, "toy2d mean KL");
        std::cout << "  " << std::left << std::setw(10) << c.label << std::right << " accuracy " << c.accuracy
                  << "  max usage " << c.max_usage << "  mean KL(q||p) " << c.mean_kl << "  (" << c.seconds
                  << " s)\n";
      }
      print_oracles(r.oracles);
      print_files(r.files);
      break;
    }
    case Experiment::vmf: {
      const VmfRunResult r = run_vmf_flow(cfg);
      require_finite(r.test_accuracy, "vmf accuracy");
      std::cout << "  test accuracy " << r.test_accuracy << "  max |‖x‖−1| " << r.max_norm_deviation << '\n';
      print_oracles(r.oracles);
      print_files(r.files);
      break;
    }
    case Experiment::coupling: {
      const CouplingResult r = run_coupling_contrast(cfg);
      for (const auto& run : r.runs) {
        require_finite(run.final_concentration, "coupling concentration");
        std::cout << "  " << std::left << std::setw(20) << run.label << std::right << " concentration "
                  << run.final_concentration << "  accuracy " << run.test_accuracy << '\n';
      }
      print_oracles(r.oracles);
      print_files(r.files);
      break;
    }
    case Experiment::shuffle: {
      const ShuffleResult r = run_shuffle_probe(cfg);
      std::cout << "  delta logPPL per r-bin:";
      for (double v : r.delta_log_ppl) {
        require_finite(v, "shuffle delta");
        std::cout << ' ' << v;
      }
      std::cout << "\n  deep |delta(-log p)| " << r.deep_abs_delta << "  shallow " << r.shallow_abs_delta
                << "  delta ECE " << r.delta_ece << '\n';
      print_oracles(r.oracles);
      print_files(r.files);
      break;
    }
    case Experiment::kernel: {
      const KernelResult r = run_kernel_limit(cfg);
      for (std::size_t i = 0; i < r.key_counts.size(); ++i) {
        std::cout << "  N=" << r.key_counts[i] << "  error " << r.errors[i] << '\n';
      }
      require_finite(r.slope, "kernel slope");
      std::cout << "  slope " << r.slope << '\n';
      print_oracles(r.oracles);
      print_files(r.files);
      break;
    }
  }
  return 0;
}

int run_check(const Options& o) {
  bool ok = true;
  for (const auto& info : checks::criteria()) {
    if (!o.only.empty()) {
      if (std::find(o.only.begin(), o.only.end(), info.id) == o.only.end()) continue;
    } else if (!info.quick && !o.full) {
      std::cout << "SKIP  criterion " << std::setw(2) << info.id << "  " << info.title << "  (use --full)\n";
      continue;
    }
    const checks::CriterionResult r = checks::run_criterion(info.id);
    std::cout << r.line() << std::endl;
    ok = ok && r.acceptable();
  }
  if (o.only.empty()) {
    for (const auto& c : checks::run_invariants()) {
      std::cout << (c.pass ? "PASS" : "FAIL") << "  invariant  " << c.name << ": " << c.detail << '\n';
      ok = ok && c.pass;
    }
  }
  std::cout << (ok ? "check: all passed" : "check: FAILED") << std::endl;
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"svflow-lab: score-based variational flow experiments"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON experiment config");
    sub->add_option("--seed", o.seed, "RNG seed (overrides the config)");
    sub->add_option("--out", o.out_dir, "output directory for CSV files");
    sub->add_option("--override", o.overrides, "key=value config override (repeatable)");
    sub->add_option("--threads", o.threads, "worker threads (default: SVFLOW_THREADS or all cores)");
  };

  std::vector<std::pair<CLI::App*, Experiment>> experiments;
  const std::pair<const char*, Experiment> names[] = {
      {"toy2d", Experiment::toy2d},
      {"vmf", Experiment::vmf},
      {"coupling", Experiment::coupling},
      {"shuffle", Experiment::shuffle},
      {"kernel", Experiment::kernel},
  };
  const char* help[] = {"two-moons flow under J_hybrid for several β and J_var only",
                        "spherical flow on vMF clusters with gradient checks along training",
                        "routing concentration of coupled vs decoupled mixtures",
                        "prefix-shuffle probe of a trained toy transformer",
                        "kernel-smoothing limit of attention as the key count grows"};
  for (std::size_t i = 0; i < 5; ++i) {
    CLI::App* sub = app.add_subcommand(names[i].first, help[i]);
    add_common(sub);
    experiments.emplace_back(sub, names[i].second);
  }
  CLI::App* check = app.add_subcommand("check", "run the invariant and oracle suite");
  check->add_flag("--full", o.full, "include the long toy 2D training run");
  check->add_option("--criterion", o.only, "run only these criteria (1-11)")->check(CLI::Range(1, 11));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (check->parsed()) return run_check(o);
    for (const auto& [sub, e] : experiments) {
      if (sub->parsed()) return run_experiment(e, o);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
