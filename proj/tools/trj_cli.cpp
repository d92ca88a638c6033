#include "trj/experiment.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::size_t threads = 1;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, Common& c, bool with_threads) {
  cmd->add_option("config", c.config, "JSON experiment config")->required()->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Override the config seed");
  cmd->add_option("--out-dir", c.out_dir, "Override the output directory");
  if (with_threads) cmd->add_option("--threads", c.threads, "Worker threads for chains and replicates")->check(CLI::PositiveNumber);
  cmd->add_flag("--dry-run", c.dry_run, "Validate and write the manifest only");
}

trj::ExperimentConfig load(const Common& c) {
  auto cfg = trj::ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  cfg.validate();
  return cfg;
}

void print_mbe(const trj::ExperimentResult& r) {
  for (const auto& [kind, est] : r.mbe) {
    std::size_t flagged = 0;
    trj::Vec mean;
    for (const auto& e : est) {
      if (!e.valid) {
        ++flagged;
        continue;
      }
      mean = mean.size() ? trj::Vec(mean + e.pi) : e.pi;
    }
    std::cout << "mbe " << kind << ":";
    if (mean.size()) {
      mean /= static_cast<double>(est.size() - flagged);
      for (Eigen::Index k = 0; k < mean.size(); ++k) std::cout << " " << mean[k];
    }
    std::cout << " (" << flagged << " flagged)\n";
  }
  for (const auto& [kind, occ] : r.chain_occupancy) {
    for (std::size_t c = 0; c < occ.size(); ++c) {
      std::cout << "chain " << kind << " " << c + 1 << ":";
      for (Eigen::Index k = 0; k < occ[c].size(); ++k) std::cout << " " << occ[c][k];
      std::cout << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transport reversible jump experiments"};
  app.require_subcommand(1);
  Common run_opts, gt_opts, val_opts;
  auto* run = app.add_subcommand("run", "Run an experiment and write CSV artifacts");
  add_common(run, run_opts, true);
  auto* gt = app.add_subcommand("ground-truth", "Estimate model probabilities for the configured target");
  add_common(gt, gt_opts, false);
  auto* val = app.add_subcommand("validate", "Check a config without running it");
  val->add_option("config", val_opts.config, "JSON experiment config")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  std::cout << std::setprecision(6);
  try {
    if (*val) {
      const auto cfg = trj::ExperimentConfig::load(val_opts.config);
      cfg.validate();
      std::cout << "ok " << cfg.experiment << " " << cfg.hash() << "\n";
    } else if (*run) {
      const auto cfg = load(run_opts);
      const auto res = trj::run_experiment(cfg, run_opts.threads, run_opts.dry_run);
      print_mbe(res);
      std::cout << "wrote " << res.manifest.artifacts.size() << " artifacts to " << cfg.out_dir.string() << "\n";
    } else if (*gt) {
      const auto cfg = load(gt_opts);
      const auto g = trj::run_ground_truth(cfg, gt_opts.dry_run);
      if (!gt_opts.dry_run) {
        std::cout << g.method << ":";
        for (Eigen::Index k = 0; k < g.pi.size(); ++k) std::cout << " " << g.pi[k] << " (" << g.se[k] << ")";
        std::cout << "\n";
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
