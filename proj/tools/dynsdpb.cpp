// Experiment CLI: train / sweep / gradcheck / report.
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynsdpb/gradcheck.hpp"
#include "dynsdpb/harness.hpp"

namespace {

std::vector<double> parse_list(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    out.push_back(std::stod(tok));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-distillation-from-the-previous-mini-batch training engine"};
  app.require_subcommand(1);

  bool quiet = false;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> out_override;
  app.add_flag("--quiet", quiet, "suppress progress output");
  app.add_option("--seed", seed_override, "override the run seed");
  app.add_option("--out", out_override, "override the output directory");

  // train
  auto* train = app.add_subcommand("train", "run one experiment from a config file");
  std::string train_config;
  std::optional<std::string> mode_override;
  train->add_option("--config", train_config, "path to key=value config file")
      ->required();
  train->add_option("--mode", mode_override, "override the training mode");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "grid over (alpha, tau)");
  std::string sweep_config, alphas_csv, taus_csv;
  std::size_t parallel = 0;
  sweep->add_option("--config", sweep_config, "path to key=value config file")
      ->required();
  sweep->add_option("--alphas", alphas_csv, "comma-separated alpha grid")->required();
  sweep->add_option("--taus", taus_csv, "comma-separated tau grid")->required();
  sweep->add_option("--parallel", parallel,
                    "worker threads (default: DYNSDPB_THREADS env or 1)");

  // gradcheck
  auto* gradcheck =
      app.add_subcommand("gradcheck", "finite-difference check of every op");
  double gc_tol = 1e-5;
  gradcheck->add_option("--tol", gc_tol, "relative error threshold");

  // report
  auto* report = app.add_subcommand("report", "aggregate completed runs");
  std::vector<std::string> run_dirs;
  report->add_option("--runs", run_dirs, "completed run directories")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      dynsdpb::RunConfig cfg = dynsdpb::load_config(train_config);
      if (mode_override) cfg.mode = dynsdpb::mode_from_name(*mode_override);
      if (seed_override) cfg.seed = *seed_override;
      if (out_override) cfg.out_dir = *out_override;
      auto summary = dynsdpb::run_experiment(cfg);
      if (!quiet)
        std::cout << "task=" << summary.task << " mode=" << summary.mode
                  << " seed=" << summary.seed << " iterations=" << summary.iterations
                  << " best_accuracy=" << summary.best_accuracy << "\n";
    } else if (*sweep) {
      dynsdpb::RunConfig cfg = dynsdpb::load_config(sweep_config);
      if (seed_override) cfg.seed = *seed_override;
      if (out_override) cfg.out_dir = *out_override;
      auto rows =
          dynsdpb::run_sweep(cfg, parse_list(alphas_csv), parse_list(taus_csv), parallel);
      const std::string table = cfg.out_dir + "/sweep.csv";
      dynsdpb::write_sweep_csv(rows, table);
      if (!quiet) {
        std::cout << "alpha\ttau\tseed\tbest_accuracy\n";
        for (const auto& r : rows)
          std::cout << r.alpha << "\t" << r.tau << "\t" << r.seed << "\t"
                    << r.best_accuracy << "\n";
        std::cout << "wrote " << table << "\n";
      }
    } else if (*gradcheck) {
      auto results = dynsdpb::run_gradcheck(1234, gc_tol);
      bool ok = true;
      for (const auto& r : results) {
        std::printf("%-24s max_rel_err=%.3e %s\n", r.op.c_str(), r.max_rel_err,
                    r.passed ? "ok" : "FAIL");
        ok = ok && r.passed;
      }
      if (!ok) {
        std::cerr << "gradcheck: failures above tolerance " << gc_tol << "\n";
        return 1;
      }
    } else if (*report) {
      const std::string out_dir = out_override.value_or(".");
      std::filesystem::create_directories(out_dir);
      std::string task;
      auto rows = dynsdpb::aggregate_runs(run_dirs, &task);
      dynsdpb::write_comparison_csv(rows, task, out_dir + "/comparison.csv");
      if (!quiet) {
        std::cout << "mode\tn\tmean_accuracy\tstd_accuracy\n";
        for (const auto& r : rows)
          std::cout << r.mode << "\t" << r.n << "\t" << r.mean_accuracy << "\t"
                    << r.std_accuracy << "\n";
      }
      for (std::size_t i = 0; i < run_dirs.size(); ++i) {
        const std::string path = out_dir + "/gradnorms_run" + std::to_string(i) + ".csv";
        dynsdpb::write_gradnorm_csv(run_dirs[i], path);
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
