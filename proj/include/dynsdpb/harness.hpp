// Sweep runner and run aggregation on top of run_experiment.
#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynsdpb/experiment.hpp"

namespace dynsdpb {

struct SweepRow {
  double alpha = 0.0;
  double tau = 0.0;
  std::uint64_t seed = 0;
  double best_accuracy = 0.0;
};

inline std::string format_g(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline std::size_t sweep_parallelism(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("DYNSDPB_THREADS")) {
    const long v = std::atol(env);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

// One run per (alpha, tau) grid cell; duplicate cells are dropped with a
// warning. Rows come back in grid order regardless of scheduling.
inline std::vector<SweepRow> run_sweep(const RunConfig& base,
                                       const std::vector<double>& alphas,
                                       const std::vector<double>& taus,
                                       std::size_t parallel,
                                       std::ostream& warnings = std::cerr) {
  if (alphas.empty() || taus.empty())
    throw std::invalid_argument("sweep: alpha and tau grids must be nonempty");
  std::vector<std::pair<double, double>> cells;
  std::set<std::pair<double, double>> seen;
  for (double a : alphas)
    for (double t : taus) {
      if (!seen.insert({a, t}).second) {
        warnings << "sweep: duplicate cell (alpha=" << a << ", tau=" << t
                 << ") skipped\n";
        continue;
      }
      cells.emplace_back(a, t);
    }

  std::vector<SweepRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      RunConfig cfg = base;
      cfg.alpha = cells[i].first;
      cfg.tau = cells[i].second;
      cfg.out_dir = base.out_dir + "/cell_a" + format_g(cfg.alpha) + "_t" +
                    format_g(cfg.tau);
      RunSummary s = run_experiment(cfg);
      rows[i] = {cfg.alpha, cfg.tau, cfg.seed, s.best_accuracy};
    }
  };
  const std::size_t nthreads = std::min(sweep_parallelism(parallel), cells.size());
  if (nthreads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < nthreads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("sweep: cannot write " + path);
  f << "alpha,tau,seed,best_accuracy\n";
  f.precision(17);
  for (const auto& r : rows)
    f << r.alpha << "," << r.tau << "," << r.seed << "," << r.best_accuracy << "\n";
}

// ---------------------------------------------------------------------------
// Report

struct ReportRow {
  std::string mode;
  std::size_t n = 0;
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
};

inline nlohmann::json load_summary(const std::string& run_dir) {
  std::ifstream f(run_dir + "/summary.json");
  if (!f) throw std::runtime_error("report: no summary.json in " + run_dir);
  nlohmann::json j;
  f >> j;
  return j;
}

// Per-mode mean and sample standard deviation of best accuracy over seeds.
inline std::vector<ReportRow> aggregate_runs(const std::vector<std::string>& run_dirs,
                                             std::string* task_out = nullptr) {
  if (run_dirs.empty()) throw std::invalid_argument("report: no run directories");
  std::map<std::string, std::vector<double>> by_mode;
  std::string task;
  for (const auto& dir : run_dirs) {
    auto j = load_summary(dir);
    const std::string t = j.at("task");
    if (task.empty())
      task = t;
    else if (task != t)
      throw std::runtime_error("report: refusing to mix tasks '" + task + "' and '" + t +
                               "' (run " + dir + ")");
    by_mode[j.at("mode")].push_back(j.at("best_accuracy"));
  }
  if (task_out) *task_out = task;
  std::vector<ReportRow> rows;
  for (const auto& [mode, accs] : by_mode) {
    ReportRow r;
    r.mode = mode;
    r.n = accs.size();
    for (double a : accs) r.mean_accuracy += a;
    r.mean_accuracy /= double(accs.size());
    if (accs.size() > 1) {
      double s = 0.0;
      for (double a : accs) s += (a - r.mean_accuracy) * (a - r.mean_accuracy);
      r.std_accuracy = std::sqrt(s / double(accs.size() - 1));
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

inline void write_comparison_csv(const std::vector<ReportRow>& rows,
                                 const std::string& task, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("report: cannot write " + path);
  f << "mode,task,n,mean_accuracy,std_accuracy\n";
  f.precision(17);
  for (const auto& r : rows)
    f << r.mode << "," << task << "," << r.n << "," << r.mean_accuracy << ","
      << r.std_accuracy << "\n";
}

// Columnar gradient-norm trajectories: iteration plus one column per layer.
inline void write_gradnorm_csv(const std::string& run_dir, const std::string& path) {
  std::ifstream f(run_dir + "/metrics.jsonl");
  if (!f) throw std::runtime_error("report: no metrics.jsonl in " + run_dir);
  std::vector<std::pair<std::size_t, std::map<std::string, double>>> samples;
  std::set<std::string> layers;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.value("type", "") != "step" || !j.contains("grad_norms")) continue;
    std::map<std::string, double> norms = j.at("grad_norms");
    for (const auto& [k, _] : norms) layers.insert(k);
    samples.emplace_back(j.at("iteration").get<std::size_t>(), std::move(norms));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("report: cannot write " + path);
  out << "iteration";
  for (const auto& l : layers) out << "," << l;
  out << "\n";
  out.precision(17);
  for (const auto& [iter, norms] : samples) {
    out << iter;
    for (const auto& l : layers) {
      auto it = norms.find(l);
      out << "," << (it == norms.end() ? 0.0 : it->second);
    }
    out << "\n";
  }
}

}  // namespace dynsdpb
