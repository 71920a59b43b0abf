// One full experiment: seeded data + model, epoch loop over the configured
// sampler, per-iteration metrics stream, per-epoch evaluation, artifacts.
#pragma once

#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dynsdpb/config.hpp"
#include "dynsdpb/datasets.hpp"
#include "dynsdpb/trainer.hpp"

namespace dynsdpb {

inline constexpr int kMetricsSchemaVersion = 1;

struct RunSummary {
  std::string task;
  std::string mode;
  double alpha = 0.0;
  double tau = 0.0;
  std::uint64_t seed = 0;
  std::size_t epochs_run = 0;
  std::size_t iterations = 0;
  double best_accuracy = 0.0;
  double final_accuracy = 0.0;
  double final_train_loss = 0.0;
};

namespace experiment_detail {

inline nlohmann::json step_record(const StepMetrics& m) {
  nlohmann::json j;
  j["schema_version"] = kMetricsSchemaVersion;
  j["type"] = "step";
  j["iteration"] = m.iteration;
  j["epoch"] = m.epoch;
  j["ce_loss"] = m.ce_loss;
  j["lmbc_loss"] = m.lmbc_loss;
  j["total_loss"] = m.total_loss;
  j["mean_u_over_U"] = m.mean_u_over_U;
  j["mean_d"] = m.mean_d;
  j["mean_alpha_eff"] = m.mean_alpha_eff;
  j["mean_tau_eff"] = m.mean_tau_eff;
  j["distilled"] = m.distilled;
  j["skipped_empty"] = m.skipped_empty;
  if (!m.grad_norms.empty()) j["grad_norms"] = m.grad_norms;
  return j;
}

inline nlohmann::json eval_record(std::size_t epoch, std::size_t iteration,
                                  const EvalResult& ev) {
  nlohmann::json j;
  j["schema_version"] = kMetricsSchemaVersion;
  j["type"] = "eval";
  j["epoch"] = epoch;
  j["iteration"] = iteration;
  j["accuracy"] = ev.accuracy;
  j["mean_loss"] = ev.mean_loss;
  return j;
}

template <typename Record>
void append_line(std::ofstream& out, const Record& j) {
  out << j.dump() << "\n";
}

}  // namespace experiment_detail

// Builds the per-epoch batch stream for the given mode.
inline std::vector<OverlapBatch> batches_for_epoch(const ModeTraits& traits,
                                                   std::size_t dataset_size,
                                                   std::size_t batch_size,
                                                   std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> ids(dataset_size);
  std::iota(ids.begin(), ids.end(), 0);
  if (traits.distill)
    return make_epoch_stream(std::move(ids), batch_size, traits.order, seed, epoch);
  return make_plain_stream(std::move(ids), batch_size, traits.order, seed, epoch);
}

inline RunSummary run_experiment(const RunConfig& cfg) {
  cfg.validate();
  const ModeTraits traits = traits_of(cfg.mode);
  const std::size_t epochs_total = cfg.epochs * traits.epoch_multiplier;

  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir + "/config_echo.txt");
    echo << config_echo(cfg);
  }
  std::ofstream metrics(cfg.out_dir + "/metrics.jsonl");
  if (!metrics) throw std::runtime_error("run_experiment: cannot write to " + cfg.out_dir);

  RunSummary summary;
  summary.task = cfg.task;
  summary.mode = mode_name(cfg.mode);
  summary.alpha = cfg.alpha;
  summary.tau = cfg.tau;
  summary.seed = cfg.seed;
  summary.epochs_run = epochs_total;

  std::mt19937_64 model_rng(cfg.seed);
  TrainerOptions topts;
  topts.mode = cfg.mode;
  topts.alpha = cfg.alpha;
  topts.tau = cfg.tau;
  topts.dynamic_factors = cfg.dynamic_factors;

  auto run_loop = [&](auto& trainer, auto& model, const auto& train_split,
                      const auto& test_split) {
    const std::size_t steps_per_epoch =
        batches_for_epoch(traits, train_split.size(), cfg.batch_size, cfg.seed, 0).size();
    OptimizerConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    ocfg.warmup_frac = cfg.warmup_frac;
    ocfg.total_steps = steps_per_epoch * epochs_total;
    AdamW opt(model.parameters(), ocfg);
    trainer.attach_optimizer(opt);

    std::size_t iter = 0;
    for (std::size_t epoch = 0; epoch < epochs_total; ++epoch) {
      trainer.reset_cache();  // no overlap carried across the epoch boundary
      for (const auto& batch :
           batches_for_epoch(traits, train_split.size(), cfg.batch_size, cfg.seed, epoch)) {
        trainer.options().collect_grad_norms =
            cfg.grad_norm_every > 0 && iter % cfg.grad_norm_every == 0;
        StepMetrics m = trainer.train_step(batch, epoch);
        experiment_detail::append_line(metrics, experiment_detail::step_record(m));
        summary.final_train_loss = m.total_loss;
        ++iter;
      }
      EvalResult ev = evaluate(model, test_split);
      experiment_detail::append_line(metrics,
                                     experiment_detail::eval_record(epoch, iter, ev));
      summary.best_accuracy = std::max(summary.best_accuracy, ev.accuracy);
      summary.final_accuracy = ev.accuracy;
    }
    summary.iterations = iter;
    save_checkpoint(model.parameters(), cfg.out_dir + "/checkpoint.txt");
  };

  if (!cfg.is_decoder_task()) {
    ClassificationTask task =
        cfg.task == "gaussian_blobs"
            ? gaussian_blobs(cfg.classes, cfg.input_dim, cfg.n_train, cfg.n_test,
                             cfg.label_noise, cfg.gen_seed)
            : xor_grid(cfg.n_train, cfg.n_test, cfg.gen_seed);
    ClassifierConfig mcfg{task.train.input_dim, cfg.hidden_dim, cfg.hidden_layers,
                          task.train.classes};
    ClassifierModel model(mcfg, model_rng);
    ClassifierTrainer trainer(model, task.train, topts);
    run_loop(trainer, model, task.train, task.test);
  } else {
    SequenceTask task = cfg.task == "char_reverse"
                            ? char_reverse(cfg.len_min, cfg.len_max, cfg.vocab,
                                           cfg.n_train, cfg.n_test, cfg.gen_seed)
                            : char_addition(cfg.digits_min, cfg.digits_max, cfg.n_train,
                                            cfg.n_test, cfg.gen_seed);
    for (const auto& ex : task.train.examples)
      if (ex.prompt.size() + ex.target.size() > cfg.max_len)
        throw std::invalid_argument(
            "run_experiment: max_len " + std::to_string(cfg.max_len) +
            " too small for a sequence of length " +
            std::to_string(ex.prompt.size() + ex.target.size()));
    DecoderConfig mcfg;
    mcfg.vocab = task.train.vocab;
    mcfg.dim = cfg.model_dim;
    mcfg.heads = cfg.heads;
    mcfg.blocks = cfg.blocks;
    mcfg.max_len = cfg.max_len;
    DecoderModel model(mcfg, model_rng);
    DecoderTrainerOptions dopts;
    static_cast<TrainerOptions&>(dopts) = topts;
    dopts.distill_mode = cfg.distill_mode == "vmm" ? DecoderDistillMode::vmm
                                                   : DecoderDistillMode::token_kl;
    dopts.max_new = cfg.max_new;
    DecoderTrainer trainer(model, task.train, dopts);
    run_loop(trainer, model, task.train, task.test);
  }

  metrics.close();
  nlohmann::json js;
  js["schema_version"] = kMetricsSchemaVersion;
  js["task"] = summary.task;
  js["mode"] = summary.mode;
  js["alpha"] = summary.alpha;
  js["tau"] = summary.tau;
  js["seed"] = summary.seed;
  js["epochs_run"] = summary.epochs_run;
  js["iterations"] = summary.iterations;
  js["best_accuracy"] = summary.best_accuracy;
  js["final_accuracy"] = summary.final_accuracy;
  js["final_train_loss"] = summary.final_train_loss;
  std::ofstream sf(cfg.out_dir + "/summary.json");
  sf << js.dump(2) << "\n";
  return summary;
}

}  // namespace dynsdpb
