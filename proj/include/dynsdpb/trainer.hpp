// Iteration state machine: per-batch forward, loss composition per mode,
// backward, optimizer step, and the previous-batch cache update.
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dynsdpb/distill.hpp"
#include "dynsdpb/models.hpp"
#include "dynsdpb/sampler.hpp"
#include "dynsdpb/tensor.hpp"

namespace dynsdpb {

enum class TrainMode {
  finetune,
  double_finetune,
  dynamic_finetune,
  dlb_sequential,
  dlb_random,
  dynsdpb,
};

struct ModeTraits {
  bool distill = false;        // LMBC term and overlap sampler
  bool dynamic = false;        // per-sample factor rescaling
  SamplerOrder order = SamplerOrder::shuffled;
  int epoch_multiplier = 1;
};

inline ModeTraits traits_of(TrainMode mode) {
  switch (mode) {
    case TrainMode::finetune: return {false, false, SamplerOrder::shuffled, 1};
    case TrainMode::double_finetune: return {false, false, SamplerOrder::shuffled, 2};
    case TrainMode::dynamic_finetune: return {false, true, SamplerOrder::shuffled, 1};
    case TrainMode::dlb_sequential: return {true, false, SamplerOrder::sequential, 1};
    case TrainMode::dlb_random: return {true, false, SamplerOrder::shuffled, 1};
    case TrainMode::dynsdpb: return {true, true, SamplerOrder::shuffled, 1};
  }
  throw std::invalid_argument("traits_of: unknown mode");
}

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::finetune: return "finetune";
    case TrainMode::double_finetune: return "double_finetune";
    case TrainMode::dynamic_finetune: return "dynamic_finetune";
    case TrainMode::dlb_sequential: return "dlb_sequential";
    case TrainMode::dlb_random: return "dlb_random";
    case TrainMode::dynsdpb: return "dynsdpb";
  }
  return "?";
}

inline TrainMode mode_from_name(const std::string& s) {
  for (TrainMode m : {TrainMode::finetune, TrainMode::double_finetune,
                      TrainMode::dynamic_finetune, TrainMode::dlb_sequential,
                      TrainMode::dlb_random, TrainMode::dynsdpb})
    if (s == mode_name(m)) return m;
  throw std::invalid_argument(
      "unknown mode '" + s +
      "'; valid: finetune, double_finetune, dynamic_finetune, dlb_sequential, "
      "dlb_random, dynsdpb");
}

// ---------------------------------------------------------------------------
// Optimizer: decoupled weight decay, adaptive moments, linear warmup/decay.

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double warmup_frac = 0.06;
  std::size_t total_steps = 1;
};

class AdamW {
 public:
  AdamW(ParameterList& params, OptimizerConfig cfg) : params_(&params), cfg_(cfg) {
    for (auto& [name, t] : params) {
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  double current_lr() const {
    const double t = static_cast<double>(step_ + 1);
    const double total = static_cast<double>(std::max<std::size_t>(cfg_.total_steps, 1));
    const double warm = std::max(1.0, cfg_.warmup_frac * total);
    double f;
    if (t <= warm)
      f = t / warm;
    else
      f = std::max(0.0, (total - t) / std::max(1.0, total - warm));
    return cfg_.lr * f;
  }

  // Applies one update from the accumulated gradients, then clears them.
  void step() {
    const double lr = current_lr();
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (std::size_t pi = 0; pi < params_->size(); ++pi) {
      Tensor& p = (*params_)[pi].second;
      if (!p.has_grad()) continue;
      const auto& g = p.grad();
      auto& vals = p.values();
      for (std::size_t i = 0; i < vals.size(); ++i) {
        m_[pi][i] = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * g[i];
        v_[pi][i] = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        const double mhat = m_[pi][i] / bc1;
        const double vhat = v_[pi][i] / bc2;
        vals[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                         cfg_.weight_decay * vals[i]);
      }
      p.clear_grad();
    }
  }

  std::size_t step_count() const { return step_; }

 private:
  ParameterList* params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------

struct StepMetrics {
  std::size_t iteration = 0;
  std::size_t epoch = 0;
  double ce_loss = 0.0;
  double lmbc_loss = 0.0;
  double total_loss = 0.0;
  double mean_u_over_U = 0.0;
  double mean_d = 0.0;
  double mean_alpha_eff = 0.0;
  double mean_tau_eff = 0.0;
  std::size_t distilled = 0;
  std::size_t skipped_empty = 0;
  std::map<std::string, double> grad_norms;  // filled only on sampled steps
};

struct TrainerOptions {
  TrainMode mode = TrainMode::finetune;
  double alpha = 1.0;
  double tau = 3.0;
  bool dynamic_factors = true;  // set false to reduce dynsdpb to dlb_random
  bool collect_grad_norms = false;
};

// ---------------------------------------------------------------------------
// Classifier path

struct ClassificationData {
  std::size_t input_dim = 0;
  std::size_t classes = 0;
  std::vector<std::vector<double>> inputs;
  std::vector<std::size_t> labels;

  std::size_t size() const { return inputs.size(); }
};

class ClassifierTrainer {
 public:
  ClassifierTrainer(ClassifierModel& model, const ClassificationData& data,
                    TrainerOptions opts)
      : model_(&model), data_(&data), opts_(opts), traits_(traits_of(opts.mode)) {}
  ClassifierTrainer(ClassifierModel& model, const ClassificationData& data, AdamW& opt,
                    TrainerOptions opts)
      : ClassifierTrainer(model, data, opts) {
    opt_ = &opt;
  }

  void attach_optimizer(AdamW& opt) { opt_ = &opt; }
  TrainerOptions& options() { return opts_; }
  void reset_cache() { cache_.clear(); }
  const LogitsCache& cache() const { return cache_; }
  std::size_t iteration() const { return iter_; }

  StepMetrics train_step(const OverlapBatch& batch, std::size_t epoch = 0) {
    const auto ids = batch.all_ids();
    const std::size_t n = ids.size();
    std::vector<double> xbuf;
    std::vector<std::size_t> ybuf;
    xbuf.reserve(n * data_->input_dim);
    for (auto id : ids) {
      const auto& row = data_->inputs.at(id);
      xbuf.insert(xbuf.end(), row.begin(), row.end());
      ybuf.push_back(data_->labels.at(id));
    }
    Tensor x = Tensor::from({n, data_->input_dim}, std::move(xbuf));
    Tensor logits = model_->forward(x);
    Tensor ce_ps = cross_entropy_per_sample(logits, ybuf);

    StepMetrics m;
    m.iteration = iter_;
    m.epoch = epoch;
    m.ce_loss = 0.0;
    for (double v : ce_ps.values()) m.ce_loss += v;
    m.ce_loss /= static_cast<double>(n);

    Tensor loss;
    const bool use_dynamic = traits_.dynamic && opts_.dynamic_factors;
    if (traits_.distill && !cache_.empty()) {
      const std::size_t half = batch.carried_ids.size();
      const double U = std::log(static_cast<double>(data_->classes));
      std::vector<std::vector<double>> cached;
      std::vector<double> taus(half), weights(half);
      const std::size_t cols = data_->classes;
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t id = batch.carried_ids[i];
        if (!cache_.has(id))
          throw std::runtime_error("train_step: batch/cache misalignment, no cached "
                                   "logits for sample id " + std::to_string(id));
        cached.push_back(cache_.at(id));
        std::span<const double> row(logits.values().data() + i * cols, cols);
        auto probs = distill_detail::softmax_scalar(row, 1.0);
        DynamicFactors f =
            compute_factors(probs, ce_ps.values()[i], opts_.alpha, opts_.tau, U);
        taus[i] = use_dynamic ? f.tau_eff : opts_.tau;
        weights[i] = use_dynamic ? f.alpha_eff : opts_.alpha;
        m.mean_u_over_U += f.u / f.U;
        m.mean_d += f.d;
        m.mean_alpha_eff += weights[i];
        m.mean_tau_eff += taus[i];
      }
      m.distilled = half;
      m.mean_u_over_U /= double(half);
      m.mean_d /= double(half);
      m.mean_alpha_eff /= double(half);
      m.mean_tau_eff /= double(half);
      Tensor lmbc_ps = lmbc_per_sample(cached, slice_rows(logits, 0, half), taus);
      for (std::size_t i = 0; i < half; ++i)
        m.lmbc_loss += lmbc_ps.values()[i];
      m.lmbc_loss /= double(half);
      loss = total_loss(ce_ps, &lmbc_ps, weights);
    } else if (opts_.mode == TrainMode::dynamic_finetune) {
      const double U = std::log(static_cast<double>(data_->classes));
      std::vector<double> u_over_U(n);
      const std::size_t cols = data_->classes;
      for (std::size_t i = 0; i < n; ++i) {
        std::span<const double> row(logits.values().data() + i * cols, cols);
        u_over_U[i] = uncertainty(distill_detail::softmax_scalar(row, 1.0)) / U;
        m.mean_u_over_U += u_over_U[i];
      }
      m.mean_u_over_U /= double(n);
      loss = dynamic_ce_loss(ce_ps, u_over_U);
    } else {
      loss = total_loss(ce_ps, nullptr, {});
    }
    m.total_loss = loss.item();

    backward(loss);
    if (opts_.collect_grad_norms) m.grad_norms = parameter_norms(model_->parameters());
    if (opt_ == nullptr)
      throw std::runtime_error("train_step: no optimizer attached");
    opt_->step();

    if (traits_.distill) {
      std::vector<std::vector<double>> rows;
      const std::size_t half = batch.carried_ids.size();
      const std::size_t cols = data_->classes;
      for (std::size_t i = 0; i < batch.fresh_ids.size(); ++i) {
        const double* r = logits.values().data() + (half + i) * cols;
        rows.emplace_back(r, r + cols);
      }
      cache_.store(iter_, batch.fresh_ids, std::move(rows));
    }
    ++iter_;
    return m;
  }

 private:
  ClassifierModel* model_;
  const ClassificationData* data_;
  AdamW* opt_ = nullptr;
  TrainerOptions opts_;
  ModeTraits traits_;
  LogitsCache cache_;
  std::size_t iter_ = 0;
};

// ---------------------------------------------------------------------------
// Decoder path

struct SequenceExample {
  std::vector<std::size_t> prompt;  // includes any separator token
  std::vector<std::size_t> target;  // ends with the EOS token
};

struct SequenceData {
  std::size_t vocab = 0;
  std::vector<SequenceExample> examples;

  std::size_t size() const { return examples.size(); }
};

enum class DecoderDistillMode { vmm, token_kl };

struct DecoderTrainerOptions : TrainerOptions {
  DecoderDistillMode distill_mode = DecoderDistillMode::vmm;
  std::size_t max_new = 16;
};

class DecoderTrainer {
 public:
  DecoderTrainer(DecoderModel& model, const SequenceData& data,
                 DecoderTrainerOptions opts)
      : model_(&model), data_(&data), opts_(opts), traits_(traits_of(opts.mode)) {}
  DecoderTrainer(DecoderModel& model, const SequenceData& data, AdamW& opt,
                 DecoderTrainerOptions opts)
      : DecoderTrainer(model, data, opts) {
    opt_ = &opt;
  }

  void attach_optimizer(AdamW& opt) { opt_ = &opt; }
  DecoderTrainerOptions& options() { return opts_; }
  void reset_cache() { cache_.clear(); }
  const LogitsCache& cache() const { return cache_; }
  std::size_t iteration() const { return iter_; }

  StepMetrics train_step(const OverlapBatch& batch, std::size_t epoch = 0) {
    const auto ids = batch.all_ids();
    const std::size_t n = ids.size();
    const std::size_t vocab = data_->vocab;
    const double U = std::log(static_cast<double>(vocab));

    // Teacher-forced per-sample CE (mean over target positions).
    std::vector<Tensor> ce_scalars;
    std::vector<Tensor> target_rows;  // per-sample [t_len x V] logits
    ce_scalars.reserve(n);
    for (auto id : ids) {
      const auto& ex = data_->examples.at(id);
      std::vector<std::size_t> seq = ex.prompt;
      seq.insert(seq.end(), ex.target.begin(), ex.target.end());
      Tensor logits = model_->forward(seq);
      const std::size_t plen = ex.prompt.size(), tlen = ex.target.size();
      Tensor rows = slice_rows(logits, plen - 1, plen + tlen - 1);
      target_rows.push_back(rows);
      ce_scalars.push_back(reshape(mean(cross_entropy_per_sample(rows, ex.target)),
                                   {1, 1}));
    }
    Tensor ce_ps = reshape(concat_rows(std::span<const Tensor>(ce_scalars)), {n});

    StepMetrics m;
    m.iteration = iter_;
    m.epoch = epoch;
    for (double v : ce_ps.values()) m.ce_loss += v;
    m.ce_loss /= double(n);

    Tensor loss = mean(ce_ps);
    const bool use_dynamic = traits_.dynamic && opts_.dynamic_factors;
    if (traits_.distill && !cache_.empty()) {
      std::vector<Tensor> terms;
      double lmbc_sum = 0.0;
      for (std::size_t i = 0; i < batch.carried_ids.size(); ++i) {
        const std::size_t id = batch.carried_ids[i];
        if (!cache_.has(id))
          throw std::runtime_error("train_step: batch/cache misalignment, no cached "
                                   "entry for sample id " + std::to_string(id));
        const auto& cached = cache_.at(id);
        if (cached.empty()) {  // previous pass produced nothing usable
          ++m.skipped_empty;
          continue;
        }
        const auto& ex = data_->examples.at(id);
        double u, d;
        Tensor sample_term;
        const double ce_i = ce_ps.values()[i];
        if (opts_.distill_mode == DecoderDistillMode::vmm) {
          GenerationResult gen = model_->generate(ex.prompt, opts_.max_new);
          if (gen.empty()) {
            ++m.skipped_empty;
            continue;
          }
          u = generation_uncertainty(gen);
          d = discrimination(ce_i);
          const double tau_i =
              use_dynamic ? std::max(d * opts_.tau, kTauFloorFraction * opts_.tau)
                          : opts_.tau;
          sample_term = vmm_lmbc_loss(cached, vocabulary_map(gen), tau_i);
          m.mean_tau_eff += tau_i;
        } else {
          // token-level KL over the fixed teacher-forced positions
          const Tensor& rows = target_rows[i];
          const std::size_t tlen = ex.target.size();
          if (cached.size() != tlen * vocab) {
            ++m.skipped_empty;
            continue;
          }
          double usum = 0.0;
          for (std::size_t r = 0; r < tlen; ++r) {
            std::span<const double> row(rows.values().data() + r * vocab, vocab);
            usum += uncertainty(distill_detail::softmax_scalar(row, 1.0));
          }
          u = usum / double(tlen);
          d = discrimination(ce_i);
          const double tau_i =
              use_dynamic ? std::max(d * opts_.tau, kTauFloorFraction * opts_.tau)
                          : opts_.tau;
          std::vector<std::vector<double>> cached_rows(tlen);
          for (std::size_t r = 0; r < tlen; ++r)
            cached_rows[r].assign(cached.begin() + r * vocab,
                                  cached.begin() + (r + 1) * vocab);
          sample_term =
              lmbc_loss(cached_rows, rows, std::vector<double>(tlen, tau_i));
          m.mean_tau_eff += tau_i;
        }
        const double w =
            use_dynamic ? std::clamp(1.0 - u / U, 0.0, 1.0) * opts_.alpha : opts_.alpha;
        m.mean_u_over_U += u / U;
        m.mean_d += d;
        m.mean_alpha_eff += w;
        lmbc_sum += sample_term.item();
        terms.push_back(scale(sample_term, w));
        ++m.distilled;
      }
      if (m.distilled > 0) {
        Tensor acc = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
        loss = add(loss, scale(acc, 1.0 / double(m.distilled)));
        m.lmbc_loss = lmbc_sum / double(m.distilled);
        m.mean_u_over_U /= double(m.distilled);
        m.mean_d /= double(m.distilled);
        m.mean_alpha_eff /= double(m.distilled);
        m.mean_tau_eff /= double(m.distilled);
      }
    } else if (opts_.mode == TrainMode::dynamic_finetune) {
      std::vector<double> u_over_U(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = data_->examples.at(ids[i]);
        const Tensor& rows = target_rows[i];
        double usum = 0.0;
        for (std::size_t r = 0; r < ex.target.size(); ++r) {
          std::span<const double> row(rows.values().data() + r * vocab, vocab);
          usum += uncertainty(distill_detail::softmax_scalar(row, 1.0));
        }
        u_over_U[i] = usum / double(ex.target.size()) / U;
        m.mean_u_over_U += u_over_U[i];
      }
      m.mean_u_over_U /= double(n);
      loss = dynamic_ce_loss(ce_ps, u_over_U);
    }
    m.total_loss = loss.item();

    // Snapshot the fresh half before the update so the cached teacher really
    // is the previous iteration's model.
    if (traits_.distill) {
      std::vector<std::vector<double>> rows;
      for (std::size_t i = 0; i < batch.fresh_ids.size(); ++i) {
        const auto& ex = data_->examples.at(batch.fresh_ids[i]);
        if (opts_.distill_mode == DecoderDistillMode::vmm) {
          GenerationResult gen = model_->generate(ex.prompt, opts_.max_new);
          if (gen.empty())
            rows.emplace_back();  // marker: skip this sample next iteration
          else
            rows.push_back(vocabulary_map(gen).values());
        } else {
          const Tensor& r = target_rows[batch.carried_ids.size() + i];
          rows.emplace_back(r.values());
        }
      }
      cache_.store(iter_, batch.fresh_ids, std::move(rows));
    }

    backward(loss);
    if (opts_.collect_grad_norms) m.grad_norms = parameter_norms(model_->parameters());
    if (opt_ == nullptr)
      throw std::runtime_error("train_step: no optimizer attached");
    opt_->step();
    ++iter_;
    return m;
  }

 private:
  DecoderModel* model_;
  const SequenceData* data_;
  AdamW* opt_ = nullptr;
  DecoderTrainerOptions opts_;
  ModeTraits traits_;
  LogitsCache cache_;
  std::size_t iter_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

inline EvalResult evaluate(const ClassifierModel& model, const ClassificationData& split) {
  if (split.size() == 0)
    throw std::invalid_argument("evaluate: empty split");
  std::vector<double> xbuf;
  for (const auto& row : split.inputs) xbuf.insert(xbuf.end(), row.begin(), row.end());
  Tensor x = Tensor::from({split.size(), split.input_dim}, std::move(xbuf));
  Tensor logits = model.forward(x);
  const std::size_t cols = split.classes;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.size(); ++i) {
    const double* row = logits.values().data() + i * cols;
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (row[c] > row[best]) best = c;
    if (best == split.labels[i]) ++correct;
  }
  EvalResult res;
  res.accuracy = double(correct) / double(split.size());
  res.mean_loss = cross_entropy(logits, split.labels).item();
  return res;
}

namespace trainer_detail {
inline std::vector<std::size_t> strip_eos(std::vector<std::size_t> seq) {
  while (!seq.empty() && seq.back() == kEosToken) seq.pop_back();
  return seq;
}
}  // namespace trainer_detail

// Exact-match accuracy of greedy generation against the target sequence.
inline EvalResult evaluate(const DecoderModel& model, const SequenceData& split) {
  if (split.size() == 0)
    throw std::invalid_argument("evaluate: empty split");
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (const auto& ex : split.examples) {
    GenerationResult gen =
        model.generate(ex.prompt, model.config().max_len - ex.prompt.size());
    if (trainer_detail::strip_eos(gen.tokens) == trainer_detail::strip_eos(ex.target))
      ++correct;
    std::vector<std::size_t> seq = ex.prompt;
    seq.insert(seq.end(), ex.target.begin(), ex.target.end());
    Tensor logits = model.forward(seq);
    Tensor rows = slice_rows(logits, ex.prompt.size() - 1,
                             ex.prompt.size() + ex.target.size() - 1);
    loss_sum += cross_entropy(rows, ex.target).item();
  }
  EvalResult res;
  res.accuracy = double(correct) / double(split.size());
  res.mean_loss = loss_sum / double(split.size());
  return res;
}

}  // namespace dynsdpb
