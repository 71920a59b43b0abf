// Self-distillation mathematics: last-mini-batch consistency loss, the
// per-sample dynamic factors, and vocabulary-map matching for
// variable-length generations.
#pragma once

#include <cmath>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynsdpb/models.hpp"
#include "dynsdpb/tensor.hpp"

namespace dynsdpb {

// Stop-gradient snapshot of the previous iteration's fresh-half outputs,
// keyed by sample id. Classifier path stores raw logit rows; decoder path
// stores vocabulary maps. An empty row marks a sample whose generation was
// unusable (skipped downstream, never an error).
class LogitsCache {
 public:
  bool empty() const { return entries_.empty(); }
  std::size_t stamp() const { return stamp_; }

  void clear() {
    entries_.clear();
    stamp_ = 0;
  }

  void store(std::size_t iteration, const std::vector<std::size_t>& ids,
             std::vector<std::vector<double>> rows) {
    if (ids.size() != rows.size())
      throw std::invalid_argument("LogitsCache: " + std::to_string(ids.size()) +
                                  " ids for " + std::to_string(rows.size()) + " rows");
    entries_.clear();
    for (std::size_t i = 0; i < ids.size(); ++i)
      entries_[ids[i]] = std::move(rows[i]);
    stamp_ = iteration;
  }

  bool has(std::size_t id) const { return entries_.count(id) != 0; }

  const std::vector<double>& at(std::size_t id) const {
    auto it = entries_.find(id);
    if (it == entries_.end())
      throw std::runtime_error("LogitsCache: no cached entry for sample id " +
                               std::to_string(id));
    return it->second;
  }

  std::size_t size() const { return entries_.size(); }

 private:
  std::map<std::size_t, std::vector<double>> entries_;
  std::size_t stamp_ = 0;
};

// ---------------------------------------------------------------------------
// Dynamic factors

// Shannon entropy in nats of one probability row.
inline double uncertainty(std::span<const double> probs) {
  double s = 0.0;
  for (double p : probs) {
    if (p < -1e-12)
      throw std::invalid_argument("uncertainty: negative probability entry");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw std::invalid_argument("uncertainty: row sums to " + std::to_string(s) +
                                ", not 1");
  double u = 0.0;
  for (double p : probs)
    if (p > kLogFloor) u -= p * std::log(p);
  return u;
}

// d = 1/(1 + exp(CE)); for one-hot targets -y.log(p) is exactly the
// per-sample CE, so d lands in (0, 0.5].
inline double discrimination(double per_sample_ce) {
  if (per_sample_ce < 0.0)
    throw std::invalid_argument("discrimination: negative cross-entropy " +
                                std::to_string(per_sample_ce));
  return 1.0 / (1.0 + std::exp(per_sample_ce));
}

// Fraction of the base temperature kept as a floor when per-sample CE blows
// tau_eff toward zero.
inline constexpr double kTauFloorFraction = 0.05;

struct DynamicFactors {
  double u = 0.0;        // entropy of the current prediction, nats
  double U = 1.0;        // normalizer: log of the output cardinality
  double d = 0.5;        // discrimination capability
  double alpha_eff = 0;  // (1 - u/U) * alpha, clamped to [0, alpha]
  double tau_eff = 1.0;  // d * tau, clamped to >= kTauFloorFraction * tau
};

inline DynamicFactors compute_factors(std::span<const double> probs, double per_sample_ce,
                                      double alpha, double tau, double normalizer) {
  DynamicFactors f;
  f.u = uncertainty(probs);
  f.U = normalizer;
  if (f.u > f.U + 1e-9)
    throw std::runtime_error("compute_factors: entropy " + std::to_string(f.u) +
                             " exceeds normalizer " + std::to_string(f.U));
  f.d = discrimination(per_sample_ce);
  f.alpha_eff = std::clamp((1.0 - f.u / f.U) * alpha, 0.0, alpha);
  f.tau_eff = std::max(f.d * tau, kTauFloorFraction * tau);
  return f;
}

// Decoder-path uncertainty: mean per-step entropy over generated positions.
inline double generation_uncertainty(const GenerationResult& gen) {
  if (gen.empty())
    throw std::invalid_argument("generation_uncertainty: empty generation");
  double s = 0.0;
  for (const auto& row : gen.prob_rows) s += uncertainty(row.values());
  return s / static_cast<double>(gen.prob_rows.size());
}

// ---------------------------------------------------------------------------
// LMBC loss (classifier path)

namespace distill_detail {

inline std::vector<double> softmax_scalar(std::span<const double> logits, double tau) {
  std::vector<double> out(logits.begin(), logits.end());
  double mx = out[0];
  for (double v : out) mx = std::max(mx, v);
  double z = 0.0;
  for (auto& v : out) {
    v = std::exp((v - mx) / tau);
    z += v;
  }
  for (auto& v : out) v /= z;
  return out;
}

}  // namespace distill_detail

// Per-sample tau_i^2 * KL(softmax(cached_i/tau_i) || softmax(current_i/tau_i)).
// The cached side is plain data and never receives gradient.
inline Tensor lmbc_per_sample(const std::vector<std::vector<double>>& cached_rows,
                              const Tensor& current_logits,
                              const std::vector<double>& taus) {
  auto [rows, cols] = detail::as_rows(current_logits, "lmbc_loss");
  if (cached_rows.size() != rows || taus.size() != rows)
    throw std::invalid_argument("lmbc_loss: got " + std::to_string(cached_rows.size()) +
                                " cached rows and " + std::to_string(taus.size()) +
                                " temperatures for " + std::to_string(rows) +
                                " current rows");
  std::vector<double> teacher(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (cached_rows[r].size() != cols)
      throw std::invalid_argument("lmbc_loss: cached row " + std::to_string(r) +
                                  " has width " + std::to_string(cached_rows[r].size()) +
                                  ", expected " + std::to_string(cols));
    auto p = distill_detail::softmax_scalar(cached_rows[r], taus[r]);
    std::copy(p.begin(), p.end(), teacher.begin() + r * cols);
  }
  Tensor teacher_t = Tensor::from({rows, cols}, std::move(teacher));
  Tensor student = tempered_softmax_rows(current_logits, taus);
  Tensor kl = kl_rows(teacher_t, student);
  std::vector<double> tau_sq(rows);
  for (std::size_t r = 0; r < rows; ++r) tau_sq[r] = taus[r] * taus[r];
  return mul_const(kl, tau_sq);
}

inline Tensor lmbc_loss(const std::vector<std::vector<double>>& cached_rows,
                        const Tensor& current_logits, const std::vector<double>& taus) {
  return mean(lmbc_per_sample(cached_rows, current_logits, taus));
}

// ---------------------------------------------------------------------------
// Vocabulary Map Matching (decoder path)

// Mean of the per-step probability rows: a fixed-size, length-invariant
// summary of one generation. Differentiable through the rows.
inline Tensor vocabulary_map(const GenerationResult& gen) {
  if (gen.empty())
    throw std::invalid_argument("vocabulary_map: empty generation");
  Tensor stacked = concat_rows(std::span<const Tensor>(gen.prob_rows));
  const std::size_t m = gen.prob_rows.size();
  const std::size_t vocab = stacked.shape()[1];
  Tensor ones = Tensor::from({1, m}, std::vector<double>(m, 1.0));
  Tensor summed = matmul(ones, stacked);  // [1 x |V|]
  (void)vocab;
  return scale(summed, 1.0 / static_cast<double>(m));
}

// tau^2 * KL(temper(cached) || temper(current)) with
// temper(m) = softmax(log(m + eps) / tau). Cached map is stop-gradient.
inline Tensor vmm_lmbc_loss(const std::vector<double>& cached_map,
                            const Tensor& current_map, double tau_eff) {
  if (!(tau_eff > 0.0))
    throw std::domain_error("vmm_lmbc_loss: temperature must be positive");
  auto [rows, cols] = detail::as_rows(current_map, "vmm_lmbc_loss");
  if (rows != 1 || cached_map.size() != cols)
    throw std::invalid_argument("vmm_lmbc_loss: map widths differ, cached " +
                                std::to_string(cached_map.size()) + " vs current " +
                                shape_str(current_map.shape()));
  std::vector<double> t_log(cols);
  for (std::size_t c = 0; c < cols; ++c) {
    if (cached_map[c] < -1e-9)
      throw std::invalid_argument("vmm_lmbc_loss: cached map has negative entry");
    t_log[c] = std::log(std::max(cached_map[c], kLogFloor));
  }
  Tensor teacher = Tensor::from(
      {1, cols}, distill_detail::softmax_scalar(t_log, tau_eff));
  Tensor student = tempered_softmax_rows(log_clamped(current_map), {tau_eff});
  Tensor kl = kl_rows(teacher, student);
  return scale(kl, tau_eff * tau_eff);
}

// ---------------------------------------------------------------------------
// Loss composition

// total = mean(ce_per_sample) + mean_i(weight_i * lmbc_i). Weights carry
// alpha (static) or (1 - u/U)*alpha (dynamic); pass no distill term for the
// plain fine-tuning modes.
inline Tensor total_loss(const Tensor& ce_per_sample, const Tensor* lmbc_per_sample_t,
                         const std::vector<double>& weights) {
  Tensor total = mean(ce_per_sample);
  if (lmbc_per_sample_t != nullptr) {
    if (lmbc_per_sample_t->size() != weights.size())
      throw std::invalid_argument("total_loss: " + std::to_string(weights.size()) +
                                  " weights for " +
                                  std::to_string(lmbc_per_sample_t->size()) +
                                  " distilled samples");
    total = add(total, mean(mul_const(*lmbc_per_sample_t, weights)));
  }
  return total;
}

// Dynamic Finetune: per-sample CE reweighted by (1 - u/U), renormalized so
// the mean weight is 1.
inline Tensor dynamic_ce_loss(const Tensor& ce_per_sample,
                              const std::vector<double>& u_over_U) {
  if (ce_per_sample.size() != u_over_U.size())
    throw std::invalid_argument("dynamic_ce_loss: size mismatch");
  std::vector<double> w(u_over_U.size());
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::clamp(1.0 - u_over_U[i], 0.0, 1.0);
    s += w[i];
  }
  if (s <= 0.0) {
    // fully uncertain batch: fall back to uniform weights
    std::fill(w.begin(), w.end(), 1.0);
  } else {
    const double norm = static_cast<double>(w.size()) / s;
    for (auto& v : w) v *= norm;
  }
  return mean(mul_const(ce_per_sample, w));
}

}  // namespace dynsdpb
