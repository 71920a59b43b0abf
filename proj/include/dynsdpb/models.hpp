// Two desk-scale model families: a feed-forward classifier with a fixed
// output width and a small causal transformer decoder.
#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dynsdpb/tensor.hpp"

namespace dynsdpb {

// Reserved end-of-sequence id in every vocabulary.
inline constexpr std::size_t kEosToken = 0;

using ParameterList = std::vector<std::pair<std::string, Tensor>>;

namespace model_detail {

inline Tensor init_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols,
                          double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> buf(rows * cols);
  for (auto& v : buf) v = d(rng);
  return Tensor::from({rows, cols}, std::move(buf), /*requires_grad=*/true);
}

inline Tensor init_vector(std::size_t n, double fill) {
  return Tensor::from({n}, std::vector<double>(n, fill), /*requires_grad=*/true);
}

}  // namespace model_detail

// ---------------------------------------------------------------------------
// Classifier

struct ClassifierConfig {
  std::size_t input_dim = 2;
  std::size_t hidden_dim = 128;
  std::size_t hidden_layers = 2;
  std::size_t classes = 2;
};

class ClassifierModel {
 public:
  ClassifierModel(ClassifierConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
    std::size_t in = cfg.input_dim;
    for (std::size_t l = 0; l < cfg.hidden_layers; ++l) {
      const std::string name = "hidden" + std::to_string(l);
      params_.emplace_back(name + ".weight",
                           model_detail::init_matrix(rng, in, cfg.hidden_dim,
                                                     std::sqrt(2.0 / double(in))));
      params_.emplace_back(name + ".bias", model_detail::init_vector(cfg.hidden_dim, 0.0));
      in = cfg.hidden_dim;
    }
    params_.emplace_back("head.weight",
                         model_detail::init_matrix(rng, in, cfg.classes,
                                                   std::sqrt(1.0 / double(in))));
    params_.emplace_back("head.bias", model_detail::init_vector(cfg.classes, 0.0));
  }

  // x: [n x input_dim] -> logits [n x classes], no softmax applied.
  Tensor forward(const Tensor& x) const {
    if (x.shape().size() != 2 || x.shape()[1] != cfg_.input_dim)
      throw std::invalid_argument("classifier_forward: input " + shape_str(x.shape()) +
                                  " does not match feature width " +
                                  std::to_string(cfg_.input_dim));
    Tensor h = x;
    for (std::size_t l = 0; l < cfg_.hidden_layers; ++l) {
      const std::string name = "hidden" + std::to_string(l);
      h = relu(add_bias(matmul(h, param(name + ".weight")), param(name + ".bias")));
    }
    return add_bias(matmul(h, param("head.weight")), param("head.bias"));
  }

  const ClassifierConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  const Tensor& param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw std::out_of_range("classifier: unknown parameter " + name);
  }

 private:
  ClassifierConfig cfg_;
  ParameterList params_;
};

// ---------------------------------------------------------------------------
// Decoder

struct DecoderConfig {
  std::size_t vocab = 16;     // includes the reserved EOS id 0
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t ff_mult = 4;
  std::size_t max_len = 32;
};

struct GenerationResult {
  enum class Termination { end_token, max_len };
  std::vector<std::size_t> tokens;   // length m
  std::vector<Tensor> prob_rows;     // m differentiable rows of width |V|
  Termination termination = Termination::max_len;

  std::size_t length() const { return tokens.size(); }
  bool empty() const { return tokens.empty(); }
};

class DecoderModel {
 public:
  DecoderModel(DecoderConfig cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg.dim % cfg.heads != 0)
      throw std::invalid_argument("decoder: dim must be divisible by head count");
    const double s = 0.02;
    params_.emplace_back("tok_emb.weight",
                         model_detail::init_matrix(rng, cfg.vocab, cfg.dim, s));
    params_.emplace_back("pos_emb.weight",
                         model_detail::init_matrix(rng, cfg.max_len, cfg.dim, s));
    for (std::size_t b = 0; b < cfg.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      params_.emplace_back(p + ".ln1.gamma", model_detail::init_vector(cfg.dim, 1.0));
      params_.emplace_back(p + ".ln1.beta", model_detail::init_vector(cfg.dim, 0.0));
      for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
        params_.emplace_back(p + w, model_detail::init_matrix(rng, cfg.dim, cfg.dim, s));
      params_.emplace_back(p + ".attn.bo", model_detail::init_vector(cfg.dim, 0.0));
      params_.emplace_back(p + ".ln2.gamma", model_detail::init_vector(cfg.dim, 1.0));
      params_.emplace_back(p + ".ln2.beta", model_detail::init_vector(cfg.dim, 0.0));
      params_.emplace_back(p + ".ff.w1",
                           model_detail::init_matrix(rng, cfg.dim, cfg.dim * cfg.ff_mult, s));
      params_.emplace_back(p + ".ff.b1",
                           model_detail::init_vector(cfg.dim * cfg.ff_mult, 0.0));
      params_.emplace_back(p + ".ff.w2",
                           model_detail::init_matrix(rng, cfg.dim * cfg.ff_mult, cfg.dim, s));
      params_.emplace_back(p + ".ff.b2", model_detail::init_vector(cfg.dim, 0.0));
    }
    params_.emplace_back("ln_f.gamma", model_detail::init_vector(cfg.dim, 1.0));
    params_.emplace_back("ln_f.beta", model_detail::init_vector(cfg.dim, 0.0));
    params_.emplace_back("head.weight",
                         model_detail::init_matrix(rng, cfg.dim, cfg.vocab, s));
    params_.emplace_back("head.bias", model_detail::init_vector(cfg.vocab, 0.0));
  }

  // tokens: length T <= max_len -> per-position logits [T x |V|], causal.
  Tensor forward(const std::vector<std::size_t>& tokens) const {
    const std::size_t T = tokens.size();
    if (T == 0) throw std::invalid_argument("decoder_forward: empty token sequence");
    if (T > cfg_.max_len)
      throw std::invalid_argument("decoder_forward: sequence length " + std::to_string(T) +
                                  " exceeds max_len " + std::to_string(cfg_.max_len));
    for (auto t : tokens)
      if (t >= cfg_.vocab)
        throw std::out_of_range("decoder_forward: token " + std::to_string(t) +
                                " >= vocab " + std::to_string(cfg_.vocab));
    Tensor h = add(embedding_lookup(param("tok_emb.weight"), tokens),
                   slice_rows(param("pos_emb.weight"), 0, T));
    const std::size_t dk = cfg_.dim / cfg_.heads;
    const double inv_sqrt_dk = 1.0 / std::sqrt(double(dk));
    std::vector<double> mask(T * T, 0.0);
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = i + 1; j < T; ++j) mask[i * T + j] = -1e30;

    for (std::size_t b = 0; b < cfg_.blocks; ++b) {
      const std::string p = "block" + std::to_string(b);
      Tensor a = layer_norm(h, param(p + ".ln1.gamma"), param(p + ".ln1.beta"));
      Tensor q = matmul(a, param(p + ".attn.wq"));
      Tensor k = matmul(a, param(p + ".attn.wk"));
      Tensor v = matmul(a, param(p + ".attn.wv"));
      std::vector<Tensor> heads;
      heads.reserve(cfg_.heads);
      for (std::size_t i = 0; i < cfg_.heads; ++i) {
        Tensor qh = slice_cols(q, i * dk, (i + 1) * dk);
        Tensor kh = slice_cols(k, i * dk, (i + 1) * dk);
        Tensor vh = slice_cols(v, i * dk, (i + 1) * dk);
        Tensor scores = add_const(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), mask);
        heads.push_back(matmul(softmax(scores), vh));
      }
      Tensor o = add_bias(matmul(concat_cols(heads), param(p + ".attn.wo")),
                          param(p + ".attn.bo"));
      h = add(h, o);
      Tensor f = layer_norm(h, param(p + ".ln2.gamma"), param(p + ".ln2.beta"));
      f = gelu(add_bias(matmul(f, param(p + ".ff.w1")), param(p + ".ff.b1")));
      f = add_bias(matmul(f, param(p + ".ff.w2")), param(p + ".ff.b2"));
      h = add(h, f);
    }
    Tensor y = layer_norm(h, param("ln_f.gamma"), param("ln_f.beta"));
    return add_bias(matmul(y, param("head.weight")), param("head.bias"));
  }

  // Greedy continuation. Each emitted step keeps its differentiable
  // probability row; stops on the EOS token, max_new, or a full context.
  GenerationResult generate(const std::vector<std::size_t>& prompt,
                            std::size_t max_new) const {
    if (prompt.empty()) throw std::invalid_argument("generate: empty prompt");
    if (prompt.size() > cfg_.max_len)
      throw std::invalid_argument("generate: prompt length " +
                                  std::to_string(prompt.size()) + " exceeds max_len " +
                                  std::to_string(cfg_.max_len));
    GenerationResult res;
    std::vector<std::size_t> seq = prompt;
    for (std::size_t step = 0; step < max_new; ++step) {
      if (seq.size() >= cfg_.max_len) break;  // context full -> max_len termination
      Tensor logits = forward(seq);
      Tensor row = softmax(slice_rows(logits, seq.size() - 1, seq.size()));
      std::size_t best = 0;
      for (std::size_t v = 1; v < cfg_.vocab; ++v)
        if (row.values()[v] > row.values()[best]) best = v;
      res.tokens.push_back(best);
      res.prob_rows.push_back(row);
      seq.push_back(best);
      if (best == kEosToken) {
        res.termination = GenerationResult::Termination::end_token;
        return res;
      }
    }
    res.termination = GenerationResult::Termination::max_len;
    return res;
  }

  const DecoderConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }

  const Tensor& param(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw std::out_of_range("decoder: unknown parameter " + name);
  }

 private:
  DecoderConfig cfg_;
  ParameterList params_;
};

// ---------------------------------------------------------------------------
// Instrumentation and checkpoints

// Layer name = parameter name with its final component stripped
// ("block0.attn.wq" -> "block0.attn").
inline std::string layer_of(const std::string& param_name) {
  auto pos = param_name.rfind('.');
  return pos == std::string::npos ? param_name : param_name.substr(0, pos);
}

// L2 norm of the concatenated parameter gradients of each layer.
inline std::map<std::string, double> parameter_norms(const ParameterList& params) {
  bool any = false;
  for (const auto& [name, t] : params)
    if (t.has_grad()) any = true;
  if (!any)
    throw std::runtime_error("parameter_norms: no gradients present; run backward() first");
  std::map<std::string, double> sq;
  for (const auto& [name, t] : params) {
    double& acc = sq[layer_of(name)];
    if (t.has_grad())
      for (double g : t.grad()) acc += g * g;
  }
  std::map<std::string, double> out;
  for (auto& [layer, s] : sq) out[layer] = std::sqrt(s);
  return out;
}

// Flat text checkpoint: (name, shape, hex-float values) per parameter.
// Hex floats make the round trip bit-exact.
inline void save_checkpoint(const ParameterList& params, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  f << "dynsdpb-checkpoint 1\n";
  char buf[64];
  for (const auto& [name, t] : params) {
    f << name << " " << t.shape().size();
    for (auto e : t.shape()) f << " " << e;
    f << "\n";
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%a", t.values()[i]);
      f << buf << (i + 1 == t.size() ? '\n' : ' ');
    }
  }
}

inline void load_checkpoint(ParameterList& params, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string magic;
  int version = 0;
  f >> magic >> version;
  if (magic != "dynsdpb-checkpoint" || version != 1)
    throw std::runtime_error("load_checkpoint: unrecognized header in " + path);
  for (auto& [name, t] : params) {
    std::string got;
    std::size_t ndim = 0;
    f >> got >> ndim;
    if (got != name)
      throw std::runtime_error("load_checkpoint: expected parameter " + name +
                               ", file has " + got);
    Shape shape(ndim);
    for (auto& e : shape) f >> e;
    if (shape != t.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + name + ": " +
                               shape_str(shape) + " vs " + shape_str(t.shape()));
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::string tok;
      f >> tok;
      t.values()[i] = std::strtod(tok.c_str(), nullptr);
    }
  }
  if (!f) throw std::runtime_error("load_checkpoint: truncated file " + path);
}

}  // namespace dynsdpb
