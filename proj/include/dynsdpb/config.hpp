// Flat key=value experiment configuration. Unknown keys are rejected with
// the list of valid ones.
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynsdpb/trainer.hpp"

namespace dynsdpb {

struct RunConfig {
  // experiment
  std::string task = "gaussian_blobs";
  TrainMode mode = TrainMode::dynsdpb;
  double alpha = 1.0;
  double tau = 3.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 3;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  // optimizer
  double lr = 1e-3;
  double weight_decay = 0.01;
  double warmup_frac = 0.06;
  // instrumentation
  std::size_t grad_norm_every = 0;  // 0 disables
  bool dynamic_factors = true;
  // decoder knobs
  std::string distill_mode = "vmm";  // vmm | token_kl
  std::size_t max_new = 16;
  std::size_t model_dim = 64;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t max_len = 32;
  // classifier knobs
  std::size_t hidden_dim = 128;
  std::size_t hidden_layers = 2;
  // dataset knobs
  std::uint64_t gen_seed = 12345;
  std::size_t classes = 3;
  std::size_t input_dim = 20;
  std::size_t n_train = 500;
  std::size_t n_test = 500;
  double label_noise = 0.2;
  std::size_t vocab = 14;
  std::size_t len_min = 4;
  std::size_t len_max = 8;
  std::size_t digits_min = 1;
  std::size_t digits_max = 2;

  bool is_decoder_task() const {
    return task == "char_reverse" || task == "char_addition";
  }

  void validate() const {
    if (task != "gaussian_blobs" && task != "xor_grid" && task != "char_reverse" &&
        task != "char_addition")
      throw std::invalid_argument("config: unknown task '" + task +
                                  "'; valid: gaussian_blobs, xor_grid, char_reverse, "
                                  "char_addition");
    if (alpha < 0.0) throw std::invalid_argument("config: alpha must be >= 0");
    if (!(tau > 0.0)) throw std::invalid_argument("config: tau must be > 0");
    if (batch_size == 0 || batch_size % 2 != 0)
      throw std::invalid_argument("config: batch_size must be a positive even number");
    if (epochs == 0) throw std::invalid_argument("config: epochs must be >= 1");
    if (distill_mode != "vmm" && distill_mode != "token_kl")
      throw std::invalid_argument("config: distill_mode must be vmm or token_kl");
    if (label_noise < 0.0 || label_noise >= 1.0)
      throw std::invalid_argument("config: label_noise must be in [0, 1)");
  }
};

namespace config_detail {

using Setter = void (*)(RunConfig&, const std::string&);

inline std::uint64_t to_u64(const std::string& v) {
  std::size_t pos = 0;
  const auto out = std::stoull(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not an integer: " + v);
  return out;
}
inline double to_f64(const std::string& v) {
  std::size_t pos = 0;
  const double out = std::stod(v, &pos);
  if (pos != v.size()) throw std::invalid_argument("not a number: " + v);
  return out;
}
inline bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("not a boolean: " + v);
}

inline const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"task", [](RunConfig& c, const std::string& v) { c.task = v; }},
      {"mode", [](RunConfig& c, const std::string& v) { c.mode = mode_from_name(v); }},
      {"alpha", [](RunConfig& c, const std::string& v) { c.alpha = to_f64(v); }},
      {"tau", [](RunConfig& c, const std::string& v) { c.tau = to_f64(v); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.batch_size = to_u64(v); }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = to_u64(v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); }},
      {"out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      {"lr", [](RunConfig& c, const std::string& v) { c.lr = to_f64(v); }},
      {"weight_decay",
       [](RunConfig& c, const std::string& v) { c.weight_decay = to_f64(v); }},
      {"warmup_frac",
       [](RunConfig& c, const std::string& v) { c.warmup_frac = to_f64(v); }},
      {"grad_norm_every",
       [](RunConfig& c, const std::string& v) { c.grad_norm_every = to_u64(v); }},
      {"dynamic_factors",
       [](RunConfig& c, const std::string& v) { c.dynamic_factors = to_bool(v); }},
      {"distill_mode", [](RunConfig& c, const std::string& v) { c.distill_mode = v; }},
      {"max_new", [](RunConfig& c, const std::string& v) { c.max_new = to_u64(v); }},
      {"model_dim", [](RunConfig& c, const std::string& v) { c.model_dim = to_u64(v); }},
      {"heads", [](RunConfig& c, const std::string& v) { c.heads = to_u64(v); }},
      {"blocks", [](RunConfig& c, const std::string& v) { c.blocks = to_u64(v); }},
      {"max_len", [](RunConfig& c, const std::string& v) { c.max_len = to_u64(v); }},
      {"hidden_dim", [](RunConfig& c, const std::string& v) { c.hidden_dim = to_u64(v); }},
      {"hidden_layers",
       [](RunConfig& c, const std::string& v) { c.hidden_layers = to_u64(v); }},
      {"gen_seed", [](RunConfig& c, const std::string& v) { c.gen_seed = to_u64(v); }},
      {"classes", [](RunConfig& c, const std::string& v) { c.classes = to_u64(v); }},
      {"input_dim", [](RunConfig& c, const std::string& v) { c.input_dim = to_u64(v); }},
      {"n_train", [](RunConfig& c, const std::string& v) { c.n_train = to_u64(v); }},
      {"n_test", [](RunConfig& c, const std::string& v) { c.n_test = to_u64(v); }},
      {"label_noise",
       [](RunConfig& c, const std::string& v) { c.label_noise = to_f64(v); }},
      {"vocab", [](RunConfig& c, const std::string& v) { c.vocab = to_u64(v); }},
      {"len_min", [](RunConfig& c, const std::string& v) { c.len_min = to_u64(v); }},
      {"len_max", [](RunConfig& c, const std::string& v) { c.len_max = to_u64(v); }},
      {"digits_min", [](RunConfig& c, const std::string& v) { c.digits_min = to_u64(v); }},
      {"digits_max", [](RunConfig& c, const std::string& v) { c.digits_max = to_u64(v); }},
  };
  return table;
}

inline std::string valid_keys() {
  std::string out;
  for (const auto& [k, _] : setters()) {
    if (!out.empty()) out += ", ";
    out += k;
  }
  return out;
}

}  // namespace config_detail

inline void apply_config_line(RunConfig& cfg, const std::string& key,
                              const std::string& value) {
  const auto& table = config_detail::setters();
  auto it = table.find(key);
  if (it == table.end())
    throw std::invalid_argument("config: unknown key '" + key + "'; valid keys: " +
                                config_detail::valid_keys());
  try {
    it->second(cfg, value);
  } catch (const std::exception& e) {
    throw std::invalid_argument("config: bad value for '" + key + "': " + e.what());
  }
}

inline RunConfig parse_config_text(std::istream& in) {
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    // trim helper
    auto trim = [](std::string s) {
      const char* ws = " \t\r";
      s.erase(0, s.find_first_not_of(ws));
      auto end = s.find_last_not_of(ws);
      s.erase(end == std::string::npos ? 0 : end + 1);
      return s;
    };
    if (eq == std::string::npos) {
      if (!trim(line).empty())
        throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                    " is not 'key = value'");
      continue;
    }
    apply_config_line(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot read file " + path);
  return parse_config_text(f);
}

// Canonical echo of the effective configuration: every key, sorted, one per
// line. Together with the seed this reproduces the run byte-for-byte.
inline std::string config_echo(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "alpha = " << c.alpha << "\n"
     << "batch_size = " << c.batch_size << "\n"
     << "blocks = " << c.blocks << "\n"
     << "classes = " << c.classes << "\n"
     << "digits_max = " << c.digits_max << "\n"
     << "digits_min = " << c.digits_min << "\n"
     << "distill_mode = " << c.distill_mode << "\n"
     << "dynamic_factors = " << (c.dynamic_factors ? "true" : "false") << "\n"
     << "epochs = " << c.epochs << "\n"
     << "gen_seed = " << c.gen_seed << "\n"
     << "grad_norm_every = " << c.grad_norm_every << "\n"
     << "heads = " << c.heads << "\n"
     << "hidden_dim = " << c.hidden_dim << "\n"
     << "hidden_layers = " << c.hidden_layers << "\n"
     << "input_dim = " << c.input_dim << "\n"
     << "label_noise = " << c.label_noise << "\n"
     << "len_max = " << c.len_max << "\n"
     << "len_min = " << c.len_min << "\n"
     << "lr = " << c.lr << "\n"
     << "max_len = " << c.max_len << "\n"
     << "max_new = " << c.max_new << "\n"
     << "mode = " << mode_name(c.mode) << "\n"
     << "model_dim = " << c.model_dim << "\n"
     << "n_test = " << c.n_test << "\n"
     << "n_train = " << c.n_train << "\n"
     << "out_dir = " << c.out_dir << "\n"
     << "seed = " << c.seed << "\n"
     << "task = " << c.task << "\n"
     << "tau = " << c.tau << "\n"
     << "vocab = " << c.vocab << "\n"
     << "warmup_frac = " << c.warmup_frac << "\n"
     << "weight_decay = " << c.weight_decay << "\n";
  return os.str();
}

}  // namespace dynsdpb
