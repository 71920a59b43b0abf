// Synthetic desk-scale tasks. Generation is deterministic given the seed and
// train/test splits are disjoint by construction.
#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynsdpb/trainer.hpp"

namespace dynsdpb {

struct ClassificationTask {
  ClassificationData train;
  ClassificationData test;
};

struct SequenceTask {
  SequenceData train;
  SequenceData test;
};

// C Gaussian clusters in d dimensions; symmetric label noise applied to the
// training split only, so test accuracy measures the clean decision rule.
inline ClassificationTask gaussian_blobs(std::size_t classes, std::size_t dim,
                                         std::size_t n_train, std::size_t n_test,
                                         double label_noise, std::uint64_t seed) {
  if (classes < 2) throw std::invalid_argument("gaussian_blobs: need >= 2 classes");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> cls(0, classes - 1);

  std::vector<std::vector<double>> means(classes, std::vector<double>(dim));
  for (auto& m : means)
    for (auto& v : m) v = unit(rng) * 1.5;

  auto make_split = [&](std::size_t n, bool noisy) {
    ClassificationData d;
    d.input_dim = dim;
    d.classes = classes;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = cls(rng);
      std::vector<double> x(dim);
      for (std::size_t j = 0; j < dim; ++j) x[j] = means[c][j] + 1.6 * unit(rng);
      std::size_t label = c;
      if (noisy && coin(rng) < label_noise) {
        label = cls(rng);  // symmetric: uniform over all classes incl. the true one
      }
      d.inputs.push_back(std::move(x));
      d.labels.push_back(label);
    }
    return d;
  };
  ClassificationTask task;
  task.train = make_split(n_train, true);
  task.test = make_split(n_test, false);
  return task;
}

// Two-input XOR with a margin band removed around the axes.
inline ClassificationTask xor_grid(std::size_t n_train, std::size_t n_test,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coord(-1.0, 1.0);
  auto make_split = [&](std::size_t n) {
    ClassificationData d;
    d.input_dim = 2;
    d.classes = 2;
    while (d.inputs.size() < n) {
      const double x = coord(rng), y = coord(rng);
      if (std::abs(x) < 0.05 || std::abs(y) < 0.05) continue;
      d.inputs.push_back({x, y});
      d.labels.push_back((x > 0) != (y > 0) ? 1 : 0);
    }
    return d;
  };
  ClassificationTask task;
  task.train = make_split(n_train);
  task.test = make_split(n_test);
  return task;
}

// Token conventions shared by the character tasks.
inline constexpr std::size_t kSepToken = 1;  // marks end of the prompt

// Reverse a random string. Vocabulary: 0 = EOS, 1 = separator, 2.. = symbols.
inline SequenceTask char_reverse(std::size_t len_min, std::size_t len_max,
                                 std::size_t vocab, std::size_t n_train,
                                 std::size_t n_test, std::uint64_t seed) {
  if (vocab < 4) throw std::invalid_argument("char_reverse: vocab must be >= 4");
  if (len_min == 0 || len_min > len_max)
    throw std::invalid_argument("char_reverse: invalid length range");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(len_min, len_max);
  std::uniform_int_distribution<std::size_t> sym(2, vocab - 1);

  std::set<std::vector<std::size_t>> seen;
  std::vector<SequenceExample> all;
  while (all.size() < n_train + n_test) {
    std::vector<std::size_t> s(len(rng));
    for (auto& t : s) t = sym(rng);
    if (!seen.insert(s).second) continue;
    SequenceExample ex;
    ex.prompt = s;
    ex.prompt.push_back(kSepToken);
    ex.target.assign(s.rbegin(), s.rend());
    ex.target.push_back(kEosToken);
    all.push_back(std::move(ex));
  }
  SequenceTask task;
  task.train.vocab = task.test.vocab = vocab;
  task.train.examples.assign(all.begin(), all.begin() + n_train);
  task.test.examples.assign(all.begin() + n_train, all.end());
  return task;
}

// Addition of two small numbers rendered digit by digit.
// Vocabulary: 0 = EOS, 1 = '=', 2..11 = digits 0-9, 12 = '+'.
inline SequenceTask char_addition(std::size_t digits_min, std::size_t digits_max,
                                  std::size_t n_train, std::size_t n_test,
                                  std::uint64_t seed) {
  if (digits_min == 0 || digits_min > digits_max || digits_max > 4)
    throw std::invalid_argument("char_addition: digit range must be within [1,4]");
  constexpr std::size_t kPlus = 12;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ndig(digits_min, digits_max);

  auto digits_of = [](std::size_t v) {
    std::vector<std::size_t> out;
    if (v == 0) out.push_back(2);
    while (v > 0) {
      out.push_back(2 + v % 10);
      v /= 10;
    }
    std::reverse(out.begin(), out.end());
    return out;
  };
  auto rand_with_digits = [&](std::size_t k) {
    std::size_t lo = 1, hi = 9;
    for (std::size_t i = 1; i < k; ++i) {
      lo *= 10;
      hi = hi * 10 + 9;
    }
    if (k == 1) lo = 0;
    std::uniform_int_distribution<std::size_t> d(lo, hi);
    return d(rng);
  };

  std::set<std::pair<std::size_t, std::size_t>> seen;
  std::vector<SequenceExample> all;
  while (all.size() < n_train + n_test) {
    const std::size_t a = rand_with_digits(ndig(rng));
    const std::size_t b = rand_with_digits(ndig(rng));
    if (!seen.insert({a, b}).second) continue;
    SequenceExample ex;
    ex.prompt = digits_of(a);
    ex.prompt.push_back(kPlus);
    auto bd = digits_of(b);
    ex.prompt.insert(ex.prompt.end(), bd.begin(), bd.end());
    ex.prompt.push_back(kSepToken);
    ex.target = digits_of(a + b);
    ex.target.push_back(kEosToken);
    all.push_back(std::move(ex));
  }
  SequenceTask task;
  task.train.vocab = task.test.vocab = 13;
  task.train.examples.assign(all.begin(), all.begin() + n_train);
  task.test.examples.assign(all.begin() + n_train, all.end());
  return task;
}

}  // namespace dynsdpb
