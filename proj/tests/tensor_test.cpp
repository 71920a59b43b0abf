#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dynsdpb/gradcheck.hpp"
#include "dynsdpb/tensor.hpp"

using namespace dynsdpb;

TEST_CASE("matmul value oracle") {
  Tensor a = Tensor::from({1, 2}, {1.0, 2.0});
  Tensor b = Tensor::from({2, 1}, {3.0, 4.0});
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{1, 1});
  CHECK(c.item() == doctest::Approx(11.0).epsilon(1e-15));

  Tensor d = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 2}, {5, 6, 7, 8}));
  CHECK(d.values() == std::vector<double>{19, 22, 43, 50});
  CHECK_THROWS_AS(matmul(a, a), std::invalid_argument);
}

TEST_CASE("softmax value oracle") {
  Tensor p = softmax(Tensor::from({1, 2}, {2.0, 0.0}));
  CHECK(p.values()[0] == doctest::Approx(0.8807970779778823).epsilon(1e-12));
  CHECK(p.values()[1] == doctest::Approx(0.11920292202211755).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> d(-20.0, 20.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> buf(12);
    for (auto& v : buf) v = d(rng);
    Tensor logits = Tensor::from({3, 4}, buf);
    Tensor p = tempered_softmax(logits, 1.0 + std::abs(d(rng)) / 10.0);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 4; ++c) s += p.values()[r * 4 + c];
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    // add a per-row constant to all logits
    auto shifted = buf;
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t c = 0; c < 4; ++c) shifted[r * 4 + c] += 3.25 * (double(r) + 1.0);
    Tensor p2 = softmax(Tensor::from({3, 4}, buf));
    Tensor p3 = softmax(Tensor::from({3, 4}, shifted));
    for (std::size_t i = 0; i < 12; ++i)
      CHECK(std::abs(p2.values()[i] - p3.values()[i]) <= 1e-12);
  }
}

TEST_CASE("tempered softmax rejects nonpositive temperature") {
  Tensor logits = Tensor::from({1, 2}, {1.0, 2.0});
  CHECK_THROWS_AS(tempered_softmax(logits, 0.0), std::domain_error);
  CHECK_THROWS_AS(tempered_softmax(logits, -2.0), std::domain_error);
}

TEST_CASE("cross entropy value oracle") {
  // probabilities (0.7, 0.2, 0.1) via log-probability logits; target class 0
  Tensor logits =
      Tensor::from({1, 3}, {std::log(0.7), std::log(0.2), std::log(0.1)});
  Tensor ce = cross_entropy(logits, {0});
  CHECK(ce.item() == doctest::Approx(0.35667494393873245).epsilon(1e-12));
  CHECK_THROWS_AS(cross_entropy(logits, {3}), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy(logits, {0, 1}), std::invalid_argument);
}

TEST_CASE("kl divergence oracles") {
  Tensor p = Tensor::from({1, 3}, {0.5, 0.3, 0.2});
  CHECK(kl_divergence(p, p).item() <= 1e-12);

  // KL([1,0] || [0.5,0.5]) = ln 2, up to the epsilon floor on the zero entry
  Tensor a = Tensor::from({1, 2}, {1.0, 0.0});
  Tensor b = Tensor::from({1, 2}, {0.5, 0.5});
  CHECK(kl_divergence(a, b).item() == doctest::Approx(0.6931471805599453).epsilon(1e-9));

  CHECK_THROWS_AS(kl_divergence(Tensor::from({1, 2}, {0.9, 0.3}), b),
                  std::invalid_argument);
}

TEST_CASE("kl divergence is nonnegative for random distributions") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(0.01, 1.0);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> pa(5), pb(5);
    double sa = 0, sb = 0;
    for (int i = 0; i < 5; ++i) {
      pa[i] = d(rng);
      pb[i] = d(rng);
      sa += pa[i];
      sb += pb[i];
    }
    for (int i = 0; i < 5; ++i) {
      pa[i] /= sa;
      pb[i] /= sb;
    }
    double kl = kl_divergence(Tensor::from({1, 5}, pa), Tensor::from({1, 5}, pb)).item();
    CHECK(kl >= -1e-12);
  }
}

TEST_CASE("simple derivative: d/dx x^2 at x=3 is 6") {
  Tensor x = Tensor::from({1}, {3.0}, /*requires_grad=*/true);
  Tensor y = mul(x, x);
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
}

TEST_CASE("second backward without rebuilding the graph is an error") {
  Tensor x = Tensor::from({1}, {2.0}, true);
  Tensor y = sum(mul(x, x));
  backward(y);
  CHECK_THROWS_AS(backward(y), std::runtime_error);
}

TEST_CASE("backward requires a scalar") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(x), std::invalid_argument);
}

TEST_CASE("detach blocks gradient flow completely") {
  Tensor x = Tensor::from({1}, {3.0}, true);
  Tensor stopped = mul(x, x).detach();
  CHECK_FALSE(stopped.requires_grad());
  Tensor y = sum(mul(stopped, stopped));
  backward(y);
  CHECK_FALSE(x.has_grad());  // nothing ever reached x
}

TEST_CASE("relu trivials") {
  Tensor r = relu(Tensor::from({1, 2}, {-1.0, 2.0}));
  CHECK(r.values() == std::vector<double>{0.0, 2.0});
}

TEST_CASE("layer norm of a constant row is pure beta") {
  Tensor x = Tensor::from({1, 4}, {5.0, 5.0, 5.0, 5.0});
  Tensor gamma = Tensor::from({4}, {1, 1, 1, 1});
  Tensor beta = Tensor::from({4}, {0.25, -0.5, 0.0, 1.0});
  Tensor y = layer_norm(x, gamma, beta);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(y.values()[i] == doctest::Approx(beta.values()[i]).epsilon(1e-12));
}

TEST_CASE("slice then concat is the identity") {
  Tensor a = Tensor::from({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  Tensor parts[2] = {slice_rows(a, 0, 2), slice_rows(a, 2, 4)};
  Tensor back = concat_rows(std::span<const Tensor>(parts, 2));
  CHECK(back.values() == a.values());
  Tensor cparts[2] = {slice_cols(a, 0, 1), slice_cols(a, 1, 3)};
  Tensor cback = concat_cols(std::span<const Tensor>(cparts, 2));
  CHECK(cback.values() == a.values());
}

TEST_CASE("mean gradient spreads uniformly") {
  Tensor x = Tensor::from({4}, {1.0, 2.0, 3.0, 4.0}, true);
  backward(mean(x));
  for (double g : x.grad()) CHECK(g == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("log_clamped floors at epsilon and zeroes the clamped gradient") {
  Tensor x = Tensor::from({1, 2}, {4.0, 0.0}, true);
  Tensor y = log_clamped(x);
  CHECK(y.values()[0] == doctest::Approx(1.3862943611198906).epsilon(1e-14));
  CHECK(y.values()[1] == doctest::Approx(std::log(1e-12)).epsilon(1e-14));
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("embedding lookup scatters gradient by id") {
  Tensor table = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor rows = embedding_lookup(table, {2, 0, 2});
  CHECK(rows.values() == std::vector<double>{5, 6, 1, 2, 5, 6});
  backward(sum(rows));
  CHECK(table.grad() == std::vector<double>{1, 1, 0, 0, 2, 2});
  CHECK_THROWS_AS(embedding_lookup(table, {3}), std::out_of_range);
}

TEST_CASE("shape errors are reported") {
  CHECK_THROWS_AS(add(Tensor::from({2}, {1, 2}), Tensor::from({3}, {1, 2, 3})),
                  std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0}), std::invalid_argument);
  CHECK_THROWS_AS(reshape(Tensor::from({2}, {1, 2}), {3}), std::invalid_argument);
  CHECK_THROWS_AS(slice_rows(Tensor::from({2, 2}, {1, 2, 3, 4}), 1, 3),
                  std::out_of_range);
}

TEST_CASE("finite differences agree with backward on a composite graph") {
  // Independent numeric oracle for a softmax -> CE -> mean pipeline.
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> buf(6);
  for (auto& v : buf) v = d(rng);
  const std::vector<std::size_t> targets{1, 0};

  auto loss_at = [&](const std::vector<double>& b) {
    return cross_entropy(Tensor::from({2, 3}, b), targets).item();
  };
  Tensor x = Tensor::from({2, 3}, buf, true);
  backward(cross_entropy(x, targets));
  const double h = 1e-6;
  for (std::size_t i = 0; i < buf.size(); ++i) {
    auto p = buf, m = buf;
    p[i] += h;
    m[i] -= h;
    const double fd = (loss_at(p) - loss_at(m)) / (2 * h);
    CHECK(x.grad()[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}
