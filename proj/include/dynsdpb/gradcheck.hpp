// Central finite-difference verification of every differentiable op.
// The numeric side is deliberately independent of the backward pass it checks.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dynsdpb/tensor.hpp"

namespace dynsdpb {

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  bool passed = false;
};

namespace gradcheck_detail {

// Scalar probe: s = sum(w .* f(inputs)), with fixed random weights so every
// output element contributes.
template <typename Fn>
double probe(Fn&& fn, const std::vector<std::vector<double>>& inputs,
             const std::vector<double>& weights) {
  Tensor out = fn(inputs);
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out.values()[i];
  return s;
}

}  // namespace gradcheck_detail

// fn maps raw input buffers to an output tensor; it must internally build
// requires_grad leaf tensors from the buffers and report them via `leaves`.
// We instead take a builder returning both.
template <typename Builder>
GradCheckResult check_op(const std::string& name, Builder&& build,
                         std::vector<std::vector<double>> inputs, std::uint64_t seed,
                         double step = 1e-5, double tol = 1e-5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> wdist(-1.0, 1.0);

  auto run = [&](const std::vector<std::vector<double>>& bufs,
                 std::vector<Tensor>* leaves_out) {
    std::vector<Tensor> leaves;
    Tensor out = build(bufs, leaves);
    if (leaves_out) *leaves_out = leaves;
    return out;
  };

  std::vector<Tensor> leaves;
  Tensor out = run(inputs, &leaves);
  std::vector<double> weights(out.size());
  for (auto& w : weights) w = wdist(rng);

  Tensor s = sum(mul_const(out, weights));
  backward(s);

  GradCheckResult res{name, 0.0, true};
  // Leaves pair up with the leading input buffers; trailing buffers (e.g. a
  // stop-gradient teacher) are constants and are not perturbed.
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const auto& analytic = leaves[li].grad();
    for (std::size_t i = 0; i < inputs[li].size(); ++i) {
      auto plus = inputs, minus = inputs;
      plus[li][i] += step;
      minus[li][i] -= step;
      const double fp = gradcheck_detail::probe(
          [&](const auto& b) { return run(b, nullptr); }, plus, weights);
      const double fm = gradcheck_detail::probe(
          [&](const auto& b) { return run(b, nullptr); }, minus, weights);
      const double numeric = (fp - fm) / (2.0 * step);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  res.passed = res.max_rel_err <= tol;
  return res;
}

// Runs the full registry of differentiable ops at random points.
std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed = 1234, double tol = 1e-5);

namespace gradcheck_detail {

inline std::vector<double> random_buf(std::mt19937_64& rng, std::size_t n,
                                      double lo = -1.5, double hi = 1.5) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = d(rng);
  return out;
}

// Probability rows built away from the simplex edges so the epsilon clamp in
// KL is inactive at the probed points.
inline std::vector<double> random_prob_rows(std::mt19937_64& rng, std::size_t rows,
                                            std::size_t cols) {
  std::uniform_real_distribution<double> d(0.2, 1.0);
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = d(rng);
      s += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= s;
  }
  return out;
}

}  // namespace gradcheck_detail

inline std::vector<GradCheckResult> run_gradcheck(std::uint64_t seed, double tol) {
  using gradcheck_detail::random_buf;
  using gradcheck_detail::random_prob_rows;
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> results;

  auto leaf = [](const std::vector<double>& buf, Shape shape, std::vector<Tensor>& leaves) {
    Tensor t = Tensor::from(std::move(shape), buf, /*requires_grad=*/true);
    leaves.push_back(t);
    return t;
  };

  const int points = 10;
  auto check = [&](const std::string& name, auto build,
                   auto make_inputs) {
    GradCheckResult worst{name, 0.0, true};
    for (int p = 0; p < points; ++p) {
      auto r = check_op(name, build, make_inputs(), rng(), 1e-5, tol);
      worst.max_rel_err = std::max(worst.max_rel_err, r.max_rel_err);
    }
    worst.passed = worst.max_rel_err <= tol;
    results.push_back(worst);
  };

  // NB: leaves must be registered in input order, so multi-input builders
  // sequence their leaf() calls explicitly (argument evaluation order is
  // unspecified).
  check("matmul",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor x = leaf(b[0], {4, 5}, lv);
          Tensor y = leaf(b[1], {5, 3}, lv);
          return matmul(x, y);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 20), random_buf(rng, 15)}; });
  check("transpose",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return transpose(leaf(b[0], {3, 4}, lv));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12)}; });
  check("add",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor x = leaf(b[0], {3, 4}, lv);
          Tensor y = leaf(b[1], {3, 4}, lv);
          return add(x, y);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12), random_buf(rng, 12)}; });
  check("add_bias",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor x = leaf(b[0], {3, 4}, lv);
          Tensor bias = leaf(b[1], {4}, lv);
          return add_bias(x, bias);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12), random_buf(rng, 4)}; });
  check("add_const",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return add_const(leaf(b[0], {2, 3}, lv), {0.1, -0.2, 0.3, 0.4, -0.5, 0.6});
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 6)}; });
  check("scale",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return scale(leaf(b[0], {2, 3}, lv), 1.7);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 6)}; });
  check("mul",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor x = leaf(b[0], {2, 3}, lv);
          Tensor y = leaf(b[1], {2, 3}, lv);
          return mul(x, y);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 6), random_buf(rng, 6)}; });
  check("mul_const",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return mul_const(leaf(b[0], {2, 3}, lv), {0.5, 1.5, -0.7, 2.0, 0.1, -1.0});
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 6)}; });
  check("relu",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return relu(leaf(b[0], {3, 3}, lv));
        },
        // keep probe points away from the kink at zero
        [&] {
          auto buf = random_buf(rng, 9);
          for (auto& v : buf)
            if (std::abs(v) < 1e-3) v = 0.5;
          return std::vector<std::vector<double>>{buf};
        });
  check("gelu",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return gelu(leaf(b[0], {3, 3}, lv));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 9)}; });
  check("layer_norm",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor x = leaf(b[0], {3, 5}, lv);
          Tensor gamma = leaf(b[1], {5}, lv);
          Tensor beta = leaf(b[2], {5}, lv);
          return layer_norm(x, gamma, beta);
        },
        [&] {
          return std::vector<std::vector<double>>{random_buf(rng, 15), random_buf(rng, 5, 0.5, 1.5),
                             random_buf(rng, 5)};
        });
  check("embedding_lookup",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return embedding_lookup(leaf(b[0], {6, 4}, lv), {1, 3, 3, 0, 5});
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 24)}; });
  check("reshape",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return reshape(leaf(b[0], {3, 4}, lv), {2, 6});
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12)}; });
  check("slice_rows",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return slice_rows(leaf(b[0], {5, 3}, lv), 1, 4);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 15)}; });
  check("slice_cols",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return slice_cols(leaf(b[0], {3, 6}, lv), 2, 5);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 18)}; });
  check("concat_rows",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor parts[2] = {leaf(b[0], {2, 3}, lv), leaf(b[1], {3, 3}, lv)};
          return concat_rows(std::span<const Tensor>(parts, 2));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 6), random_buf(rng, 9)}; });
  check("concat_cols",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor parts[2] = {leaf(b[0], {3, 2}, lv), leaf(b[1], {3, 4}, lv)};
          return concat_cols(std::span<const Tensor>(parts, 2));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 6), random_buf(rng, 12)}; });
  check("sum",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return sum(leaf(b[0], {3, 4}, lv));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12)}; });
  check("mean",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return mean(leaf(b[0], {3, 4}, lv));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12)}; });
  check("tempered_softmax",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return tempered_softmax(leaf(b[0], {3, 5}, lv), 2.5);
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 15)}; });
  check("tempered_softmax_rows",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return tempered_softmax_rows(leaf(b[0], {3, 4}, lv), {0.7, 1.0, 3.0});
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12)}; });
  check("log_clamped",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return log_clamped(leaf(b[0], {2, 4}, lv));
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 8, 0.1, 2.0)}; });
  check("cross_entropy",
        [&](const auto& b, std::vector<Tensor>& lv) {
          return cross_entropy_per_sample(leaf(b[0], {4, 3}, lv), {0, 2, 1, 2});
        },
        [&] { return std::vector<std::vector<double>>{random_buf(rng, 12)}; });
  check("kl_divergence",
        [&](const auto& b, std::vector<Tensor>& lv) {
          Tensor teacher = Tensor::from({3, 4}, b[1]);  // stop-gradient side
          // normalize the student buffer inside the graph so probes stay on
          // the simplex
          Tensor raw = leaf(b[0], {3, 4}, lv);
          Tensor student = tempered_softmax(raw, 1.0);
          return kl_rows(teacher, student);
        },
        [&] {
          return std::vector<std::vector<double>>{random_buf(rng, 12), random_prob_rows(rng, 3, 4)};
        });

  return results;
}

}  // namespace dynsdpb
