// Dense double-precision tensors with reverse-mode automatic differentiation.
// Graphs are built define-by-run and torn down after one backward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynsdpb {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Floor applied inside every logarithm.
inline constexpr double kLogFloor = 1e-12;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool backward_done = false;  // set on the root after backward()
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grad buffers.
  std::function<void(const Node&)> backprop;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from(std::move(shape), {}, requires_grad, /*fill_zero=*/true);
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false, bool fill_zero = false) {
    auto node = std::make_shared<detail::Node>();
    const std::size_t n = shape_numel(shape);
    if (fill_zero) {
      values.assign(n, 0.0);
    } else if (values.size() != n) {
      throw std::invalid_argument("Tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(shape));
    }
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }
  bool requires_grad() const { return node_->requires_grad; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const std::vector<double>& grad() const {
    if (!has_grad())
      throw std::runtime_error("Tensor: gradient not populated; run backward() first");
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  double item() const {
    if (size() != 1)
      throw std::invalid_argument("Tensor::item: tensor has " +
                                  std::to_string(size()) + " elements, expected 1");
    return node_->value[0];
  }

  // Value copy disconnected from any graph; never accumulates gradient.
  Tensor detach() const {
    auto node = std::make_shared<detail::Node>();
    node->shape = node_->shape;
    node->value = node_->value;
    node->requires_grad = false;
    return Tensor(std::move(node));
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<std::shared_ptr<Node>> parents,
                      std::function<void(const Node&)> backprop) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->parents = std::move(parents);
  for (const auto& p : node->parents)
    if (p->requires_grad) node->requires_grad = true;
  if (node->requires_grad) node->backprop = std::move(backprop);
  return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Interprets a tensor as [rows x cols] with cols = last extent.
inline std::pair<std::size_t, std::size_t> as_rows(const Tensor& t, const char* op) {
  if (t.shape().empty())
    throw std::invalid_argument(std::string(op) + ": rank-0 tensor");
  const std::size_t cols = t.shape().back();
  return {t.size() / cols, cols};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(out), {an, bn},
                         [an, bn](const detail::Node& self) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] += self.grad[i];
                           }
                         });
}

// a: [m x k], bias: [k]; bias added to every row.
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  auto [rows, cols] = detail::as_rows(a, "add_bias");
  if (bias.shape() != Shape{cols})
    throw std::invalid_argument("add_bias: bias " + shape_str(bias.shape()) +
                                " does not match row width of " + shape_str(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out[r * cols + c] = a.values()[r * cols + c] + bias.values()[c];
  auto an = a.node(), bn = bias.node();
  return detail::make_op(a.shape(), std::move(out), {an, bn},
                         [an, bn, rows, cols](const detail::Node& self) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t c = 0; c < cols; ++c)
                                 bn->grad[c] += self.grad[r * cols + c];
                           }
                         });
}

// Adds a constant buffer (no gradient into it); used e.g. for causal masks.
inline Tensor add_const(const Tensor& a, const std::vector<double>& c) {
  if (c.size() != a.size())
    throw std::invalid_argument("add_const: constant size " + std::to_string(c.size()) +
                                " vs tensor " + shape_str(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + c[i];
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), {an},
                         [an](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[i] += self.grad[i];
                         });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), {an},
                         [an, s](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[i] += self.grad[i] * s;
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op(a.shape(), std::move(out), {an, bn},
                         [an, bn](const detail::Node& self) {
                           if (an->requires_grad) {
                             an->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               an->grad[i] += self.grad[i] * bn->value[i];
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               bn->grad[i] += self.grad[i] * an->value[i];
                           }
                         });
}

// Elementwise product with a constant weight buffer.
inline Tensor mul_const(const Tensor& a, const std::vector<double>& w) {
  if (w.size() != a.size())
    throw std::invalid_argument("mul_const: weight size " + std::to_string(w.size()) +
                                " vs tensor " + shape_str(a.shape()));
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * w[i];
  auto an = a.node();
  auto wc = w;
  return detail::make_op(a.shape(), std::move(out), {an},
                         [an, wc = std::move(wc)](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[i] += self.grad[i] * wc[i];
                         });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw std::invalid_argument("matmul: expected rank-2 operands, got " +
                                shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents differ, " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  auto an = a.node(), bn = b.node();
  return detail::make_op({m, n}, std::move(out), {an, bn},
                         [an, bn, m, k, n](const detail::Node& self) {
                           const auto& g = self.grad;
                           if (an->requires_grad) {  // dA = g . B^T
                             an->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t j = 0; j < n; ++j) {
                                 const double gij = g[i * n + j];
                                 for (std::size_t p = 0; p < k; ++p)
                                   an->grad[i * k + p] += gij * bn->value[p * n + j];
                               }
                           }
                           if (bn->requires_grad) {  // dB = A^T . g
                             bn->ensure_grad();
                             for (std::size_t i = 0; i < m; ++i)
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double aip = an->value[i * k + p];
                                 for (std::size_t j = 0; j < n; ++j)
                                   bn->grad[p * n + j] += aip * g[i * n + j];
                               }
                           }
                         });
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("transpose: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto an = a.node();
  return detail::make_op({n, m}, std::move(out), {an},
                         [an, m, n](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t j = 0; j < n; ++j)
                               an->grad[i * n + j] += self.grad[j * m + i];
                         });
}

// ---------------------------------------------------------------------------
// Nonlinearities

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > 0 ? a.values()[i] : 0.0;
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), {an},
                         [an](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             if (an->value[i] > 0) an->grad[i] += self.grad[i];
                         });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.values()[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), {an},
                         [an](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i) {
                             const double x = an->value[i];
                             const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                             const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                             an->grad[i] += self.grad[i] * (cdf + x * pdf);
                           }
                         });
}

// Normalizes each last-axis row to zero mean / unit variance, then applies
// the affine pair (gamma, beta) of row width.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  auto [rows, cols] = detail::as_rows(x, "layer_norm");
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols})
    throw std::invalid_argument("layer_norm: affine params must have shape [" +
                                std::to_string(cols) + "]");
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.values().data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      xhat[r * cols + c] = (row[c] - mu) * inv_std[r];
      out[r * cols + c] = xhat[r * cols + c] * gamma.values()[c] + beta.values()[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_op(
      x.shape(), std::move(out), {xn, gn, bn},
      [xn, gn, bn, rows, cols, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const detail::Node& self) {
        const double dcols = static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * cols;
          const double* xh = xhat.data() + r * cols;
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::size_t c = 0; c < cols; ++c) gn->grad[c] += g[c] * xh[c];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t c = 0; c < cols; ++c) bn->grad[c] += g[c];
          }
          if (xn->requires_grad) {
            xn->ensure_grad();
            // dxhat_c = g_c * gamma_c; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[c] * gn->value[c];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * xh[c];
            }
            for (std::size_t c = 0; c < cols; ++c) {
              const double dxh = g[c] * gn->value[c];
              xn->grad[r * cols + c] +=
                  (dxh - sum_dxh / dcols - xh[c] * sum_dxh_xh / dcols) * inv_std[r];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::size_t>& ids) {
  if (table.shape().size() != 2)
    throw std::invalid_argument("embedding_lookup: table must be rank-2, got " +
                                shape_str(table.shape()));
  const std::size_t vocab = table.shape()[0], dim = table.shape()[1];
  for (auto id : ids)
    if (id >= vocab)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " >= table rows " + std::to_string(vocab));
  std::vector<double> out(ids.size() * dim);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy_n(table.values().data() + ids[i] * dim, dim, out.data() + i * dim);
  auto tn = table.node();
  auto idc = ids;
  return detail::make_op({ids.size(), dim}, std::move(out), {tn},
                         [tn, dim, idc = std::move(idc)](const detail::Node& self) {
                           tn->ensure_grad();
                           for (std::size_t i = 0; i < idc.size(); ++i)
                             for (std::size_t c = 0; c < dim; ++c)
                               tn->grad[idc[i] * dim + c] += self.grad[i * dim + c];
                         });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) +
                                " as " + shape_str(shape));
  auto an = a.node();
  return detail::make_op(std::move(shape), a.values(), {an},
                         [an](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[i] += self.grad[i];
                         });
}

inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("slice_rows: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (r0 > r1 || r1 > rows)
    throw std::out_of_range("slice_rows: range [" + std::to_string(r0) + "," +
                            std::to_string(r1) + ") outside " + std::to_string(rows) + " rows");
  std::vector<double> out((r1 - r0) * cols);
  std::copy_n(a.values().data() + r0 * cols, out.size(), out.data());
  auto an = a.node();
  return detail::make_op({r1 - r0, cols}, std::move(out), {an},
                         [an, r0, cols](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             an->grad[r0 * cols + i] += self.grad[i];
                         });
}

inline Tensor slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.shape().size() != 2)
    throw std::invalid_argument("slice_cols: expected rank-2, got " + shape_str(a.shape()));
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (c0 > c1 || c1 > cols)
    throw std::out_of_range("slice_cols: range [" + std::to_string(c0) + "," +
                            std::to_string(c1) + ") outside " + std::to_string(cols) + " cols");
  const std::size_t w = c1 - c0;
  std::vector<double> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(a.values().data() + r * cols + c0, w, out.data() + r * w);
  auto an = a.node();
  return detail::make_op({rows, w}, std::move(out), {an},
                         [an, rows, cols, c0, w](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < w; ++c)
                               an->grad[r * cols + c0 + c] += self.grad[r * w + c];
                         });
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = parts[0].shape().back();
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<std::shared_ptr<detail::Node>> parents;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.shape()[1] != cols)
      throw std::invalid_argument("concat_rows: incompatible part " + shape_str(p.shape()));
    rows += p.shape()[0];
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node());
  }
  auto parents_copy = parents;
  return detail::make_op({rows, cols}, std::move(out), std::move(parents),
                         [parents = std::move(parents_copy)](const detail::Node& self) {
                           std::size_t off = 0;
                           for (const auto& p : parents) {
                             if (p->requires_grad) {
                               p->ensure_grad();
                               for (std::size_t i = 0; i < p->value.size(); ++i)
                                 p->grad[i] += self.grad[off + i];
                             }
                             off += p->value.size();
                           }
                         });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].shape()[0];
  std::size_t cols = 0;
  std::vector<std::size_t> widths;
  std::vector<std::shared_ptr<detail::Node>> parents;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.shape()[0] != rows)
      throw std::invalid_argument("concat_cols: incompatible part " + shape_str(p.shape()));
    widths.push_back(p.shape()[1]);
    cols += p.shape()[1];
    parents.push_back(p.node());
  }
  std::vector<double> out(rows * cols);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(parts[k].values().data() + r * widths[k], widths[k],
                  out.data() + r * cols + off);
    off += widths[k];
  }
  auto parents_copy = parents;
  return detail::make_op({rows, cols}, std::move(out), std::move(parents),
                         [parents = std::move(parents_copy), widths, rows,
                          cols](const detail::Node& self) {
                           std::size_t off = 0;
                           for (std::size_t k = 0; k < parents.size(); ++k) {
                             const auto& p = parents[k];
                             if (p->requires_grad) {
                               p->ensure_grad();
                               for (std::size_t r = 0; r < rows; ++r)
                                 for (std::size_t c = 0; c < widths[k]; ++c)
                                   p->grad[r * widths[k] + c] +=
                                       self.grad[r * cols + off + c];
                             }
                             off += widths[k];
                           }
                         });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto an = a.node();
  return detail::make_op({1}, {s}, {an}, [an](const detail::Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double inv_n = 1.0 / static_cast<double>(a.size());
  auto an = a.node();
  return detail::make_op({1}, {s * inv_n}, {an}, [an, inv_n](const detail::Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += self.grad[0] * inv_n;
  });
}

// ---------------------------------------------------------------------------
// Probability ops

// Softmax along the last axis with a per-row temperature divisor.
inline Tensor tempered_softmax_rows(const Tensor& logits, const std::vector<double>& taus) {
  auto [rows, cols] = detail::as_rows(logits, "tempered_softmax");
  if (taus.size() != rows)
    throw std::invalid_argument("tempered_softmax: " + std::to_string(taus.size()) +
                                " temperatures for " + std::to_string(rows) + " rows");
  for (double t : taus)
    if (!(t > 0.0))
      throw std::domain_error("tempered_softmax: temperature must be positive, got " +
                              std::to_string(t));
  std::vector<double> out(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = logits.values().data() + r * cols;
    const double inv_tau = 1.0 / taus[r];
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = std::exp((row[c] - mx) * inv_tau);
      z += out[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
  }
  auto an = logits.node();
  auto probs = out;  // reused by the backward closure
  return detail::make_op(
      logits.shape(), std::move(out), {an},
      [an, rows, cols, taus, probs = std::move(probs)](const detail::Node& self) {
        an->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          const double* g = self.grad.data() + r * cols;
          const double* p = probs.data() + r * cols;
          double dot = 0.0;
          for (std::size_t c = 0; c < cols; ++c) dot += g[c] * p[c];
          const double inv_tau = 1.0 / taus[r];
          for (std::size_t c = 0; c < cols; ++c)
            an->grad[r * cols + c] += p[c] * (g[c] - dot) * inv_tau;
        }
      });
}

inline Tensor tempered_softmax(const Tensor& logits, double tau) {
  auto [rows, cols] = detail::as_rows(logits, "tempered_softmax");
  (void)cols;
  return tempered_softmax_rows(logits, std::vector<double>(rows, tau));
}

inline Tensor softmax(const Tensor& logits) { return tempered_softmax(logits, 1.0); }

// log(max(x, floor)); gradient is zero on the clamped region.
inline Tensor log_clamped(const Tensor& a, double floor = kLogFloor) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::log(std::max(a.values()[i], floor));
  auto an = a.node();
  return detail::make_op(a.shape(), std::move(out), {an},
                         [an, floor](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             if (an->value[i] >= floor)
                               an->grad[i] += self.grad[i] / an->value[i];
                         });
}

// Per-sample -log softmax(logits)[target] at temperature 1.
inline Tensor cross_entropy_per_sample(const Tensor& logits,
                                       const std::vector<std::size_t>& targets) {
  auto [rows, cols] = detail::as_rows(logits, "cross_entropy");
  if (targets.size() != rows)
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for " + std::to_string(rows) + " rows");
  for (auto t : targets)
    if (t >= cols)
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " >= class count " + std::to_string(cols));
  std::vector<double> out(rows);
  std::vector<double> probs(logits.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = logits.values().data() + r * cols;
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      probs[r * cols + c] = std::exp(row[c] - mx);
      z += probs[r * cols + c];
    }
    for (std::size_t c = 0; c < cols; ++c) probs[r * cols + c] /= z;
    out[r] = -(row[targets[r]] - mx - std::log(z));
  }
  auto an = logits.node();
  auto tcopy = targets;
  return detail::make_op({rows}, std::move(out), {an},
                         [an, rows, cols, probs = std::move(probs),
                          tcopy = std::move(tcopy)](const detail::Node& self) {
                           an->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double g = self.grad[r];
                             for (std::size_t c = 0; c < cols; ++c)
                               an->grad[r * cols + c] += g * probs[r * cols + c];
                             an->grad[r * cols + tcopy[r]] -= g;
                           }
                         });
}

inline Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  return mean(cross_entropy_per_sample(logits, targets));
}

namespace detail {
inline void require_prob_rows(const Tensor& p, const char* op) {
  auto [rows, cols] = as_rows(p, op);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = p.values()[r * cols + c];
      if (v < -1e-12)
        throw std::invalid_argument(std::string(op) + ": negative probability entry");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw std::invalid_argument(std::string(op) + ": row " + std::to_string(r) +
                                  " sums to " + std::to_string(s) + ", not 1");
  }
}
}  // namespace detail

// Row-wise KL(p_teacher || p_student). Gradient flows only into p_student.
inline Tensor kl_rows(const Tensor& p_teacher, const Tensor& p_student) {
  detail::require_same_shape(p_teacher, p_student, "kl_divergence");
  detail::require_prob_rows(p_teacher, "kl_divergence(teacher)");
  detail::require_prob_rows(p_student, "kl_divergence(student)");
  auto [rows, cols] = detail::as_rows(p_student, "kl_divergence");
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double pt = std::max(p_teacher.values()[r * cols + c], kLogFloor);
      const double ps = std::max(p_student.values()[r * cols + c], kLogFloor);
      out[r] += pt * (std::log(pt) - std::log(ps));
    }
  auto tn = p_teacher.node(), sn = p_student.node();
  return detail::make_op({rows}, std::move(out), {sn},
                         [tn, sn, rows, cols](const detail::Node& self) {
                           sn->ensure_grad();
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double g = self.grad[r];
                             for (std::size_t c = 0; c < cols; ++c) {
                               const double ps = sn->value[r * cols + c];
                               if (ps >= kLogFloor)
                                 sn->grad[r * cols + c] -=
                                     g * std::max(tn->value[r * cols + c], kLogFloor) / ps;
                             }
                           }
                         });
}

inline Tensor kl_divergence(const Tensor& p_teacher, const Tensor& p_student) {
  return mean(kl_rows(p_teacher, p_student));
}

// ---------------------------------------------------------------------------
// Backward

inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  auto root = loss.node();
  if (root->backward_done)
    throw std::runtime_error("backward: graph already consumed; rebuild it before "
                             "calling backward again");
  root->backward_done = true;

  // Reverse topological order via iterative post-order DFS.
  std::vector<detail::Node*> order;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  std::vector<detail::Node*> seen;
  auto mark_seen = [&](detail::Node* n) {
    // Nodes are few enough per graph that linear membership checks would not
    // do; use a visited flag stored via grad-size trick is fragile, so keep a
    // sorted vector.
    auto it = std::lower_bound(seen.begin(), seen.end(), n);
    if (it != seen.end() && *it == n) return false;
    seen.insert(it, n);
    return true;
  };
  if (mark_seen(root.get())) stack.emplace_back(root.get(), 0);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      detail::Node* parent = node->parents[idx++].get();
      if (parent->requires_grad && mark_seen(parent)) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->ensure_grad();
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace dynsdpb
