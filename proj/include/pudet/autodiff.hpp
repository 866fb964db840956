#pragma once

// Minimal dense reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to a shared node. Every op allocates a fresh
// node holding its output and a closure that propagates the output gradient
// to its parents. backward() orders the reachable nodes topologically and
// runs the closures once each, in reverse.

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
#include <unordered_set>
#include <utility>
#include <vector>

#include "pudet/errors.hpp"

namespace pudet {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({}, {v}, requires_grad);
  }
  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const std::size_t n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.size() == 2 ? node_->shape[0] : numel(); }
  std::size_t cols() const { return node_->shape.size() == 2 ? node_->shape[1] : 1; }

  std::span<const double> data() const { return node_->data; }
  // Parameters are updated in place by the optimizer.
  std::span<double> mutable_data() { return node_->data; }
  double item() const {
    if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Detached copy: same values, no history.
  Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);

  std::shared_ptr<detail::Node> node_;
};

inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          std::function<void(detail::Node&)> backward_fn) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  for (const auto& t : inputs) {
    if (t.requires_grad()) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (auto& t : inputs) n->parents.push_back(t.node_ptr());
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

/// Topologically ordered view of the graph reachable from a root.
/// Every node appears after all of its inputs.
struct ComputationGraph {
  std::vector<detail::Node*> nodes;

  static ComputationGraph trace(const Tensor& root) {
    ComputationGraph g;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS; deep chains would overflow the stack otherwise.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.node(), 0);
    seen.insert(root.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        g.nodes.push_back(node);
        stack.pop_back();
      }
    }
    return g;
  }
};

inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw UsageError("backward() requires a scalar root, got shape " +
                     (root.defined() ? shape_str(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) return;
  const ComputationGraph g = ComputationGraph::trace(root);
  // Intermediate grads are per-pass scratch; only leaves accumulate across calls.
  for (detail::Node* n : g.nodes)
    if (n->backward_fn) n->grad.clear();
  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = g.nodes.rbegin(); it != g.nodes.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

inline void require_matrix(const Tensor& a, const char* op) {
  if (a.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

template <class Fwd, class Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  auto xn = x.node_ptr();
  return make_result(x.shape(), std::move(out), {x}, [xn, deriv](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i] * deriv(xn->data[i], self.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b);
inline Tensor mul(const Tensor& a, const Tensor& b);

/// Scalar-with-tensor broadcasting for the binary elementwise ops.
namespace detail {

template <class Fwd, class DA, class DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, DA da, DB db) {
  const bool a_scalar = a.numel() == 1 && b.numel() != 1;
  const bool b_scalar = b.numel() == 1 && a.numel() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(a, b, op);
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(shape);
  auto ad = a.data();
  auto bd = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(ad[a_scalar ? 0 : i], bd[b_scalar ? 0 : i]);
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result(shape, std::move(out), {a, b}, [=](Node& self) {
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const std::size_t ia = a_scalar ? 0 : i;
      const std::size_t ib = b_scalar ? 0 : i;
      const double g = self.grad[i];
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad[ia] += g * da(an->data[ia], bn->data[ib]);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[ib] += g * db(an->data[ia], bn->data[ib]);
      }
    }
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor neg(const Tensor& x) {
  return detail::unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor mul_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return detail::unary(x, [](double v) { return std::log(v); },
                       [](double v, double) { return 1.0 / v; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                       [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor clamp_min_zero(const Tensor& x) { return relu(x); }

inline Tensor max_with_scalar(const Tensor& x, double s) {
  return detail::unary(x, [s](double v) { return v > s ? v : s; },
                       [s](double v, double) { return v > s ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

/// Clip into [lo, hi]; gradient passes only strictly inside the interval.
inline Tensor clip(const Tensor& x, double lo, double hi) {
  return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                       [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

/// x^p for x > 0 and real p.
inline Tensor pow_scalar(const Tensor& x, double p) {
  return detail::unary(x, [p](double v) { return std::pow(v, p); },
                       [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); });
}

/// Elementwise 0.5 t^2 for |t| < 1, |t| - 0.5 otherwise.
inline Tensor smooth_l1_elementwise(const Tensor& t) {
  return detail::unary(
      t, [](double v) { return std::abs(v) < 1.0 ? 0.5 * v * v : std::abs(v) - 0.5; },
      [](double v, double) { return std::abs(v) < 1.0 ? v : (v > 0.0 ? 1.0 : -1.0); });
}

inline Tensor sum(const Tensor& x) {
  auto xd = x.data();
  const double s = std::accumulate(xd.begin(), xd.end(), 0.0);
  auto xn = x.node_ptr();
  return make_result({}, {s}, {x}, [xn](detail::Node& self) {
    xn->ensure_grad();
    for (double& g : xn->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw UsageError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ad[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bd.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return make_result({n, m}, std::move(out), {a, b}, [an, bn, n, k, m](detail::Node& self) {
    const double* g = self.grad.data();
    if (an->requires_grad) {
      // dA = G * B^T, accumulated row by row against B^T for contiguous access.
      an->ensure_grad();
      std::vector<double> bt(k * m);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = bn->data[p * m + j];
      for (std::size_t i = 0; i < n; ++i) {
        double* arow = an->grad.data() + i * k;
        for (std::size_t j = 0; j < m; ++j) {
          const double gv = g[i * m + j];
          if (gv == 0.0) continue;
          const double* btrow = bt.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) arow[p] += gv * btrow[p];
        }
      }
    }
    if (bn->requires_grad) {
      // dB = A^T * G
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const double* grow = g + i * m;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = an->data[i * k + p];
          if (av == 0.0) continue;
          double* brow = bn->grad.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) brow[j] += av * grow[j];
        }
      }
    }
  });
}

/// x[n×m] + bias[m] applied to every row.
inline Tensor add_row(const Tensor& x, const Tensor& bias) {
  detail::require_matrix(x, "add_row");
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  if (bias.numel() != m) {
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not fit rows of " +
                         shape_str(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bd = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bd[j];
  auto xn = x.node_ptr();
  auto bn = bias.node_ptr();
  return make_result(x.shape(), std::move(out), {x, bias}, [xn, bn, n, m](detail::Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < n * m; ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) bn->grad[j] += self.grad[i * m + j];
    }
  });
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  detail::require_matrix(logits, "softmax");
  const std::size_t n = logits.shape()[0], m = logits.shape()[1];
  auto ld = logits.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = ld.data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  auto ln = logits.node_ptr();
  return make_result(logits.shape(), std::move(out), {logits}, [ln, n, m](detail::Node& self) {
    ln->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const double* y = self.data.data() + i * m;
      const double* g = self.grad.data() + i * m;
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < m; ++j) ln->grad[i * m + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Selects rows of a matrix; indices may repeat.
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> rows) {
  detail::require_matrix(x, "gather_rows");
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  std::vector<double> out(idx.size() * m);
  auto xd = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(xd.data() + idx[r] * m, m, out.data() + r * m);
  }
  auto xn = x.node_ptr();
  const std::size_t k = idx.size();
  return make_result({k, m}, std::move(out), {x}, [xn, idx = std::move(idx), m](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < m; ++j) xn->grad[idx[r] * m + j] += self.grad[r * m + j];
  });
}

/// Column j of a matrix as a vector.
inline Tensor column(const Tensor& x, std::size_t j) {
  detail::require_matrix(x, "column");
  const std::size_t n = x.shape()[0], m = x.shape()[1];
  if (j >= m) throw DimensionError("column: index out of range for " + shape_str(x.shape()));
  std::vector<double> out(n);
  auto xd = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = xd[i * m + j];
  auto xn = x.node_ptr();
  return make_result({n}, std::move(out), {x}, [xn, j, m](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i * m + j] += self.grad[i];
  });
}

/// Concatenates vectors end to end.
inline Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  const std::size_t n = out.size();
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node_ptr());
  return make_result({n}, std::move(out), parts, [nodes](detail::Node& self) {
    std::size_t off = 0;
    for (const auto& pn : nodes) {
      const std::size_t len = pn->data.size();
      if (pn->requires_grad) {
        pn->ensure_grad();
        for (std::size_t i = 0; i < len; ++i) pn->grad[i] += self.grad[off + i];
      }
      off += len;
    }
  });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace pudet
