// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// Every value is a 2-D Eigen matrix. Operations record a closure that pushes
// the output gradient back to their inputs; `backward` walks the recorded
// graph in reverse topological order. Recording is skipped entirely inside a
// `NoGradGuard` scope and for operations whose inputs do not require gradients.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace powerpm::ag {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

namespace detail {
inline thread_local int no_grad_depth = 0;
}

/// While alive, operations compute values only and record nothing.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  /// A leaf that accumulates gradients (model parameters).
  static Var parameter(Matrix value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }
  Eigen::Index rows() const { return node_->value.rows(); }
  Eigen::Index cols() const { return node_->value.cols(); }
  double item() const {
    if (node_->value.size() != 1) throw std::logic_error("item() on non-scalar");
    return node_->value(0, 0);
  }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Var*> inputs) {
  if (!grad_enabled()) return false;
  for (const Var* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

// Builds the output node; the closure is attached only when a gradient path
// exists.
inline Var make_result(Matrix value, std::vector<Var> inputs,
                       std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const Var& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (Var& v : inputs) n->parents.push_back(v.node());
    n->backward_fn = std::move(fn);
  }
  return Var(std::move(n));
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" +
                                std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()) + ")");
  }
}

}  // namespace detail

/// Runs reverse accumulation from a scalar output.
inline void backward(const Var& root) {
  if (root.value().size() != 1) throw std::logic_error("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.size() != 0) {
      n->backward_fn(*n);
      // Interior gradients are not needed once propagated.
      if (!n->parents.empty()) n->grad.resize(0, 0);
    }
  }
}

inline Var detach(const Var& a) { return Var::constant(a.value()); }

inline Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) detail::check_same_shape(a, b, "matmul");
  return detail::make_result(a.value() * b.value(), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad * pb->value.transpose());
    if (pb->requires_grad) pb->accumulate(pa->value.transpose() * self.grad);
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  return detail::make_result(a.value() + b.value(), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  return detail::make_result(a.value() - b.value(), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(-self.grad);
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "hadamard");
  return detail::make_result(a.value().cwiseProduct(b.value()), {a, b}, [](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents[1];
    if (pa->requires_grad) pa->accumulate(self.grad.cwiseProduct(pb->value));
    if (pb->requires_grad) pb->accumulate(self.grad.cwiseProduct(pa->value));
  });
}

inline Var scale(const Var& a, double s) {
  return detail::make_result(a.value() * s, {a}, [s](Node& self) {
    self.parents[0]->accumulate(self.grad * s);
  });
}

/// Sum of several same-shape terms.
inline Var sum_of(const std::vector<Var>& terms) {
  if (terms.empty()) throw std::invalid_argument("sum_of: no terms");
  Matrix v = terms.front().value();
  for (std::size_t i = 1; i < terms.size(); ++i) {
    detail::check_same_shape(terms.front(), terms[i], "sum_of");
    v += terms[i].value();
  }
  return detail::make_result(std::move(v), terms, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad);
    }
  });
}

/// Adds a 1 x c row to every row of an r x c matrix.
inline Var add_row(const Var& a, const Var& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) detail::check_same_shape(a, row, "add_row");
  Matrix v = a.value().rowwise() + row.value().row(0);
  return detail::make_result(std::move(v), {a, row}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->accumulate(self.grad);
    if (self.parents[1]->requires_grad) self.parents[1]->accumulate(self.grad.colwise().sum());
  });
}

inline Var relu(const Var& a) {
  Matrix v = a.value().cwiseMax(0.0);
  return detail::make_result(std::move(v), {a}, [](Node& self) {
    const Matrix& x = self.parents[0]->value;
    self.parents[0]->accumulate(
        (x.array() > 0.0).select(self.grad, Matrix::Zero(x.rows(), x.cols())));
  });
}

/// GELU, tanh approximation.
inline Var gelu(const Var& a) {
  static constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double c = 0.044715;
  const Matrix& x = a.value();
  Matrix t = (k * (x.array() + c * x.array().cube())).tanh().matrix();
  Matrix v = (0.5 * x.array() * (1.0 + t.array())).matrix();
  return detail::make_result(std::move(v), {a}, [t = std::move(t)](Node& self) {
    const Matrix& x = self.parents[0]->value;
    auto xa = x.array();
    auto ta = t.array();
    auto dt = (1.0 - ta.square()) * k * (1.0 + 3.0 * c * xa.square());
    Matrix d = (0.5 * (1.0 + ta) + 0.5 * xa * dt).matrix();
    self.parents[0]->accumulate(self.grad.cwiseProduct(d));
  });
}

inline Var transpose(const Var& a) {
  return detail::make_result(a.value().transpose(), {a}, [](Node& self) {
    self.parents[0]->accumulate(self.grad.transpose());
  });
}

/// Columns [start, start + count).
inline Var cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || start + count > a.cols()) throw std::out_of_range("cols: range");
  Matrix v = a.value().middleCols(start, count);
  return detail::make_result(std::move(v), {a}, [start, count](Node& self) {
    auto& p = self.parents[0];
    Matrix g = Matrix::Zero(p->value.rows(), p->value.cols());
    g.middleCols(start, count) = self.grad;
    p->accumulate(g);
  });
}

inline Var hcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("hcat: no parts");
  Eigen::Index r = parts.front().rows(), c = 0;
  for (const Var& p : parts) {
    if (p.rows() != r) throw std::invalid_argument("hcat: row mismatch");
    c += p.cols();
  }
  Matrix v(r, c);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return detail::make_result(std::move(v), parts, [](Node& self) {
    Eigen::Index off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad.middleCols(off, p->value.cols()));
      off += p->value.cols();
    }
  });
}

inline Var vcat(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("vcat: no parts");
  Eigen::Index c = parts.front().cols(), r = 0;
  for (const Var& p : parts) {
    if (p.cols() != c) throw std::invalid_argument("vcat: column mismatch");
    r += p.rows();
  }
  Matrix v(r, c);
  Eigen::Index off = 0;
  for (const Var& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return detail::make_result(std::move(v), parts, [](Node& self) {
    Eigen::Index off = 0;
    for (auto& p : self.parents) {
      if (p->requires_grad) p->accumulate(self.grad.middleRows(off, p->value.rows()));
      off += p->value.rows();
    }
  });
}

/// Row i as a 1 x c matrix.
inline Var row(const Var& a, Eigen::Index i) {
  Matrix v = a.value().row(i);
  return detail::make_result(std::move(v), {a}, [i](Node& self) {
    auto& p = self.parents[0];
    Matrix g = Matrix::Zero(p->value.rows(), p->value.cols());
    g.row(i) = self.grad.row(0);
    p->accumulate(g);
  });
}

/// Replaces the listed rows of `a` by `replacement` (1 x c); other rows pass through.
inline Var replace_rows(const Var& a, const std::vector<int>& rows_to_replace,
                        const Var& replacement) {
  if (replacement.rows() != 1 || replacement.cols() != a.cols()) {
    throw std::invalid_argument("replace_rows: replacement must be 1 x cols");
  }
  Matrix v = a.value();
  for (int r : rows_to_replace) v.row(r) = replacement.value().row(0);
  return detail::make_result(std::move(v), {a, replacement}, [rows_to_replace](Node& self) {
    auto& pa = self.parents[0];
    auto& pr = self.parents[1];
    if (pa->requires_grad) {
      Matrix g = self.grad;
      for (int r : rows_to_replace) g.row(r).setZero();
      pa->accumulate(g);
    }
    if (pr->requires_grad) {
      Matrix g = Matrix::Zero(1, self.grad.cols());
      for (int r : rows_to_replace) g.row(0) += self.grad.row(r);
      pr->accumulate(g);
    }
  });
}

/// 1 x c column means.
inline Var mean_rows(const Var& a) {
  const double n = static_cast<double>(a.rows());
  Matrix v = a.value().colwise().mean();
  return detail::make_result(std::move(v), {a}, [n](Node& self) {
    auto& p = self.parents[0];
    p->accumulate(Matrix(self.grad.replicate(p->value.rows(), 1) / n));
  });
}

inline Var sum_all(const Var& a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  return detail::make_result(std::move(v), {a}, [](Node& self) {
    auto& p = self.parents[0];
    p->accumulate(Matrix::Constant(p->value.rows(), p->value.cols(), self.grad(0, 0)));
  });
}

inline Var mean_all(const Var& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size()));
}

/// Row-major flattening into a 1 x (r*c) row.
inline Var flatten(const Var& a) {
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix v(1, r * c);
  for (Eigen::Index i = 0; i < r; ++i) v.block(0, i * c, 1, c) = a.value().row(i);
  return detail::make_result(std::move(v), {a}, [r, c](Node& self) {
    Matrix g(r, c);
    for (Eigen::Index i = 0; i < r; ++i) g.row(i) = self.grad.block(0, i * c, 1, c);
    self.parents[0]->accumulate(g);
  });
}

/// Row-wise layer normalization with learned gain and bias (both 1 x c).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Eigen::Index r = x.rows(), c = x.cols();
  Matrix xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Eigen::Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    RowVector centered = x.value().row(i).array() - mu;
    const double var = centered.squaredNorm() / static_cast<double>(c);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = centered * inv_std(i);
  }
  Matrix v = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  v.rowwise() += bias.value().row(0);
  return detail::make_result(
      std::move(v), {x, gain, bias},
      [xhat = std::move(xhat), inv_std = std::move(inv_std), c](Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const Matrix& g = self.grad;
        if (pg->requires_grad) pg->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (pb->requires_grad) pb->accumulate(g.colwise().sum());
        if (px->requires_grad) {
          Matrix gx = (g.array().rowwise() * pg->value.row(0).array()).matrix();
          Matrix dx(gx.rows(), gx.cols());
          const double n = static_cast<double>(c);
          for (Eigen::Index i = 0; i < gx.rows(); ++i) {
            const double mean_g = gx.row(i).mean();
            const double mean_gx = gx.row(i).dot(xhat.row(i)) / n;
            dx.row(i) = inv_std(i) *
                        (gx.row(i).array() - mean_g - xhat.row(i).array() * mean_gx).matrix();
          }
          px->accumulate(dx);
        }
      });
}

/// Row-wise softmax. With `causal`, entry (i, j > i) is excluded (probability 0).
inline Var softmax_rows(const Var& a, bool causal = false) {
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix p = Matrix::Zero(r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    const Eigen::Index limit = causal ? std::min<Eigen::Index>(i + 1, c) : c;
    const double m = a.value().row(i).head(limit).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < limit; ++j) {
      p(i, j) = std::exp(a.value()(i, j) - m);
      z += p(i, j);
    }
    p.row(i).head(limit) /= z;
  }
  Matrix out = p;
  return detail::make_result(std::move(out), {a}, [p = std::move(p)](Node& self) {
    const Matrix& g = self.grad;
    Matrix d(p.rows(), p.cols());
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double dot = g.row(i).dot(p.row(i));
      d.row(i) = p.row(i).cwiseProduct((g.row(i).array() - dot).matrix());
    }
    self.parents[0]->accumulate(d);
  });
}

/// Row-wise log-softmax (no masking).
inline Var log_softmax_rows(const Var& a) {
  const Eigen::Index r = a.rows();
  Matrix out(a.rows(), a.cols());
  Matrix p(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < r; ++i) {
    const double m = a.value().row(i).maxCoeff();
    const double lse = m + std::log((a.value().row(i).array() - m).exp().sum());
    out.row(i) = a.value().row(i).array() - lse;
    p.row(i) = out.row(i).array().exp();
  }
  return detail::make_result(std::move(out), {a}, [p = std::move(p)](Node& self) {
    const Matrix& g = self.grad;
    Matrix d = g;
    for (Eigen::Index i = 0; i < g.rows(); ++i) d.row(i) -= p.row(i) * g.row(i).sum();
    self.parents[0]->accumulate(d);
  });
}

/// Scales each row to unit Euclidean norm. Throws on a zero-norm row.
inline Var normalize_rows(const Var& a, double min_norm = 1e-12) {
  const Eigen::Index r = a.rows();
  Eigen::VectorXd norms(r);
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < r; ++i) {
    norms(i) = a.value().row(i).norm();
    if (!(norms(i) > min_norm)) {
      throw std::domain_error("normalize_rows: zero-norm representation at row " +
                              std::to_string(i));
    }
    y.row(i) = a.value().row(i) / norms(i);
  }
  Matrix out = y;
  return detail::make_result(std::move(out), {a},
                             [y = std::move(y), norms = std::move(norms)](Node& self) {
                               const Matrix& g = self.grad;
                               Matrix d(g.rows(), g.cols());
                               for (Eigen::Index i = 0; i < g.rows(); ++i) {
                                 const double dot = g.row(i).dot(y.row(i));
                                 d.row(i) = (g.row(i) - dot * y.row(i)) / norms(i);
                               }
                               self.parents[0]->accumulate(d);
                             });
}

/// Element (i, j) as a scalar.
inline Var pick(const Var& a, Eigen::Index i, Eigen::Index j) {
  Matrix v(1, 1);
  v(0, 0) = a.value()(i, j);
  return detail::make_result(std::move(v), {a}, [i, j](Node& self) {
    auto& p = self.parents[0];
    Matrix g = Matrix::Zero(p->value.rows(), p->value.cols());
    g(i, j) = self.grad(0, 0);
    p->accumulate(g);
  });
}

inline Var square(const Var& a) { return hadamard(a, a); }

}  // namespace powerpm::ag
