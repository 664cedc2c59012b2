// SPDX-License-Identifier: Apache-2.0
//
// Dynamic-graph reverse-mode automatic differentiation over dense 2-D arrays.
//
// Every operation allocates a Node holding its value and, when any input
// requires a gradient, the parents and a local backward rule. Graphs that
// touch no parameter therefore cost only the forward values. backward()
// orders the reachable subgraph topologically and runs each rule once.
#pragma once

#include "flowkit/tensor.hpp"

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

namespace flowkit::ad {

template <typename Scalar>
struct Node {
  using Array2 = MatrixX<Scalar>;

  Array2 value;
  Array2 grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_rule;

  void accumulate(const Array2& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <typename Scalar>
class BasicVar {
 public:
  using NodeType = Node<Scalar>;
  using Array2 = MatrixX<Scalar>;

  BasicVar() = default;

  static BasicVar constant(Array2 value) { return BasicVar(std::move(value), false); }
  static BasicVar parameter(Array2 value) { return BasicVar(std::move(value), true); }

  const Array2& value() const { return node_->value; }
  /// Mutable access for optimizers and loaders; only meaningful on leaves.
  Array2& mutable_value() { return node_->value; }

  /// Gradient of the last backward() call, zeros if none arrived.
  Array2 grad() const {
    if (node_->grad.size() == 0) return Array2::Zero(rows(), cols());
    return node_->grad;
  }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }

  bool requires_grad() const { return node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool valid() const { return static_cast<bool>(node_); }

  const std::shared_ptr<NodeType>& node() const { return node_; }

  /// Builds the result of an operation. `rule` receives the result node and
  /// must push gradients into the parents that require them.
  static BasicVar from_op(Array2 value, std::vector<std::shared_ptr<NodeType>> parents,
                          std::function<void(NodeType&)> rule) {
    BasicVar out(std::move(value), false);
    for (const auto& p : parents) {
      if (p->requires_grad) {
        out.node_->requires_grad = true;
        break;
      }
    }
    if (out.node_->requires_grad) {
      out.node_->parents = std::move(parents);
      out.node_->backward_rule = std::move(rule);
    }
    return out;
  }

 private:
  BasicVar(Array2 value, bool requires_grad) : node_(std::make_shared<NodeType>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<NodeType> node_;
};

using Var = BasicVar<double>;

/// Runs reverse accumulation from a scalar root. Gradients accumulate into
/// every reachable node requiring one; parameters keep theirs until
/// zero_grad().
template <typename Scalar>
void backward(const BasicVar<Scalar>& root) {
  using NodeType = Node<Scalar>;
  require(root.rows() == 1 && root.cols() == 1,
          "backward: root must be scalar, got " + shape_string(root.rows(), root.cols()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<NodeType*> order;
  std::unordered_set<NodeType*> visited;
  std::vector<std::pair<NodeType*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeType* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->accumulate(MatrixX<Scalar>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeType* node = *it;
    if (node->backward_rule && node->grad.size() != 0) node->backward_rule(*node);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (NodeType* node : order) {
    if (node->backward_rule) node->grad.resize(0, 0);
  }
}

namespace detail {

template <typename Scalar>
void check_same_shape(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b, const char* op) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
              shape_string(b.rows(), b.cols()));
}

template <typename Scalar>
void push(Node<Scalar>& parent, const MatrixX<Scalar>& g) {
  if (parent.requires_grad) parent.accumulate(g);
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

template <typename Scalar>
Scalar softplus(Scalar x) {
  return std::max(x, Scalar(0)) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
BasicVar<Scalar> matmul(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ " +
                                    shape_string(a.rows(), a.cols()) + " * " +
                                    shape_string(b.rows(), b.cols()));
  MatrixX<Scalar> value = a.value() * b.value();
  return BasicVar<Scalar>::from_op(std::move(value), {a.node(), b.node()}, [](Node<Scalar>& n) {
    auto& lhs = *n.parents[0];
    auto& rhs = *n.parents[1];
    if (lhs.requires_grad) lhs.accumulate(n.grad * rhs.value.transpose());
    if (rhs.requires_grad) rhs.accumulate(lhs.value.transpose() * n.grad);
  });
}

/// a + 1·row, broadcasting a 1 x C row over every row of a.
template <typename Scalar>
BasicVar<Scalar> add_row(const BasicVar<Scalar>& a, const BasicVar<Scalar>& row) {
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: expected row of width " +
                                                         std::to_string(a.cols()));
  MatrixX<Scalar> value = a.value().rowwise() + row.value().row(0);
  return BasicVar<Scalar>::from_op(std::move(value), {a.node(), row.node()}, [](Node<Scalar>& n) {
    detail::push(*n.parents[0], n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad.colwise().sum());
  });
}

/// Elementwise product with a constant array (weight masks).
template <typename Scalar>
BasicVar<Scalar> mask_mul(const BasicVar<Scalar>& a, const MatrixX<Scalar>& mask) {
  require(a.rows() == mask.rows() && a.cols() == mask.cols(), "mask_mul: shape mismatch");
  MatrixX<Scalar> value = a.value().cwiseProduct(mask);
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()}, [mask](Node<Scalar>& n) {
    detail::push(*n.parents[0], MatrixX<Scalar>(n.grad.cwiseProduct(mask)));
  });
}

// ---------------------------------------------------------------------------
// Elementwise binary

template <typename Scalar>
BasicVar<Scalar> operator+(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::check_same_shape(a, b, "add");
  return BasicVar<Scalar>::from_op(a.value() + b.value(), {a.node(), b.node()},
                                   [](Node<Scalar>& n) {
                                     detail::push(*n.parents[0], n.grad);
                                     detail::push(*n.parents[1], n.grad);
                                   });
}

template <typename Scalar>
BasicVar<Scalar> operator-(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::check_same_shape(a, b, "sub");
  return BasicVar<Scalar>::from_op(a.value() - b.value(), {a.node(), b.node()},
                                   [](Node<Scalar>& n) {
                                     detail::push(*n.parents[0], n.grad);
                                     detail::push(*n.parents[1], MatrixX<Scalar>(-n.grad));
                                   });
}

template <typename Scalar>
BasicVar<Scalar> operator*(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::check_same_shape(a, b, "mul");
  return BasicVar<Scalar>::from_op(
      a.value().cwiseProduct(b.value()), {a.node(), b.node()}, [](Node<Scalar>& n) {
        auto& lhs = *n.parents[0];
        auto& rhs = *n.parents[1];
        if (lhs.requires_grad) lhs.accumulate(n.grad.cwiseProduct(rhs.value));
        if (rhs.requires_grad) rhs.accumulate(n.grad.cwiseProduct(lhs.value));
      });
}

template <typename Scalar>
BasicVar<Scalar> operator/(const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::check_same_shape(a, b, "div");
  return BasicVar<Scalar>::from_op(
      a.value().cwiseQuotient(b.value()), {a.node(), b.node()}, [](Node<Scalar>& n) {
        auto& num = *n.parents[0];
        auto& den = *n.parents[1];
        if (num.requires_grad) num.accumulate(n.grad.cwiseQuotient(den.value));
        if (den.requires_grad) {
          den.accumulate(-n.grad.cwiseProduct(n.value).cwiseQuotient(den.value));
        }
      });
}

// ---------------------------------------------------------------------------
// Scalar affine

template <typename Scalar>
BasicVar<Scalar> operator*(const BasicVar<Scalar>& a, Scalar s) {
  return BasicVar<Scalar>::from_op(a.value() * s, {a.node()}, [s](Node<Scalar>& n) {
    detail::push(*n.parents[0], MatrixX<Scalar>(n.grad * s));
  });
}

template <typename Scalar>
BasicVar<Scalar> operator*(Scalar s, const BasicVar<Scalar>& a) {
  return a * s;
}

template <typename Scalar>
BasicVar<Scalar> operator+(const BasicVar<Scalar>& a, Scalar s) {
  MatrixX<Scalar> value = a.value().array() + s;
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()},
                                   [](Node<Scalar>& n) { detail::push(*n.parents[0], n.grad); });
}

template <typename Scalar>
BasicVar<Scalar> operator+(Scalar s, const BasicVar<Scalar>& a) {
  return a + s;
}

template <typename Scalar>
BasicVar<Scalar> operator-(const BasicVar<Scalar>& a, Scalar s) {
  return a + (-s);
}

template <typename Scalar>
BasicVar<Scalar> operator-(const BasicVar<Scalar>& a) {
  return a * Scalar(-1);
}

template <typename Scalar>
BasicVar<Scalar> operator-(Scalar s, const BasicVar<Scalar>& a) {
  return (-a) + s;
}

// ---------------------------------------------------------------------------
// Elementwise unary

namespace detail {

/// Unary op with derivative expressed through input x and output y.
template <typename Scalar, typename F, typename DF>
BasicVar<Scalar> unary(const BasicVar<Scalar>& a, F f, DF df) {
  MatrixX<Scalar> value = a.value().unaryExpr(f);
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()}, [df](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (!in.requires_grad) return;
    MatrixX<Scalar> g(n.grad.rows(), n.grad.cols());
    for (Index i = 0; i < g.size(); ++i) {
      g.data()[i] = n.grad.data()[i] * df(in.value.data()[i], n.value.data()[i]);
    }
    in.accumulate(g);
  });
}

}  // namespace detail

/// Rectifier; the subgradient at 0 is 0.
template <typename Scalar>
BasicVar<Scalar> relu(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return x > 0 ? x : Scalar(0); },
      [](Scalar x, Scalar) { return x > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
BasicVar<Scalar> tanh(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return std::tanh(x); }, [](Scalar, Scalar y) { return Scalar(1) - y * y; });
}

template <typename Scalar>
BasicVar<Scalar> exp(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
BasicVar<Scalar> log(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
BasicVar<Scalar> sqrt(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return std::sqrt(x); },
      [](Scalar, Scalar y) { return Scalar(0.5) / y; });
}

template <typename Scalar>
BasicVar<Scalar> square(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return Scalar(2) * x; });
}

template <typename Scalar>
BasicVar<Scalar> softplus(const BasicVar<Scalar>& a) {
  return detail::unary(
      a, [](Scalar x) { return detail::softplus(x); },
      [](Scalar x, Scalar) { return detail::sigmoid(x); });
}

/// Row-wise softmax.
template <typename Scalar>
BasicVar<Scalar> softmax_rows(const BasicVar<Scalar>& a) {
  MatrixX<Scalar> value(a.rows(), a.cols());
  for (Index r = 0; r < a.rows(); ++r) {
    const auto row = a.value().row(r);
    const Scalar m = row.maxCoeff();
    value.row(r) = (row.array() - m).exp();
    value.row(r) /= value.row(r).sum();
  }
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()}, [](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (!in.requires_grad) return;
    // dL/dx = y * (g - <g, y>) per row
    const VectorX<Scalar> dots = n.grad.cwiseProduct(n.value).rowwise().sum();
    MatrixX<Scalar> g = n.value.cwiseProduct(MatrixX<Scalar>(n.grad.colwise() - dots));
    in.accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
BasicVar<Scalar> sum(const BasicVar<Scalar>& a) {
  MatrixX<Scalar> value(1, 1);
  value(0, 0) = a.value().sum();
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()}, [](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (in.requires_grad) in.accumulate(MatrixX<Scalar>::Constant(in.value.rows(), in.value.cols(), n.grad(0, 0)));
  });
}

template <typename Scalar>
BasicVar<Scalar> mean(const BasicVar<Scalar>& a) {
  require(a.value().size() > 0, "mean: empty input");
  return sum(a) * (Scalar(1) / static_cast<Scalar>(a.value().size()));
}

/// Sum across columns: [N x C] -> [N x 1].
template <typename Scalar>
BasicVar<Scalar> sum_cols(const BasicVar<Scalar>& a) {
  MatrixX<Scalar> value = a.value().rowwise().sum();
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()}, [](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (!in.requires_grad) return;
    MatrixX<Scalar> g(in.value.rows(), in.value.cols());
    g.colwise() = VectorX<Scalar>(n.grad.col(0));
    in.accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// Indexing

/// Contiguous column block [start, start + count).
template <typename Scalar>
BasicVar<Scalar> cols(const BasicVar<Scalar>& a, Index start, Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "cols: range out of bounds");
  MatrixX<Scalar> value = a.value().middleCols(start, count);
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()}, [start, count](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (!in.requires_grad) return;
    MatrixX<Scalar> g = MatrixX<Scalar>::Zero(in.value.rows(), in.value.cols());
    g.middleCols(start, count) = n.grad;
    in.accumulate(g);
  });
}

/// Columns in the given order; indices may repeat.
template <typename Scalar>
BasicVar<Scalar> gather_cols(const BasicVar<Scalar>& a, std::vector<Index> indices) {
  for (Index j : indices) require(j >= 0 && j < a.cols(), "gather_cols: index out of bounds");
  MatrixX<Scalar> value(a.rows(), static_cast<Index>(indices.size()));
  for (std::size_t k = 0; k < indices.size(); ++k) value.col(k) = a.value().col(indices[k]);
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()},
                                   [idx = std::move(indices)](Node<Scalar>& n) {
                                     auto& in = *n.parents[0];
                                     if (!in.requires_grad) return;
                                     MatrixX<Scalar> g =
                                         MatrixX<Scalar>::Zero(in.value.rows(), in.value.cols());
                                     for (std::size_t k = 0; k < idx.size(); ++k) {
                                       g.col(idx[k]) += n.grad.col(k);
                                     }
                                     in.accumulate(g);
                                   });
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::span<const BasicVar<Scalar>> parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const Index rows = parts.front().rows();
  Index width = 0;
  std::vector<std::shared_ptr<Node<Scalar>>> parents;
  for (const auto& p : parts) {
    require(p.rows() == rows, "concat_cols: row counts differ");
    width += p.cols();
    parents.push_back(p.node());
  }
  MatrixX<Scalar> value(rows, width);
  Index offset = 0;
  for (const auto& p : parts) {
    value.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return BasicVar<Scalar>::from_op(std::move(value), std::move(parents), [](Node<Scalar>& n) {
    Index off = 0;
    for (auto& p : n.parents) {
      const Index w = p->value.cols();
      if (p->requires_grad) p->accumulate(n.grad.middleCols(off, w));
      off += w;
    }
  });
}

template <typename Scalar>
BasicVar<Scalar> concat_cols(std::initializer_list<BasicVar<Scalar>> parts) {
  std::vector<BasicVar<Scalar>> v(parts);
  return concat_cols(std::span<const BasicVar<Scalar>>(v));
}

/// Per-row element pick: out(r) = a(r, index[r]), giving [N x 1].
template <typename Scalar>
BasicVar<Scalar> pick(const BasicVar<Scalar>& a, std::vector<Index> index) {
  require(static_cast<Index>(index.size()) == a.rows(), "pick: one index per row required");
  MatrixX<Scalar> value(a.rows(), 1);
  for (Index r = 0; r < a.rows(); ++r) {
    require(index[r] >= 0 && index[r] < a.cols(), "pick: index out of bounds");
    value(r, 0) = a.value()(r, index[r]);
  }
  return BasicVar<Scalar>::from_op(std::move(value), {a.node()},
                                   [idx = std::move(index)](Node<Scalar>& n) {
                                     auto& in = *n.parents[0];
                                     if (!in.requires_grad) return;
                                     MatrixX<Scalar> g =
                                         MatrixX<Scalar>::Zero(in.value.rows(), in.value.cols());
                                     for (Index r = 0; r < g.rows(); ++r) g(r, idx[r]) = n.grad(r, 0);
                                     in.accumulate(g);
                                   });
}

/// Elementwise select: where(mask, a, b) takes a where mask is true. The
/// mask is per row and applies to every column.
template <typename Scalar>
BasicVar<Scalar> where(const Mask& mask, const BasicVar<Scalar>& a, const BasicVar<Scalar>& b) {
  detail::check_same_shape(a, b, "where");
  require(mask.size() == a.rows(), "where: mask length must equal row count");
  MatrixX<Scalar> value = b.value();
  for (Index r = 0; r < value.rows(); ++r) {
    if (mask(r)) value.row(r) = a.value().row(r);
  }
  return BasicVar<Scalar>::from_op(std::move(value), {a.node(), b.node()}, [mask](Node<Scalar>& n) {
    MatrixX<Scalar> ga = n.grad;
    MatrixX<Scalar> gb = n.grad;
    for (Index r = 0; r < n.grad.rows(); ++r) {
      if (mask(r)) {
        gb.row(r).setZero();
      } else {
        ga.row(r).setZero();
      }
    }
    detail::push(*n.parents[0], ga);
    detail::push(*n.parents[1], gb);
  });
}

/// Knot positions from positive bin sizes: [N x K] -> [N x (K + 1)] with
/// column 0 equal to -bound, column k the running sum of the first k sizes
/// shifted by -bound, and column K pinned to +bound. Callers ensure each row
/// of `sizes` sums to 2·bound.
template <typename Scalar>
BasicVar<Scalar> knots_from_sizes(const BasicVar<Scalar>& sizes, Scalar bound) {
  const Index k = sizes.cols();
  MatrixX<Scalar> value(sizes.rows(), k + 1);
  for (Index r = 0; r < sizes.rows(); ++r) {
    Scalar acc = -bound;
    value(r, 0) = acc;
    for (Index j = 0; j + 1 < k; ++j) {
      acc += sizes.value()(r, j);
      value(r, j + 1) = acc;
    }
    value(r, k) = bound;
  }
  return BasicVar<Scalar>::from_op(std::move(value), {sizes.node()}, [k](Node<Scalar>& n) {
    auto& in = *n.parents[0];
    if (!in.requires_grad) return;
    // knot j (1 <= j <= K-1) depends on sizes 0..j-1: reverse cumulative sum.
    MatrixX<Scalar> g = MatrixX<Scalar>::Zero(in.value.rows(), k);
    for (Index r = 0; r < g.rows(); ++r) {
      Scalar acc = 0;
      for (Index j = k - 1; j >= 1; --j) {
        acc += n.grad(r, j);
        g(r, j - 1) = acc;
      }
    }
    in.accumulate(g);
  });
}

}  // namespace flowkit::ad
