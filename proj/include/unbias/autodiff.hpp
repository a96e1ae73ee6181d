#pragma once

// Reverse-mode automatic differentiation over dense 2-D arrays.
//
// Nodes live on a Tape in execution order; backward() replays the tape in
// reverse, accumulating adjoints into every node that requires gradients.
// Leaf gradients accumulate across backward calls until zero_grads(), so a
// composite objective may be differentiated in several passes that sum into
// the same parameters.

#include "unbias/core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace unbias {

template <typename Scalar>
class TensorNode {
 public:
  using Mat = DenseMatrix<Scalar>;

  TensorNode(Mat v, bool req)
      : values(std::move(v)), grad(Mat::Zero(values.rows(), values.cols())), requires_grad(req) {}

  Mat values;
  Mat grad;  // same shape as values at all times
  bool requires_grad = false;
  bool frozen = false;  // excluded from sgd_step updates

  // Provenance of the producing operation; empty for leaves.
  std::string op_name;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward_op;

  Index rows() const { return values.rows(); }
  Index cols() const { return values.cols(); }
  bool is_leaf() const { return op_name.empty(); }
};

template <typename Scalar>
using NodePtr = std::shared_ptr<TensorNode<Scalar>>;

template <typename Scalar>
NodePtr<Scalar> make_leaf(DenseMatrix<Scalar> values, bool requires_grad = false) {
  return std::make_shared<TensorNode<Scalar>>(std::move(values), requires_grad);
}

template <typename Scalar>
class Tape {
 public:
  using Node = TensorNode<Scalar>;

  NodePtr<Scalar> record(std::string op, std::vector<NodePtr<Scalar>> inputs,
                         DenseMatrix<Scalar> values, std::function<void(Node&)> backward_op) {
    bool req = false;
    for (const auto& in : inputs) req = req || in->requires_grad;
    auto node = std::make_shared<Node>(std::move(values), req);
    node->op_name = std::move(op);
    node->inputs = std::move(inputs);
    node->backward_op = std::move(backward_op);
    nodes_.push_back(node);
    return node;
  }

  const std::vector<NodePtr<Scalar>>& nodes() const { return nodes_; }
  void clear() { nodes_.clear(); }

 private:
  std::vector<NodePtr<Scalar>> nodes_;
};

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

template <typename Scalar>
NodePtr<Scalar> matmul(Tape<Scalar>& tape, const NodePtr<Scalar>& a, const NodePtr<Scalar>& b) {
  if (a->cols() != b->rows())
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a->values) + " vs " +
                         shape_str(b->values));
  return tape.record("matmul", {a, b}, a->values * b->values, [](TensorNode<Scalar>& self) {
    auto& a = *self.inputs[0];
    auto& b = *self.inputs[1];
    if (a.requires_grad) a.grad.noalias() += self.grad * b.values.transpose();
    if (b.requires_grad) b.grad.noalias() += a.values.transpose() * self.grad;
  });
}

// Row-broadcast addition of a 1 x cols bias.
template <typename Scalar>
NodePtr<Scalar> add_bias(Tape<Scalar>& tape, const NodePtr<Scalar>& x, const NodePtr<Scalar>& b) {
  if (b->rows() != 1 || b->cols() != x->cols())
    throw DimensionError("add_bias: bias " + shape_str(b->values) + " does not broadcast over " +
                         shape_str(x->values));
  DenseMatrix<Scalar> out = x->values;
  out.rowwise() += b->values.row(0);
  return tape.record("add_bias", {x, b}, std::move(out), [](TensorNode<Scalar>& self) {
    auto& x = *self.inputs[0];
    auto& b = *self.inputs[1];
    if (x.requires_grad) x.grad += self.grad;
    if (b.requires_grad) b.grad.row(0) += self.grad.colwise().sum();
  });
}

template <typename Scalar>
NodePtr<Scalar> relu(Tape<Scalar>& tape, const NodePtr<Scalar>& x) {
  // subgradient at 0 is 0
  return tape.record("relu", {x}, x->values.cwiseMax(Scalar(0)), [](TensorNode<Scalar>& self) {
    auto& x = *self.inputs[0];
    if (x.requires_grad)
      x.grad.array() +=
          (x.values.array() > Scalar(0)).template cast<Scalar>() * self.grad.array();
  });
}

template <typename Scalar>
DenseMatrix<Scalar> softmax_rows_values(const DenseMatrix<Scalar>& logits) {
  DenseMatrix<Scalar> shifted = logits.colwise() - logits.rowwise().maxCoeff();
  DenseMatrix<Scalar> e = shifted.array().exp();
  return e.array().colwise() / e.rowwise().sum().array();
}

template <typename Scalar>
NodePtr<Scalar> softmax_rows(Tape<Scalar>& tape, const NodePtr<Scalar>& logits) {
  return tape.record("softmax_rows", {logits}, softmax_rows_values(logits->values),
                     [](TensorNode<Scalar>& self) {
                       auto& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       const auto& p = self.values;
                       DenseVector<Scalar> dot = (self.grad.array() * p.array()).rowwise().sum();
                       x.grad.array() +=
                           p.array() * (self.grad.array().colwise() - dot.array());
                     });
}

template <typename Scalar>
NodePtr<Scalar> sum(Tape<Scalar>& tape, const NodePtr<Scalar>& x) {
  DenseMatrix<Scalar> out(1, 1);
  out(0, 0) = x->values.sum();
  return tape.record("sum", {x}, std::move(out), [](TensorNode<Scalar>& self) {
    auto& x = *self.inputs[0];
    if (x.requires_grad) x.grad.array() += self.grad(0, 0);
  });
}

template <typename Scalar>
NodePtr<Scalar> mean(Tape<Scalar>& tape, const NodePtr<Scalar>& x) {
  DenseMatrix<Scalar> out(1, 1);
  out(0, 0) = x->values.mean();
  return tape.record("mean", {x}, std::move(out), [](TensorNode<Scalar>& self) {
    auto& x = *self.inputs[0];
    if (x.requires_grad) x.grad.array() += self.grad(0, 0) / Scalar(x.values.size());
  });
}

// Elementwise addition of same-shape nodes (used to combine scalar losses).
template <typename Scalar>
NodePtr<Scalar> add(Tape<Scalar>& tape, const NodePtr<Scalar>& a, const NodePtr<Scalar>& b) {
  if (a->rows() != b->rows() || a->cols() != b->cols())
    throw DimensionError("add: shape mismatch, " + shape_str(a->values) + " vs " +
                         shape_str(b->values));
  return tape.record("add", {a, b}, a->values + b->values, [](TensorNode<Scalar>& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->grad += self.grad;
  });
}

template <typename Scalar>
NodePtr<Scalar> scale(Tape<Scalar>& tape, const NodePtr<Scalar>& x, Scalar c) {
  return tape.record("scale", {x}, (x->values.array() * c).matrix(),
                     [c](TensorNode<Scalar>& self) {
                       auto& x = *self.inputs[0];
                       if (x.requires_grad) x.grad += c * self.grad;
                     });
}

// Scalar-valued linear functional sum(w .* x) for a fixed coefficient matrix.
// Handy as a generic probe when finite-differencing matrix-valued ops.
template <typename Scalar>
NodePtr<Scalar> weighted_sum(Tape<Scalar>& tape, const NodePtr<Scalar>& x,
                             const DenseMatrix<Scalar>& w) {
  if (w.rows() != x->rows() || w.cols() != x->cols())
    throw DimensionError("weighted_sum: coefficients " + shape_str(w) + " vs values " +
                         shape_str(x->values));
  DenseMatrix<Scalar> out(1, 1);
  out(0, 0) = (w.array() * x->values.array()).sum();
  return tape.record("weighted_sum", {x}, std::move(out), [w](TensorNode<Scalar>& self) {
    auto& x = *self.inputs[0];
    if (x.requires_grad) x.grad += self.grad(0, 0) * w;
  });
}

// ---------------------------------------------------------------------------
// Backward pass and parameter updates
// ---------------------------------------------------------------------------

// Propagates d(output)/d(node) into every requires_grad node reachable from
// `output`. Leaf gradients accumulate across calls; gradients of nodes
// produced on the tape are reset at the start of each call.
template <typename Scalar>
void backward(Tape<Scalar>& tape, const NodePtr<Scalar>& output) {
  if (output->rows() != 1 || output->cols() != 1)
    throw Error("backward: output must be a 1x1 scalar, got " + shape_str(output->values));
  for (const auto& node : tape.nodes()) node->grad.setZero();
  if (!output->requires_grad && !output->is_leaf()) return;
  output->grad.array() += Scalar(1);
  const auto& nodes = tape.nodes();
  auto it = std::find(nodes.rbegin(), nodes.rend(), output);
  for (; it != nodes.rend(); ++it) {
    TensorNode<Scalar>& node = **it;
    if (node.requires_grad && node.backward_op) node.backward_op(node);
  }
}

template <typename Scalar>
void zero_grads(std::span<const NodePtr<Scalar>> params) {
  for (const auto& p : params) p->grad.setZero();
}

template <typename Scalar>
void zero_grads(const std::vector<NodePtr<Scalar>>& params) {
  zero_grads(std::span<const NodePtr<Scalar>>(params));
}

// Vanilla SGD: values <- values - lr * grad. Frozen parameters are skipped.
template <typename Scalar>
void sgd_step(std::span<const NodePtr<Scalar>> params, Scalar lr) {
  if (!(lr > Scalar(0))) throw ConfigError("sgd_step: learning rate must be positive");
  for (const auto& p : params) {
    if (p->frozen) continue;
    p->values -= lr * p->grad;
  }
}

template <typename Scalar>
void sgd_step(const std::vector<NodePtr<Scalar>>& params, Scalar lr) {
  sgd_step(std::span<const NodePtr<Scalar>>(params), lr);
}

// Central-difference gradient estimate, (f(p+h e) - f(p-h e)) / 2h per
// element. Test oracle; independent of the tape machinery above.
template <typename Scalar>
DenseMatrix<Scalar> finite_diff_grad(const std::function<Scalar(const DenseMatrix<Scalar>&)>& f,
                                     const DenseMatrix<Scalar>& p, Scalar step) {
  if (!(step > Scalar(0))) throw ConfigError("finite_diff_grad: step must be positive");
  DenseMatrix<Scalar> probe = p;
  DenseMatrix<Scalar> g(p.rows(), p.cols());
  for (Index j = 0; j < p.cols(); ++j) {
    for (Index i = 0; i < p.rows(); ++i) {
      const Scalar orig = probe(i, j);
      probe(i, j) = orig + step;
      const Scalar fp = f(probe);
      probe(i, j) = orig - step;
      const Scalar fm = f(probe);
      probe(i, j) = orig;
      g(i, j) = (fp - fm) / (Scalar(2) * step);
    }
  }
  return g;
}

}  // namespace unbias
