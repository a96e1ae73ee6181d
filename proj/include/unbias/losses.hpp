#pragma once

// Objective functions: weighted softmax classification loss, the two
// confusion-loss variants pushing a classifier's output toward uniform, and
// the aggregated secondary / joint objectives.

#include "unbias/autodiff.hpp"

#include <optional>
#include <vector>

namespace unbias {

// Cross-entropy with the uniform distribution, or a KL divergence involving
// it. The KL direction is configurable because both readings appear in
// practice; p-to-uniform has bounded gradients.
enum class ConfusionVariant { kCrossEntropy, kKlPToUniform, kKlUniformToP };

// Floor applied inside log() when evaluating entropies on softmax outputs.
inline constexpr Real kLogFloor = 1e-12;

template <typename Scalar>
DenseVector<Scalar> row_log_sum_exp(const DenseMatrix<Scalar>& z) {
  DenseVector<Scalar> m = z.rowwise().maxCoeff();
  return m.array() + (z.colwise() - m).array().exp().rowwise().sum().log();
}

// Per-class weights proportional to inverse relative class frequency,
// normalized to mean 1. Every class in [0, K) must occur at least once.
template <typename Scalar = Real>
DenseVector<Scalar> class_weights_from(const IntVector& labels, int num_classes) {
  if (num_classes < 2) throw ConfigError("class_weights_from: need at least 2 classes");
  DenseVector<Scalar> counts = DenseVector<Scalar>::Zero(num_classes);
  for (Index i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes)
      throw DataError("class_weights_from: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    counts[y] += Scalar(1);
  }
  for (int k = 0; k < num_classes; ++k)
    if (counts[k] == Scalar(0))
      throw DataError("class_weights_from: class " + std::to_string(k) +
                      " absent from labels; re-bin or supply explicit weights");
  DenseVector<Scalar> w = counts.cwiseInverse() * Scalar(labels.size());
  return w / w.mean();
}

struct LossWeights {
  Real alpha = 0.1;            // confusion weight in the joint objective
  std::vector<Real> betas;     // per spurious task, defaults to 1

  void validate(size_t num_tasks) const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha))
      throw ConfigError("LossWeights: alpha must be finite and >= 0");
    if (!betas.empty() && betas.size() != num_tasks)
      throw ConfigError("LossWeights: got " + std::to_string(betas.size()) + " betas for " +
                        std::to_string(num_tasks) + " tasks");
    for (Real b : betas)
      if (!(b >= 0.0) || !std::isfinite(b))
        throw ConfigError("LossWeights: betas must be finite and >= 0");
  }
};

namespace detail {
template <typename Scalar>
void check_labels(const NodePtr<Scalar>& logits, const IntVector& labels) {
  if (labels.size() != logits->rows())
    throw DimensionError("softmax_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(logits->rows()) + " logit rows");
  if (logits->rows() < 1) throw DataError("softmax_loss: empty batch");
  for (Index i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= logits->cols())
      throw DataError("softmax_loss: label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(logits->cols()) + ")");
}
}  // namespace detail

// Weighted mean over the batch of -log p_y, computed in log-sum-exp form.
// Pass an empty weight vector for unit weights.
template <typename Scalar>
NodePtr<Scalar> softmax_loss(Tape<Scalar>& tape, const NodePtr<Scalar>& logits,
                             const IntVector& labels, const DenseVector<Scalar>& weights = {}) {
  detail::check_labels(logits, labels);
  const Index n = logits->rows();
  const Index k = logits->cols();
  DenseVector<Scalar> w = weights;
  if (w.size() == 0) w = DenseVector<Scalar>::Ones(k);
  if (w.size() != k)
    throw DimensionError("softmax_loss: " + std::to_string(w.size()) + " class weights for " +
                         std::to_string(k) + " classes");

  const DenseVector<Scalar> lse = row_log_sum_exp(logits->values);
  Scalar loss = 0;
  for (Index i = 0; i < n; ++i) loss += w[labels[i]] * (lse[i] - logits->values(i, labels[i]));
  DenseMatrix<Scalar> out(1, 1);
  out(0, 0) = loss / Scalar(n);

  DenseMatrix<Scalar> p = softmax_rows_values(logits->values);
  return tape.record("softmax_loss", {logits}, std::move(out),
                     [p = std::move(p), labels, w](TensorNode<Scalar>& self) {
                       auto& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       const Scalar g = self.grad(0, 0) / Scalar(p.rows());
                       for (Index i = 0; i < p.rows(); ++i) {
                         const Scalar wi = w[labels[i]];
                         x.grad.row(i) += g * wi * p.row(i);
                         x.grad(i, labels[i]) -= g * wi;
                       }
                     });
}

// Cross-entropy between the uniform distribution and the softmax output:
// batch mean of -(1/K) sum_k log p_k. Minimum ln K, attained iff p uniform.
template <typename Scalar>
NodePtr<Scalar> confusion_loss_ce(Tape<Scalar>& tape, const NodePtr<Scalar>& logits) {
  const Index k = logits->cols();
  if (k < 2) throw ConfigError("confusion_loss_ce: need at least 2 classes");
  // -(1/K) sum_k log p_k = lse(z) - mean_k z_k per row
  const DenseVector<Scalar> lse = row_log_sum_exp(logits->values);
  DenseMatrix<Scalar> out(1, 1);
  out(0, 0) = (lse - logits->values.rowwise().mean()).mean();
  DenseMatrix<Scalar> p = softmax_rows_values(logits->values);
  return tape.record("confusion_loss_ce", {logits}, std::move(out),
                     [p = std::move(p)](TensorNode<Scalar>& self) {
                       auto& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       const Scalar g = self.grad(0, 0) / Scalar(p.rows());
                       x.grad.array() += g * (p.array() - Scalar(1) / Scalar(p.cols()));
                     });
}

// KL divergence between the softmax output and the uniform distribution,
// batch mean. Forward direction KL(p || u) = ln K - H(p); reverse direction
// KL(u || p) = confusion_loss_ce - ln K (identical gradients to the CE form).
template <typename Scalar>
NodePtr<Scalar> confusion_loss_kl(Tape<Scalar>& tape, const NodePtr<Scalar>& logits,
                                  ConfusionVariant direction = ConfusionVariant::kKlPToUniform) {
  const Index k = logits->cols();
  if (k < 2) throw ConfigError("confusion_loss_kl: need at least 2 classes");
  const Scalar log_k = std::log(Scalar(k));
  DenseMatrix<Scalar> p = softmax_rows_values(logits->values);
  DenseMatrix<Scalar> log_p = p.array().max(Scalar(kLogFloor)).log();

  DenseMatrix<Scalar> out(1, 1);
  if (direction == ConfusionVariant::kKlUniformToP) {
    out(0, 0) = -log_p.rowwise().mean().mean() - log_k;
    return tape.record("confusion_loss_kl_rev", {logits}, std::move(out),
                       [p = std::move(p)](TensorNode<Scalar>& self) {
                         auto& x = *self.inputs[0];
                         if (!x.requires_grad) return;
                         const Scalar g = self.grad(0, 0) / Scalar(p.rows());
                         x.grad.array() += g * (p.array() - Scalar(1) / Scalar(p.cols()));
                       });
  }
  if (direction != ConfusionVariant::kKlPToUniform)
    throw ConfigError("confusion_loss_kl: direction must be a KL variant");
  const DenseVector<Scalar> plogp = (p.array() * log_p.array()).rowwise().sum();
  out(0, 0) = log_k + plogp.mean();
  return tape.record("confusion_loss_kl", {logits}, std::move(out),
                     [p = std::move(p), log_p = std::move(log_p),
                      plogp](TensorNode<Scalar>& self) {
                       auto& x = *self.inputs[0];
                       if (!x.requires_grad) return;
                       const Scalar g = self.grad(0, 0) / Scalar(p.rows());
                       x.grad.array() +=
                           g * (p.array() * (log_p.array().colwise() - plogp.array()));
                     });
}

template <typename Scalar>
NodePtr<Scalar> confusion_loss(Tape<Scalar>& tape, const NodePtr<Scalar>& logits,
                               ConfusionVariant variant) {
  if (variant == ConfusionVariant::kCrossEntropy) return confusion_loss_ce(tape, logits);
  return confusion_loss_kl(tape, logits, variant);
}

// L_s: beta-weighted sum of per-task classification losses.
template <typename Scalar>
NodePtr<Scalar> secondary_classification_loss(Tape<Scalar>& tape,
                                              const std::vector<NodePtr<Scalar>>& task_logits,
                                              const std::vector<IntVector>& task_labels,
                                              const std::vector<Real>& betas,
                                              const std::vector<DenseVector<Scalar>>& weights) {
  if (task_logits.empty()) throw ConfigError("secondary_classification_loss: no tasks");
  if (task_labels.size() != task_logits.size())
    throw DimensionError("secondary_classification_loss: labels for " +
                         std::to_string(task_labels.size()) + " tasks, logits for " +
                         std::to_string(task_logits.size()));
  if (betas.size() != task_logits.size())
    throw DimensionError("secondary_classification_loss: " + std::to_string(betas.size()) +
                         " betas for " + std::to_string(task_logits.size()) + " tasks");
  NodePtr<Scalar> total;
  for (size_t m = 0; m < task_logits.size(); ++m) {
    DenseVector<Scalar> w = m < weights.size() ? weights[m] : DenseVector<Scalar>();
    auto term = scale(tape, softmax_loss(tape, task_logits[m], task_labels[m], w),
                      Scalar(betas[m]));
    total = total ? add(tape, total, term) : term;
  }
  return total;
}

// L_conf: unweighted mean of per-task confusion losses.
template <typename Scalar>
NodePtr<Scalar> secondary_confusion_loss(Tape<Scalar>& tape,
                                         const std::vector<NodePtr<Scalar>>& task_logits,
                                         ConfusionVariant variant) {
  if (task_logits.empty())
    throw Error("secondary_confusion_loss: no secondary tasks; bypass the confusion term");
  NodePtr<Scalar> total;
  for (const auto& logits : task_logits) {
    auto term = confusion_loss(tape, logits, variant);
    total = total ? add(tape, total, term) : term;
  }
  return scale(tape, total, Scalar(1) / Scalar(task_logits.size()));
}

// L_p + alpha * L_conf
template <typename Scalar>
NodePtr<Scalar> joint_loss(Tape<Scalar>& tape, const NodePtr<Scalar>& primary_loss,
                           const NodePtr<Scalar>& conf_loss, Real alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("joint_loss: alpha must be >= 0");
  return add(tape, primary_loss, scale(tape, conf_loss, Scalar(alpha)));
}

}  // namespace unbias
