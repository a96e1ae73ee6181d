#pragma once

// Quantitative lenses: accuracies (plain, mean-class, adjacent-class), the
// rescaled score mapping chance to 0 and perfection to 1, %-unlearned,
// per-group prediction-distribution KL divergence, and a deterministic 2-D
// projection of embeddings for separability inspection.

#include "unbias/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace unbias {

struct MetricsRecord {
  int epoch = 0;
  Real primary_accuracy = 0;
  Real primary_adjacent_accuracy = 0;
  Real loss_primary = 0;
  Real loss_confusion = 0;

  struct TaskProbe {
    std::string task;
    Real probe_accuracy = 0;  // mean-class, held-out
    Real rescaled = 0;
  };
  std::vector<TaskProbe> probes;

  struct GroupKl {
    std::string group_a;
    std::string group_b;
    Real kl = 0;
  };
  std::vector<GroupKl> kls;

  bool all_finite() const;
};

Real accuracy(const IntVector& preds, const IntVector& labels);

// Mean over classes of per-class accuracy; every class must appear in labels.
Real mean_class_accuracy(const IntVector& preds, const IntVector& labels, int num_classes);

// Fraction with |pred - label| <= 1 (ordinal classes).
Real adjacent_accuracy(const IntVector& preds, const IntVector& labels);

// a = 1 - e / e_max with e_max = 1 - 1/K: 1 for a perfect classifier, 0 for
// one that draws at random.
Real rescaled_score(Real mean_class_error, int num_classes);

// 100 * (baseline - blind) / baseline on the rescaled scale, clamped to at
// most 100. Undefined (nullopt) when the baseline does not beat chance.
std::optional<Real> percent_unlearned(Real baseline_score, Real blind_score);

// Normalized histogram of predictions over the rows selected by the mask.
Vector prediction_distribution(const IntVector& preds, const std::vector<bool>& group_mask,
                               int num_classes);

// sum_k p_k ln(p_k / q_k); q is smoothed (additive 1e-6, renormalized) unless
// the inputs are identical, which yields exactly 0.
Real kl_divergence(const Vector& p, const Vector& q);

// Projection onto the top-2 principal components (mean-centered; component
// signs fixed so the largest-magnitude coordinate is positive).
Matrix project_embeddings(const Matrix& embeddings);

// Embedding export: pc1, pc2, e0..e{d-1}, y_primary, y_<task>...
// `spurious` entries are (name, labels) pairs.
void write_embeddings_csv(const std::string& path, const Matrix& embeddings,
                          const Matrix& projected, const IntVector& primary_labels,
                          const std::vector<std::pair<std::string, IntVector>>& spurious);

IntVector argmax_rows(const Matrix& scores);

}  // namespace unbias
