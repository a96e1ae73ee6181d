#include "unbias/eval.hpp"

#include <cmath>
#include <fstream>

namespace unbias {

bool MetricsRecord::all_finite() const {
  auto ok = [](Real v) { return std::isfinite(v); };
  if (!ok(primary_accuracy) || !ok(primary_adjacent_accuracy) || !ok(loss_primary) ||
      !ok(loss_confusion))
    return false;
  for (const auto& p : probes)
    if (!ok(p.probe_accuracy) || !ok(p.rescaled)) return false;
  for (const auto& k : kls)
    if (!ok(k.kl)) return false;
  return true;
}

namespace {
void check_same_size(const IntVector& preds, const IntVector& labels) {
  if (preds.size() != labels.size())
    throw DimensionError("accuracy: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  if (preds.size() == 0) throw DataError("accuracy: empty input");
}
}  // namespace

Real accuracy(const IntVector& preds, const IntVector& labels) {
  check_same_size(preds, labels);
  Index correct = 0;
  for (Index i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
  return static_cast<Real>(correct) / static_cast<Real>(preds.size());
}

Real mean_class_accuracy(const IntVector& preds, const IntVector& labels, int num_classes) {
  check_same_size(preds, labels);
  std::vector<Index> total(num_classes, 0), correct(num_classes, 0);
  for (Index i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes)
      throw DataError("mean_class_accuracy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    ++total[y];
    correct[y] += preds[i] == y;
  }
  Real acc = 0;
  for (int k = 0; k < num_classes; ++k) {
    if (total[k] == 0)
      throw DataError("mean_class_accuracy: class " + std::to_string(k) + " absent from labels");
    acc += static_cast<Real>(correct[k]) / static_cast<Real>(total[k]);
  }
  return acc / static_cast<Real>(num_classes);
}

Real adjacent_accuracy(const IntVector& preds, const IntVector& labels) {
  check_same_size(preds, labels);
  Index hits = 0;
  for (Index i = 0; i < preds.size(); ++i) hits += std::abs(preds[i] - labels[i]) <= 1;
  return static_cast<Real>(hits) / static_cast<Real>(preds.size());
}

Real rescaled_score(Real mean_class_error, int num_classes) {
  if (num_classes < 2) throw ConfigError("rescaled_score: need at least 2 classes");
  const Real e_max = 1.0 - 1.0 / static_cast<Real>(num_classes);
  return 1.0 - mean_class_error / e_max;
}

std::optional<Real> percent_unlearned(Real baseline_score, Real blind_score) {
  if (!(baseline_score > 0.0)) return std::nullopt;
  const Real pct = 100.0 * (baseline_score - blind_score) / baseline_score;
  return std::min(pct, 100.0);
}

Vector prediction_distribution(const IntVector& preds, const std::vector<bool>& group_mask,
                               int num_classes) {
  if (group_mask.size() != static_cast<size_t>(preds.size()))
    throw DimensionError("prediction_distribution: mask size " +
                         std::to_string(group_mask.size()) + " vs " +
                         std::to_string(preds.size()) + " predictions");
  Vector hist = Vector::Zero(num_classes);
  Index n = 0;
  for (Index i = 0; i < preds.size(); ++i) {
    if (!group_mask[i]) continue;
    if (preds[i] < 0 || preds[i] >= num_classes)
      throw DataError("prediction_distribution: prediction " + std::to_string(preds[i]) +
                      " outside [0, " + std::to_string(num_classes) + ")");
    hist[preds[i]] += 1.0;
    ++n;
  }
  if (n == 0) throw DataError("prediction_distribution: empty group");
  return hist / static_cast<Real>(n);
}

Real kl_divergence(const Vector& p, const Vector& q) {
  if (p.size() != q.size())
    throw DimensionError("kl_divergence: length mismatch, " + std::to_string(p.size()) + " vs " +
                         std::to_string(q.size()));
  if (p == q) return 0.0;
  Vector qs = q.array() + 1e-6;
  qs /= qs.sum();
  Real kl = 0.0;
  for (Index i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * std::log(p[i] / qs[i]);
  return kl;
}

Matrix project_embeddings(const Matrix& embeddings) {
  const Index n = embeddings.rows();
  const Index d = embeddings.cols();
  if (n < 2 || d < 2)
    throw DataError("project_embeddings: need at least 2 samples and 2 dimensions, got " +
                    shape_str(embeddings));
  const Matrix centered = embeddings.rowwise() - embeddings.colwise().mean();
  const Matrix cov = centered.transpose() * centered / static_cast<Real>(n - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
  if (solver.info() != Eigen::Success)
    throw Error("project_embeddings: eigendecomposition failed");
  const Vector evals = solver.eigenvalues();  // ascending
  const Real lead = evals[d - 1];
  int rank = 0;
  for (Index i = 0; i < d; ++i)
    if (evals[i] > std::max(1e-12 * lead, 1e-300)) ++rank;
  if (rank < 2)
    throw DataError("project_embeddings: degenerate input of rank " + std::to_string(rank) +
                    ", need rank >= 2");
  Matrix components(d, 2);
  components.col(0) = solver.eigenvectors().col(d - 1);
  components.col(1) = solver.eigenvectors().col(d - 2);
  for (Index c = 0; c < 2; ++c) {
    Index imax;
    components.col(c).cwiseAbs().maxCoeff(&imax);
    if (components(imax, c) < 0.0) components.col(c) = -components.col(c);
  }
  return centered * components;
}

void write_embeddings_csv(const std::string& path, const Matrix& embeddings,
                          const Matrix& projected, const IntVector& primary_labels,
                          const std::vector<std::pair<std::string, IntVector>>& spurious) {
  if (projected.rows() != embeddings.rows() || projected.cols() != 2)
    throw DimensionError("write_embeddings_csv: projection is " + shape_str(projected) +
                         ", expected " + shape_str(embeddings.rows(), 2));
  if (primary_labels.size() != embeddings.rows())
    throw DimensionError("write_embeddings_csv: label count mismatch");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("write_embeddings_csv: cannot open '" + path + "' for writing");
  os << "pc1,pc2";
  for (Index d = 0; d < embeddings.cols(); ++d) os << ",e" << d;
  os << ",y_primary";
  for (const auto& [name, labels] : spurious) os << ",y_" << name;
  os << '\n';
  for (Index i = 0; i < embeddings.rows(); ++i) {
    os << format_real(projected(i, 0)) << ',' << format_real(projected(i, 1));
    for (Index d = 0; d < embeddings.cols(); ++d) os << ',' << format_real(embeddings(i, d));
    os << ',' << primary_labels[i];
    for (const auto& [name, labels] : spurious) os << ',' << labels[i];
    os << '\n';
  }
  if (!os) throw IoError("write_embeddings_csv: write to '" + path + "' failed");
}

IntVector argmax_rows(const Matrix& scores) {
  IntVector out(scores.rows());
  for (Index i = 0; i < scores.rows(); ++i) {
    Index j;
    scores.row(i).maxCoeff(&j);
    out[i] = static_cast<int>(j);
  }
  return out;
}

}  // namespace unbias
