#pragma once

// Seeded synthetic dataset factory. Labels are drawn from an explicit joint
// probability table over attribute tuples; features follow an additive
// Gaussian centroid rule, which keeps the Bayes-optimal accuracy computable
// as a ground-truth reference.

#include "unbias/core.hpp"

#include <optional>
#include <string>
#include <vector>

namespace unbias {

struct AttributeLabels {
  std::string name;
  int num_classes = 0;
  IntVector labels;
};

struct LabeledDataset {
  Matrix x;
  AttributeLabels primary;
  std::vector<AttributeLabels> spurious;

  Index size() const { return x.rows(); }
  int input_dim() const { return static_cast<int>(x.cols()); }
  void validate() const;
  const AttributeLabels& attribute(const std::string& name) const;
  bool has_attribute(const std::string& name) const;
};

bool operator==(const AttributeLabels& a, const AttributeLabels& b);
bool operator==(const LabeledDataset& a, const LabeledDataset& b);

struct TaskSpec {
  std::string name;
  int num_classes = 0;
  Matrix centroids;  // num_classes x input_dim
  Real signal_scale = 1.0;
};

// Joint tables are flat vectors over attribute tuples in mixed-radix order,
// primary attribute most significant.
struct SyntheticSpec {
  int input_dim = 0;
  TaskSpec primary;
  std::vector<TaskSpec> spurious;
  Real noise_sigma = 0.5;
  Vector train_joint;
  Vector test_joint;  // empty means independent uniform

  std::vector<int> class_counts() const;  // primary first
  Index joint_cells() const;
  void validate() const;
  const TaskSpec& task(const std::string& name) const;
  int task_index(const std::string& name) const;  // 0 = primary
};

enum class Split { kTrain, kTest };
enum class ExtremeBiasVariant { kEb1, kEb2 };

// Tuple index <-> per-attribute labels, primary most significant.
Index tuple_to_index(const std::vector<int>& tuple, const std::vector<int>& counts);
std::vector<int> index_to_tuple(Index index, const std::vector<int>& counts);

Vector independent_uniform_joint(const std::vector<int>& counts);

// P(i, j) = rho * [j == pairing(i)] / K_p + (1 - rho) / (K_p * K_s).
// The default pairing is the diagonal, which requires K_p == K_s; pass an
// explicit mapping (size K_p, entries in [0, K_s)) otherwise.
Vector biased_joint(Real rho, int k_primary, int k_spurious,
                    const std::vector<int>& mapping = {});

// Disjoint-support table: spurious class 0 co-occurs only with the low
// primary classes and class 1 only with the high ones (EB2 swaps), with the
// middle primary class carrying zero training mass.
Vector extreme_bias_joint(ExtremeBiasVariant variant, int k_primary, int k_spurious = 2);

// Joint over (primary, spurious_1, ..., spurious_M): uniform primary
// marginal, each spurious attribute conditionally rho-paired to the primary.
Vector chained_biased_joint(const std::vector<int>& counts, const std::vector<Real>& rho);

// Centroid layouts. Directions are rows of an orthonormal-ish basis.
Matrix antipodal_centroids(const Vector& direction);
Matrix ordinal_centroids(const Vector& direction, int num_classes);
// `count` orthonormal rows of dimension `dim`, seeded.
Matrix seeded_unit_directions(int count, int dim, uint64_t seed);

LabeledDataset sample_dataset(const SyntheticSpec& spec, Index n, Split split, uint64_t seed);

// Exact per-cell counts under the independent uniform joint; n must divide
// evenly by the number of label cells. Rows are shuffled (seeded).
LabeledDataset balanced_test(const SyntheticSpec& spec, Index n, uint64_t seed);

inline constexpr uint64_t kBayesOracleSeed = 0xB4E5;

// Monte-Carlo estimate of the optimal classifier's accuracy for one
// attribute, computed from the exact class-conditional densities under the
// given split's joint. Noise draws are scaled standard normals, so estimates
// across noise levels share the same underlying randomness.
Real bayes_oracle_accuracy(const SyntheticSpec& spec, const std::string& task, Split split,
                           Index n = 100000, uint64_t oracle_seed = kBayesOracleSeed);

// CSV round trip. Header: f0..f{d-1}, y_primary, then y_<task> per spurious
// attribute; values written with 17 significant digits.
void export_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset import_dataset(const std::string& path,
                              const std::vector<int>& expected_counts = {});

}  // namespace unbias
