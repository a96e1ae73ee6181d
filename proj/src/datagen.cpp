#include "unbias/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace unbias {

void LabeledDataset::validate() const {
  auto check = [&](const AttributeLabels& a) {
    if (a.num_classes < 2)
      throw DataError("dataset attribute '" + a.name + "' needs at least 2 classes");
    if (a.labels.size() != x.rows())
      throw DataError("dataset attribute '" + a.name + "' has " +
                      std::to_string(a.labels.size()) + " labels for " +
                      std::to_string(x.rows()) + " rows");
    for (Index i = 0; i < a.labels.size(); ++i)
      if (a.labels[i] < 0 || a.labels[i] >= a.num_classes)
        throw DataError("dataset attribute '" + a.name + "' label " +
                        std::to_string(a.labels[i]) + " outside [0, " +
                        std::to_string(a.num_classes) + ")");
  };
  check(primary);
  for (const auto& s : spurious) check(s);
}

bool LabeledDataset::has_attribute(const std::string& name) const {
  if (primary.name == name) return true;
  for (const auto& s : spurious)
    if (s.name == name) return true;
  return false;
}

const AttributeLabels& LabeledDataset::attribute(const std::string& name) const {
  if (primary.name == name) return primary;
  for (const auto& s : spurious)
    if (s.name == name) return s;
  throw DataError("dataset has no attribute named '" + name + "'");
}

bool operator==(const AttributeLabels& a, const AttributeLabels& b) {
  return a.name == b.name && a.num_classes == b.num_classes && a.labels.size() == b.labels.size() &&
         a.labels == b.labels;
}

bool operator==(const LabeledDataset& a, const LabeledDataset& b) {
  if (a.x.rows() != b.x.rows() || a.x.cols() != b.x.cols()) return false;
  if (a.x != b.x) return false;
  if (!(a.primary == b.primary)) return false;
  return a.spurious == b.spurious;
}

std::vector<int> SyntheticSpec::class_counts() const {
  std::vector<int> counts{primary.num_classes};
  for (const auto& s : spurious) counts.push_back(s.num_classes);
  return counts;
}

Index SyntheticSpec::joint_cells() const {
  Index cells = 1;
  for (int k : class_counts()) cells *= k;
  return cells;
}

void SyntheticSpec::validate() const {
  if (input_dim <= 0) throw ConfigError("SyntheticSpec: input_dim must be positive");
  auto check_task = [&](const TaskSpec& t) {
    if (t.num_classes < 2)
      throw ConfigError("SyntheticSpec: task '" + t.name + "' needs at least 2 classes");
    if (t.centroids.rows() != t.num_classes || t.centroids.cols() != input_dim)
      throw ConfigError("SyntheticSpec: task '" + t.name + "' centroids are " +
                        shape_str(t.centroids) + ", expected " +
                        shape_str(t.num_classes, input_dim));
    if (!t.centroids.allFinite())
      throw ConfigError("SyntheticSpec: task '" + t.name + "' has non-finite centroids");
  };
  check_task(primary);
  for (const auto& s : spurious) check_task(s);
  if (!(noise_sigma >= 0.0)) throw ConfigError("SyntheticSpec: noise_sigma must be >= 0");
  auto check_joint = [&](const Vector& joint, const char* which) {
    if (joint.size() == 0) return;
    if (joint.size() != joint_cells())
      throw ConfigError(std::string("SyntheticSpec: ") + which + " has " +
                        std::to_string(joint.size()) + " cells, expected " +
                        std::to_string(joint_cells()));
    if ((joint.array() < 0.0).any())
      throw ConfigError(std::string("SyntheticSpec: ") + which + " has negative entries");
    if (std::abs(joint.sum() - 1.0) > 1e-9)
      throw ConfigError(std::string("SyntheticSpec: ") + which + " sums to " +
                        format_real(joint.sum()) + ", expected 1");
  };
  if (train_joint.size() == 0) throw ConfigError("SyntheticSpec: train_joint is required");
  check_joint(train_joint, "train_joint");
  check_joint(test_joint, "test_joint");
}

int SyntheticSpec::task_index(const std::string& name) const {
  if (primary.name == name) return 0;
  for (size_t i = 0; i < spurious.size(); ++i)
    if (spurious[i].name == name) return static_cast<int>(i) + 1;
  throw DataError("SyntheticSpec: no task named '" + name + "'");
}

const TaskSpec& SyntheticSpec::task(const std::string& name) const {
  const int idx = task_index(name);
  return idx == 0 ? primary : spurious[idx - 1];
}

Index tuple_to_index(const std::vector<int>& tuple, const std::vector<int>& counts) {
  Index idx = 0;
  for (size_t t = 0; t < counts.size(); ++t) idx = idx * counts[t] + tuple[t];
  return idx;
}

std::vector<int> index_to_tuple(Index index, const std::vector<int>& counts) {
  std::vector<int> tuple(counts.size());
  for (size_t t = counts.size(); t-- > 0;) {
    tuple[t] = static_cast<int>(index % counts[t]);
    index /= counts[t];
  }
  return tuple;
}

Vector independent_uniform_joint(const std::vector<int>& counts) {
  Index cells = 1;
  for (int k : counts) cells *= k;
  return Vector::Constant(cells, 1.0 / static_cast<Real>(cells));
}

Vector biased_joint(Real rho, int k_primary, int k_spurious, const std::vector<int>& mapping) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("biased_joint: rho must be in [0, 1]");
  if (k_primary < 2 || k_spurious < 2) throw ConfigError("biased_joint: need K >= 2 per task");
  std::vector<int> pairing = mapping;
  if (pairing.empty()) {
    if (k_primary != k_spurious)
      throw ConfigError("biased_joint: diagonal pairing needs K_p == K_s (" +
                        std::to_string(k_primary) + " vs " + std::to_string(k_spurious) +
                        "); pass an explicit mapping");
    pairing.resize(k_primary);
    std::iota(pairing.begin(), pairing.end(), 0);
  }
  if (pairing.size() != static_cast<size_t>(k_primary))
    throw ConfigError("biased_joint: mapping must have one entry per primary class");
  for (int m : pairing)
    if (m < 0 || m >= k_spurious) throw ConfigError("biased_joint: mapping entry out of range");

  Vector joint(static_cast<Index>(k_primary) * k_spurious);
  const Real uniform = (1.0 - rho) / static_cast<Real>(k_primary * k_spurious);
  for (int i = 0; i < k_primary; ++i)
    for (int j = 0; j < k_spurious; ++j)
      joint[static_cast<Index>(i) * k_spurious + j] =
          uniform + (j == pairing[i] ? rho / static_cast<Real>(k_primary) : 0.0);
  return joint;
}

Vector extreme_bias_joint(ExtremeBiasVariant variant, int k_primary, int k_spurious) {
  if (k_primary < 3)
    throw ConfigError("extreme_bias_joint: need K_p >= 3 (low, buffer, high), got " +
                      std::to_string(k_primary));
  if (k_spurious != 2) throw ConfigError("extreme_bias_joint: spurious attribute must be binary");
  const int buffer = k_primary / 2;
  const int low_classes = buffer;
  const int high_classes = k_primary - buffer - 1;
  const int low_spur = variant == ExtremeBiasVariant::kEb1 ? 0 : 1;
  Vector joint = Vector::Zero(static_cast<Index>(k_primary) * k_spurious);
  for (int i = 0; i < k_primary; ++i) {
    if (i == buffer) continue;  // buffer class: zero training mass
    const bool low = i < buffer;
    const int j = low ? low_spur : 1 - low_spur;
    joint[static_cast<Index>(i) * k_spurious + j] =
        0.5 / static_cast<Real>(low ? low_classes : high_classes);
  }
  return joint;
}

Vector chained_biased_joint(const std::vector<int>& counts, const std::vector<Real>& rho) {
  if (counts.size() < 2) throw ConfigError("chained_biased_joint: need at least one spurious task");
  if (rho.size() != counts.size() - 1)
    throw ConfigError("chained_biased_joint: got " + std::to_string(rho.size()) +
                      " correlations for " + std::to_string(counts.size() - 1) + " tasks");
  const int k_p = counts[0];
  Index cells = 1;
  for (int k : counts) cells *= k;
  Vector joint(cells);
  for (Index c = 0; c < cells; ++c) {
    const auto tuple = index_to_tuple(c, counts);
    Real p = 1.0 / static_cast<Real>(k_p);
    for (size_t m = 1; m < counts.size(); ++m) {
      const int k_s = counts[m];
      // proportional pairing when class counts differ
      const int paired = static_cast<int>(static_cast<long>(tuple[0]) * k_s / k_p);
      const Real r = rho[m - 1];
      if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("chained_biased_joint: rho outside [0, 1]");
      p *= (tuple[m] == paired ? r : 0.0) + (1.0 - r) / static_cast<Real>(k_s);
    }
    joint[c] = p;
  }
  return joint;
}

Matrix antipodal_centroids(const Vector& direction) {
  Matrix c(2, direction.size());
  c.row(0) = direction.transpose();
  c.row(1) = -direction.transpose();
  return c;
}

Matrix ordinal_centroids(const Vector& direction, int num_classes) {
  if (num_classes < 2) throw ConfigError("ordinal_centroids: need at least 2 classes");
  Matrix c(num_classes, direction.size());
  for (int k = 0; k < num_classes; ++k) {
    const Real t = -1.0 + 2.0 * static_cast<Real>(k) / static_cast<Real>(num_classes - 1);
    c.row(k) = t * direction.transpose();
  }
  return c;
}

Matrix seeded_unit_directions(int count, int dim, uint64_t seed) {
  if (count > dim)
    throw ConfigError("seeded_unit_directions: cannot draw " + std::to_string(count) +
                      " orthonormal directions in dimension " + std::to_string(dim));
  Rng rng(derive_seed(seed, "directions"));
  Matrix g(dim, count);
  for (Index j = 0; j < count; ++j)
    for (Index i = 0; i < dim; ++i) g(i, j) = rng.normal();
  // Gram-Schmidt columns
  for (Index j = 0; j < count; ++j) {
    for (Index k = 0; k < j; ++k) g.col(j) -= g.col(k).dot(g.col(j)) * g.col(k);
    const Real norm = g.col(j).norm();
    if (norm < 1e-9) throw Error("seeded_unit_directions: degenerate draw");
    g.col(j) /= norm;
  }
  return g.transpose();
}

namespace {

Matrix tuple_means(const SyntheticSpec& spec) {
  const auto counts = spec.class_counts();
  const Index cells = spec.joint_cells();
  Matrix means = Matrix::Zero(cells, spec.input_dim);
  for (Index c = 0; c < cells; ++c) {
    const auto tuple = index_to_tuple(c, counts);
    means.row(c) += spec.primary.signal_scale * spec.primary.centroids.row(tuple[0]);
    for (size_t m = 0; m < spec.spurious.size(); ++m)
      means.row(c) += spec.spurious[m].signal_scale * spec.spurious[m].centroids.row(tuple[m + 1]);
  }
  return means;
}

LabeledDataset dataset_from_tuples(const SyntheticSpec& spec, const std::vector<Index>& cells,
                                   Rng& rng) {
  const auto counts = spec.class_counts();
  const Index n = static_cast<Index>(cells.size());
  LabeledDataset ds;
  ds.x.resize(n, spec.input_dim);
  ds.primary = {spec.primary.name, spec.primary.num_classes, IntVector(n)};
  for (const auto& s : spec.spurious) ds.spurious.push_back({s.name, s.num_classes, IntVector(n)});
  const Matrix means = tuple_means(spec);
  for (Index i = 0; i < n; ++i) {
    const auto tuple = index_to_tuple(cells[i], counts);
    ds.primary.labels[i] = tuple[0];
    for (size_t m = 0; m < spec.spurious.size(); ++m) ds.spurious[m].labels[i] = tuple[m + 1];
    for (Index d = 0; d < spec.input_dim; ++d)
      ds.x(i, d) = means(cells[i], d) + spec.noise_sigma * rng.normal();
  }
  return ds;
}

}  // namespace

LabeledDataset sample_dataset(const SyntheticSpec& spec, Index n, Split split, uint64_t seed) {
  spec.validate();
  if (n < 1) throw ConfigError("sample_dataset: n must be >= 1");
  const Vector& joint = split == Split::kTrain
                            ? spec.train_joint
                            : (spec.test_joint.size() ? spec.test_joint
                                                      : independent_uniform_joint(
                                                            spec.class_counts()));
  Rng rng(derive_seed(seed, split == Split::kTrain ? "sample_train" : "sample_test"));
  std::vector<Index> cells(n);
  for (Index i = 0; i < n; ++i) cells[i] = rng.categorical(joint);
  return dataset_from_tuples(spec, cells, rng);
}

LabeledDataset balanced_test(const SyntheticSpec& spec, Index n, uint64_t seed) {
  spec.validate();
  const Index cells = spec.joint_cells();
  if (n < cells || n % cells != 0)
    throw ConfigError("balanced_test: n = " + std::to_string(n) + " is not divisible by " +
                      std::to_string(cells) + " label cells");
  const Index per_cell = n / cells;
  std::vector<Index> assignment;
  assignment.reserve(n);
  for (Index c = 0; c < cells; ++c)
    for (Index r = 0; r < per_cell; ++r) assignment.push_back(c);
  Rng rng(derive_seed(seed, "balanced_test"));
  rng.shuffle(assignment);
  return dataset_from_tuples(spec, assignment, rng);
}

Real bayes_oracle_accuracy(const SyntheticSpec& spec, const std::string& task, Split split,
                           Index n, uint64_t oracle_seed) {
  spec.validate();
  const int target = spec.task_index(task);
  const auto counts = spec.class_counts();
  const Vector joint = split == Split::kTrain
                           ? spec.train_joint
                           : (spec.test_joint.size() ? spec.test_joint
                                                     : independent_uniform_joint(counts));
  const Matrix means = tuple_means(spec);
  const Index cells = spec.joint_cells();
  const Real sigma = std::max(spec.noise_sigma, 1e-9);

  std::vector<int> cell_class(cells);
  for (Index c = 0; c < cells; ++c) cell_class[c] = index_to_tuple(c, counts)[target];
  const int k = counts[target];

  Rng rng(derive_seed(oracle_seed, "bayes_oracle"));
  Index correct = 0;
  Vector x(spec.input_dim);
  Vector log_post(cells);
  Vector class_score(k);
  for (Index s = 0; s < n; ++s) {
    const Index cell = rng.categorical(joint);
    for (Index d = 0; d < spec.input_dim; ++d)
      x[d] = means(cell, d) + spec.noise_sigma * rng.normal();
    for (Index c = 0; c < cells; ++c) {
      if (joint[c] <= 0.0) {
        log_post[c] = -std::numeric_limits<Real>::infinity();
        continue;
      }
      const Real d2 = (x.transpose() - means.row(c)).squaredNorm();
      log_post[c] = std::log(joint[c]) - d2 / (2.0 * sigma * sigma);
    }
    const Real shift = log_post.maxCoeff();
    class_score.setZero();
    for (Index c = 0; c < cells; ++c)
      if (std::isfinite(log_post[c])) class_score[cell_class[c]] += std::exp(log_post[c] - shift);
    Index pred;
    class_score.maxCoeff(&pred);
    if (static_cast<int>(pred) == cell_class[cell]) ++correct;
  }
  return static_cast<Real>(correct) / static_cast<Real>(n);
}

// ---------------------------------------------------------------------------
// CSV round trip
// ---------------------------------------------------------------------------

void export_dataset(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("export_dataset: cannot open '" + path + "' for writing");
  for (int d = 0; d < ds.input_dim(); ++d) os << 'f' << d << ',';
  os << "y_primary";
  for (const auto& s : ds.spurious) os << ",y_" << s.name;
  os << '\n';
  for (Index i = 0; i < ds.size(); ++i) {
    for (Index d = 0; d < ds.x.cols(); ++d) os << format_real(ds.x(i, d)) << ',';
    os << ds.primary.labels[i];
    for (const auto& s : ds.spurious) os << ',' << s.labels[i];
    os << '\n';
  }
  if (!os) throw IoError("export_dataset: write to '" + path + "' failed");
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

}  // namespace

LabeledDataset import_dataset(const std::string& path, const std::vector<int>& expected_counts) {
  std::ifstream is(path);
  if (!is) throw IoError("import_dataset: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line.empty())
    throw FormatError("import_dataset: '" + path + "': empty file (line 1)");
  const auto header = split_csv_line(line);

  int dim = 0;
  while (dim < static_cast<int>(header.size()) && header[dim] == "f" + std::to_string(dim)) ++dim;
  if (dim == 0) throw FormatError("import_dataset: '" + path + "': no feature columns (line 1)");
  size_t col = dim;
  if (col >= header.size() || header[col] != "y_primary")
    throw FormatError("import_dataset: '" + path + "': missing y_primary column (line 1)");
  std::vector<std::string> spurious_names;
  for (++col; col < header.size(); ++col) {
    if (header[col].rfind("y_", 0) != 0)
      throw FormatError("import_dataset: '" + path + "': unexpected column '" + header[col] +
                        "' (line 1)");
    spurious_names.push_back(header[col].substr(2));
  }

  std::vector<Vector> rows;
  std::vector<int> primary_labels;
  std::vector<std::vector<int>> spurious_labels(spurious_names.size());
  size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size())
      throw FormatError("import_dataset: '" + path + "': expected " +
                        std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()) + " (line " + std::to_string(line_no) + ")");
    Vector row(dim);
    size_t pos = 0;
    auto parse_real = [&](const std::string& f) {
      char* end = nullptr;
      const double v = std::strtod(f.c_str(), &end);
      if (end == f.c_str() || *end != '\0')
        throw FormatError("import_dataset: '" + path + "': bad number '" + f + "' (line " +
                          std::to_string(line_no) + ")");
      return v;
    };
    auto parse_label = [&](const std::string& f) {
      char* end = nullptr;
      const long v = std::strtol(f.c_str(), &end, 10);
      if (end == f.c_str() || *end != '\0' || v < 0)
        throw FormatError("import_dataset: '" + path + "': bad label '" + f + "' (line " +
                          std::to_string(line_no) + ")");
      return static_cast<int>(v);
    };
    for (int d = 0; d < dim; ++d) row[d] = parse_real(fields[pos++]);
    rows.push_back(std::move(row));
    primary_labels.push_back(parse_label(fields[pos++]));
    for (auto& sl : spurious_labels) sl.push_back(parse_label(fields[pos++]));
  }
  if (rows.empty()) throw FormatError("import_dataset: '" + path + "': no data rows (line 1)");

  if (!expected_counts.empty() && expected_counts.size() != spurious_names.size() + 1)
    throw ConfigError("import_dataset: expected_counts must cover primary + spurious tasks");

  LabeledDataset ds;
  ds.x.resize(static_cast<Index>(rows.size()), dim);
  for (size_t i = 0; i < rows.size(); ++i) ds.x.row(static_cast<Index>(i)) = rows[i].transpose();
  auto to_attr = [&](const std::string& name, const std::vector<int>& labels, int expected) {
    AttributeLabels a;
    a.name = name;
    a.labels.resize(static_cast<Index>(labels.size()));
    int max_label = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      a.labels[static_cast<Index>(i)] = labels[i];
      max_label = std::max(max_label, labels[i]);
    }
    a.num_classes = expected > 0 ? expected : max_label + 1;
    if (max_label >= a.num_classes)
      throw DataError("import_dataset: attribute '" + name + "' label " +
                      std::to_string(max_label) + " outside expected [0, " +
                      std::to_string(a.num_classes) + ")");
    return a;
  };
  ds.primary =
      to_attr("primary", primary_labels, expected_counts.empty() ? 0 : expected_counts[0]);
  for (size_t m = 0; m < spurious_names.size(); ++m)
    ds.spurious.push_back(to_attr(spurious_names[m], spurious_labels[m],
                                  expected_counts.empty() ? 0 : expected_counts[m + 1]));
  ds.validate();
  return ds;
}

}  // namespace unbias
