#include "unbias/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace unbias {

void TrainConfig::validate(size_t num_secondary_tasks) const {
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw ConfigError("TrainConfig: alpha must be finite and >= 0");
  // betas are ignored when no secondary tasks run (one config drives both
  // the baseline and the blind network)
  if (num_secondary_tasks > 0 && !betas.empty() && betas.size() != num_secondary_tasks)
    throw ConfigError("TrainConfig: " + std::to_string(betas.size()) + " betas for " +
                      std::to_string(num_secondary_tasks) + " secondary tasks");
  for (Real b : betas)
    if (!(b >= 0.0) || !std::isfinite(b)) throw ConfigError("TrainConfig: betas must be >= 0");
  if (!(base_lr > 0.0)) throw ConfigError("TrainConfig: base_lr must be positive");
  if (!(head_lr_boost > 0.0)) throw ConfigError("TrainConfig: head_lr_boost must be positive");
  if (epochs < 0) throw ConfigError("TrainConfig: epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
  if (inner.max_steps < 1) throw ConfigError("TrainConfig: inner.max_steps must be >= 1");
  if (!(inner.plateau_tol >= 0.0)) throw ConfigError("TrainConfig: plateau_tol must be >= 0");
  if (inner.plateau_patience < 1)
    throw ConfigError("TrainConfig: plateau_patience must be >= 1");
}

std::vector<SecondaryTask> secondary_tasks_from(const LabeledDataset& ds) {
  std::vector<SecondaryTask> tasks;
  for (size_t m = 0; m < ds.spurious.size(); ++m)
    tasks.push_back({ds, static_cast<int>(m)});
  return tasks;
}

BatchCycler::BatchCycler(Index n, Index batch_size, uint64_t seed)
    : n_(n), batch_size_(std::min(batch_size, n)), pos_(n), rng_(seed), order_(n) {
  if (n < 1) throw ConfigError("BatchCycler: empty dataset");
  std::iota(order_.begin(), order_.end(), 0);
}

const std::vector<int>& BatchCycler::next_batch() {
  if (pos_ >= n_) {
    rng_.shuffle(order_);
    pos_ = 0;
  }
  const Index end = std::min(pos_ + batch_size_, n_);
  batch_.assign(order_.begin() + pos_, order_.begin() + end);
  pos_ = end;
  return batch_;
}

namespace {

Matrix gather_rows(const Matrix& x, const std::vector<int>& idx) {
  Matrix out(static_cast<Index>(idx.size()), x.cols());
  for (size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = x.row(idx[i]);
  return out;
}

IntVector gather_labels(const IntVector& labels, const std::vector<int>& idx) {
  IntVector out(static_cast<Index>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = labels[idx[i]];
  return out;
}

}  // namespace

Vector robust_class_weights(const IntVector& labels, int num_classes) {
  Vector counts = Vector::Zero(num_classes);
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw DataError("robust_class_weights: label outside [0, " + std::to_string(num_classes) +
                      ")");
    counts[labels[i]] += 1.0;
  }
  Vector w = Vector::Ones(num_classes);
  Real sum_present = 0.0;
  int present = 0;
  for (int k = 0; k < num_classes; ++k) {
    if (counts[k] > 0.0) {
      w[k] = static_cast<Real>(labels.size()) / counts[k];
      sum_present += w[k];
      ++present;
    }
  }
  if (present == 0) throw DataError("robust_class_weights: no labels");
  const Real mean_present = sum_present / present;
  for (int k = 0; k < num_classes; ++k)
    if (counts[k] > 0.0) w[k] /= mean_present;
  return w;
}

TrainState init_train_state(const ModelArch& arch, const TrainConfig& config,
                            LabeledDataset primary_train,
                            std::vector<SecondaryTask> secondaries) {
  config.validate(secondaries.size());
  primary_train.validate();
  if (arch.secondary.size() != secondaries.size())
    throw ConfigError("init_train_state: architecture has " +
                      std::to_string(arch.secondary.size()) + " secondary heads for " +
                      std::to_string(secondaries.size()) + " secondary tasks");
  if (primary_train.input_dim() != arch.input_dim)
    throw DimensionError("init_train_state: dataset dimension " +
                         std::to_string(primary_train.input_dim()) +
                         " does not match architecture input " + std::to_string(arch.input_dim));
  if (primary_train.primary.num_classes != arch.primary.num_classes)
    throw ConfigError("init_train_state: primary task has " +
                      std::to_string(primary_train.primary.num_classes) +
                      " classes, head expects " + std::to_string(arch.primary.num_classes));
  for (size_t m = 0; m < secondaries.size(); ++m) {
    const auto& task = secondaries[m];
    task.data.validate();
    if (task.data.size() < 1)
      throw ConfigError("init_train_state: secondary task " + std::to_string(m) + " is empty");
    if (task.data.input_dim() != arch.input_dim)
      throw DimensionError("init_train_state: secondary task " + std::to_string(m) +
                           " dimension mismatch");
    if (task.target().num_classes != arch.secondary[m].num_classes)
      throw ConfigError("init_train_state: secondary task '" + task.target().name + "' has " +
                        std::to_string(task.target().num_classes) + " classes, head expects " +
                        std::to_string(arch.secondary[m].num_classes));
  }

  ModelArch frozen_arch = arch;
  apply_freezing(frozen_arch, config.frozen_layers);

  TrainState state{
      init_bundle(frozen_arch, config.seed),
      config,
      std::move(primary_train),
      std::move(secondaries),
      BatchCycler(1, 1, 0),
      {},
      {},
      {},
      0,
      {}};
  state.primary_cycler = BatchCycler(state.primary_data.size(), config.batch_size,
                                     derive_seed(config.seed, "primary_batches"));
  for (size_t m = 0; m < state.secondaries.size(); ++m)
    state.secondary_cyclers.emplace_back(state.secondaries[m].data.size(), config.batch_size,
                                         derive_seed(config.seed, "secondary_batches", m));
  state.primary_weights = robust_class_weights(state.primary_data.primary.labels,
                                               state.primary_data.primary.num_classes);
  for (const auto& task : state.secondaries)
    state.secondary_weights.push_back(
        robust_class_weights(task.target().labels, task.target().num_classes));
  return state;
}

InnerReport train_secondary_inner(TrainState& state) {
  if (state.secondaries.empty())
    throw ConfigError("train_secondary_inner: no secondary tasks configured");
  auto& cfg = state.config;

  if (cfg.reinit_secondary_heads) {
    Rng rng(derive_seed(cfg.seed, "head_reinit", static_cast<uint64_t>(state.epoch)));
    for (auto& head : state.bundle.secondary) {
      const Real amp = 1.0 / std::sqrt(static_cast<Real>(head.weight->rows()));
      for (Index i = 0; i < head.weight->rows(); ++i)
        for (Index j = 0; j < head.weight->cols(); ++j)
          head.weight->values(i, j) = rng.uniform(-amp, amp);
      head.bias->values.setZero();
    }
  }

  InnerReport report;
  const Real lr = cfg.base_lr * cfg.head_lr_boost;
  // The representation is fixed for the whole loop, so each task's
  // embeddings are computed once up front and batches gather from the cache.
  std::vector<Matrix> cached_embeddings;
  for (const auto& task : state.secondaries)
    cached_embeddings.push_back(embed(state.bundle, task.data.x));

  // Improvement is measured against the best loss reached so far, which keeps
  // minibatch noise from endlessly resetting the plateau streak.
  Real best = std::numeric_limits<Real>::infinity();
  int streak = 0;
  while (report.steps < cfg.inner.max_steps) {
    // Hot loop. The head update is computed directly: same math as the taped
    // softmax_loss backward, verified against it in the trainer tests.
    Real loss = 0.0;
    for (size_t m = 0; m < state.secondaries.size(); ++m) {
      const auto& idx = state.secondary_cyclers[m].next_batch();
      const auto& task = state.secondaries[m];
      auto& head = state.bundle.secondary[m];
      const Matrix emb = gather_rows(cached_embeddings[m], idx);
      const IntVector yb = gather_labels(task.target().labels, idx);
      Matrix z = (emb * head.weight->values).rowwise() + head.bias->values.row(0);
      const Vector lse = row_log_sum_exp(z);
      Matrix g = softmax_rows_values(z);
      const Real beta = cfg.beta(m);
      const Real inv_n = 1.0 / static_cast<Real>(z.rows());
      const Vector& w = state.secondary_weights[m];
      Real task_loss = 0.0;
      for (Index i = 0; i < z.rows(); ++i) {
        task_loss += w[yb[i]] * (lse[i] - z(i, yb[i]));
        g(i, yb[i]) -= 1.0;
        g.row(i) *= beta * inv_n * w[yb[i]];
      }
      loss += beta * task_loss * inv_n;
      head.weight->values.noalias() -= lr * (emb.transpose() * g);
      head.bias->values.row(0) -= lr * g.colwise().sum();
    }
    ++report.steps;
    report.final_loss = loss;

    const Real improvement =
        (best - report.final_loss) / std::max(std::abs(best), Real(1e-12));
    if (improvement < cfg.inner.plateau_tol) {
      if (++streak >= cfg.inner.plateau_patience) break;
    } else {
      streak = 0;
    }
    best = std::min(best, report.final_loss);
  }
  return report;
}

StepReport joint_step(TrainState& state, const TaskBatch& primary_batch,
                      const std::vector<TaskBatch>& secondary_batches, Real alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("joint_step: alpha must be >= 0");
  if (!secondary_batches.empty() && secondary_batches.size() != state.bundle.secondary.size())
    throw ConfigError("joint_step: got " + std::to_string(secondary_batches.size()) +
                      " secondary batches for " + std::to_string(state.bundle.secondary.size()) +
                      " heads");
  auto& cfg = state.config;
  auto repr_params = params_of(state.bundle, ParamSelector::kRepr);
  auto primary_params = params_of(state.bundle, ParamSelector::kPrimary);

  Tape<Real> tape;
  auto features = forward_features(tape, state.bundle, primary_batch.x);
  auto primary_logits = forward_head(tape, state.bundle.primary, features);
  auto loss_primary =
      softmax_loss(tape, primary_logits, primary_batch.labels, state.primary_weights);

  NodePtr<Real> loss_conf;
  NodePtr<Real> total = loss_primary;
  if (!secondary_batches.empty()) {
    std::vector<NodePtr<Real>> logits;
    for (size_t m = 0; m < secondary_batches.size(); ++m) {
      auto sec_features = forward_features(tape, state.bundle, secondary_batches[m].x);
      logits.push_back(forward_head(tape, state.bundle.secondary[m], sec_features));
    }
    loss_conf = secondary_confusion_loss(tape, logits, cfg.confusion_variant);
    total = joint_loss(tape, loss_primary, loss_conf, alpha);
  }

  zero_grads(repr_params);
  zero_grads(primary_params);
  backward(tape, total);
  if (!repr_params.empty()) sgd_step(repr_params, cfg.base_lr);
  sgd_step(primary_params, cfg.base_lr * cfg.head_lr_boost);

  return {total->values(0, 0), loss_primary->values(0, 0),
          loss_conf ? loss_conf->values(0, 0) : 0.0};
}

Real confusion_value(const NetworkBundle& bundle, const Matrix& x, ConfusionVariant variant) {
  if (bundle.secondary.empty()) return 0.0;
  Tape<Real> tape;
  auto features = forward_features(tape, bundle, x);
  std::vector<NodePtr<Real>> logits;
  for (const auto& head : bundle.secondary) logits.push_back(forward_head(tape, head, features));
  return secondary_confusion_loss(tape, logits, variant)->values(0, 0);
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

namespace {
constexpr int kProbeMaxIters = 800;
constexpr Real kProbeTestFraction = 0.3;
constexpr Real kProbePlateauTol = 1e-8;
constexpr int kProbePlateauPatience = 20;
}  // namespace

Real probe_train(const Matrix& embeddings, const IntVector& labels, int num_classes,
                 uint64_t seed) {
  if (labels.size() != embeddings.rows())
    throw DimensionError("probe_train: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(embeddings.rows()) + " embeddings");
  if (num_classes < 2) throw ConfigError("probe_train: need at least 2 classes");

  std::vector<std::vector<int>> by_class(num_classes);
  for (Index i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw DataError("probe_train: label " + std::to_string(labels[i]) + " outside [0, " +
                      std::to_string(num_classes) + ")");
    by_class[labels[i]].push_back(static_cast<int>(i));
  }
  Rng rng(derive_seed(seed, "probe_split"));
  Index test_per_class = std::numeric_limits<Index>::max();
  for (int k = 0; k < num_classes; ++k) {
    rng.shuffle(by_class[k]);
    test_per_class = std::min(
        test_per_class, static_cast<Index>(kProbeTestFraction * by_class[k].size()));
  }
  if (test_per_class < 1)
    throw DataError("probe_train: a class is absent from the probe-test split (too few samples)");

  std::vector<int> train_idx, test_idx;
  for (int k = 0; k < num_classes; ++k) {
    test_idx.insert(test_idx.end(), by_class[k].begin(), by_class[k].begin() + test_per_class);
    train_idx.insert(train_idx.end(), by_class[k].begin() + test_per_class, by_class[k].end());
  }

  Matrix x_train = gather_rows(embeddings, train_idx);
  Matrix x_test = gather_rows(embeddings, test_idx);
  IntVector y_train = gather_labels(labels, train_idx);
  IntVector y_test = gather_labels(labels, test_idx);

  // standardize with train-split statistics
  const Eigen::RowVectorXd mu = x_train.colwise().mean();
  Eigen::RowVectorXd sd =
      ((x_train.rowwise() - mu).array().square().colwise().mean()).sqrt().matrix();
  sd = sd.cwiseMax(1e-12);
  x_train = (x_train.rowwise() - mu).array().rowwise() / sd.array();
  x_test = (x_test.rowwise() - mu).array().rowwise() / sd.array();

  const Vector class_weights = robust_class_weights(y_train, num_classes);
  auto weight_node = make_leaf<Real>(Matrix::Zero(embeddings.cols(), num_classes), true);
  auto bias_node = make_leaf<Real>(Matrix::Zero(1, num_classes), true);
  std::vector<NodePtr<Real>> params{weight_node, bias_node};
  auto x_node = make_leaf<Real>(x_train, false);

  // Full-batch gradient descent with step halving on any loss increase.
  Real lr = 0.5;
  Real prev = std::numeric_limits<Real>::infinity();
  int streak = 0;
  for (int it = 0; it < kProbeMaxIters; ++it) {
    Tape<Real> tape;
    auto logits = add_bias(tape, matmul(tape, x_node, weight_node), bias_node);
    auto loss = softmax_loss(tape, logits, y_train, class_weights);
    const Real value = loss->values(0, 0);
    if (value > prev) lr *= 0.5;
    const Real improvement = (prev - value) / std::max(std::abs(prev), Real(1e-12));
    if (improvement >= 0.0 && improvement < kProbePlateauTol) {
      if (++streak >= kProbePlateauPatience) break;
    } else {
      streak = 0;
    }
    prev = value;
    zero_grads(params);
    backward(tape, loss);
    sgd_step(params, lr);
  }

  Matrix scores = (x_test * weight_node->values).rowwise() + bias_node->values.row(0);
  return mean_class_accuracy(argmax_rows(scores), y_test, num_classes);
}

// ---------------------------------------------------------------------------
// Epoch evaluation and the outer loops
// ---------------------------------------------------------------------------

MetricsRecord evaluate_epoch(const NetworkBundle& bundle, const LabeledDataset& eval_data,
                             const TrainConfig& config, int epoch,
                             const Vector& primary_weights) {
  MetricsRecord rec;
  rec.epoch = epoch;

  Tape<Real> tape;
  auto features = forward_features(tape, bundle, eval_data.x);
  auto logits = forward_head(tape, bundle.primary, features);
  rec.loss_primary =
      softmax_loss(tape, logits, eval_data.primary.labels, primary_weights)->values(0, 0);
  if (!bundle.secondary.empty()) {
    std::vector<NodePtr<Real>> sec_logits;
    for (const auto& head : bundle.secondary)
      sec_logits.push_back(forward_head(tape, head, features));
    rec.loss_confusion =
        secondary_confusion_loss(tape, sec_logits, config.confusion_variant)->values(0, 0);
  }

  const IntVector preds = argmax_rows(logits->values);
  rec.primary_accuracy = accuracy(preds, eval_data.primary.labels);
  rec.primary_adjacent_accuracy = adjacent_accuracy(preds, eval_data.primary.labels);

  const Matrix& embeddings = features->values;
  for (size_t m = 0; m < eval_data.spurious.size(); ++m) {
    const auto& attr = eval_data.spurious[m];
    const Real acc =
        probe_train(embeddings, attr.labels, attr.num_classes,
                    derive_seed(config.seed, "probe",
                                static_cast<uint64_t>(epoch) * 1000003ULL + m));
    rec.probes.push_back({attr.name, acc, rescaled_score(1.0 - acc, attr.num_classes)});
  }

  for (const auto& attr : eval_data.spurious) {
    std::vector<Vector> dists(attr.num_classes);
    for (int g = 0; g < attr.num_classes; ++g) {
      std::vector<bool> mask(eval_data.size());
      for (Index i = 0; i < eval_data.size(); ++i) mask[i] = attr.labels[i] == g;
      dists[g] = prediction_distribution(preds, mask, eval_data.primary.num_classes);
    }
    for (int a = 0; a < attr.num_classes; ++a)
      for (int b = a + 1; b < attr.num_classes; ++b)
        rec.kls.push_back({attr.name + std::to_string(a), attr.name + std::to_string(b),
                           kl_divergence(dists[a], dists[b])});
  }
  return rec;
}

TrainResult run_jlu(const ModelArch& arch, const TrainConfig& config,
                    const LabeledDataset& primary_train,
                    const std::vector<SecondaryTask>& secondaries,
                    const LabeledDataset& eval_data, const TrainHooks& hooks) {
  eval_data.validate();
  if (eval_data.input_dim() != arch.input_dim)
    throw DimensionError("run_jlu: eval data dimension mismatch");
  TrainState state = init_train_state(arch, config, primary_train, secondaries);

  for (state.epoch = 0; state.epoch < config.epochs; ++state.epoch) {
    // The spurious heads are refit to plateau before every joint step, so the
    // confusion term always faces the best current spurious classifier. Warm
    // starts make the refits after the first one cheap.
    const Index num_batches = state.primary_cycler.batches_per_pass();
    for (Index b = 0; b < num_batches; ++b) {
      if (!state.secondaries.empty()) train_secondary_inner(state);
      if (b == 0 && hooks.after_inner) hooks.after_inner(state.epoch, state);
      const auto& idx = state.primary_cycler.next_batch();
      TaskBatch primary{gather_rows(state.primary_data.x, idx),
                        gather_labels(state.primary_data.primary.labels, idx)};
      std::vector<TaskBatch> secondary;
      for (size_t m = 0; m < state.secondaries.size(); ++m) {
        const auto& sidx = state.secondary_cyclers[m].next_batch();
        secondary.push_back({gather_rows(state.secondaries[m].data.x, sidx),
                             gather_labels(state.secondaries[m].target().labels, sidx)});
      }
      joint_step(state, primary, secondary, config.alpha);
    }
    if (hooks.after_joint_pass) hooks.after_joint_pass(state.epoch, state);

    state.history.push_back(
        evaluate_epoch(state.bundle, eval_data, config, state.epoch, state.primary_weights));
  }
  return {std::move(state.bundle), std::move(state.history)};
}

// Deliberately a self-contained plain-SGD loop rather than a call into
// run_jlu: the M=0 reduction identity between the two is a tested contract.
TrainResult run_baseline(const ModelArch& arch, const TrainConfig& config,
                         const LabeledDataset& primary_train, const LabeledDataset& eval_data) {
  if (!arch.secondary.empty())
    throw ConfigError("run_baseline: architecture must not declare secondary heads");
  eval_data.validate();
  if (eval_data.input_dim() != arch.input_dim)
    throw DimensionError("run_baseline: eval data dimension mismatch");
  TrainState state = init_train_state(arch, config, primary_train, {});
  auto repr_params = params_of(state.bundle, ParamSelector::kRepr);
  auto primary_params = params_of(state.bundle, ParamSelector::kPrimary);

  for (state.epoch = 0; state.epoch < config.epochs; ++state.epoch) {
    const Index num_batches = state.primary_cycler.batches_per_pass();
    for (Index b = 0; b < num_batches; ++b) {
      const auto& idx = state.primary_cycler.next_batch();
      Tape<Real> tape;
      auto logits = forward_head(
          tape, state.bundle.primary,
          forward_features(tape, state.bundle, gather_rows(state.primary_data.x, idx)));
      auto loss = softmax_loss(tape, logits,
                               gather_labels(state.primary_data.primary.labels, idx),
                               state.primary_weights);
      zero_grads(repr_params);
      zero_grads(primary_params);
      backward(tape, loss);
      if (!repr_params.empty()) sgd_step(repr_params, config.base_lr);
      sgd_step(primary_params, config.base_lr * config.head_lr_boost);
    }
    state.history.push_back(
        evaluate_epoch(state.bundle, eval_data, config, state.epoch, state.primary_weights));
  }
  return {std::move(state.bundle), std::move(state.history)};
}

}  // namespace unbias
