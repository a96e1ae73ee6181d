#pragma once

// Training loops. run_jlu alternates between fitting the secondary heads to
// the current representation (classification loss only) and updating the
// representation + primary head against the joint primary/confusion
// objective; run_baseline is plain SGD on the primary loss. probe_train fits
// a fresh linear classifier on frozen embeddings to measure what attribute
// information remains.

#include "unbias/datagen.hpp"
#include "unbias/eval.hpp"
#include "unbias/losses.hpp"
#include "unbias/model.hpp"

#include <functional>

namespace unbias {

struct InnerPolicy {
  int max_steps = 200;
  Real plateau_tol = 1e-4;
  int plateau_patience = 5;
};

struct TrainConfig {
  Real alpha = 0.1;
  std::vector<Real> betas;  // per secondary task; empty means all 1
  Real base_lr = 1e-4;
  Real head_lr_boost = 10.0;
  int epochs = 1;
  int batch_size = 64;
  InnerPolicy inner;
  ConfusionVariant confusion_variant = ConfusionVariant::kCrossEntropy;
  uint64_t seed = 1;
  std::vector<int> frozen_layers;
  bool reinit_secondary_heads = false;

  void validate(size_t num_secondary_tasks) const;
  Real beta(size_t m) const { return betas.empty() ? 1.0 : betas[m]; }
};

// A spurious-variation dataset: attr_index selects which label vector of
// `data` is the training target (-1 means the primary column).
struct SecondaryTask {
  LabeledDataset data;
  int attr_index = 0;

  const AttributeLabels& target() const {
    if (attr_index == -1) return data.primary;
    return data.spurious.at(attr_index);
  }
};

// One task per spurious attribute of `ds`, all sharing its features.
std::vector<SecondaryTask> secondary_tasks_from(const LabeledDataset& ds);

// Shuffled minibatch index stream; reshuffles at each wrap.
class BatchCycler {
 public:
  BatchCycler(Index n, Index batch_size, uint64_t seed);
  const std::vector<int>& next_batch();
  Index batches_per_pass() const { return (n_ + batch_size_ - 1) / batch_size_; }

 private:
  Index n_;
  Index batch_size_;
  Index pos_;
  Rng rng_;
  std::vector<int> order_;
  std::vector<int> batch_;
};

struct TaskBatch {
  Matrix x;
  IntVector labels;
};

struct TrainState {
  NetworkBundle bundle;
  TrainConfig config;
  LabeledDataset primary_data;
  std::vector<SecondaryTask> secondaries;
  BatchCycler primary_cycler;
  std::vector<BatchCycler> secondary_cyclers;
  Vector primary_weights;
  std::vector<Vector> secondary_weights;
  int epoch = 0;
  std::vector<MetricsRecord> history;
};

TrainState init_train_state(const ModelArch& arch, const TrainConfig& config,
                            LabeledDataset primary_train, std::vector<SecondaryTask> secondaries);

struct InnerReport {
  int steps = 0;
  Real final_loss = 0;
};

struct StepReport {
  Real loss_joint = 0;
  Real loss_primary = 0;
  Real loss_confusion = 0;
};

// Algorithm phase 1: fit the secondary heads to the current representation,
// stopping on plateau or after max_steps. Only secondary-head parameters
// change.
InnerReport train_secondary_inner(TrainState& state);

// Algorithm phase 2: one SGD step on L_p + alpha * L_conf. Updates the
// unfrozen representation (base lr) and the primary head (boosted lr);
// secondary heads are untouched. Pass no secondary batches to train on the
// primary loss alone.
StepReport joint_step(TrainState& state, const TaskBatch& primary_batch,
                      const std::vector<TaskBatch>& secondary_batches, Real alpha);

struct TrainHooks {
  std::function<void(int epoch, const TrainState&)> after_inner;
  std::function<void(int epoch, const TrainState&)> after_joint_pass;
};

struct TrainResult {
  NetworkBundle bundle;
  std::vector<MetricsRecord> history;
};

TrainResult run_jlu(const ModelArch& arch, const TrainConfig& config,
                    const LabeledDataset& primary_train,
                    const std::vector<SecondaryTask>& secondaries,
                    const LabeledDataset& eval_data, const TrainHooks& hooks = {});

TrainResult run_baseline(const ModelArch& arch, const TrainConfig& config,
                         const LabeledDataset& primary_train, const LabeledDataset& eval_data);

// Mean-class accuracy of a fresh linear classifier trained on a split of the
// embeddings and scored on a disjoint class-balanced split.
Real probe_train(const Matrix& embeddings, const IntVector& labels, int num_classes,
                 uint64_t seed);

// Mean confusion loss of the secondary heads on fixed inputs.
Real confusion_value(const NetworkBundle& bundle, const Matrix& x, ConfusionVariant variant);

// Epoch-end metrics on held-out data: accuracies, losses, per-spurious-task
// probes, per-group prediction-distribution KL divergences.
MetricsRecord evaluate_epoch(const NetworkBundle& bundle, const LabeledDataset& eval_data,
                             const TrainConfig& config, int epoch,
                             const Vector& primary_weights);

// Inverse-relative-frequency weights that tolerate absent classes (their
// weight is never used by the loss; it is pinned to 1).
Vector robust_class_weights(const IntVector& labels, int num_classes);

}  // namespace unbias
