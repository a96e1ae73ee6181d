#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "unbias/trainer.hpp"

using namespace unbias;

namespace {

// Small correlated two-task dataset in the default geometry.
SyntheticSpec small_spec(Real rho = 0.8) {
  SyntheticSpec spec;
  spec.input_dim = 8;
  const Matrix dirs = seeded_unit_directions(2, 8, 7);
  spec.primary = {"primary", 2, antipodal_centroids(dirs.row(0).transpose()), 1.0};
  spec.spurious = {{"spur", 2, antipodal_centroids(dirs.row(1).transpose()), 1.0}};
  spec.noise_sigma = 0.5;
  spec.train_joint = biased_joint(rho, 2, 2);
  return spec;
}

ModelArch small_arch(bool with_secondary) {
  std::vector<HeadSpec> heads;
  if (with_secondary) heads.push_back({"spur", 2});
  return make_mlp_arch(8, {16}, 8, {"primary", 2}, heads);
}

TrainConfig small_config(int epochs = 3) {
  TrainConfig cfg;
  cfg.alpha = 0.15;
  cfg.base_lr = 0.02;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.inner = {40, 1e-4, 5};
  cfg.seed = 1;
  return cfg;
}

struct Fixture {
  SyntheticSpec spec = small_spec();
  LabeledDataset train;
  LabeledDataset test;
  Fixture() {
    train = sample_dataset(spec, 600, Split::kTrain, 1);
    test = balanced_test(spec, 400, 2);
  }
};

}  // namespace

TEST_CASE("TrainConfig validation") {
  TrainConfig cfg = small_config();
  cfg.validate(0);
  cfg.inner.max_steps = 0;
  CHECK_THROWS_AS(cfg.validate(0), ConfigError);  // max_steps=0 forbidden
  cfg = small_config();
  cfg.base_lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(0), ConfigError);
  cfg = small_config();
  cfg.betas = {1.0, 1.0};
  CHECK_THROWS_AS(cfg.validate(1), ConfigError);
  cfg.validate(0);  // betas ignored without secondary tasks
  cfg = small_config();
  cfg.epochs = 0;
  cfg.validate(0);  // zero epochs is the degenerate no-op
}

TEST_CASE("BatchCycler covers each index once per pass deterministically") {
  BatchCycler a(10, 3, 42);
  BatchCycler b(10, 3, 42);
  CHECK(a.batches_per_pass() == 4);
  std::vector<int> seen;
  for (int i = 0; i < 4; ++i) {
    const auto& batch = a.next_batch();
    CHECK(batch == b.next_batch());
    seen.insert(seen.end(), batch.begin(), batch.end());
  }
  std::sort(seen.begin(), seen.end());
  for (int i = 0; i < 10; ++i) CHECK(seen[i] == i);
}

TEST_CASE("robust_class_weights tolerates absent classes") {
  IntVector labels(4);
  labels << 0, 0, 2, 2;  // class 1 absent (extreme-bias buffer)
  const Vector w = robust_class_weights(labels, 3);
  CHECK(w[0] == doctest::Approx(1.0));
  CHECK(w[1] == 1.0);
  CHECK(w[2] == doctest::Approx(1.0));

  IntVector skew(4);
  skew << 0, 0, 0, 1;
  const Vector w2 = robust_class_weights(skew, 2);
  CHECK(w2[0] == doctest::Approx(0.5));
  CHECK(w2[1] == doctest::Approx(1.5));
}

TEST_CASE("train_secondary_inner updates only the secondary heads") {
  Fixture f;
  TrainState state = init_train_state(small_arch(true), small_config(), f.train,
                                      secondary_tasks_from(f.train));
  const uint64_t repr_before = params_checksum(params_of(state.bundle, ParamSelector::kRepr));
  const uint64_t primary_before =
      params_checksum(params_of(state.bundle, ParamSelector::kPrimary));
  const uint64_t sec_before =
      params_checksum(params_of(state.bundle, ParamSelector::kAllSecondary));

  const InnerReport report = train_secondary_inner(state);
  CHECK(report.steps >= 1);
  CHECK(report.steps <= state.config.inner.max_steps);
  CHECK(std::isfinite(report.final_loss));

  CHECK(params_checksum(params_of(state.bundle, ParamSelector::kRepr)) == repr_before);
  CHECK(params_checksum(params_of(state.bundle, ParamSelector::kPrimary)) == primary_before);
  CHECK(params_checksum(params_of(state.bundle, ParamSelector::kAllSecondary)) != sec_before);
}

TEST_CASE("train_secondary_inner without secondary tasks is a configuration error") {
  Fixture f;
  TrainState state = init_train_state(small_arch(false), small_config(), f.train, {});
  CHECK_THROWS_AS(train_secondary_inner(state), ConfigError);
}

TEST_CASE("inner-loop update matches a taped softmax-loss SGD step") {
  Fixture f;
  TrainConfig cfg = small_config();
  cfg.inner.max_steps = 1;
  TrainState fast = init_train_state(small_arch(true), cfg, f.train,
                                     secondary_tasks_from(f.train));
  TrainState ref = init_train_state(small_arch(true), cfg, f.train,
                                    secondary_tasks_from(f.train));
  const InnerReport report = train_secondary_inner(fast);

  // reference step through the autodiff path
  auto& head = ref.bundle.secondary[0];
  const auto& idx = ref.secondary_cyclers[0].next_batch();
  Matrix xb(static_cast<Index>(idx.size()), ref.primary_data.x.cols());
  IntVector yb(static_cast<Index>(idx.size()));
  for (size_t i = 0; i < idx.size(); ++i) {
    xb.row(static_cast<Index>(i)) = ref.secondaries[0].data.x.row(idx[i]);
    yb[static_cast<Index>(i)] = ref.secondaries[0].target().labels[idx[i]];
  }
  Tape<Real> tape;
  auto features = make_leaf<Real>(embed(ref.bundle, xb), false);
  auto loss = secondary_classification_loss(
      tape, {forward_head(tape, head, features)}, {yb}, {1.0}, ref.secondary_weights);
  std::vector<ParamPtr> params{head.weight, head.bias};
  zero_grads(params);
  backward(tape, loss);
  sgd_step(params, cfg.base_lr * cfg.head_lr_boost);

  CHECK(report.final_loss == doctest::Approx(loss->values(0, 0)).epsilon(1e-12));
  CHECK(fast.bundle.secondary[0].weight->values.isApprox(head.weight->values, 1e-12));
  CHECK(fast.bundle.secondary[0].bias->values.isApprox(head.bias->values, 1e-12));
}

TEST_CASE("inner loop fits linearly separable secondary labels") {
  // Identity extractor, spurious labels equal to the sign of one coordinate:
  // the embedding carries the label exactly.
  SyntheticSpec spec = small_spec(0.0);
  spec.noise_sigma = 0.2;
  LabeledDataset train = sample_dataset(spec, 600, Split::kTrain, 3);
  for (Index i = 0; i < train.size(); ++i)
    train.spurious[0].labels[i] = train.x(i, 2) > 0.0 ? 1 : 0;

  ModelArch arch = make_mlp_arch(8, {}, 8, {"primary", 2}, {{"spur", 2}});
  TrainConfig cfg = small_config();
  cfg.inner.max_steps = 400;
  cfg.inner.plateau_tol = 0.0;
  TrainState state = init_train_state(arch, cfg, train, secondary_tasks_from(train));
  state.bundle.extractor.layers[0].weight->values = Matrix::Identity(8, 8);
  train_secondary_inner(state);

  // held-out probe oracle on the head's own inputs
  LabeledDataset held = balanced_test(spec, 400, 4);
  for (Index i = 0; i < held.size(); ++i)
    held.spurious[0].labels[i] = held.x(i, 2) > 0.0 ? 1 : 0;
  const Matrix emb = embed(state.bundle, held.x);
  Matrix scores = (emb * state.bundle.secondary[0].weight->values).rowwise() +
                  state.bundle.secondary[0].bias->values.row(0);
  const Real acc = mean_class_accuracy(argmax_rows(scores), held.spurious[0].labels, 2);
  CHECK(acc > 0.95);
}

TEST_CASE("joint_step leaves secondary heads untouched and boosts the head lr") {
  Fixture f;
  TrainState state = init_train_state(small_arch(true), small_config(), f.train,
                                      secondary_tasks_from(f.train));
  const uint64_t sec_before =
      params_checksum(params_of(state.bundle, ParamSelector::kAllSecondary));
  const uint64_t repr_before = params_checksum(params_of(state.bundle, ParamSelector::kRepr));

  TaskBatch primary{f.train.x.topRows(32), f.train.primary.labels.head(32)};
  std::vector<TaskBatch> secondary{{f.train.x.topRows(32), f.train.spurious[0].labels.head(32)}};
  const StepReport report = joint_step(state, primary, secondary, 0.15);
  CHECK(report.loss_joint ==
        doctest::Approx(report.loss_primary + 0.15 * report.loss_confusion));
  CHECK(params_checksum(params_of(state.bundle, ParamSelector::kAllSecondary)) == sec_before);
  CHECK(params_checksum(params_of(state.bundle, ParamSelector::kRepr)) != repr_before);
}

TEST_CASE("joint_step with alpha=0 equals a pure primary step") {
  Fixture f;
  TrainState with_conf = init_train_state(small_arch(true), small_config(), f.train,
                                          secondary_tasks_from(f.train));
  TrainState pure = init_train_state(small_arch(true), small_config(), f.train,
                                     secondary_tasks_from(f.train));
  TaskBatch primary{f.train.x.topRows(32), f.train.primary.labels.head(32)};
  std::vector<TaskBatch> secondary{{f.train.x.topRows(32), f.train.spurious[0].labels.head(32)}};

  joint_step(with_conf, primary, secondary, 0.0);
  joint_step(pure, primary, {}, 0.0);

  const auto a = all_params(with_conf.bundle);
  const auto b = all_params(pure.bundle);
  for (size_t i = 0; i < a.size(); ++i)
    CHECK((a[i]->values - b[i]->values).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("a joint step at small lr decreases the joint loss on its own batch") {
  Fixture f;
  TrainConfig cfg = small_config();
  cfg.base_lr = 1e-4;
  TrainState state =
      init_train_state(small_arch(true), cfg, f.train, secondary_tasks_from(f.train));
  train_secondary_inner(state);

  TaskBatch primary{f.train.x.topRows(64), f.train.primary.labels.head(64)};
  std::vector<TaskBatch> secondary{{f.train.x.topRows(64), f.train.spurious[0].labels.head(64)}};
  const StepReport before = joint_step(state, primary, secondary, cfg.alpha);

  // recompute the same losses after the update, without stepping
  Tape<Real> tape;
  auto features = forward_features(tape, state.bundle, primary.x);
  auto lp = softmax_loss(tape, forward_head(tape, state.bundle.primary, features),
                         primary.labels, state.primary_weights);
  auto sec_features = forward_features(tape, state.bundle, secondary[0].x);
  auto lc = secondary_confusion_loss(
      tape, {forward_head(tape, state.bundle.secondary[0], sec_features)},
      cfg.confusion_variant);
  const Real after = lp->values(0, 0) + cfg.alpha * lc->values(0, 0);
  CHECK(after < before.loss_joint);
}

TEST_CASE("gradient gating holds across a full run") {
  Fixture f;
  TrainConfig cfg = small_config(2);
  TrainHooks hooks;
  std::vector<uint64_t> sec_at_inner;
  uint64_t repr_at_inner = 0;
  hooks.after_inner = [&](int, const TrainState& s) {
    sec_at_inner.push_back(params_checksum(params_of(s.bundle, ParamSelector::kAllSecondary)));
    repr_at_inner = params_checksum(params_of(s.bundle, ParamSelector::kRepr));
  };
  run_jlu(small_arch(true), cfg, f.train, secondary_tasks_from(f.train), f.test, hooks);
  CHECK(sec_at_inner.size() == 2);
}

TEST_CASE("run_jlu with M=0 reproduces run_baseline exactly") {
  Fixture f;
  const TrainConfig cfg = small_config(3);
  TrainResult jlu = run_jlu(small_arch(false), cfg, f.train, {}, f.test);
  TrainResult base = run_baseline(small_arch(false), cfg, f.train, f.test);

  CHECK(params_checksum(all_params(jlu.bundle)) == params_checksum(all_params(base.bundle)));
  REQUIRE(jlu.history.size() == base.history.size());
  for (size_t e = 0; e < jlu.history.size(); ++e) {
    const auto& a = jlu.history[e];
    const auto& b = base.history[e];
    CHECK(a.primary_accuracy == b.primary_accuracy);
    CHECK(a.loss_primary == b.loss_primary);
    CHECK(a.loss_confusion == b.loss_confusion);
    REQUIRE(a.probes.size() == b.probes.size());
    for (size_t m = 0; m < a.probes.size(); ++m)
      CHECK(a.probes[m].probe_accuracy == b.probes[m].probe_accuracy);
    for (size_t m = 0; m < a.kls.size(); ++m) CHECK(a.kls[m].kl == b.kls[m].kl);
  }
}

TEST_CASE("run_jlu with alpha=0 and betas=0 matches the baseline primary trajectory") {
  Fixture f;
  TrainConfig cfg = small_config(2);
  cfg.alpha = 0.0;
  cfg.betas = {0.0};
  cfg.inner.max_steps = 5;
  TrainResult jlu =
      run_jlu(small_arch(true), cfg, f.train, secondary_tasks_from(f.train), f.test);
  TrainResult base = run_baseline(small_arch(false), cfg, f.train, f.test);

  // secondary head init draws differ, so compare the shared blocks
  CHECK(params_checksum(params_of(jlu.bundle, ParamSelector::kRepr)) ==
        params_checksum(params_of(base.bundle, ParamSelector::kRepr)));
  for (size_t e = 0; e < jlu.history.size(); ++e) {
    CHECK(jlu.history[e].primary_accuracy == base.history[e].primary_accuracy);
    CHECK(jlu.history[e].loss_primary == base.history[e].loss_primary);
  }
}

TEST_CASE("run_jlu is deterministic per seed and finite") {
  Fixture f;
  const TrainConfig cfg = small_config(2);
  TrainResult a = run_jlu(small_arch(true), cfg, f.train, secondary_tasks_from(f.train), f.test);
  TrainResult b = run_jlu(small_arch(true), cfg, f.train, secondary_tasks_from(f.train), f.test);
  CHECK(params_checksum(all_params(a.bundle)) == params_checksum(all_params(b.bundle)));
  for (size_t e = 0; e < a.history.size(); ++e) {
    CHECK(a.history[e].all_finite());
    CHECK(a.history[e].probes[0].probe_accuracy == b.history[e].probes[0].probe_accuracy);
    CHECK(a.history[e].kls[0].kl == b.history[e].kls[0].kl);
  }
}

TEST_CASE("opposition dynamics: joint steps push the fitted heads toward uniform") {
  SyntheticSpec spec = small_spec(0.8);
  LabeledDataset train = sample_dataset(spec, 800, Split::kTrain, 1);
  LabeledDataset test = balanced_test(spec, 400, 2);
  TrainConfig cfg = small_config(12);
  cfg.inner = {200, 0.0, 200};

  const Matrix probe_x = test.x.topRows(128);
  // Confusion of a fixed snapshot head on the fixed probe batch, so the
  // comparison isolates how the representation moved.
  Matrix head_w, head_b;
  auto snapshot_conf = [&](const TrainState& s) {
    const Matrix emb = embed(s.bundle, probe_x);
    Matrix z = (emb * head_w).rowwise() + head_b.row(0);
    const Vector lse = row_log_sum_exp(z);
    return (lse - z.rowwise().mean()).mean();
  };

  int wins = 0, total = 0;
  Real after_inner_value = 0;
  TrainHooks hooks;
  hooks.after_inner = [&](int, const TrainState& s) {
    head_w = s.bundle.secondary[0].weight->values;
    head_b = s.bundle.secondary[0].bias->values;
    after_inner_value = snapshot_conf(s);
  };
  hooks.after_joint_pass = [&](int, const TrainState& s) {
    wins += after_inner_value >= snapshot_conf(s);
    ++total;
  };
  run_jlu(small_arch(true), cfg, train, secondary_tasks_from(train), test, hooks);
  CHECK(total == 12);
  CHECK(wins >= static_cast<int>(0.8 * total));
}

TEST_CASE("run_baseline basics") {
  Fixture f;
  TrainConfig cfg = small_config(0);
  const TrainResult zero = run_baseline(small_arch(false), cfg, f.train, f.test);
  CHECK(zero.history.empty());
  CHECK(params_checksum(all_params(zero.bundle)) ==
        params_checksum(all_params(init_bundle(small_arch(false), cfg.seed))));

  // separable two-class task reaches high accuracy after 20 epochs
  SyntheticSpec easy = small_spec(0.0);
  easy.noise_sigma = 0.2;
  LabeledDataset train = sample_dataset(easy, 600, Split::kTrain, 5);
  LabeledDataset test = balanced_test(easy, 400, 6);
  TrainConfig cfg20 = small_config(20);
  const TrainResult fit = run_baseline(small_arch(false), cfg20, train, test);
  CHECK(fit.history.back().primary_accuracy > 0.95);

  CHECK_THROWS_AS(run_baseline(small_arch(true), cfg20, train, test), ConfigError);
}

TEST_CASE("run_jlu validates dataset/architecture compatibility") {
  Fixture f;
  const TrainConfig cfg = small_config(1);
  LabeledDataset bad = f.train;
  bad.x = Matrix::Zero(bad.x.rows(), 5);
  CHECK_THROWS_AS(run_jlu(small_arch(true), cfg, bad, secondary_tasks_from(bad), f.test),
                  DimensionError);

  LabeledDataset wrong_k = f.train;
  wrong_k.primary.num_classes = 3;
  wrong_k.primary.labels.setZero();
  CHECK_THROWS_AS(
      run_jlu(small_arch(true), cfg, wrong_k, secondary_tasks_from(f.train), f.test),
      ConfigError);

  // empty secondary dataset
  SecondaryTask empty_task{LabeledDataset{}, 0};
  CHECK_THROWS_AS(run_jlu(small_arch(true), cfg, f.train, {empty_task}, f.test), Error);
}

TEST_CASE("probe_train recovers carried labels and rejects junk") {
  Rng rng(77);
  const Index n = 400;
  Matrix emb(n, 8);
  IntVector labels(n);
  for (Index i = 0; i < n; ++i) {
    for (Index d = 0; d < 8; ++d) emb(i, d) = rng.normal();
    labels[i] = emb(i, 3) > 0.0 ? 1 : 0;  // label carried by a coordinate's sign
  }
  CHECK(probe_train(emb, labels, 2, 1) > 0.95);

  IntVector random_labels(n);
  for (Index i = 0; i < n; ++i) random_labels[i] = static_cast<int>(rng.bounded(2));
  Matrix noise(n, 8);
  for (Index i = 0; i < n; ++i)
    for (Index d = 0; d < 8; ++d) noise(i, d) = rng.normal();
  CHECK(std::abs(probe_train(noise, random_labels, 2, 1) - 0.5) < 0.10);

  CHECK(probe_train(emb, labels, 2, 9) == probe_train(emb, labels, 2, 9));
  CHECK(probe_train(emb, labels, 2, 9) != probe_train(emb, labels, 2, 10));

  IntVector tiny = labels;
  tiny.head(n - 2).setZero();  // class 1 nearly absent
  CHECK_THROWS_AS(probe_train(emb, tiny, 2, 1), DataError);
}
