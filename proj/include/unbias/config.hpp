#pragma once

// Run configuration: a single versioned JSON document with fail-closed
// parsing (unknown keys are errors). An experiment preset supplies defaults;
// keys in the user document override them.

#include "unbias/datagen.hpp"
#include "unbias/trainer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace unbias {

struct TaskConfig {
  std::string name;
  int classes = 2;
  Real signal_scale = 1.0;
  std::string layout = "antipodal";  // antipodal | ordinal
};

enum class BiasKind { kIndependent, kCorrelated, kExtreme };

struct DataConfig {
  int input_dim = 16;
  Real noise_sigma = 0.5;
  Index train_size = 4000;
  Index test_size = 2000;
  uint64_t directions_seed = 7;  // centroid geometry; fixed across run seeds
  std::vector<TaskConfig> tasks;  // first entry is the primary task
  BiasKind bias = BiasKind::kIndependent;
  std::vector<Real> rho;  // per spurious task, for the correlated kind
  ExtremeBiasVariant eb_variant = ExtremeBiasVariant::kEb1;
  std::optional<std::string> train_csv;
  std::optional<std::string> test_csv;
};

struct ModelConfig {
  std::vector<int> hidden{64};
  int embedding_dim = 32;
};

enum class RunMode { kBaseline, kJlu, kBoth };

struct RunConfig {
  int version = 1;
  std::string experiment = "custom";
  RunMode mode = RunMode::kBoth;
  std::string output_dir = "runs";
  DataConfig data;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

// Preset defaults for the named experiment
// (bias-removal | extreme-bias | multi-attribute | custom).
RunConfig experiment_preset(const std::string& name);

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Canonical fully-resolved snapshot; reparsing it reproduces the config.
std::string run_config_to_json(const RunConfig& config);
// First 8 hex digits of the snapshot hash; used in run directory names.
std::string config_hash8(const RunConfig& config);

// Synthetic generator spec implied by the data section (synthetic mode only).
SyntheticSpec build_synthetic_spec(const DataConfig& data);

}  // namespace unbias
