#pragma once

// Parameter containers and forward passes: a fully connected feature
// extractor shared by one primary classification head and any number of
// secondary heads, with per-layer freezing and a versioned binary
// checkpoint format.

#include "unbias/autodiff.hpp"

#include <string>
#include <vector>

namespace unbias {

enum class Activation { kNone, kRelu };

struct LayerSpec {
  int in_dim = 0;
  int out_dim = 0;
  Activation activation = Activation::kNone;
  bool frozen = false;
};

struct HeadSpec {
  std::string name;
  int num_classes = 0;
};

struct ModelArch {
  int input_dim = 0;
  std::vector<LayerSpec> layers;  // feature extractor; last layer's out_dim is the embedding
  HeadSpec primary;
  std::vector<HeadSpec> secondary;

  int embedding_dim() const { return layers.empty() ? input_dim : layers.back().out_dim; }
  void validate() const;
};

// input_dim -> hidden... -> embedding_dim with ReLU between layers and a
// linear final layer.
ModelArch make_mlp_arch(int input_dim, const std::vector<int>& hidden_dims, int embedding_dim,
                        HeadSpec primary, std::vector<HeadSpec> secondary = {});

// Marks the given extractor layers frozen (excluded from updates).
void apply_freezing(ModelArch& arch, const std::vector<int>& frozen_layers);

using ParamPtr = NodePtr<Real>;

struct DenseLayer {
  LayerSpec spec;
  ParamPtr weight;  // in_dim x out_dim
  ParamPtr bias;    // 1 x out_dim
};

struct FeatureExtractor {
  std::vector<DenseLayer> layers;
  int input_dim() const { return layers.empty() ? 0 : layers.front().spec.in_dim; }
  int embedding_dim() const { return layers.empty() ? 0 : layers.back().spec.out_dim; }
};

struct Head {
  std::string task_name;
  int num_classes = 0;
  ParamPtr weight;  // embedding_dim x num_classes
  ParamPtr bias;    // 1 x num_classes
};

struct NetworkBundle {
  ModelArch arch;
  FeatureExtractor extractor;
  Head primary;
  std::vector<Head> secondary;
};

// Weights drawn from U(-1/sqrt(in_dim), 1/sqrt(in_dim)), biases zero,
// deterministic per seed.
NetworkBundle init_bundle(const ModelArch& arch, uint64_t seed);

NodePtr<Real> forward_features(Tape<Real>& tape, const NetworkBundle& bundle,
                               const NodePtr<Real>& x);
NodePtr<Real> forward_features(Tape<Real>& tape, const NetworkBundle& bundle, const Matrix& x);
NodePtr<Real> forward_head(Tape<Real>& tape, const Head& head, const NodePtr<Real>& embedding);

// Embedding values for a fixed input, discarding the graph.
Matrix embed(const NetworkBundle& bundle, const Matrix& x);
// Primary-head logits for a fixed input, discarding the graph.
Matrix primary_logits(const NetworkBundle& bundle, const Matrix& x);

enum class ParamSelector { kRepr, kPrimary, kSecondary, kAllSecondary };

// Parameters of the selected block. kRepr excludes frozen layers;
// kSecondary requires the task index.
std::vector<ParamPtr> params_of(const NetworkBundle& bundle, ParamSelector selector,
                                int secondary_index = -1);

// Every parameter including frozen ones, in checkpoint order.
std::vector<ParamPtr> all_params(const NetworkBundle& bundle);

uint64_t params_checksum(const std::vector<ParamPtr>& params);

void save_bundle(const NetworkBundle& bundle, const std::string& path);
NetworkBundle load_bundle(const std::string& path);

}  // namespace unbias
