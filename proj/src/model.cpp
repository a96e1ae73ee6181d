#include "unbias/model.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>

namespace unbias {

using nlohmann::json;

void ModelArch::validate() const {
  if (input_dim <= 0) throw ConfigError("ModelArch: input_dim must be positive");
  if (layers.empty()) throw ConfigError("ModelArch: need at least one extractor layer");
  int prev = input_dim;
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.in_dim <= 0 || l.out_dim <= 0)
      throw ConfigError("ModelArch: layer " + std::to_string(i) + " has non-positive dims");
    if (l.in_dim != prev)
      throw ConfigError("ModelArch: layer " + std::to_string(i) + " expects in_dim " +
                        std::to_string(prev) + ", got " + std::to_string(l.in_dim));
    prev = l.out_dim;
  }
  auto check_head = [&](const HeadSpec& h) {
    if (h.num_classes < 2)
      throw ConfigError("ModelArch: head '" + h.name + "' needs at least 2 classes");
    if (h.name.empty()) throw ConfigError("ModelArch: head with empty task name");
  };
  check_head(primary);
  for (const auto& h : secondary) check_head(h);
}

ModelArch make_mlp_arch(int input_dim, const std::vector<int>& hidden_dims, int embedding_dim,
                        HeadSpec primary, std::vector<HeadSpec> secondary) {
  ModelArch arch;
  arch.input_dim = input_dim;
  int prev = input_dim;
  for (int h : hidden_dims) {
    arch.layers.push_back({prev, h, Activation::kRelu, false});
    prev = h;
  }
  arch.layers.push_back({prev, embedding_dim, Activation::kNone, false});
  arch.primary = std::move(primary);
  arch.secondary = std::move(secondary);
  arch.validate();
  return arch;
}

void apply_freezing(ModelArch& arch, const std::vector<int>& frozen_layers) {
  for (int idx : frozen_layers) {
    if (idx < 0 || static_cast<size_t>(idx) >= arch.layers.size())
      throw ConfigError("apply_freezing: layer index " + std::to_string(idx) +
                        " outside [0, " + std::to_string(arch.layers.size()) + ")");
    arch.layers[idx].frozen = true;
  }
}

namespace {

Matrix uniform_init(Rng& rng, Index rows, Index cols, Real amplitude) {
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = rng.uniform(-amplitude, amplitude);
  return m;
}

ParamPtr make_param(Matrix values, bool frozen) {
  auto node = make_leaf<Real>(std::move(values), !frozen);
  node->frozen = frozen;
  return node;
}

}  // namespace

NetworkBundle init_bundle(const ModelArch& arch, uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, "init_bundle"));
  NetworkBundle bundle;
  bundle.arch = arch;
  for (const auto& spec : arch.layers) {
    const Real amp = 1.0 / std::sqrt(static_cast<Real>(spec.in_dim));
    DenseLayer layer;
    layer.spec = spec;
    layer.weight = make_param(uniform_init(rng, spec.in_dim, spec.out_dim, amp), spec.frozen);
    layer.bias = make_param(Matrix::Zero(1, spec.out_dim), spec.frozen);
    bundle.extractor.layers.push_back(std::move(layer));
  }
  const int emb = arch.embedding_dim();
  auto init_head = [&](const HeadSpec& spec) {
    const Real amp = 1.0 / std::sqrt(static_cast<Real>(emb));
    Head head;
    head.task_name = spec.name;
    head.num_classes = spec.num_classes;
    head.weight = make_param(uniform_init(rng, emb, spec.num_classes, amp), false);
    head.bias = make_param(Matrix::Zero(1, spec.num_classes), false);
    return head;
  };
  bundle.primary = init_head(arch.primary);
  for (const auto& spec : arch.secondary) bundle.secondary.push_back(init_head(spec));
  return bundle;
}

NodePtr<Real> forward_features(Tape<Real>& tape, const NetworkBundle& bundle,
                               const NodePtr<Real>& x) {
  if (x->cols() != bundle.extractor.input_dim())
    throw DimensionError("forward_features: input has " + std::to_string(x->cols()) +
                         " columns, extractor expects " +
                         std::to_string(bundle.extractor.input_dim()));
  NodePtr<Real> h = x;
  for (const auto& layer : bundle.extractor.layers) {
    h = add_bias(tape, matmul(tape, h, layer.weight), layer.bias);
    if (layer.spec.activation == Activation::kRelu) h = relu(tape, h);
  }
  return h;
}

NodePtr<Real> forward_features(Tape<Real>& tape, const NetworkBundle& bundle, const Matrix& x) {
  return forward_features(tape, bundle, make_leaf<Real>(x, false));
}

NodePtr<Real> forward_head(Tape<Real>& tape, const Head& head, const NodePtr<Real>& embedding) {
  if (embedding->cols() != head.weight->rows())
    throw DimensionError("forward_head: embedding dim " + std::to_string(embedding->cols()) +
                         " does not match head '" + head.task_name + "' (" +
                         std::to_string(head.weight->rows()) + ")");
  return add_bias(tape, matmul(tape, embedding, head.weight), head.bias);
}

Matrix embed(const NetworkBundle& bundle, const Matrix& x) {
  if (x.cols() != bundle.extractor.input_dim())
    throw DimensionError("embed: input has " + std::to_string(x.cols()) +
                         " columns, extractor expects " +
                         std::to_string(bundle.extractor.input_dim()));
  Matrix h = x;
  for (const auto& layer : bundle.extractor.layers) {
    h *= layer.weight->values;
    h.rowwise() += layer.bias->values.row(0);
    if (layer.spec.activation == Activation::kRelu) h = h.cwiseMax(0.0);
  }
  return h;
}

Matrix primary_logits(const NetworkBundle& bundle, const Matrix& x) {
  return (embed(bundle, x) * bundle.primary.weight->values).rowwise() +
         bundle.primary.bias->values.row(0);
}

std::vector<ParamPtr> params_of(const NetworkBundle& bundle, ParamSelector selector,
                                int secondary_index) {
  std::vector<ParamPtr> out;
  switch (selector) {
    case ParamSelector::kRepr:
      for (const auto& layer : bundle.extractor.layers) {
        if (layer.spec.frozen) continue;
        out.push_back(layer.weight);
        out.push_back(layer.bias);
      }
      return out;
    case ParamSelector::kPrimary:
      return {bundle.primary.weight, bundle.primary.bias};
    case ParamSelector::kSecondary: {
      if (secondary_index < 0 || static_cast<size_t>(secondary_index) >= bundle.secondary.size())
        throw ConfigError("params_of: secondary index " + std::to_string(secondary_index) +
                          " outside [0, " + std::to_string(bundle.secondary.size()) + ")");
      const auto& head = bundle.secondary[secondary_index];
      return {head.weight, head.bias};
    }
    case ParamSelector::kAllSecondary:
      for (const auto& head : bundle.secondary) {
        out.push_back(head.weight);
        out.push_back(head.bias);
      }
      return out;
  }
  throw ConfigError("params_of: unknown selector");
}

std::vector<ParamPtr> all_params(const NetworkBundle& bundle) {
  std::vector<ParamPtr> out;
  for (const auto& layer : bundle.extractor.layers) {
    out.push_back(layer.weight);
    out.push_back(layer.bias);
  }
  out.push_back(bundle.primary.weight);
  out.push_back(bundle.primary.bias);
  for (const auto& head : bundle.secondary) {
    out.push_back(head.weight);
    out.push_back(head.bias);
  }
  return out;
}

uint64_t params_checksum(const std::vector<ParamPtr>& params) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& p : params) h = byte_checksum(p->values, h);
  return h;
}

// ---------------------------------------------------------------------------
// Checkpoint format
//
//   magic   "UNBMDL"            (6 bytes)
//   version u32 little-endian   (currently 1)
//   hlen    u64 little-endian   JSON architecture header length
//   header  hlen bytes of JSON
//   tensors in checkpoint order, each: u32 rows, u32 cols, rows*cols f64
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[6] = {'U', 'N', 'B', 'M', 'D', 'L'};
constexpr uint32_t kVersion = 1;

json arch_to_json(const ModelArch& arch) {
  json layers = json::array();
  for (const auto& l : arch.layers)
    layers.push_back({{"in", l.in_dim},
                      {"out", l.out_dim},
                      {"activation", l.activation == Activation::kRelu ? "relu" : "none"},
                      {"frozen", l.frozen}});
  json heads = json::array();
  for (const auto& h : arch.secondary)
    heads.push_back({{"name", h.name}, {"classes", h.num_classes}});
  return {{"input_dim", arch.input_dim},
          {"layers", layers},
          {"primary", {{"name", arch.primary.name}, {"classes", arch.primary.num_classes}}},
          {"secondary", heads}};
}

ModelArch arch_from_json(const json& j) {
  ModelArch arch;
  arch.input_dim = j.at("input_dim").get<int>();
  for (const auto& l : j.at("layers")) {
    LayerSpec spec;
    spec.in_dim = l.at("in").get<int>();
    spec.out_dim = l.at("out").get<int>();
    spec.activation =
        l.at("activation").get<std::string>() == "relu" ? Activation::kRelu : Activation::kNone;
    spec.frozen = l.at("frozen").get<bool>();
    arch.layers.push_back(spec);
  }
  arch.primary = {j.at("primary").at("name").get<std::string>(),
                  j.at("primary").at("classes").get<int>()};
  for (const auto& h : j.at("secondary"))
    arch.secondary.push_back({h.at("name").get<std::string>(), h.at("classes").get<int>()});
  return arch;
}

template <typename T>
void write_pod(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

void write_tensor(std::ostream& os, const Matrix& m) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(m.rows()));
  write_pod<uint32_t>(os, static_cast<uint32_t>(m.cols()));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) write_pod<double>(os, m(i, j));
}

Matrix read_tensor(std::istream& is, Index rows, Index cols, const char* what) {
  const auto r = read_pod<uint32_t>(is, what);
  const auto c = read_pod<uint32_t>(is, what);
  if (r != rows || c != cols)
    throw FormatError(std::string("checkpoint tensor ") + what + " has shape " +
                      shape_str(r, c) + ", architecture expects " + shape_str(rows, cols));
  Matrix m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = read_pod<double>(is, what);
  return m;
}

}  // namespace

void save_bundle(const NetworkBundle& bundle, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("save_bundle: cannot open '" + path + "' for writing");
  os.write(kMagic, sizeof(kMagic));
  write_pod<uint32_t>(os, kVersion);
  const std::string header = arch_to_json(bundle.arch).dump();
  write_pod<uint64_t>(os, header.size());
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& p : all_params(bundle)) write_tensor(os, p->values);
  if (!os) throw IoError("save_bundle: write to '" + path + "' failed");
}

NetworkBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_bundle: cannot open '" + path + "'");
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("load_bundle: '" + path + "' is not a model checkpoint (bad magic)");
  const auto version = read_pod<uint32_t>(is, "version");
  if (version != kVersion)
    throw FormatError("load_bundle: unsupported checkpoint version " + std::to_string(version) +
                      " (expected " + std::to_string(kVersion) + ")");
  const auto hlen = read_pod<uint64_t>(is, "header length");
  std::string header(hlen, '\0');
  is.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw FormatError("checkpoint truncated while reading header");
  ModelArch arch;
  try {
    arch = arch_from_json(json::parse(header));
  } catch (const json::exception& e) {
    throw FormatError(std::string("load_bundle: malformed architecture header: ") + e.what());
  }
  arch.validate();

  NetworkBundle bundle = init_bundle(arch, 0);
  for (const auto& p : all_params(bundle)) {
    p->values = read_tensor(is, p->values.rows(), p->values.cols(), "parameters");
    p->grad.setZero();
  }
  // Must reach EOF exactly.
  char extra;
  is.read(&extra, 1);
  if (!is.eof()) throw FormatError("load_bundle: trailing bytes after parameters");
  return bundle;
}

}  // namespace unbias
