#include "unbias/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

namespace unbias {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key '" + where + "." + key + "'");
}

template <typename T>
void read_field(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad value for '" + where + "." + std::string(key) + "'");
  }
}

void deep_merge(json& base, const json& overlay) {
  if (!overlay.is_object() || !base.is_object()) {
    base = overlay;
    return;
  }
  for (const auto& [key, value] : overlay.items()) {
    if (base.contains(key) && base[key].is_object() && value.is_object())
      deep_merge(base[key], value);
    else
      base[key] = value;
  }
}

json task_to_json(const TaskConfig& t) {
  return {{"name", t.name},
          {"classes", t.classes},
          {"signal_scale", t.signal_scale},
          {"layout", t.layout}};
}

TaskConfig task_from_json(const json& j, const std::string& where) {
  check_keys(j, {"name", "classes", "signal_scale", "layout"}, where);
  TaskConfig t;
  read_field(j, "name", t.name, where);
  read_field(j, "classes", t.classes, where);
  read_field(j, "signal_scale", t.signal_scale, where);
  read_field(j, "layout", t.layout, where);
  if (t.name.empty()) throw ConfigError("config: '" + where + "' needs a task name");
  if (t.layout != "antipodal" && t.layout != "ordinal")
    throw ConfigError("config: '" + where + ".layout' must be antipodal or ordinal, got '" +
                      t.layout + "'");
  return t;
}

std::string bias_kind_name(BiasKind k) {
  switch (k) {
    case BiasKind::kIndependent: return "independent";
    case BiasKind::kCorrelated: return "correlated";
    case BiasKind::kExtreme: return "extreme";
  }
  return "independent";
}

std::string variant_name(ConfusionVariant v) {
  switch (v) {
    case ConfusionVariant::kCrossEntropy: return "ce";
    case ConfusionVariant::kKlPToUniform: return "kl";
    case ConfusionVariant::kKlUniformToP: return "kl-uniform-to-p";
  }
  return "ce";
}

ConfusionVariant variant_from_name(const std::string& s) {
  if (s == "ce") return ConfusionVariant::kCrossEntropy;
  if (s == "kl") return ConfusionVariant::kKlPToUniform;
  if (s == "kl-uniform-to-p") return ConfusionVariant::kKlUniformToP;
  throw ConfigError("config: 'train.confusion_variant' must be ce, kl, or kl-uniform-to-p, got '" +
                    s + "'");
}

std::string mode_name(RunMode m) {
  switch (m) {
    case RunMode::kBaseline: return "baseline";
    case RunMode::kJlu: return "jlu";
    case RunMode::kBoth: return "both";
  }
  return "both";
}

RunMode mode_from_name(const std::string& s) {
  if (s == "baseline") return RunMode::kBaseline;
  if (s == "jlu") return RunMode::kJlu;
  if (s == "both") return RunMode::kBoth;
  throw ConfigError("config: 'mode' must be baseline, jlu, or both, got '" + s + "'");
}

json config_to_json_impl(const RunConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.data.tasks) tasks.push_back(task_to_json(t));
  json bias{{"kind", bias_kind_name(c.data.bias)}};
  if (c.data.bias == BiasKind::kCorrelated) bias["rho"] = c.data.rho;
  if (c.data.bias == BiasKind::kExtreme)
    bias["variant"] = c.data.eb_variant == ExtremeBiasVariant::kEb1 ? "EB1" : "EB2";
  json data{{"input_dim", c.data.input_dim},
            {"noise_sigma", c.data.noise_sigma},
            {"train_size", c.data.train_size},
            {"test_size", c.data.test_size},
            {"directions_seed", c.data.directions_seed},
            {"tasks", tasks},
            {"bias", bias}};
  if (c.data.train_csv) data["train_csv"] = *c.data.train_csv;
  if (c.data.test_csv) data["test_csv"] = *c.data.test_csv;

  json train{{"alpha", c.train.alpha},
             {"betas", c.train.betas},
             {"base_lr", c.train.base_lr},
             {"head_lr_boost", c.train.head_lr_boost},
             {"epochs", c.train.epochs},
             {"batch_size", c.train.batch_size},
             {"inner",
              {{"max_steps", c.train.inner.max_steps},
               {"plateau_tol", c.train.inner.plateau_tol},
               {"plateau_patience", c.train.inner.plateau_patience}}},
             {"confusion_variant", variant_name(c.train.confusion_variant)},
             {"seed", c.train.seed},
             {"frozen_layers", c.train.frozen_layers},
             {"reinit_secondary_heads", c.train.reinit_secondary_heads}};

  return {{"version", c.version},
          {"experiment", c.experiment},
          {"mode", mode_name(c.mode)},
          {"output_dir", c.output_dir},
          {"data", data},
          {"model", {{"hidden", c.model.hidden}, {"embedding_dim", c.model.embedding_dim}}},
          {"train", train}};
}

RunConfig config_from_json_impl(const json& j) {
  check_keys(j, {"version", "experiment", "mode", "output_dir", "data", "model", "train"},
             "(root)");
  RunConfig c;
  read_field(j, "version", c.version, "(root)");
  if (c.version != 1)
    throw ConfigError("config: unsupported version " + std::to_string(c.version));
  read_field(j, "experiment", c.experiment, "(root)");
  if (j.contains("mode")) c.mode = mode_from_name(j.at("mode").get<std::string>());
  read_field(j, "output_dir", c.output_dir, "(root)");

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d,
               {"input_dim", "noise_sigma", "train_size", "test_size", "directions_seed",
                "tasks", "bias", "train_csv", "test_csv"},
               "data");
    read_field(d, "input_dim", c.data.input_dim, "data");
    read_field(d, "noise_sigma", c.data.noise_sigma, "data");
    read_field(d, "train_size", c.data.train_size, "data");
    read_field(d, "test_size", c.data.test_size, "data");
    read_field(d, "directions_seed", c.data.directions_seed, "data");
    if (d.contains("tasks")) {
      if (!d.at("tasks").is_array() || d.at("tasks").empty())
        throw ConfigError("config: 'data.tasks' must be a non-empty array");
      c.data.tasks.clear();
      int i = 0;
      for (const auto& t : d.at("tasks"))
        c.data.tasks.push_back(task_from_json(t, "data.tasks[" + std::to_string(i++) + "]"));
    }
    if (d.contains("bias")) {
      const json& b = d.at("bias");
      check_keys(b, {"kind", "rho", "variant"}, "data.bias");
      std::string kind = "independent";
      read_field(b, "kind", kind, "data.bias");
      if (kind == "independent") c.data.bias = BiasKind::kIndependent;
      else if (kind == "correlated") c.data.bias = BiasKind::kCorrelated;
      else if (kind == "extreme") c.data.bias = BiasKind::kExtreme;
      else throw ConfigError("config: 'data.bias.kind' must be independent, correlated, or "
                             "extreme, got '" + kind + "'");
      if (b.contains("rho")) {
        c.data.rho.clear();
        if (b.at("rho").is_array())
          for (const auto& r : b.at("rho")) c.data.rho.push_back(r.get<Real>());
        else
          c.data.rho.push_back(b.at("rho").get<Real>());
      }
      if (b.contains("variant")) {
        const std::string v = b.at("variant").get<std::string>();
        if (v == "EB1") c.data.eb_variant = ExtremeBiasVariant::kEb1;
        else if (v == "EB2") c.data.eb_variant = ExtremeBiasVariant::kEb2;
        else throw ConfigError("config: 'data.bias.variant' must be EB1 or EB2, got '" + v + "'");
      }
    }
    if (d.contains("train_csv")) c.data.train_csv = d.at("train_csv").get<std::string>();
    if (d.contains("test_csv")) c.data.test_csv = d.at("test_csv").get<std::string>();
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, {"hidden", "embedding_dim"}, "model");
    read_field(m, "hidden", c.model.hidden, "model");
    read_field(m, "embedding_dim", c.model.embedding_dim, "model");
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t,
               {"alpha", "betas", "base_lr", "head_lr_boost", "epochs", "batch_size", "inner",
                "confusion_variant", "seed", "frozen_layers", "reinit_secondary_heads"},
               "train");
    read_field(t, "alpha", c.train.alpha, "train");
    read_field(t, "betas", c.train.betas, "train");
    read_field(t, "base_lr", c.train.base_lr, "train");
    read_field(t, "head_lr_boost", c.train.head_lr_boost, "train");
    read_field(t, "epochs", c.train.epochs, "train");
    read_field(t, "batch_size", c.train.batch_size, "train");
    if (t.contains("inner")) {
      const json& in = t.at("inner");
      check_keys(in, {"max_steps", "plateau_tol", "plateau_patience"}, "train.inner");
      read_field(in, "max_steps", c.train.inner.max_steps, "train.inner");
      read_field(in, "plateau_tol", c.train.inner.plateau_tol, "train.inner");
      read_field(in, "plateau_patience", c.train.inner.plateau_patience, "train.inner");
    }
    if (t.contains("confusion_variant"))
      c.train.confusion_variant = variant_from_name(t.at("confusion_variant").get<std::string>());
    read_field(t, "seed", c.train.seed, "train");
    read_field(t, "frozen_layers", c.train.frozen_layers, "train");
    read_field(t, "reinit_secondary_heads", c.train.reinit_secondary_heads, "train");
  }
  return c;
}

}  // namespace

void RunConfig::validate() const {
  if (data.tasks.empty()) throw ConfigError("config: 'data.tasks' must name at least one task");
  const size_t num_spurious = data.tasks.size() - 1;
  train.validate(num_spurious);
  if (model.embedding_dim < 2) throw ConfigError("config: 'model.embedding_dim' must be >= 2");
  for (int h : model.hidden)
    if (h < 1) throw ConfigError("config: 'model.hidden' entries must be positive");
  if (data.input_dim < 1) throw ConfigError("config: 'data.input_dim' must be positive");
  if (!(data.noise_sigma >= 0.0)) throw ConfigError("config: 'data.noise_sigma' must be >= 0");
  if (data.train_size < 1 || data.test_size < 1)
    throw ConfigError("config: dataset sizes must be positive");
  std::set<std::string> names;
  for (const auto& t : data.tasks) {
    if (t.classes < 2)
      throw ConfigError("config: task '" + t.name + "' needs at least 2 classes");
    if (!(t.signal_scale >= 0.0))
      throw ConfigError("config: task '" + t.name + "' signal_scale must be >= 0");
    if (t.layout == "antipodal" && t.classes != 2)
      throw ConfigError("config: task '" + t.name + "' uses antipodal layout with " +
                        std::to_string(t.classes) + " classes; use ordinal");
    if (!names.insert(t.name).second)
      throw ConfigError("config: duplicate task name '" + t.name + "'");
  }
  if (data.bias == BiasKind::kCorrelated) {
    if (num_spurious == 0)
      throw ConfigError("config: correlated bias needs at least one spurious task");
    if (data.rho.size() != num_spurious)
      throw ConfigError("config: 'data.bias.rho' needs one entry per spurious task (" +
                        std::to_string(num_spurious) + "), got " +
                        std::to_string(data.rho.size()));
    for (Real r : data.rho)
      if (!(r >= 0.0 && r <= 1.0))
        throw ConfigError("config: 'data.bias.rho' entries must be in [0, 1]");
  }
  if (data.bias == BiasKind::kExtreme) {
    if (num_spurious != 1)
      throw ConfigError("config: extreme bias needs exactly one spurious task");
    if (data.tasks[0].classes < 3)
      throw ConfigError("config: extreme bias needs a primary task with >= 3 classes");
    if (data.tasks[1].classes != 2)
      throw ConfigError("config: extreme bias needs a binary spurious task");
  }
  if (static_cast<bool>(data.train_csv) != static_cast<bool>(data.test_csv))
    throw ConfigError("config: 'data.train_csv' and 'data.test_csv' must be given together");
  if (mode != RunMode::kBaseline && num_spurious == 0 && data.bias != BiasKind::kIndependent)
    throw ConfigError("config: jlu mode needs at least one spurious task");
}

RunConfig experiment_preset(const std::string& name) {
  RunConfig c;
  c.experiment = name;
  if (name == "bias-removal") {
    c.data.tasks = {{"primary", 2, 1.0, "antipodal"}, {"spur", 2, 1.0, "antipodal"}};
    c.data.bias = BiasKind::kCorrelated;
    c.data.rho = {0.8};
    c.train.betas = {1.0};
    c.train.base_lr = 0.02;
    c.train.epochs = 40;
  } else if (name == "extreme-bias") {
    c.data.tasks = {{"primary", 3, 1.0, "ordinal"}, {"spur", 2, 2.0, "antipodal"}};
    c.data.bias = BiasKind::kExtreme;
    c.data.eb_variant = ExtremeBiasVariant::kEb1;
    c.data.test_size = 1200;
    c.train.betas = {1.0};
    c.train.base_lr = 0.02;
    c.train.epochs = 40;
  } else if (name == "multi-attribute") {
    c.data.tasks = {{"primary", 2, 1.0, "antipodal"},
                    {"spurA", 2, 1.0, "antipodal"},
                    {"spurB", 3, 1.0, "ordinal"}};
    c.data.bias = BiasKind::kCorrelated;
    c.data.rho = {0.8, 0.6};
    c.data.test_size = 1200;
    c.train.betas = {1.0, 1.0};
    c.train.base_lr = 0.02;
    c.train.epochs = 40;
  } else if (name == "custom") {
    c.data.tasks = {{"primary", 2, 1.0, "antipodal"}};
    c.data.bias = BiasKind::kIndependent;
    c.train.epochs = 20;
    c.train.base_lr = 0.02;
  } else {
    throw ConfigError("config: unknown experiment '" + name +
                      "' (expected bias-removal, extreme-bias, multi-attribute, or custom)");
  }
  return c;
}

RunConfig parse_run_config(const std::string& json_text) {
  json user;
  try {
    user = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!user.is_object()) throw ConfigError("config: document must be a JSON object");
  std::string experiment = "custom";
  if (user.contains("experiment")) {
    if (!user.at("experiment").is_string())
      throw ConfigError("config: 'experiment' must be a string");
    experiment = user.at("experiment").get<std::string>();
  }
  json merged = config_to_json_impl(experiment_preset(experiment));
  deep_merge(merged, user);
  RunConfig c = config_from_json_impl(merged);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

std::string run_config_to_json(const RunConfig& config) {
  return config_to_json_impl(config).dump(2) + "\n";
}

std::string config_hash8(const RunConfig& config) {
  const uint64_t h = fnv1a64(config_to_json_impl(config).dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 8);
}

SyntheticSpec build_synthetic_spec(const DataConfig& data) {
  if (data.tasks.empty()) throw ConfigError("build_synthetic_spec: no tasks");
  SyntheticSpec spec;
  spec.input_dim = data.input_dim;
  spec.noise_sigma = data.noise_sigma;
  const int num_tasks = static_cast<int>(data.tasks.size());
  const Matrix dirs = seeded_unit_directions(num_tasks, data.input_dim, data.directions_seed);
  auto build_task = [&](const TaskConfig& t, int index) {
    TaskSpec task;
    task.name = t.name;
    task.num_classes = t.classes;
    task.signal_scale = t.signal_scale;
    const Vector dir = dirs.row(index).transpose();
    task.centroids =
        t.layout == "antipodal" ? antipodal_centroids(dir) : ordinal_centroids(dir, t.classes);
    return task;
  };
  spec.primary = build_task(data.tasks[0], 0);
  for (int m = 1; m < num_tasks; ++m) spec.spurious.push_back(build_task(data.tasks[m], m));

  const auto counts = spec.class_counts();
  switch (data.bias) {
    case BiasKind::kIndependent:
      spec.train_joint = independent_uniform_joint(counts);
      break;
    case BiasKind::kCorrelated:
      spec.train_joint = chained_biased_joint(counts, data.rho);
      break;
    case BiasKind::kExtreme:
      spec.train_joint = extreme_bias_joint(data.eb_variant, counts[0], counts[1]);
      break;
  }
  spec.test_joint = independent_uniform_joint(counts);
  spec.validate();
  return spec;
}

}  // namespace unbias
