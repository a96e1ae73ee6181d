#include "unbias/runner.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace unbias {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kEvalProbeSeed = 0xE7A1;

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << text;
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

std::string read_text_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::pair<std::string, int>> spurious_attr_list(const LabeledDataset& ds) {
  std::vector<std::pair<std::string, int>> out;
  for (const auto& s : ds.spurious) out.emplace_back(s.name, s.num_classes);
  return out;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRecord>& history,
                        const std::vector<std::pair<std::string, int>>& spurious_attrs) {
  std::ostringstream os;
  os << "epoch,primary_acc,primary_adj_acc,loss_primary,loss_confusion";
  for (const auto& [name, k] : spurious_attrs) os << ",probe_acc_" << name << ",rescaled_" << name;
  for (const auto& [name, k] : spurious_attrs)
    for (int a = 0; a < k; ++a)
      for (int b = a + 1; b < k; ++b) os << ",kl_" << name << a << '_' << name << b;
  os << '\n';
  for (const auto& rec : history) {
    os << rec.epoch << ',' << format_real(rec.primary_accuracy) << ','
       << format_real(rec.primary_adjacent_accuracy) << ',' << format_real(rec.loss_primary)
       << ',' << format_real(rec.loss_confusion);
    if (rec.probes.size() != spurious_attrs.size())
      throw Error("metrics_csv: record has " + std::to_string(rec.probes.size()) +
                  " probes, expected " + std::to_string(spurious_attrs.size()));
    for (const auto& p : rec.probes)
      os << ',' << format_real(p.probe_accuracy) << ',' << format_real(p.rescaled);
    for (const auto& k : rec.kls) os << ',' << format_real(k.kl);
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

GenDataResult cmd_gen_data(const RunConfig& config, const std::string& out_dir, bool force) {
  config.validate();
  if (config.data.train_csv)
    throw ConfigError("gen-data: config already points at CSV files; nothing to generate");
  const fs::path dir(out_dir);
  GenDataResult result{dir / "train.csv", dir / "test.csv", dir / "manifest.json"};
  if (!force) {
    for (const auto& p : {result.train_csv, result.test_csv, result.manifest})
      if (fs::exists(p))
        throw ConfigError("gen-data: '" + p.string() + "' already exists (use --force)");
  }
  fs::create_directories(dir);

  const SyntheticSpec spec = build_synthetic_spec(config.data);
  const uint64_t seed = config.train.seed;
  const LabeledDataset train = sample_dataset(spec, config.data.train_size, Split::kTrain, seed);
  const LabeledDataset test =
      balanced_test(spec, config.data.test_size, derive_seed(seed, "test_split"));
  export_dataset(train, result.train_csv.string());
  export_dataset(test, result.test_csv.string());

  json counts = json::array();
  for (int k : spec.class_counts()) counts.push_back(k);
  json tasks = json::array();
  tasks.push_back({{"name", spec.primary.name}, {"classes", spec.primary.num_classes}});
  for (const auto& s : spec.spurious)
    tasks.push_back({{"name", s.name}, {"classes", s.num_classes}});
  const json manifest{{"version", 1},
                      {"experiment", config.experiment},
                      {"config_hash", config_hash8(config)},
                      {"seed", seed},
                      {"train_size", config.data.train_size},
                      {"test_size", config.data.test_size},
                      {"tasks", tasks},
                      {"class_counts", counts},
                      {"files", {{"train", "train.csv"}, {"test", "test.csv"}}}};
  write_text_file(result.manifest, manifest.dump(2) + "\n");
  return result;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

namespace {

struct RunData {
  LabeledDataset train;
  LabeledDataset test;
  std::optional<SyntheticSpec> spec;  // present in synthetic mode
};

RunData prepare_run_data(const RunConfig& config) {
  RunData data;
  if (config.data.train_csv) {
    std::vector<int> counts;
    for (const auto& t : config.data.tasks) counts.push_back(t.classes);
    data.train = import_dataset(*config.data.train_csv, counts);
    data.test = import_dataset(*config.data.test_csv, counts);
    if (data.train.input_dim() != config.data.input_dim)
      throw ConfigError("train: CSV has " + std::to_string(data.train.input_dim()) +
                        " features, config expects " + std::to_string(config.data.input_dim));
  } else {
    const SyntheticSpec spec = build_synthetic_spec(config.data);
    const uint64_t seed = config.train.seed;
    data.train = sample_dataset(spec, config.data.train_size, Split::kTrain, seed);
    data.test = balanced_test(spec, config.data.test_size, derive_seed(seed, "test_split"));
    data.spec = spec;
  }
  if (data.train.input_dim() != data.test.input_dim())
    throw ConfigError("train: train/test dimension mismatch");
  return data;
}

json record_to_json(const MetricsRecord& rec) {
  json probes = json::object();
  for (const auto& p : rec.probes)
    probes[p.task] = {{"accuracy", p.probe_accuracy}, {"rescaled", p.rescaled}};
  json kls = json::object();
  for (const auto& k : rec.kls) kls[k.group_a + "_" + k.group_b] = k.kl;
  return {{"primary_acc", rec.primary_accuracy},
          {"primary_adj_acc", rec.primary_adjacent_accuracy},
          {"loss_primary", rec.loss_primary},
          {"loss_confusion", rec.loss_confusion},
          {"probes", probes},
          {"kl", kls}};
}

MetricsRecord record_from_json(const json& j) {
  MetricsRecord rec;
  rec.primary_accuracy = j.at("primary_acc").get<Real>();
  rec.primary_adjacent_accuracy = j.at("primary_adj_acc").get<Real>();
  rec.loss_primary = j.at("loss_primary").get<Real>();
  rec.loss_confusion = j.at("loss_confusion").get<Real>();
  for (const auto& [task, v] : j.at("probes").items())
    rec.probes.push_back(
        {task, v.at("accuracy").get<Real>(), v.at("rescaled").get<Real>()});
  for (const auto& [pair, v] : j.at("kl").items()) {
    const auto us = pair.rfind('_');
    rec.kls.push_back({pair.substr(0, us), pair.substr(us + 1), v.get<Real>()});
  }
  return rec;
}

void export_network_embeddings(const NetworkBundle& bundle, const LabeledDataset& ds,
                               const fs::path& path) {
  const Matrix embeddings = embed(bundle, ds.x);
  const Matrix projected = project_embeddings(embeddings);
  std::vector<std::pair<std::string, IntVector>> spurious;
  for (const auto& s : ds.spurious) spurious.emplace_back(s.name, s.labels);
  write_embeddings_csv(path.string(), embeddings, projected, ds.primary.labels, spurious);
}

void print_network_summary(std::ostream& out, const std::string& name,
                           const MetricsRecord& rec) {
  out << name << ": primary_acc=" << std::fixed << std::setprecision(4) << rec.primary_accuracy
      << " primary_adj_acc=" << rec.primary_adjacent_accuracy;
  for (const auto& p : rec.probes)
    out << " probe_" << p.task << "=" << p.probe_accuracy;
  out << std::defaultfloat << "\n";
}

}  // namespace

TrainOutcome cmd_train(const RunConfig& config, const std::optional<std::string>& output_dir,
                       bool force, std::ostream& out) {
  config.validate();
  const std::string hash = config_hash8(config);
  const fs::path root(output_dir ? *output_dir : config.output_dir);
  const fs::path run_dir =
      root / (config.experiment + "-" + std::to_string(config.train.seed) + "-" + hash);
  const fs::path sentinel = run_dir / ".incomplete";
  const std::string snapshot = run_config_to_json(config);

  if (fs::exists(run_dir)) {
    if (force) {
      fs::remove_all(run_dir);
    } else if (fs::exists(sentinel)) {
      throw ConfigError("train: '" + run_dir.string() +
                        "' holds an incomplete run (crashed or in progress); rerun with --force");
    } else if (fs::exists(run_dir / "config.json")) {
      if (read_text_file(run_dir / "config.json") != snapshot)
        throw ConfigError("train: '" + run_dir.string() +
                          "' was produced by a different config; refusing to resume");
      out << "run already complete: " << run_dir.string() << "\n";
      TrainOutcome outcome{run_dir, true, std::nullopt, std::nullopt};
      const fs::path summary_path = run_dir / "summary.json";
      const json summary = json::parse(read_text_file(summary_path));
      if (summary.at("networks").contains("baseline"))
        outcome.final_baseline = record_from_json(summary.at("networks").at("baseline"));
      if (summary.at("networks").contains("blind"))
        outcome.final_blind = record_from_json(summary.at("networks").at("blind"));
      return outcome;
    } else {
      throw ConfigError("train: '" + run_dir.string() + "' exists but is not a run directory");
    }
  }

  const RunData data = prepare_run_data(config);
  fs::create_directories(run_dir);
  write_text_file(sentinel, "run in progress\n");
  write_text_file(run_dir / "config.json", snapshot);

  const HeadSpec primary_head{data.train.primary.name, data.train.primary.num_classes};
  std::vector<HeadSpec> secondary_heads;
  for (const auto& s : data.train.spurious) secondary_heads.push_back({s.name, s.num_classes});

  const auto attrs = spurious_attr_list(data.test);
  TrainOutcome outcome{run_dir, false, std::nullopt, std::nullopt};

  if (config.mode == RunMode::kBaseline || config.mode == RunMode::kBoth) {
    const ModelArch arch = make_mlp_arch(data.train.input_dim(), config.model.hidden,
                                         config.model.embedding_dim, primary_head);
    TrainResult result = run_baseline(arch, config.train, data.train, data.test);
    write_text_file(run_dir / "metrics_baseline.csv", metrics_csv(result.history, attrs));
    save_bundle(result.bundle, (run_dir / "baseline.ckpt").string());
    export_network_embeddings(result.bundle, data.test, run_dir / "embeddings_baseline.csv");
    if (!result.history.empty()) outcome.final_baseline = result.history.back();
    print_network_summary(out, "baseline", result.history.empty() ? MetricsRecord{}
                                                                  : result.history.back());
  }
  if (config.mode == RunMode::kJlu || config.mode == RunMode::kBoth) {
    const ModelArch arch = make_mlp_arch(data.train.input_dim(), config.model.hidden,
                                         config.model.embedding_dim, primary_head,
                                         secondary_heads);
    TrainResult result = run_jlu(arch, config.train, data.train,
                                 secondary_tasks_from(data.train), data.test);
    write_text_file(run_dir / "metrics_blind.csv", metrics_csv(result.history, attrs));
    save_bundle(result.bundle, (run_dir / "blind.ckpt").string());
    export_network_embeddings(result.bundle, data.test, run_dir / "embeddings_blind.csv");
    if (!result.history.empty()) outcome.final_blind = result.history.back();
    print_network_summary(out, "blind", result.history.empty() ? MetricsRecord{}
                                                               : result.history.back());
  }

  // summary.json
  json tasks = json::object();
  tasks[data.test.primary.name] = {{"classes", data.test.primary.num_classes},
                                   {"chance", 1.0 / data.test.primary.num_classes}};
  for (const auto& s : data.test.spurious)
    tasks[s.name] = {{"classes", s.num_classes}, {"chance", 1.0 / s.num_classes}};
  json summary{{"version", 1},
               {"experiment", config.experiment},
               {"seed", config.train.seed},
               {"config_hash", hash},
               {"mode", config.mode == RunMode::kBaseline  ? "baseline"
                        : config.mode == RunMode::kJlu     ? "jlu"
                                                           : "both"},
               {"tasks", tasks},
               {"networks", json::object()}};
  if (data.spec) {
    json oracle = json::object();
    oracle[data.spec->primary.name] =
        bayes_oracle_accuracy(*data.spec, data.spec->primary.name, Split::kTest);
    for (const auto& s : data.spec->spurious)
      oracle[s.name] = bayes_oracle_accuracy(*data.spec, s.name, Split::kTest);
    summary["bayes_oracle_test"] = oracle;
  }
  if (outcome.final_baseline)
    summary["networks"]["baseline"] = record_to_json(*outcome.final_baseline);
  if (outcome.final_blind) summary["networks"]["blind"] = record_to_json(*outcome.final_blind);
  if (outcome.final_baseline && outcome.final_blind) {
    json pct = json::object();
    for (size_t m = 0; m < outcome.final_baseline->probes.size(); ++m) {
      const auto& base = outcome.final_baseline->probes[m];
      const auto& blind = outcome.final_blind->probes[m];
      const auto u = percent_unlearned(base.rescaled, blind.rescaled);
      pct[base.task] = u ? json(*u) : json(nullptr);
    }
    summary["percent_unlearned"] = pct;
  }
  write_text_file(run_dir / "summary.json", summary.dump(2) + "\n");
  fs::remove(sentinel);
  out << "run directory: " << run_dir.string() << "\n";
  return outcome;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

namespace {

std::vector<bool> attr_mask(const AttributeLabels& attr, int group) {
  std::vector<bool> mask(attr.labels.size());
  for (Index i = 0; i < attr.labels.size(); ++i) mask[i] = attr.labels[i] == group;
  return mask;
}

}  // namespace

EvalReport cmd_eval(const std::string& checkpoint, const std::string& dataset_csv,
                    const std::optional<std::string>& baseline_checkpoint,
                    const std::vector<std::string>& probe_tasks,
                    const std::optional<std::string>& out_json, std::ostream& out) {
  const NetworkBundle bundle = load_bundle(checkpoint);
  LabeledDataset ds = import_dataset(dataset_csv);
  if (ds.input_dim() != bundle.arch.input_dim)
    throw DimensionError("eval: dataset has " + std::to_string(ds.input_dim()) +
                         " features, checkpoint expects " +
                         std::to_string(bundle.arch.input_dim));
  if (ds.primary.num_classes > bundle.arch.primary.num_classes)
    throw DimensionError("eval: dataset primary labels exceed checkpoint classes (" +
                         std::to_string(ds.primary.num_classes) + " vs " +
                         std::to_string(bundle.arch.primary.num_classes) + ")");
  ds.primary.num_classes = bundle.arch.primary.num_classes;

  std::vector<std::string> tasks = probe_tasks;
  if (tasks.empty())
    for (const auto& s : ds.spurious) tasks.push_back(s.name);
  for (const auto& t : tasks)
    if (!ds.has_attribute(t) || t == ds.primary.name)
      throw ConfigError("eval: dataset has no spurious attribute named '" + t + "'");

  EvalReport report;
  const Matrix logits = primary_logits(bundle, ds.x);
  const IntVector preds = argmax_rows(logits);
  report.primary_accuracy = accuracy(preds, ds.primary.labels);
  report.primary_adjacent_accuracy = adjacent_accuracy(preds, ds.primary.labels);
  report.primary_mean_class_accuracy =
      mean_class_accuracy(preds, ds.primary.labels, ds.primary.num_classes);

  const Matrix embeddings = embed(bundle, ds.x);
  std::optional<NetworkBundle> base_bundle;
  std::optional<Matrix> base_embeddings;
  if (baseline_checkpoint) {
    base_bundle = load_bundle(*baseline_checkpoint);
    if (base_bundle->arch.input_dim != bundle.arch.input_dim)
      throw DimensionError("eval: baseline checkpoint input dimension mismatch");
    base_embeddings = embed(*base_bundle, ds.x);
  }

  for (size_t m = 0; m < tasks.size(); ++m) {
    const auto& attr = ds.attribute(tasks[m]);
    EvalTaskReport task_report;
    task_report.task = attr.name;
    task_report.num_classes = attr.num_classes;
    task_report.probe_accuracy = probe_train(embeddings, attr.labels, attr.num_classes,
                                             derive_seed(kEvalProbeSeed, "eval_probe", m));
    task_report.rescaled = rescaled_score(1.0 - task_report.probe_accuracy, attr.num_classes);
    if (base_embeddings) {
      task_report.baseline_probe_accuracy =
          probe_train(*base_embeddings, attr.labels, attr.num_classes,
                      derive_seed(kEvalProbeSeed, "eval_probe", m));
      task_report.baseline_rescaled =
          rescaled_score(1.0 - *task_report.baseline_probe_accuracy, attr.num_classes);
      task_report.pct_unlearned =
          percent_unlearned(*task_report.baseline_rescaled, task_report.rescaled);
    }
    report.tasks.push_back(task_report);
  }

  for (const auto& s : ds.spurious) {
    std::vector<Vector> dists(s.num_classes);
    for (int g = 0; g < s.num_classes; ++g)
      dists[g] = prediction_distribution(preds, attr_mask(s, g), ds.primary.num_classes);
    for (int a = 0; a < s.num_classes; ++a)
      for (int b = a + 1; b < s.num_classes; ++b)
        report.kls.push_back({s.name + std::to_string(a), s.name + std::to_string(b),
                              kl_divergence(dists[a], dists[b])});
  }

  out << "primary: acc=" << std::fixed << std::setprecision(4) << report.primary_accuracy
      << " adj_acc=" << report.primary_adjacent_accuracy
      << " mean_class_acc=" << report.primary_mean_class_accuracy << "\n";
  for (const auto& t : report.tasks) {
    out << "probe " << t.task << ": acc=" << t.probe_accuracy << " rescaled=" << t.rescaled
        << " chance=" << 1.0 / t.num_classes;
    if (t.pct_unlearned) out << " unlearned=" << *t.pct_unlearned << "%";
    else if (t.baseline_rescaled) out << " unlearned=n/a";
    out << "\n";
  }
  for (const auto& k : report.kls)
    out << "kl " << k.group_a << " vs " << k.group_b << ": " << k.kl << "\n";
  out << std::defaultfloat;

  if (out_json) {
    json jtasks = json::object();
    for (const auto& t : report.tasks) {
      json jt{{"classes", t.num_classes},
              {"probe_accuracy", t.probe_accuracy},
              {"rescaled", t.rescaled},
              {"chance", 1.0 / t.num_classes}};
      if (t.baseline_probe_accuracy) {
        jt["baseline_probe_accuracy"] = *t.baseline_probe_accuracy;
        jt["baseline_rescaled"] = *t.baseline_rescaled;
        jt["percent_unlearned"] = t.pct_unlearned ? json(*t.pct_unlearned) : json(nullptr);
      }
      jtasks[t.task] = jt;
    }
    json jkl = json::object();
    for (const auto& k : report.kls) jkl[k.group_a + "_" + k.group_b] = k.kl;
    const json doc{{"version", 1},
                   {"primary_acc", report.primary_accuracy},
                   {"primary_adj_acc", report.primary_adjacent_accuracy},
                   {"primary_mean_class_acc", report.primary_mean_class_accuracy},
                   {"tasks", jtasks},
                   {"kl", jkl}};
    write_text_file(*out_json, doc.dump(2) + "\n");
  }
  return report;
}

void cmd_export_embeddings(const std::string& checkpoint, const std::string& dataset_csv,
                           const std::string& out_csv) {
  const NetworkBundle bundle = load_bundle(checkpoint);
  const LabeledDataset ds = import_dataset(dataset_csv);
  if (ds.input_dim() != bundle.arch.input_dim)
    throw DimensionError("export-embeddings: dataset has " + std::to_string(ds.input_dim()) +
                         " features, checkpoint expects " +
                         std::to_string(bundle.arch.input_dim));
  const Matrix embeddings = embed(bundle, ds.x);
  const Matrix projected = project_embeddings(embeddings);
  std::vector<std::pair<std::string, IntVector>> spurious;
  for (const auto& s : ds.spurious) spurious.emplace_back(s.name, s.labels);
  write_embeddings_csv(out_csv, embeddings, projected, ds.primary.labels, spurious);
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

namespace {

std::string cell(const std::optional<Real>& v, int precision = 4) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, *v);
  return buf;
}

}  // namespace

ReportTable cmd_report(const std::vector<std::string>& run_dirs,
                       const std::optional<std::string>& csv_out, std::ostream& out) {
  if (run_dirs.empty()) throw ConfigError("report: need at least one run directory");
  ReportTable table;
  for (const auto& dir_str : run_dirs) {
    const fs::path dir(dir_str);
    const fs::path summary_path = dir / "summary.json";
    if (fs::exists(dir / ".incomplete") || !fs::exists(summary_path)) {
      table.skipped.push_back(dir_str);
      out << "warning: skipping incomplete run directory '" << dir_str << "'\n";
      continue;
    }
    json summary;
    try {
      summary = json::parse(read_text_file(summary_path));
    } catch (const json::exception& e) {
      table.skipped.push_back(dir_str);
      out << "warning: skipping '" << dir_str << "' (bad summary: " << e.what() << ")\n";
      continue;
    }
    const std::string run = dir.filename().string();
    const json& networks = summary.at("networks");
    const bool has_base = networks.contains("baseline");
    const bool has_blind = networks.contains("blind");

    for (const auto& [task, info] : summary.at("tasks").items()) {
      ReportRow row;
      row.run = run;
      row.task = task;
      row.chance = info.at("chance").get<Real>();
      const bool is_primary = !has_base
                                  ? !networks.at("blind").at("probes").contains(task)
                                  : !networks.at("baseline").at("probes").contains(task);
      if (is_primary) {
        if (has_base) row.baseline_acc = networks.at("baseline").at("primary_acc").get<Real>();
        if (has_blind) row.blind_acc = networks.at("blind").at("primary_acc").get<Real>();
      } else {
        if (has_base)
          row.baseline_acc =
              networks.at("baseline").at("probes").at(task).at("accuracy").get<Real>();
        if (has_blind)
          row.blind_acc = networks.at("blind").at("probes").at(task).at("accuracy").get<Real>();
        if (summary.contains("percent_unlearned") &&
            summary.at("percent_unlearned").contains(task) &&
            !summary.at("percent_unlearned").at(task).is_null())
          row.pct_unlearned = summary.at("percent_unlearned").at(task).get<Real>();
      }
      table.rows.push_back(row);
    }
  }
  if (table.rows.empty())
    throw DataError("report: all run directories were skipped as incomplete");

  std::ostringstream csv;
  csv << "run,task,chance,baseline_acc,blind_acc,percent_unlearned\n";
  for (const auto& r : table.rows)
    csv << r.run << ',' << r.task << ',' << format_real(r.chance) << ',' << cell(r.baseline_acc)
        << ',' << cell(r.blind_acc) << ',' << cell(r.pct_unlearned, 1) << '\n';
  if (csv_out) write_text_file(*csv_out, csv.str());

  size_t run_width = 3, task_width = 4;
  for (const auto& r : table.rows) {
    run_width = std::max(run_width, r.run.size());
    task_width = std::max(task_width, r.task.size());
  }
  out << std::left << std::setw(static_cast<int>(run_width) + 2) << "run"
      << std::setw(static_cast<int>(task_width) + 2) << "task" << std::setw(9) << "chance"
      << std::setw(14) << "baseline_acc" << std::setw(11) << "blind_acc" << "%unlearned\n";
  for (const auto& r : table.rows) {
    char chance_buf[16];
    std::snprintf(chance_buf, sizeof(chance_buf), "%.3f", r.chance);
    out << std::left << std::setw(static_cast<int>(run_width) + 2) << r.run
        << std::setw(static_cast<int>(task_width) + 2) << r.task << std::setw(9) << chance_buf
        << std::setw(14) << cell(r.baseline_acc) << std::setw(11) << cell(r.blind_acc)
        << cell(r.pct_unlearned, 1) << "\n";
  }
  return table;
}

}  // namespace unbias
