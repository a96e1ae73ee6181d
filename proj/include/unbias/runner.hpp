#pragma once

// Command implementations behind the CLI: dataset generation, training runs
// with their artifact directories, evaluation reports, embedding export, and
// the cross-run comparison table.

#include "unbias/config.hpp"
#include "unbias/eval.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace unbias {

// epoch,primary_acc,primary_adj_acc,loss_primary,loss_confusion, then
// probe_acc_<task>,rescaled_<task> per spurious task, then kl_<a>_<b> per
// group pair.
std::string metrics_csv(const std::vector<MetricsRecord>& history,
                        const std::vector<std::pair<std::string, int>>& spurious_attrs);

struct GenDataResult {
  std::filesystem::path train_csv;
  std::filesystem::path test_csv;
  std::filesystem::path manifest;
};

GenDataResult cmd_gen_data(const RunConfig& config, const std::string& out_dir, bool force);

struct TrainOutcome {
  std::filesystem::path run_dir;
  bool reused_existing = false;
  std::optional<MetricsRecord> final_baseline;
  std::optional<MetricsRecord> final_blind;
};

TrainOutcome cmd_train(const RunConfig& config, const std::optional<std::string>& output_dir,
                       bool force, std::ostream& out);

struct EvalTaskReport {
  std::string task;
  int num_classes = 0;
  Real probe_accuracy = 0;
  Real rescaled = 0;
  std::optional<Real> baseline_probe_accuracy;
  std::optional<Real> baseline_rescaled;
  std::optional<Real> pct_unlearned;
};

struct EvalReport {
  Real primary_accuracy = 0;
  Real primary_adjacent_accuracy = 0;
  Real primary_mean_class_accuracy = 0;
  std::vector<EvalTaskReport> tasks;
  std::vector<MetricsRecord::GroupKl> kls;
};

EvalReport cmd_eval(const std::string& checkpoint, const std::string& dataset_csv,
                    const std::optional<std::string>& baseline_checkpoint,
                    const std::vector<std::string>& probe_tasks,
                    const std::optional<std::string>& out_json, std::ostream& out);

void cmd_export_embeddings(const std::string& checkpoint, const std::string& dataset_csv,
                           const std::string& out_csv);

struct ReportRow {
  std::string run;
  std::string task;
  Real chance = 0;
  std::optional<Real> baseline_acc;
  std::optional<Real> blind_acc;
  std::optional<Real> pct_unlearned;
};

struct ReportTable {
  std::vector<ReportRow> rows;
  std::vector<std::string> skipped;  // run dirs skipped as incomplete
};

ReportTable cmd_report(const std::vector<std::string>& run_dirs,
                       const std::optional<std::string>& csv_out, std::ostream& out);

}  // namespace unbias
