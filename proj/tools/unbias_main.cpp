// Experiment harness CLI: dataset generation, baseline/blind training runs,
// checkpoint evaluation, embedding export, and cross-run comparison tables.

#include "unbias/runner.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitIo = 4;

int run(int argc, char** argv) {
  CLI::App app{"Joint learning/unlearning experiment harness"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  bool force = false;

  auto* gen = app.add_subcommand("gen-data", "Generate synthetic train/test CSVs + manifest");
  gen->add_option("--config", config_path, "run config JSON")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_flag("--force", force, "overwrite existing files");

  std::optional<std::string> train_out_root;
  auto* train = app.add_subcommand("train", "Train baseline and/or blind networks");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out-root", train_out_root, "override the config's output_dir");
  train->add_flag("--force", force, "redo an existing run directory");

  std::string checkpoint, dataset_csv, out_csv;
  std::optional<std::string> baseline_ckpt, eval_json;
  std::vector<std::string> probe_tasks;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--dataset", dataset_csv, "dataset CSV")->required();
  eval->add_option("--baseline", baseline_ckpt,
                   "baseline checkpoint for %-unlearned comparison");
  eval->add_option("--probe", probe_tasks, "spurious tasks to probe (default: all)")
      ->delimiter(',');
  eval->add_option("--out", eval_json, "write the report as JSON");

  auto* exp = app.add_subcommand("export-embeddings", "Export embeddings + 2-D projection");
  exp->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  exp->add_option("--dataset", dataset_csv, "dataset CSV")->required();
  exp->add_option("--out", out_csv, "output CSV")->required();

  std::vector<std::string> run_dirs;
  std::optional<std::string> report_csv;
  auto* report = app.add_subcommand("report", "Comparison table across completed runs");
  report->add_option("dirs", run_dirs, "run directories")->required();
  report->add_option("--csv", report_csv, "also write the table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  if (gen->parsed()) {
    const auto result =
        unbias::cmd_gen_data(unbias::load_run_config(config_path), out_dir, force);
    std::cout << "wrote " << result.train_csv.string() << ", " << result.test_csv.string()
              << ", " << result.manifest.string() << "\n";
  } else if (train->parsed()) {
    unbias::cmd_train(unbias::load_run_config(config_path), train_out_root, force, std::cout);
  } else if (eval->parsed()) {
    unbias::cmd_eval(checkpoint, dataset_csv, baseline_ckpt, probe_tasks, eval_json, std::cout);
  } else if (exp->parsed()) {
    unbias::cmd_export_embeddings(checkpoint, dataset_csv, out_csv);
    std::cout << "wrote " << out_csv << "\n";
  } else if (report->parsed()) {
    unbias::cmd_report(run_dirs, report_csv, std::cout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const unbias::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const unbias::DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const unbias::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const unbias::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
