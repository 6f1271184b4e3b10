// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: run, sweep, compare, gradcam, gen-data.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dropin/checkpoint.hpp"
#include "dropin/error.hpp"
#include "dropin/eval.hpp"
#include "dropin/experiment.hpp"

namespace {

using dropin::Error;
using dropin::ErrorKind;
using dropin::Json;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kArgument: return 2;
    case ErrorKind::kShape: return 3;
    case ErrorKind::kState: return 4;
    case ErrorKind::kConfig: return 5;
    case ErrorKind::kIo: return 6;
    case ErrorKind::kNumeric: return 7;
  }
  return 1;
}

Json read_document(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::kConfig, path + ": " + e.what());
  }
}

dropin::ExperimentConfig load(const std::optional<std::string>& path, const std::vector<std::string>& overrides) {
  Json doc = path ? read_document(*path) : Json{{"strategy", "baseline"}};
  for (const auto& o : overrides) dropin::apply_override(doc, o);
  return dropin::config_from_json(doc);
}

std::size_t resolve_layer(const dropin::ModelGraph& model, const std::string& text) {
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    if (dropin::layer_name(model.layers[i]) == text) return i;
  }
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(text, &used);
    if (used == text.size() && v < model.num_layers()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorKind::kArgument, "no layer named or numbered '" + text + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neuron-level growth and grow-train-prune training for small networks"};
  app.require_subcommand(1);
  std::vector<std::string> overrides;

  auto* run = app.add_subcommand("run", "Train one strategy and print its report row");
  std::string run_config;
  std::optional<std::string> run_output;
  bool run_no_timing = false;
  run->add_option("config", run_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  run->add_option("--set", overrides, "Override a scalar key, e.g. --set optimizer.learning_rate=0.01");
  run->add_option("--output", run_output, "Output directory (overrides output_dir)");
  run->add_flag("--no-timing", run_no_timing, "Print '/' in the timing column");

  auto* sweep = app.add_subcommand("sweep", "Single-layer dropin for every expandable layer");
  std::string sweep_config;
  sweep->add_option("config", sweep_config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
  sweep->add_option("--set", overrides, "Override a scalar key");

  auto* compare = app.add_subcommand("compare", "Run several strategies and tabulate them");
  std::vector<std::string> compare_configs;
  std::optional<std::string> compare_out;
  bool allow_mismatch = false;
  bool compare_no_timing = false;
  compare->add_option("configs", compare_configs, "One config per strategy")->required()->check(CLI::ExistingFile);
  compare->add_option("--set", overrides, "Override a scalar key in every config");
  compare->add_option("--out", compare_out, "Also write the table to this file");
  compare->add_flag("--allow-budget-mismatch", allow_mismatch, "Tabulate even if epoch budgets differ");
  compare->add_flag("--no-timing", compare_no_timing, "Print '/' in the timing column");

  auto* cam = app.add_subcommand("gradcam", "Grad-CAM heatmap of a test example");
  std::string cam_checkpoint, cam_out, cam_layer;
  std::optional<std::string> cam_config;
  std::size_t cam_example = 0, cam_class = 1;
  cam->add_option("--checkpoint", cam_checkpoint, "Checkpoint written by run")->required()->check(CLI::ExistingFile);
  cam->add_option("--config", cam_config, "Config whose data section defines the examples")->check(CLI::ExistingFile);
  cam->add_option("--set", overrides, "Override a scalar key");
  cam->add_option("--layer", cam_layer, "Conv layer name or index")->required();
  cam->add_option("--example", cam_example, "Test-split example index")->capture_default_str();
  cam->add_option("--class", cam_class, "Class index (0 bona fide, 1 spoof)")->capture_default_str();
  cam->add_option("--out", cam_out, "Heatmap matrix file")->required();

  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset to a file");
  std::optional<std::string> gen_config;
  std::string gen_out;
  gen->add_option("--config", gen_config, "Config whose data section is used")->check(CLI::ExistingFile);
  gen->add_option("--set", overrides, "Override a scalar key, e.g. --set data.n_train=100");
  gen->add_option("--out", gen_out, "Dataset file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_code(ErrorKind::kArgument);
  }

  try {
    if (run->parsed()) {
      auto config = load(run_config, overrides);
      if (run_output) config.output_dir = *run_output;
      const auto result = dropin::run_experiment(config);
      std::cout << dropin::kReportHeader << '\n' << dropin::report_row(result.report, !run_no_timing) << '\n';
    } else if (sweep->parsed()) {
      const auto result = dropin::ablation_sweep(load(sweep_config, overrides));
      std::cout << "layer,name,test_eer_percent\n";
      for (const auto& e : result.entries) {
        std::cout << e.layer << ',' << e.layer_name << ','
                  << (e.test_eer_percent ? dropin::format_number(*e.test_eer_percent) : "/") << '\n';
        if (!e.error.empty()) std::cerr << "layer " << e.layer << " failed: " << e.error << '\n';
      }
      if (auto spread = result.spread()) std::cerr << "spread " << dropin::format_number(*spread) << " EER points\n";
      for (const auto& e : result.entries) {
        if (!e.error.empty()) return 1;
      }
    } else if (compare->parsed()) {
      std::vector<dropin::ExperimentConfig> configs;
      for (const auto& path : compare_configs) configs.push_back(load(path, overrides));
      const auto rows = dropin::compare_strategies(configs, allow_mismatch);
      const std::string table = dropin::comparison_csv(rows, !compare_no_timing);
      if (compare_out) dropin::write_file_atomic(*compare_out, table);
      std::cout << table;
    } else if (cam->parsed()) {
      const auto config = load(cam_config, overrides);
      const auto ckpt = dropin::load_checkpoint(cam_checkpoint);
      const auto model = dropin::model_from_json(Json::parse(ckpt.meta).at("model"));
      const auto data = dropin::generate(config.data);
      if (cam_example >= data.test.size()) throw Error(ErrorKind::kArgument, "--example is out of range");
      const std::size_t idx[] = {cam_example};
      const auto input = dropin::make_batch(model, data.test, idx);
      const auto heat = dropin::gradcam(model, ckpt.params, input, resolve_layer(model, cam_layer), cam_class);
      dropin::write_matrix(cam_out, heat);
    } else if (gen->parsed()) {
      dropin::save_dataset(gen_out, dropin::generate(load(gen_config, overrides).data));
    }
  } catch (const Error& e) {
    std::cerr << "error[" << dropin::to_string(e.kind()) << "]: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const Json::exception& e) {
    std::cerr << "error[io]: malformed checkpoint metadata: " << e.what() << '\n';
    return exit_code(ErrorKind::kIo);
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
