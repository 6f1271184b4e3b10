// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dropin/growth.hpp"
#include "dropin/layers.hpp"
#include "dropin/optim.hpp"
#include "dropin/report.hpp"
#include "dropin/serialize.hpp"
#include "dropin/synth.hpp"

namespace dropin {

struct LayerSpec {
  std::string type;  // dense, conv2d, gru, attention, flatten, global_avg_pool, time_mean_pool
  std::string name;
  std::size_t units = 0;         // dense
  std::size_t out_channels = 0;  // conv2d
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t hidden = 0;  // gru
  bool return_sequences = false;
  std::size_t heads = 0;  // attention
  std::size_t head_dim = 0;
  std::size_t ffn_dim = 0;
  ScaleMode scale_mode = ScaleMode::kExpanded;
  Activation activation = Activation::kRelu;

  bool operator==(const LayerSpec&) const = default;
};

struct ModelSpec {
  std::string name = "toy_cnn";
  InputKind input = InputKind::kImage;
  std::vector<LayerSpec> layers;

  bool operator==(const ModelSpec&) const = default;
};

/// conv 1->4, conv 4->8 stride 2, global average pooling.
ModelSpec toy_cnn_spec();

struct DropinSettings {
  std::size_t num_layers = 1;           // layers drawn when `layers` is empty
  std::vector<std::size_t> layers;      // explicit selection
  double growth_ratio = 1.0;
  std::optional<double> init_sigma;
  std::optional<ScaleMode> attention_scale;
  bool train_head = false;              // frozen policy: also train the original head
  std::size_t pretrain_epochs = 0;

  bool operator==(const DropinSettings&) const = default;
};

struct LoraSettings {
  std::size_t rank = 2;
  double alpha = 4.0;
  std::vector<ParamId> targets;  // empty: lora_default_targets
  std::size_t pretrain_epochs = 0;

  bool operator==(const LoraSettings&) const = default;
};

struct TimingSettings {
  std::size_t warmup = 2;
  std::size_t iters = 10;
  std::size_t batch_size = 32;

  bool operator==(const TimingSettings&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string dataset_name = "synthetic";
  ModelSpec model = toy_cnn_spec();
  SynthSpec data;
  OptimizerConfig optimizer;
  Strategy strategy = Strategy::kBaseline;
  std::size_t epochs = 15;
  DropinSettings dropin;
  LoraSettings lora;
  std::size_t epochs_per_stage = 5;
  TimingSettings timing;
  std::string output_dir;  // empty: nothing written

  bool operator==(const ExperimentConfig&) const = default;
};

/// Strict parsing: unknown keys, missing required keys and wrong types raise
/// Error(kConfig) naming the dotted key. `strategy` is the only required key.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig parse_config(const std::filesystem::path& path);
/// Every field, defaults included, with sorted keys.
Json config_to_json(const ExperimentConfig& config);
std::string canonical_config(const ExperimentConfig& config);

/// Applies "a.b.c=value" to a raw config document. The value is read as JSON
/// when it parses and as a string otherwise. Only scalar leaves may be set.
void apply_override(Json& doc, const std::string& assignment);

ModelGraph build_model(const ModelSpec& spec, const SynthSpec& data);
/// Epochs of optimisation the strategy performs in total.
std::size_t total_epochs(const ExperimentConfig& config);

struct ExperimentResult {
  RunReport report;
  ModelGraph model;  // final architecture
  ParamStore best;   // weights the test EER was measured on
};

/// Runs one strategy end to end. With an output directory, appends the row to
/// report.csv and writes config.json and best.ckpt there.
ExperimentResult run_experiment(const ExperimentConfig& config);
ExperimentResult run_experiment(const ExperimentConfig& config, const Dataset& data);

struct AblationEntry {
  std::size_t layer = 0;
  std::string layer_name;
  std::optional<double> test_eer_percent;
  std::string error;
  std::uint64_t seed = 0;
  std::size_t total_epochs = 0;
};

struct AblationResult {
  std::vector<AblationEntry> entries;
  /// max minus min over the entries that succeeded; nullopt if none did.
  std::optional<double> spread() const;
};

/// One single-layer dropin run per expandable layer of the configured model.
AblationResult ablation_sweep(const ExperimentConfig& config);
void write_ablation_csv(const std::filesystem::path& path, const AblationResult& result);

struct ComparisonRow {
  RunReport report;
  std::size_t total_epochs = 0;
  std::optional<double> relative_change_percent;  // versus baseline
};

/// (baseline - value) / baseline * 100; nullopt when baseline is zero.
std::optional<double> relative_change(double baseline, double value);

/// Runs every config and orders the rows by strategy. Configs must share the
/// dataset and model specs; unequal epoch budgets raise Error(kConfig) unless
/// `allow_budget_mismatch`.
std::vector<ComparisonRow> compare_strategies(const std::vector<ExperimentConfig>& configs,
                                              bool allow_budget_mismatch = false);
std::string comparison_csv(const std::vector<ComparisonRow>& rows, bool with_timing = true);

}  // namespace dropin
