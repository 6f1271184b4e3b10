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
#include "dropin/synth.hpp"

namespace dropin {

enum class Stage { kInitial, kExpanded, kPruned };

std::string to_string(Stage stage);

struct PlasticityConfig {
  std::size_t epochs_per_stage = 5;
  DropinPlan plan;  // freeze_policy is ignored: the expanded stage trains everything
  OptimizerConfig optimizer;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::uint64_t seed = 42;
};

struct StageRecord {
  Stage stage = Stage::kInitial;
  std::size_t epochs = 0;
  std::size_t params_before = 0;  // total count entering the stage
  std::size_t params_after = 0;   // total count after the stage's structural change
  std::vector<double> train_loss;
  std::vector<double> dev_eer;
  double wall_seconds = 0.0;
};

struct PlasticityResult {
  ModelGraph model;            // original architecture again
  ParamStore params;           // last-epoch weights of the pruned stage
  ParamStore best;             // best-dev weights of the pruned stage
  ParamStore expanded_last;    // weights at the end of the expanded stage
  ParamStore pruned_start;     // weights entering the pruned stage
  NeuronLedger expanded_ledger;
  std::vector<StageRecord> stages;
  RunReport report;
};

/// Train, grow with dropin and train everything, prune the added neurons and
/// train again, each stage for the same number of epochs. With a checkpoint
/// directory, writes stage{1,2,3}-{last,best}.ckpt and appends one JSON line
/// per finished stage to stages.jsonl.
PlasticityResult run_plasticity(const ModelGraph& model, const ParamStore& params, const Dataset& data,
                                const PlasticityConfig& config, const std::string& dataset_name = "synthetic");

}  // namespace dropin
