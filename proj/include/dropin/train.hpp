// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dropin/layers.hpp"
#include "dropin/optim.hpp"
#include "dropin/synth.hpp"

namespace dropin {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double dev_eer = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  ParamStore last;             // weights after the final epoch
  ParamStore best;             // weights of the epoch with the lowest dev EER
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  double best_dev_eer = 0.0;
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;
};

/// Mini-batch training on cross-entropy. The store's trainable set is the
/// mask: only those tensors change. Each epoch visits the training set in a
/// seeded shuffled order, then scores the dev set. Ties in dev EER keep the
/// earlier epoch. Throws Error(kNumeric) naming the epoch and batch if a
/// non-finite value appears.
TrainResult train_stage(const ModelGraph& model, const ParamStore& params, const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& dev, std::size_t epochs, const OptimizerConfig& optimizer,
                        std::uint64_t seed);

}  // namespace dropin
