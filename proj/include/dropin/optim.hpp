// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "dropin/graph.hpp"
#include "dropin/param_store.hpp"

namespace dropin {

enum class OptimizerKind { kSgd, kAdam };

std::string to_string(OptimizerKind kind);
OptimizerKind optimizer_kind_from_string(const std::string& s);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double momentum = 0.0;  // sgd only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 32;

  bool operator==(const OptimizerConfig&) const = default;
};

/// Updates exactly the parameters that appear in the gradient map and are
/// trainable in the store. State is keyed by ParamId.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config);

  void step(ParamStore& params, const GradMap& grads);
  void reset();
  std::size_t steps() const { return steps_; }
  const OptimizerConfig& config() const { return config_; }

 private:
  OptimizerConfig config_;
  std::map<ParamId, std::vector<double>> first_;
  std::map<ParamId, std::vector<double>> second_;
  std::size_t steps_ = 0;
};

}  // namespace dropin
