// SPDX-License-Identifier: Apache-2.0

#include "dropin/optim.hpp"

#include <cmath>

#include "dropin/error.hpp"

namespace dropin {

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind optimizer_kind_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "adam") return OptimizerKind::kAdam;
  throw Error(ErrorKind::kConfig, "optimizer kind must be 'sgd' or 'adam', got '" + s + "'");
}

Optimizer::Optimizer(OptimizerConfig config) : config_(config) {
  if (!(config_.learning_rate > 0.0) || !std::isfinite(config_.learning_rate)) {
    throw Error(ErrorKind::kConfig, "learning_rate must be a positive number");
  }
  if (!(config_.momentum >= 0.0 && config_.momentum < 1.0)) throw Error(ErrorKind::kConfig, "momentum must lie in [0, 1)");
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0) || !(config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
    throw Error(ErrorKind::kConfig, "adam betas must lie in [0, 1)");
  }
  if (!(config_.epsilon > 0.0)) throw Error(ErrorKind::kConfig, "epsilon must be positive");
  if (config_.batch_size == 0) throw Error(ErrorKind::kConfig, "batch_size must be positive");
}

void Optimizer::reset() {
  first_.clear();
  second_.clear();
  steps_ = 0;
}

void Optimizer::step(ParamStore& params, const GradMap& grads) {
  ++steps_;
  const double lr = config_.learning_rate;
  for (const auto& [id, g] : grads) {
    if (!params.is_trainable(id)) continue;
    Tensor& w = params.get_mut(id);
    if (g.size() != w.size()) throw Error(ErrorKind::kShape, "gradient for '" + id + "' has the wrong size");
    const auto gv = g.values();
    auto wv = w.values();
    if (config_.kind == OptimizerKind::kSgd) {
      if (config_.momentum == 0.0) {
        for (std::size_t i = 0; i < wv.size(); ++i) wv[i] -= lr * gv[i];
        continue;
      }
      auto& vel = first_[id];
      if (vel.size() != wv.size()) vel.assign(wv.size(), 0.0);
      for (std::size_t i = 0; i < wv.size(); ++i) {
        vel[i] = config_.momentum * vel[i] + gv[i];
        wv[i] -= lr * vel[i];
      }
      continue;
    }
    auto& m = first_[id];
    auto& v = second_[id];
    if (m.size() != wv.size()) {
      m.assign(wv.size(), 0.0);
      v.assign(wv.size(), 0.0);
    }
    const double t = static_cast<double>(steps_);
    const double c1 = 1.0 - std::pow(config_.beta1, t);
    const double c2 = 1.0 - std::pow(config_.beta2, t);
    for (std::size_t i = 0; i < wv.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gv[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gv[i] * gv[i];
      wv[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.epsilon);
    }
  }
}

}  // namespace dropin
