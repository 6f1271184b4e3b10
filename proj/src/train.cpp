// SPDX-License-Identifier: Apache-2.0

#include "dropin/train.hpp"

#include <numeric>

#include "dropin/error.hpp"
#include "dropin/eval.hpp"
#include "dropin/rng.hpp"

namespace dropin {

TrainResult train_stage(const ModelGraph& model, const ParamStore& params, const std::vector<LabeledExample>& train,
                        const std::vector<LabeledExample>& dev, std::size_t epochs, const OptimizerConfig& optimizer,
                        std::uint64_t seed) {
  if (train.empty()) throw Error(ErrorKind::kArgument, "training set is empty");
  validate_params(model, params);
  Optimizer opt(optimizer);
  TrainResult result;
  result.last = params;
  result.best = params;
  result.best_dev_eer = evaluate_eer(model, params, dev);

  std::vector<std::size_t> order(train.size());
  const bool anything_trainable = params.element_count(true) > 0;
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    double loss_sum = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += optimizer.batch_size, ++batch_index) {
      const std::size_t stop = std::min(order.size(), start + optimizer.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, stop - start);
      const Tensor x = make_batch(model, train, idx);
      const std::vector<int> y = batch_labels(train, idx);
      try {
        auto built = build_model_graph(model, idx.size(), &y);
        const Tensor loss = forward(built.graph, std::span<const Tensor>(&x, 1), result.last);
        loss_sum += loss[0] * static_cast<double>(idx.size());
        if (anything_trainable) {
          opt.step(result.last, backward(built.graph, result.last));
          ++result.steps;
        }
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kNumeric) throw;
        throw Error(ErrorKind::kNumeric, "non-finite value in epoch " + std::to_string(epoch) + ", batch " +
                                             std::to_string(batch_index) + ": " + e.what());
      }
    }
    for (const auto& [id, t] : result.last.entries()) {
      if (!t.all_finite()) {
        throw Error(ErrorKind::kNumeric, "parameter '" + id + "' became non-finite in epoch " + std::to_string(epoch));
      }
    }
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), evaluate_eer(model, result.last, dev)};
    if (result.best_epoch == 0 || rec.dev_eer < result.best_dev_eer) {
      result.best = result.last;
      result.best_epoch = epoch;
      result.best_dev_eer = rec.dev_eer;
    }
    result.epochs.push_back(rec);
  }
  return result;
}

}  // namespace dropin
