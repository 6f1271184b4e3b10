// SPDX-License-Identifier: Apache-2.0

#include "dropin/plasticity.hpp"

#include <chrono>
#include <fstream>

#include "dropin/checkpoint.hpp"
#include "dropin/error.hpp"
#include "dropin/eval.hpp"
#include "dropin/rng.hpp"
#include "dropin/serialize.hpp"
#include "dropin/train.hpp"

namespace dropin {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::kInitial: return "initial";
    case Stage::kExpanded: return "expanded";
    case Stage::kPruned: return "pruned";
  }
  throw Error(ErrorKind::kArgument, "bad stage");
}

namespace {

void save_stage(const std::filesystem::path& dir, std::size_t number, const std::string& which, const ModelGraph& model,
                const NeuronLedger& ledger, const ParamStore& params, std::size_t epoch) {
  Json meta{{"model", model_to_json(model)},
            {"ledger", ledger_to_json(ledger)},
            {"stage", number},
            {"epoch", epoch}};
  save_checkpoint(dir / ("stage" + std::to_string(number) + "-" + which + ".ckpt"), Checkpoint{params, meta.dump()});
}

void append_log(const std::filesystem::path& dir, const StageRecord& rec) {
  Json line{{"stage", to_string(rec.stage)},     {"epochs", rec.epochs},   {"params_before", rec.params_before},
            {"params_after", rec.params_after}, {"train_loss", rec.train_loss}, {"dev_eer", rec.dev_eer},
            {"wall_seconds", rec.wall_seconds}};
  std::ofstream out(dir / "stages.jsonl", std::ios::app);
  out << line.dump() << '\n';
  out.flush();
  if (!out) throw Error(ErrorKind::kIo, "cannot append to " + (dir / "stages.jsonl").string());
}

}  // namespace

PlasticityResult run_plasticity(const ModelGraph& model, const ParamStore& params, const Dataset& data,
                                const PlasticityConfig& config, const std::string& dataset_name) {
  if (!model.adapters.empty()) throw Error(ErrorKind::kState, "plasticity expects a model without adapters");
  validate_params(model, params);
  if (config.checkpoint_dir) ensure_directory(*config.checkpoint_dir);

  PlasticityResult result;
  ModelGraph current = model;
  ParamStore weights = params;
  NeuronLedger ledger = NeuronLedger::for_model(model);
  const std::size_t epochs = config.epochs_per_stage;
  const Stage order[] = {Stage::kInitial, Stage::kExpanded, Stage::kPruned};

  for (std::size_t number = 1; number <= 3; ++number) {
    const auto started = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.stage = order[number - 1];
    rec.epochs = epochs;
    rec.params_before = param_count(weights);
    if (rec.stage == Stage::kExpanded) {
      DropinPlan plan = config.plan;
      plan.freeze_policy = FreezePolicy::kUnfrozen;
      dropin::dropin(current, weights, ledger, plan);
      result.expanded_ledger = ledger;
    } else if (rec.stage == Stage::kPruned) {
      prune(current, weights, ledger);
      result.pruned_start = weights;
    }
    weights.set_all_trainable(true);
    rec.params_after = param_count(weights);

    TrainResult trained = train_stage(current, weights, data.train, data.dev, epochs, config.optimizer,
                                      derive_seed(config.seed, "stage" + std::to_string(number)));
    for (const auto& e : trained.epochs) {
      rec.train_loss.push_back(e.train_loss);
      rec.dev_eer.push_back(e.dev_eer);
      result.report.curves.push_back(CurvePoint{to_string(rec.stage), e.epoch, e.train_loss, e.dev_eer * 100.0});
    }
    weights = std::move(trained.last);
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();

    if (config.checkpoint_dir) {
      save_stage(*config.checkpoint_dir, number, "last", current, ledger, weights, epochs);
      save_stage(*config.checkpoint_dir, number, "best", current, ledger, trained.best, trained.best_epoch);
      append_log(*config.checkpoint_dir, rec);
    }
    if (rec.stage == Stage::kExpanded) result.expanded_last = weights;
    if (rec.stage == Stage::kPruned) result.best = std::move(trained.best);
    result.stages.push_back(std::move(rec));
  }

  result.model = std::move(current);
  result.params = std::move(weights);
  result.report.dataset = dataset_name;
  result.report.model = model.name;
  result.report.strategy = Strategy::kPlasticity;
  result.report.test_eer_percent = evaluate_eer(result.model, result.best, data.test) * 100.0;
  result.report.params_total = param_count(result.best);
  return result;
}

}  // namespace dropin
