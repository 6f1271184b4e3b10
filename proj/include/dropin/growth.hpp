// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dropin/layers.hpp"
#include "dropin/param_store.hpp"

namespace dropin {

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

/// One weight block created by a dropin. `logical` names the layer weight the
/// block belongs to (e.g. "layer1.weight"); `axis` 0 means the block adds rows
/// (new output neurons), 1 means it adds columns (new inputs). `range` is the
/// row or column range inside the assembled logical tensor.
struct SliceRecord {
  ParamId param;
  std::string logical;
  int axis = 0;
  IndexRange range;
  std::size_t elements = 0;
  bool in_layer = true;  // false for the consumer's new input columns

  bool operator==(const SliceRecord&) const = default;
};

struct DropinEvent {
  std::size_t layer = 0;
  std::size_t segment = 0;  // index of the appended neuron segment
  std::size_t added = 0;    // neurons added
  std::optional<std::size_t> consumer;  // nullopt = classifier head
  std::optional<ScaleMode> previous_scale_mode;  // attention only
  std::vector<SliceRecord> slices;

  bool operator==(const DropinEvent&) const = default;
};

/// Per-layer partition of neurons into original and added, plus every weight
/// block each dropin created. Drives freezing and exact pruning.
class NeuronLedger {
 public:
  struct LayerEntry {
    std::string name;
    std::size_t original_width = 0;
    std::size_t width = 0;
    bool operator==(const LayerEntry&) const = default;
  };

  NeuronLedger() = default;
  /// Ledger with empty added sets for every expandable layer of `model`.
  static NeuronLedger for_model(const ModelGraph& model);

  bool empty() const { return events_.empty(); }
  const std::map<std::size_t, LayerEntry>& layers() const { return layers_; }
  const std::vector<DropinEvent>& events() const { return events_; }

  std::vector<std::size_t> original_indices(std::size_t layer) const;
  std::vector<std::size_t> added_indices(std::size_t layer) const;

  std::vector<SliceRecord> added_slices() const;
  std::set<ParamId> added_params() const;
  std::size_t added_elements() const;

  /// Throws if the ledger disagrees with the model or the store.
  void check(const ModelGraph& model, const ParamStore& params) const;

  void record(DropinEvent event, std::size_t new_width);
  void clear_added();

  bool operator==(const NeuronLedger&) const = default;

  // Serialisation hooks.
  std::map<std::size_t, LayerEntry>& mutable_layers() { return layers_; }
  std::vector<DropinEvent>& mutable_events() { return events_; }

 private:
  const LayerEntry& entry(std::size_t layer) const;

  std::map<std::size_t, LayerEntry> layers_;
  std::vector<DropinEvent> events_;
};

enum class FreezePolicy { kFrozen, kUnfrozen };

struct DropinPlan {
  std::vector<std::size_t> selected_layers;
  double growth_ratio = 1.0;
  /// Standard deviation of new weights; nullopt = each family's fan-based
  /// scale (with zero biases).
  std::optional<double> init_sigma;
  FreezePolicy freeze_policy = FreezePolicy::kFrozen;
  std::uint64_t rng_seed = 42;
  /// When set, attention blocks switch to this softmax temperature mode.
  std::optional<ScaleMode> attention_scale;
};

/// `count` distinct expandable layer indices, uniformly without replacement.
/// Returned sorted ascending.
std::vector<std::size_t> select_layers(const ModelGraph& model, std::size_t count, std::uint64_t seed);

/// Appends round(growth_ratio * width) neurons to every selected layer, with
/// the matching input columns in each consumer. New parameters are added as
/// trainable; existing trainability is untouched. Strong guarantee: on error
/// nothing is modified.
void dropin(ModelGraph& model, ParamStore& params, NeuronLedger& ledger, const DropinPlan& plan);

/// kFrozen: trainable set becomes exactly the ledger's added blocks, plus
/// `extra_trainable`. kUnfrozen: everything becomes trainable.
void apply_freeze(ParamStore& params, const NeuronLedger& ledger, FreezePolicy policy,
                  const std::set<ParamId>& extra_trainable = {});

/// Removes every added neuron and block, restoring the pre-dropin
/// architecture. Surviving values are kept as they currently are.
void prune(ModelGraph& model, ParamStore& params, NeuronLedger& ledger);

/// Element count of the store, or of its trainable subset.
std::size_t param_count(const ParamStore& params, bool trainable_only = false);

/// Default LoRA targets: 2-D dense, recurrent and attention projection weights
/// plus the classifier head.
std::vector<ParamId> lora_default_targets(const ModelGraph& model);

/// Wraps each target with a rank-`rank` adapter (A ~ N(0, 1/cols), B = 0),
/// registers it on the model, freezes everything else.
std::vector<LoraAdapter> lora_wrap(ModelGraph& model, ParamStore& params, const std::vector<ParamId>& targets,
                                   std::size_t rank, double alpha, std::uint64_t seed);

}  // namespace dropin
