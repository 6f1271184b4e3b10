// SPDX-License-Identifier: Apache-2.0

#include "dropin/growth.hpp"

#include <algorithm>
#include <cmath>

#include "dropin/error.hpp"
#include "dropin/rng.hpp"

namespace dropin {

namespace {

std::vector<std::size_t>& segments_of(Layer& layer) {
  return std::visit(
      [](auto& l) -> std::vector<std::size_t>& {
        if constexpr (requires { l.segments; }) {
          return l.segments;
        } else {
          throw Error(ErrorKind::kArgument, "layer '" + l.name + "' has no neurons to expand");
        }
      },
      layer);
}

const std::vector<std::size_t>& segments_of(const Layer& layer) {
  return segments_of(const_cast<Layer&>(layer));
}

std::size_t offset_of(const std::vector<std::size_t>& segs, std::size_t index) {
  std::size_t off = 0;
  for (std::size_t i = 0; i < index; ++i) off += segs[i];
  return off;
}

// "base[r,c]" -> (base, r, c); "base[s]" -> (base, s, npos); "base" -> (base, 0, 0).
struct BlockName {
  std::string base;
  std::size_t first = 0;
  std::size_t second = 0;
  bool single = false;
};

BlockName parse_block(const ParamId& id) {
  BlockName out;
  const auto open = id.rfind('[');
  if (open == std::string::npos || id.back() != ']') {
    out.base = id;
    return out;
  }
  out.base = id.substr(0, open);
  const std::string inner = id.substr(open + 1, id.size() - open - 2);
  const auto comma = inner.find(',');
  if (comma == std::string::npos) {
    out.first = std::stoul(inner);
    out.single = true;
  } else {
    out.first = std::stoul(inner.substr(0, comma));
    out.second = std::stoul(inner.substr(comma + 1));
  }
  return out;
}

bool is_bias_name(const std::string& base) {
  return base.ends_with(".bias") || base.find(".b_") != std::string::npos;
}

}  // namespace

// ---------------------------------------------------------------------------
// NeuronLedger

NeuronLedger NeuronLedger::for_model(const ModelGraph& model) {
  NeuronLedger ledger;
  for (std::size_t i : model.expandable_layers()) {
    const auto& segs = segments_of(model.layers[i]);
    ledger.layers_[i] = LayerEntry{layer_name(model.layers[i]), segs.at(0), total_width(segs)};
  }
  return ledger;
}

const NeuronLedger::LayerEntry& NeuronLedger::entry(std::size_t layer) const {
  auto it = layers_.find(layer);
  if (it == layers_.end()) throw Error(ErrorKind::kArgument, "layer " + std::to_string(layer) + " is not in the ledger");
  return it->second;
}

std::vector<std::size_t> NeuronLedger::original_indices(std::size_t layer) const {
  const auto& e = entry(layer);
  std::vector<std::size_t> out(e.original_width);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
  return out;
}

std::vector<std::size_t> NeuronLedger::added_indices(std::size_t layer) const {
  const auto& e = entry(layer);
  std::vector<std::size_t> out;
  for (std::size_t i = e.original_width; i < e.width; ++i) out.push_back(i);
  return out;
}

std::vector<SliceRecord> NeuronLedger::added_slices() const {
  std::vector<SliceRecord> out;
  for (const auto& ev : events_) out.insert(out.end(), ev.slices.begin(), ev.slices.end());
  return out;
}

std::set<ParamId> NeuronLedger::added_params() const {
  std::set<ParamId> out;
  for (const auto& ev : events_)
    for (const auto& s : ev.slices) out.insert(s.param);
  return out;
}

std::size_t NeuronLedger::added_elements() const {
  std::size_t n = 0;
  for (const auto& ev : events_)
    for (const auto& s : ev.slices) n += s.elements;
  return n;
}

void NeuronLedger::record(DropinEvent event, std::size_t new_width) {
  auto it = layers_.find(event.layer);
  if (it == layers_.end()) throw Error(ErrorKind::kArgument, "layer " + std::to_string(event.layer) + " is not in the ledger");
  it->second.width = new_width;
  events_.push_back(std::move(event));
}

void NeuronLedger::clear_added() {
  events_.clear();
  for (auto& [_, e] : layers_) e.width = e.original_width;
}

void NeuronLedger::check(const ModelGraph& model, const ParamStore& params) const {
  for (const auto& [index, e] : layers_) {
    if (index >= model.layers.size()) throw Error(ErrorKind::kState, "ledger refers to a missing layer");
    const auto& segs = segments_of(model.layers[index]);
    if (layer_name(model.layers[index]) != e.name || segs.at(0) != e.original_width || total_width(segs) != e.width) {
      throw Error(ErrorKind::kState, "ledger entry for layer '" + e.name + "' disagrees with the model");
    }
  }
  const auto shapes = model.param_shapes();
  for (const auto& ev : events_) {
    for (const auto& s : ev.slices) {
      if (!params.contains(s.param)) throw Error(ErrorKind::kState, "ledger slice '" + s.param + "' is not in the store");
      if (params.get(s.param).size() != s.elements) {
        throw Error(ErrorKind::kState, "ledger slice '" + s.param + "' has the wrong size");
      }
      if (!shapes.count(s.param)) throw Error(ErrorKind::kState, "ledger slice '" + s.param + "' is not in the model");
    }
  }
}

// ---------------------------------------------------------------------------
// Selection

std::vector<std::size_t> select_layers(const ModelGraph& model, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> pool = model.expandable_layers();
  if (count < 1 || count > pool.size()) {
    throw Error(ErrorKind::kArgument, "cannot select " + std::to_string(count) + " of " +
                                          std::to_string(pool.size()) + " expandable layers");
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  std::sort(pool.begin(), pool.end());
  return pool;
}

// ---------------------------------------------------------------------------
// Dropin

namespace {

double head_sigma(const ModelGraph& model) { return 1.0 / std::sqrt(static_cast<double>(model.head.in_dim())); }

// Expands one layer of `model`/`params` in place and returns the event.
DropinEvent expand_layer(ModelGraph& model, ParamStore& params, std::size_t index, const DropinPlan& plan, Rng& rng) {
  if (!model.expandable(index)) {
    throw Error(ErrorKind::kArgument, "layer " + std::to_string(index) + " is not expandable");
  }
  const auto before = model.param_shapes();
  Layer& layer = model.layers[index];
  auto& segs = segments_of(layer);
  const std::size_t width = total_width(segs);
  const auto added = static_cast<std::size_t>(std::llround(plan.growth_ratio * static_cast<double>(width)));
  if (!(plan.growth_ratio > 0.0) || added < 1) {
    throw Error(ErrorKind::kArgument, "growth ratio " + std::to_string(plan.growth_ratio) + " adds no neurons to layer '" +
                                          layer_name(layer) + "'");
  }

  DropinEvent ev;
  ev.layer = index;
  ev.segment = segs.size();
  ev.added = added;
  ev.consumer = model.consumer_of(index);
  const bool attention = std::holds_alternative<AttentionBlock>(layer);
  if (attention) ev.consumer.reset();
  if (auto* b = std::get_if<AttentionBlock>(&layer); b && plan.attention_scale) {
    ev.previous_scale_mode = b->scale_mode;
    b->scale_mode = *plan.attention_scale;
  }
  segs.push_back(added);
  model.infer();

  const auto after = model.param_shapes();
  const auto own = model.in_layer_params(index);
  const std::set<ParamId> own_set(own.begin(), own.end());
  const double layer_sigma = plan.init_sigma.value_or(default_init_sigma(model, index));
  double consumer_sigma = head_sigma(model);
  if (ev.consumer) consumer_sigma = default_init_sigma(model, *ev.consumer);
  if (plan.init_sigma) consumer_sigma = *plan.init_sigma;

  const auto& own_segs = segments_of(model.layers[index]);
  for (const auto& [id, shape] : after) {
    if (before.count(id)) continue;
    SliceRecord rec;
    rec.param = id;
    rec.elements = shape_size(shape);
    rec.in_layer = own_set.count(id) != 0;
    const BlockName bn = parse_block(id);
    rec.logical = bn.base;
    if (rec.in_layer) {
      const bool out_projection = attention && bn.base.ends_with(".out");
      if (out_projection) {
        rec.axis = 1;
        rec.range = {offset_of(own_segs, bn.first), offset_of(own_segs, bn.first) + own_segs[bn.first]};
      } else if (bn.first == ev.segment) {
        rec.axis = 0;
        rec.range = {offset_of(own_segs, ev.segment), offset_of(own_segs, ev.segment) + added};
      } else {
        // New column of a recurrent matrix: block (old row, new col).
        rec.axis = 1;
        rec.range = {offset_of(own_segs, bn.second), offset_of(own_segs, bn.second) + own_segs[bn.second]};
      }
    } else {
      // Consumer input columns; Flatten may widen each neuron into H*W columns.
      const std::vector<std::size_t>* in = nullptr;
      if (ev.consumer) {
        std::visit(
            [&](const auto& l) {
              if constexpr (requires { l.in_segments; }) in = &l.in_segments;
            },
            model.layers[*ev.consumer]);
      } else {
        in = &model.head.in_segments;
      }
      if (!in) throw Error(ErrorKind::kState, "consumer of layer " + std::to_string(index) + " has no inputs");
      rec.axis = 1;
      rec.range = {offset_of(*in, bn.second), offset_of(*in, bn.second) + (*in)[bn.second]};
    }

    double sigma = rec.in_layer ? layer_sigma : consumer_sigma;
    if (!plan.init_sigma && is_bias_name(bn.base)) sigma = 0.0;
    Tensor t(shape, 0.0);
    for (double& v : t.data()) v = normal(rng, sigma);
    params.add(id, std::move(t), true);
    ev.slices.push_back(std::move(rec));
  }
  return ev;
}

}  // namespace

void dropin(ModelGraph& model, ParamStore& params, NeuronLedger& ledger, const DropinPlan& plan) {
  if (plan.selected_layers.empty()) throw Error(ErrorKind::kArgument, "dropin plan selects no layers");
  if (plan.init_sigma && !(*plan.init_sigma >= 0.0)) throw Error(ErrorKind::kArgument, "init_sigma must be >= 0");
  std::set<std::size_t> unique(plan.selected_layers.begin(), plan.selected_layers.end());
  if (unique.size() != plan.selected_layers.size()) throw Error(ErrorKind::kArgument, "dropin plan repeats a layer");
  ledger.check(model, params);

  ModelGraph m = model;
  ParamStore p = params;
  NeuronLedger l = ledger;
  Rng rng(plan.rng_seed);
  for (std::size_t index : unique) {
    if (index >= m.layers.size() || !m.expandable(index)) {
      throw Error(ErrorKind::kArgument, "layer " + std::to_string(index) + " is not expandable");
    }
    DropinEvent ev = expand_layer(m, p, index, plan, rng);
    const std::size_t width = total_width(segments_of(m.layers[index]));
    l.record(std::move(ev), width);
  }
  model = std::move(m);
  params = std::move(p);
  ledger = std::move(l);
}

void apply_freeze(ParamStore& params, const NeuronLedger& ledger, FreezePolicy policy,
                  const std::set<ParamId>& extra_trainable) {
  if (policy == FreezePolicy::kUnfrozen) {
    params.set_all_trainable(true);
    return;
  }
  if (ledger.empty()) throw Error(ErrorKind::kState, "frozen policy needs at least one dropin in the ledger");
  std::set<ParamId> ids = ledger.added_params();
  ids.insert(extra_trainable.begin(), extra_trainable.end());
  params.set_trainable_only(ids);
}

void prune(ModelGraph& model, ParamStore& params, NeuronLedger& ledger) {
  if (ledger.empty()) throw Error(ErrorKind::kState, "nothing to prune: the ledger has no added neurons");
  ledger.check(model, params);
  ModelGraph m = model;
  ParamStore p = params;
  for (auto it = ledger.events().rbegin(); it != ledger.events().rend(); ++it) {
    auto& segs = segments_of(m.layers[it->layer]);
    if (segs.size() != it->segment + 1) throw Error(ErrorKind::kState, "ledger events out of order for pruning");
    segs.pop_back();
    if (it->previous_scale_mode) std::get<AttentionBlock>(m.layers[it->layer]).scale_mode = *it->previous_scale_mode;
    for (const auto& s : it->slices) p.erase(s.param);
  }
  m.infer();
  validate_params(m, p);
  const auto shapes = m.param_shapes();
  for (const auto& [id, _] : p.entries()) {
    if (!shapes.count(id)) throw Error(ErrorKind::kState, "parameter '" + id + "' survives pruning but is not in the model");
  }
  model = std::move(m);
  params = std::move(p);
  ledger.clear_added();
}

std::size_t param_count(const ParamStore& params, bool trainable_only) { return params.element_count(trainable_only); }

// ---------------------------------------------------------------------------
// LoRA

std::vector<ParamId> lora_default_targets(const ModelGraph& model) {
  std::vector<ParamId> out;
  for (const auto& layer : model.layers) {
    if (std::holds_alternative<Conv2dLayer>(layer)) continue;
    const bool attention = std::holds_alternative<AttentionBlock>(layer);
    for (const auto& [id, shape] : model.param_shapes()) {
      if (shape.size() != 2 || !id.starts_with(layer_name(layer) + ".")) continue;
      if (id.find(".lora_") != std::string::npos) continue;
      if (attention && id.find(".ffn") != std::string::npos) continue;
      out.push_back(id);
    }
  }
  for (std::size_t c = 0; c < model.head.in_segments.size(); ++c) out.push_back(block_id("head.weight", 0, c));
  return out;
}

std::vector<LoraAdapter> lora_wrap(ModelGraph& model, ParamStore& params, const std::vector<ParamId>& targets,
                                   std::size_t rank, double alpha, std::uint64_t seed) {
  if (targets.empty()) throw Error(ErrorKind::kArgument, "lora_wrap needs at least one target");
  if (rank < 1) throw Error(ErrorKind::kArgument, "LoRA rank must be >= 1");
  std::vector<LoraAdapter> created;
  std::set<ParamId> seen;
  for (const auto& id : targets) {
    if (!seen.insert(id).second) throw Error(ErrorKind::kArgument, "LoRA target '" + id + "' listed twice");
    const Tensor& w = params.get(id);
    if (w.rank() != 2) throw Error(ErrorKind::kArgument, "LoRA target '" + id + "' is not a 2-D weight");
    if (model.adapter_for(id)) throw Error(ErrorKind::kArgument, "'" + id + "' already has an adapter");
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    if (rank > std::min(rows, cols)) {
      throw Error(ErrorKind::kArgument, "LoRA rank " + std::to_string(rank) + " exceeds min(" + std::to_string(rows) +
                                            "," + std::to_string(cols) + ") for '" + id + "'");
    }
    created.push_back(LoraAdapter{id, rows, cols, rank, alpha});
  }
  ParamStore p = params;
  std::set<ParamId> trainable;
  for (const auto& a : created) {
    Rng rng(derive_seed(seed, a.target));
    Tensor factor_a({a.rank, a.cols});
    const double sigma = 1.0 / std::sqrt(static_cast<double>(a.cols));
    for (double& v : factor_a.data()) v = normal(rng, sigma);
    p.add(a.a_id(), std::move(factor_a));
    p.add(a.b_id(), Tensor({a.rows, a.rank}, 0.0));
    trainable.insert(a.a_id());
    trainable.insert(a.b_id());
  }
  for (const auto& a : model.adapters) {
    trainable.insert(a.a_id());
    trainable.insert(a.b_id());
  }
  p.set_trainable_only(trainable);
  model.adapters.insert(model.adapters.end(), created.begin(), created.end());
  params = std::move(p);
  return created;
}

}  // namespace dropin
