// SPDX-License-Identifier: Apache-2.0

#include "dropin/serialize.hpp"

#include "dropin/error.hpp"

namespace dropin {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

template <class T>
T field(const Json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorKind::kConfig, std::string("missing key '") + key + "' in serialized model");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::kConfig, std::string("key '") + key + "' has the wrong type in serialized model");
  }
}

}  // namespace

std::string to_string(ScaleMode mode) { return mode == ScaleMode::kOriginal ? "original" : "expanded"; }

ScaleMode scale_mode_from_string(const std::string& s) {
  if (s == "original") return ScaleMode::kOriginal;
  if (s == "expanded") return ScaleMode::kExpanded;
  throw Error(ErrorKind::kConfig, "scale mode must be 'original' or 'expanded', got '" + s + "'");
}

std::string to_string(Activation act) { return act == Activation::kRelu ? "relu" : "none"; }

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "none") return Activation::kNone;
  throw Error(ErrorKind::kConfig, "activation must be 'relu' or 'none', got '" + s + "'");
}

Json model_to_json(const ModelGraph& model) {
  Json layers = Json::array();
  for (const auto& layer : model.layers) {
    Json l{{"type", layer_type(layer)}, {"name", layer_name(layer)}};
    std::visit(Overloaded{
                   [&](const DenseLayer& d) {
                     l["segments"] = d.segments;
                     l["activation"] = to_string(d.activation);
                   },
                   [&](const Conv2dLayer& c) {
                     l["segments"] = c.segments;
                     l["kernel_h"] = c.kernel_h;
                     l["kernel_w"] = c.kernel_w;
                     l["stride"] = c.stride;
                     l["padding"] = c.padding;
                     l["activation"] = to_string(c.activation);
                   },
                   [&](const GruLayer& g) {
                     l["segments"] = g.segments;
                     l["return_sequences"] = g.return_sequences;
                   },
                   [&](const AttentionBlock& b) {
                     l["segments"] = b.segments;
                     l["num_heads"] = b.num_heads;
                     l["ffn_dim"] = b.ffn_dim;
                     l["scale_mode"] = to_string(b.scale_mode);
                   },
                   [](const auto&) {},
               },
               layer);
    layers.push_back(std::move(l));
  }
  Json adapters = Json::array();
  for (const auto& a : model.adapters) {
    adapters.push_back({{"target", a.target}, {"rows", a.rows}, {"cols", a.cols}, {"rank", a.rank}, {"alpha", a.alpha}});
  }
  return Json{{"name", model.name},
              {"input_kind", model.input_kind == InputKind::kImage ? "image" : "sequence"},
              {"input_shape", model.input_shape},
              {"num_classes", model.head.out_dim()},
              {"layers", std::move(layers)},
              {"adapters", std::move(adapters)}};
}

ModelGraph model_from_json(const Json& j) {
  const auto kind_name = field<std::string>(j, "input_kind");
  if (kind_name != "image" && kind_name != "sequence") {
    throw Error(ErrorKind::kConfig, "input_kind must be 'image' or 'sequence'");
  }
  std::vector<Layer> layers;
  for (const auto& l : field<Json>(j, "layers")) {
    const auto type = field<std::string>(l, "type");
    const auto name = field<std::string>(l, "name");
    if (type == "dense") {
      DenseLayer d;
      d.name = name;
      d.segments = field<std::vector<std::size_t>>(l, "segments");
      d.activation = activation_from_string(field<std::string>(l, "activation"));
      layers.emplace_back(std::move(d));
    } else if (type == "conv2d") {
      Conv2dLayer c;
      c.name = name;
      c.segments = field<std::vector<std::size_t>>(l, "segments");
      c.kernel_h = field<std::size_t>(l, "kernel_h");
      c.kernel_w = field<std::size_t>(l, "kernel_w");
      c.stride = field<std::size_t>(l, "stride");
      c.padding = field<std::size_t>(l, "padding");
      c.activation = activation_from_string(field<std::string>(l, "activation"));
      layers.emplace_back(std::move(c));
    } else if (type == "gru") {
      GruLayer g;
      g.name = name;
      g.segments = field<std::vector<std::size_t>>(l, "segments");
      g.return_sequences = field<bool>(l, "return_sequences");
      layers.emplace_back(std::move(g));
    } else if (type == "attention") {
      AttentionBlock b;
      b.name = name;
      b.segments = field<std::vector<std::size_t>>(l, "segments");
      b.num_heads = field<std::size_t>(l, "num_heads");
      b.ffn_dim = field<std::size_t>(l, "ffn_dim");
      b.scale_mode = scale_mode_from_string(field<std::string>(l, "scale_mode"));
      layers.emplace_back(std::move(b));
    } else if (type == "flatten") {
      layers.emplace_back(FlattenLayer{name});
    } else if (type == "global_avg_pool") {
      layers.emplace_back(GlobalAvgPoolLayer{name});
    } else if (type == "time_mean_pool") {
      layers.emplace_back(TimeMeanPoolLayer{name});
    } else {
      throw Error(ErrorKind::kConfig, "unknown layer type '" + type + "'");
    }
  }
  ModelGraph model(field<std::string>(j, "name"), kind_name == "image" ? InputKind::kImage : InputKind::kSequence,
                   field<Shape>(j, "input_shape"), std::move(layers), field<std::size_t>(j, "num_classes"));
  if (j.contains("adapters")) {
    for (const auto& a : j.at("adapters")) {
      model.adapters.push_back(LoraAdapter{field<std::string>(a, "target"), field<std::size_t>(a, "rows"),
                                           field<std::size_t>(a, "cols"), field<std::size_t>(a, "rank"),
                                           field<double>(a, "alpha")});
    }
  }
  return model;
}

Json ledger_to_json(const NeuronLedger& ledger) {
  Json layers = Json::array();
  for (const auto& [index, e] : ledger.layers()) {
    layers.push_back({{"layer", index}, {"name", e.name}, {"original_width", e.original_width}, {"width", e.width}});
  }
  Json events = Json::array();
  for (const auto& ev : ledger.events()) {
    Json slices = Json::array();
    for (const auto& s : ev.slices) {
      slices.push_back({{"param", s.param},
                        {"logical", s.logical},
                        {"axis", s.axis},
                        {"begin", s.range.begin},
                        {"end", s.range.end},
                        {"elements", s.elements},
                        {"in_layer", s.in_layer}});
    }
    Json e{{"layer", ev.layer}, {"segment", ev.segment}, {"added", ev.added}, {"slices", std::move(slices)}};
    e["consumer"] = ev.consumer ? Json(*ev.consumer) : Json(nullptr);
    e["previous_scale_mode"] = ev.previous_scale_mode ? Json(to_string(*ev.previous_scale_mode)) : Json(nullptr);
    events.push_back(std::move(e));
  }
  return Json{{"layers", std::move(layers)}, {"events", std::move(events)}};
}

NeuronLedger ledger_from_json(const Json& j) {
  NeuronLedger ledger;
  for (const auto& l : field<Json>(j, "layers")) {
    ledger.mutable_layers()[field<std::size_t>(l, "layer")] = NeuronLedger::LayerEntry{
        field<std::string>(l, "name"), field<std::size_t>(l, "original_width"), field<std::size_t>(l, "width")};
  }
  for (const auto& e : field<Json>(j, "events")) {
    DropinEvent ev;
    ev.layer = field<std::size_t>(e, "layer");
    ev.segment = field<std::size_t>(e, "segment");
    ev.added = field<std::size_t>(e, "added");
    if (e.contains("consumer") && !e.at("consumer").is_null()) ev.consumer = e.at("consumer").get<std::size_t>();
    if (e.contains("previous_scale_mode") && !e.at("previous_scale_mode").is_null()) {
      ev.previous_scale_mode = scale_mode_from_string(e.at("previous_scale_mode").get<std::string>());
    }
    for (const auto& s : field<Json>(e, "slices")) {
      ev.slices.push_back(SliceRecord{field<std::string>(s, "param"), field<std::string>(s, "logical"),
                                      field<int>(s, "axis"),
                                      IndexRange{field<std::size_t>(s, "begin"), field<std::size_t>(s, "end")},
                                      field<std::size_t>(s, "elements"), field<bool>(s, "in_layer")});
    }
    ledger.mutable_events().push_back(std::move(ev));
  }
  return ledger;
}

}  // namespace dropin
