// SPDX-License-Identifier: Apache-2.0

#include "dropin/layers.hpp"

#include <cmath>
#include <numeric>
#include <set>

#include "dropin/error.hpp"
#include "dropin/rng.hpp"

namespace dropin {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

const char* kGates[3] = {"z", "r", "h"};

}  // namespace

std::size_t total_width(const std::vector<std::size_t>& segments) {
  return std::accumulate(segments.begin(), segments.end(), std::size_t{0});
}

ParamId block_id(const std::string& base, std::size_t row_segment, std::size_t col_segment) {
  if (row_segment == 0 && col_segment == 0) return base;
  return base + "[" + std::to_string(row_segment) + "," + std::to_string(col_segment) + "]";
}

ParamId segment_id(const std::string& base, std::size_t segment) {
  if (segment == 0) return base;
  return base + "[" + std::to_string(segment) + "]";
}

const std::string& layer_name(const Layer& layer) {
  return std::visit([](const auto& l) -> const std::string& { return l.name; }, layer);
}

std::string layer_type(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const DenseLayer&) { return std::string("dense"); },
                        [](const Conv2dLayer&) { return std::string("conv2d"); },
                        [](const GruLayer&) { return std::string("gru"); },
                        [](const AttentionBlock&) { return std::string("attention"); },
                        [](const FlattenLayer&) { return std::string("flatten"); },
                        [](const GlobalAvgPoolLayer&) { return std::string("global_avg_pool"); },
                        [](const TimeMeanPoolLayer&) { return std::string("time_mean_pool"); },
                    },
                    layer);
}

bool is_parametric(const Layer& layer) {
  return std::holds_alternative<DenseLayer>(layer) || std::holds_alternative<Conv2dLayer>(layer) ||
         std::holds_alternative<GruLayer>(layer) || std::holds_alternative<AttentionBlock>(layer);
}

Layer make_dense(std::string name, std::size_t units, Activation act) {
  DenseLayer l;
  l.name = std::move(name);
  l.segments = {units};
  l.activation = act;
  return l;
}

Layer make_conv2d(std::string name, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                  std::size_t padding, Activation act) {
  Conv2dLayer l;
  l.name = std::move(name);
  l.segments = {out_channels};
  l.kernel_h = l.kernel_w = kernel;
  l.stride = stride;
  l.padding = padding;
  l.activation = act;
  return l;
}

Layer make_gru(std::string name, std::size_t hidden, bool return_sequences) {
  GruLayer l;
  l.name = std::move(name);
  l.segments = {hidden};
  l.return_sequences = return_sequences;
  return l;
}

Layer make_attention(std::string name, std::size_t num_heads, std::size_t head_dim, std::size_t ffn_dim,
                     ScaleMode mode) {
  AttentionBlock b;
  b.name = std::move(name);
  b.segments = {head_dim};
  b.num_heads = num_heads;
  b.ffn_dim = ffn_dim;
  b.scale_mode = mode;
  return b;
}

Layer make_flatten(std::string name) { return FlattenLayer{std::move(name)}; }
Layer make_global_avg_pool(std::string name) { return GlobalAvgPoolLayer{std::move(name)}; }
Layer make_time_mean_pool(std::string name) { return TimeMeanPoolLayer{std::move(name)}; }

// ---------------------------------------------------------------------------
// ModelGraph

ModelGraph::ModelGraph(std::string model_name, InputKind kind, Shape shape, std::vector<Layer> model_layers,
                       std::size_t num_classes)
    : name(std::move(model_name)), input_kind(kind), input_shape(std::move(shape)), layers(std::move(model_layers)) {
  head.name = "head";
  head.segments = {num_classes};
  head.activation = Activation::kNone;
  infer();
}

namespace {

enum class FlowKind { kImage, kVector, kSequence };

const char* flow_name(FlowKind k) {
  switch (k) {
    case FlowKind::kImage: return "image";
    case FlowKind::kVector: return "vector";
    case FlowKind::kSequence: return "sequence";
  }
  return "?";
}

struct FlowShape {
  FlowKind kind;
  std::vector<std::size_t> segments;
  std::size_t h = 0, w = 0, t = 0;
};

void check_segments(const std::string& name, const std::vector<std::size_t>& segs) {
  if (segs.empty()) throw Error(ErrorKind::kShape, "layer '" + name + "' has no neurons");
  for (auto s : segs) {
    if (s == 0) throw Error(ErrorKind::kShape, "layer '" + name + "' has an empty neuron segment");
  }
}

}  // namespace

void ModelGraph::infer() {
  if (layers.empty()) throw Error(ErrorKind::kShape, "model must have at least one layer");
  FlowShape flow;
  if (input_kind == InputKind::kImage) {
    if (input_shape.size() != 3) throw Error(ErrorKind::kShape, "image input shape must be (C,H,W)");
    flow = {FlowKind::kImage, {input_shape[0]}, input_shape[1], input_shape[2], 0};
  } else {
    if (input_shape.size() != 2) throw Error(ErrorKind::kShape, "sequence input shape must be (T,F)");
    flow = {FlowKind::kSequence, {input_shape[1]}, 0, 0, input_shape[0]};
  }
  for (auto d : input_shape) {
    if (d == 0) throw Error(ErrorKind::kShape, "input dimensions must be positive");
  }

  std::set<std::string> names{"head"};
  for (auto& layer : layers) {
    const std::string lname = layer_name(layer);
    if (lname.empty() || !names.insert(lname).second) {
      throw Error(ErrorKind::kShape, "layer names must be unique and non-empty ('" + lname + "')");
    }
    auto require = [&](FlowKind k) {
      if (flow.kind != k) {
        throw Error(ErrorKind::kShape, "layer '" + lname + "' (" + layer_type(layer) + ") expects " + flow_name(k) +
                                           " input but receives " + flow_name(flow.kind));
      }
    };
    std::visit(Overloaded{
                   [&](DenseLayer& l) {
                     require(FlowKind::kVector);
                     check_segments(l.name, l.segments);
                     l.in_segments = flow.segments;
                     flow.segments = l.segments;
                   },
                   [&](Conv2dLayer& l) {
                     require(FlowKind::kImage);
                     check_segments(l.name, l.segments);
                     if (l.stride == 0 || l.kernel_h == 0 || l.kernel_w == 0) {
                       throw Error(ErrorKind::kShape, "conv layer '" + l.name + "' needs positive kernel and stride");
                     }
                     if (flow.h + 2 * l.padding < l.kernel_h || flow.w + 2 * l.padding < l.kernel_w) {
                       throw Error(ErrorKind::kShape, "conv layer '" + l.name + "' kernel exceeds padded input");
                     }
                     l.in_segments = flow.segments;
                     flow.h = (flow.h + 2 * l.padding - l.kernel_h) / l.stride + 1;
                     flow.w = (flow.w + 2 * l.padding - l.kernel_w) / l.stride + 1;
                     flow.segments = l.segments;
                   },
                   [&](GruLayer& l) {
                     require(FlowKind::kSequence);
                     check_segments(l.name, l.segments);
                     l.in_segments = flow.segments;
                     flow.segments = l.segments;
                     if (!l.return_sequences) flow.kind = FlowKind::kVector;
                   },
                   [&](AttentionBlock& b) {
                     require(FlowKind::kSequence);
                     check_segments(b.name, b.segments);
                     if (flow.segments.size() != 1) {
                       throw Error(ErrorKind::kShape, "attention block '" + b.name +
                                                          "' needs an unsegmented input (its residual width is fixed)");
                     }
                     if (b.num_heads == 0 || b.ffn_dim == 0) {
                       throw Error(ErrorKind::kShape, "attention block '" + b.name + "' needs heads and ffn_dim > 0");
                     }
                     b.model_dim = flow.segments[0];
                   },
                   [&](FlattenLayer&) {
                     require(FlowKind::kImage);
                     for (auto& s : flow.segments) s *= flow.h * flow.w;
                     flow.kind = FlowKind::kVector;
                   },
                   [&](GlobalAvgPoolLayer&) {
                     require(FlowKind::kImage);
                     flow.kind = FlowKind::kVector;
                   },
                   [&](TimeMeanPoolLayer&) {
                     require(FlowKind::kSequence);
                     flow.kind = FlowKind::kVector;
                   },
               },
               layer);
  }
  if (flow.kind != FlowKind::kVector) {
    throw Error(ErrorKind::kShape, std::string("classifier head needs vector input, model ends with ") +
                                       flow_name(flow.kind) + " output");
  }
  check_segments(head.name, head.segments);
  if (head.segments.size() != 1) throw Error(ErrorKind::kShape, "the classifier head is not expandable");
  head.in_segments = flow.segments;
}

std::optional<std::size_t> ModelGraph::consumer_of(std::size_t index) const {
  for (std::size_t j = index + 1; j < layers.size(); ++j) {
    if (is_parametric(layers[j])) return j;
  }
  return std::nullopt;
}

bool ModelGraph::expandable(std::size_t index) const {
  if (index >= layers.size() || !is_parametric(layers[index])) return false;
  if (std::holds_alternative<AttentionBlock>(layers[index])) return true;
  auto consumer = consumer_of(index);
  return !(consumer && std::holds_alternative<AttentionBlock>(layers[*consumer]));
}

std::vector<std::size_t> ModelGraph::expandable_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (expandable(i)) out.push_back(i);
  }
  return out;
}

namespace {

void add_dense_shapes(const std::string& name, const std::vector<std::size_t>& segs,
                      const std::vector<std::size_t>& in, std::map<ParamId, Shape>& out) {
  for (std::size_t r = 0; r < segs.size(); ++r) {
    for (std::size_t c = 0; c < in.size(); ++c) out[block_id(name + ".weight", r, c)] = {segs[r], in[c]};
    out[segment_id(name + ".bias", r)] = {segs[r]};
  }
}

std::map<ParamId, Shape> layer_shapes(const Layer& layer) {
  std::map<ParamId, Shape> out;
  std::visit(Overloaded{
                 [&](const DenseLayer& l) { add_dense_shapes(l.name, l.segments, l.in_segments, out); },
                 [&](const Conv2dLayer& l) {
                   for (std::size_t r = 0; r < l.segments.size(); ++r) {
                     for (std::size_t c = 0; c < l.in_segments.size(); ++c) {
                       out[block_id(l.name + ".weight", r, c)] = {l.segments[r], l.in_segments[c], l.kernel_h,
                                                                  l.kernel_w};
                     }
                     out[segment_id(l.name + ".bias", r)] = {l.segments[r]};
                   }
                 },
                 [&](const GruLayer& l) {
                   for (const char* g : kGates) {
                     const std::string gate(g);
                     for (std::size_t r = 0; r < l.segments.size(); ++r) {
                       for (std::size_t c = 0; c < l.in_segments.size(); ++c) {
                         out[block_id(l.name + ".w_" + gate, r, c)] = {l.segments[r], l.in_segments[c]};
                       }
                       for (std::size_t c = 0; c < l.segments.size(); ++c) {
                         out[block_id(l.name + ".u_" + gate, r, c)] = {l.segments[r], l.segments[c]};
                       }
                       out[segment_id(l.name + ".b_" + gate, r)] = {l.segments[r]};
                     }
                   }
                 },
                 [&](const AttentionBlock& b) {
                   for (std::size_t h = 0; h < b.num_heads; ++h) {
                     const std::string hp = b.name + ".h" + std::to_string(h);
                     for (std::size_t s = 0; s < b.segments.size(); ++s) {
                       out[segment_id(hp + ".query", s)] = {b.segments[s], b.model_dim};
                       out[segment_id(hp + ".key", s)] = {b.segments[s], b.model_dim};
                       out[segment_id(hp + ".value", s)] = {b.segments[s], b.model_dim};
                       out[segment_id(hp + ".out", s)] = {b.model_dim, b.segments[s]};
                     }
                   }
                   out[b.name + ".ffn1.weight"] = {b.ffn_dim, b.model_dim};
                   out[b.name + ".ffn1.bias"] = {b.ffn_dim};
                   out[b.name + ".ffn2.weight"] = {b.model_dim, b.ffn_dim};
                   out[b.name + ".ffn2.bias"] = {b.model_dim};
                 },
                 [](const auto&) {},
             },
             layer);
  return out;
}

}  // namespace

std::map<ParamId, Shape> ModelGraph::param_shapes() const {
  std::map<ParamId, Shape> out;
  for (const auto& layer : layers) out.merge(layer_shapes(layer));
  add_dense_shapes(head.name, head.segments, head.in_segments, out);
  for (const auto& a : adapters) {
    out[a.a_id()] = {a.rank, a.cols};
    out[a.b_id()] = {a.rows, a.rank};
  }
  return out;
}

std::vector<ParamId> ModelGraph::in_layer_params(std::size_t index) const {
  std::vector<ParamId> ids;
  const Layer& layer = layers.at(index);
  const bool attention = std::holds_alternative<AttentionBlock>(layer);
  for (const auto& [id, shape] : layer_shapes(layer)) {
    if (attention && id.find(".ffn") != std::string::npos) continue;  // FFN sublayer is not head_dim-shaped
    ids.push_back(id);
  }
  return ids;
}

std::size_t ModelGraph::in_layer_param_count(std::size_t index) const {
  const auto shapes = layer_shapes(layers.at(index));
  std::size_t n = 0;
  for (const auto& id : in_layer_params(index)) n += shape_size(shapes.at(id));
  return n;
}

const LoraAdapter* ModelGraph::adapter_for(const ParamId& id) const {
  for (const auto& a : adapters) {
    if (a.target == id) return &a;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// Initialisation

double default_init_sigma(const ModelGraph& model, std::size_t layer_index) {
  const Layer& layer = model.layers.at(layer_index);
  return std::visit(Overloaded{
                        [](const DenseLayer& l) { return std::sqrt(2.0 / static_cast<double>(l.in_dim())); },
                        [](const Conv2dLayer& l) {
                          return std::sqrt(2.0 / static_cast<double>(l.in_channels() * l.kernel_h * l.kernel_w));
                        },
                        [](const GruLayer& l) { return 1.0 / std::sqrt(static_cast<double>(l.hidden_dim())); },
                        [](const AttentionBlock& b) { return 1.0 / std::sqrt(static_cast<double>(b.model_dim)); },
                        [](const auto&) { return 0.0; },
                    },
                    layer);
}

namespace {

bool is_bias(const ParamId& id) {
  return id.find(".bias") != std::string::npos || id.find(".b_") != std::string::npos;
}

}  // namespace

ParamStore init_params(const ModelGraph& model, std::uint64_t seed) {
  std::map<ParamId, double> sigma;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const double s = default_init_sigma(model, i);
    for (const auto& [id, shape] : layer_shapes(model.layers[i])) sigma[id] = s;
    if (const auto* b = std::get_if<AttentionBlock>(&model.layers[i])) {
      sigma[b->name + ".ffn1.weight"] = std::sqrt(2.0 / static_cast<double>(b->model_dim));
      sigma[b->name + ".ffn2.weight"] = 1.0 / std::sqrt(static_cast<double>(b->ffn_dim));
    }
  }
  const double head_sigma = 1.0 / std::sqrt(static_cast<double>(model.head.in_dim()));
  ParamStore params;
  for (const auto& [id, shape] : model.param_shapes()) {
    double s = sigma.count(id) ? sigma[id] : head_sigma;
    if (is_bias(id)) s = 0.0;
    Tensor t(shape, 0.0);
    const auto* adapter_b = [&]() -> const LoraAdapter* {
      for (const auto& a : model.adapters)
        if (a.b_id() == id) return &a;
      return nullptr;
    }();
    if (adapter_b) s = 0.0;
    Rng rng(derive_seed(seed, id));
    for (double& v : t.data()) v = normal(rng, s);
    params.add(id, std::move(t));
  }
  return params;
}

void validate_params(const ModelGraph& model, const ParamStore& params) {
  for (const auto& [id, shape] : model.param_shapes()) {
    if (!params.contains(id)) throw Error(ErrorKind::kArgument, "missing parameter '" + id + "'");
    if (params.get(id).shape() != shape) {
      throw Error(ErrorKind::kShape, "parameter '" + id + "' has shape " + shape_str(params.get(id).shape()) +
                                         ", architecture requires " + shape_str(shape));
    }
  }
}

// ---------------------------------------------------------------------------
// Lowering to a graph

namespace {

class Emitter {
 public:
  Emitter(Graph& g, const ModelGraph* model) : g_(g), model_(model) {}

  NodeId weight(const ParamId& id) {
    NodeId w = g_.param(id);
    const LoraAdapter* a = model_ ? model_->adapter_for(id) : nullptr;
    if (!a) return w;
    NodeId ba = g_.matmul(g_.param(a->b_id()), g_.param(a->a_id()), false, false, id + ".lora_ba");
    return g_.add(w, g_.scale(ba, a->scaling()), id + ".effective");
  }

  // x_c: (B, in_c) -> y_r: (B, out_r)
  std::vector<NodeId> dense(const DenseLayer& l, const std::vector<NodeId>& x) {
    check_count(l.name, x, l.in_segments.size());
    std::vector<NodeId> out;
    for (std::size_t r = 0; r < l.segments.size(); ++r) {
      std::vector<NodeId> terms;
      for (std::size_t c = 0; c < x.size(); ++c) {
        terms.push_back(g_.matmul(x[c], weight(block_id(l.name + ".weight", r, c)), false, true, l.name));
      }
      NodeId y = g_.add_bias(g_.add_all(terms, l.name), g_.param(segment_id(l.name + ".bias", r)), 1, l.name);
      if (l.activation == Activation::kRelu) y = g_.relu(y, l.name);
      out.push_back(y);
    }
    return out;
  }

  // x_c: (B, in_c, H, W) -> y_r: (B, out_r, H', W')
  std::vector<NodeId> conv(const Conv2dLayer& l, const std::vector<NodeId>& x) {
    check_count(l.name, x, l.in_segments.size());
    std::vector<NodeId> out;
    for (std::size_t r = 0; r < l.segments.size(); ++r) {
      std::vector<NodeId> terms;
      for (std::size_t c = 0; c < x.size(); ++c) {
        terms.push_back(g_.conv2d(x[c], g_.param(block_id(l.name + ".weight", r, c)), l.stride, l.padding, l.name));
      }
      NodeId y = g_.add_bias(g_.add_all(terms, l.name), g_.param(segment_id(l.name + ".bias", r)), 1, l.name);
      if (l.activation == Activation::kRelu) y = g_.relu(y, l.name);
      out.push_back(y);
    }
    return out;
  }

  // x_c: (B, T, in_c) -> final (B, h_r) or sequence (B, T, h_r)
  std::vector<NodeId> gru(const GruLayer& l, const std::vector<NodeId>& x, std::size_t batch, std::size_t steps) {
    check_count(l.name, x, l.in_segments.size());
    const std::size_t nseg = l.segments.size();
    std::vector<NodeId> flat;
    for (std::size_t c = 0; c < x.size(); ++c) {
      flat.push_back(g_.reshape(x[c], {batch * steps, l.in_segments[c]}, l.name));
    }
    // Input projections for all time steps at once: proj[g][r] is (B, T, h_r).
    std::vector<std::vector<NodeId>> proj(3);
    for (std::size_t gi = 0; gi < 3; ++gi) {
      const std::string gate(kGates[gi]);
      for (std::size_t r = 0; r < nseg; ++r) {
        std::vector<NodeId> terms;
        for (std::size_t c = 0; c < x.size(); ++c) {
          terms.push_back(g_.matmul(flat[c], weight(block_id(l.name + ".w_" + gate, r, c)), false, true, l.name));
        }
        NodeId p = g_.add_bias(g_.add_all(terms, l.name), g_.param(segment_id(l.name + ".b_" + gate, r)), 1, l.name);
        proj[gi].push_back(g_.reshape(p, {batch, steps, l.segments[r]}, l.name));
      }
    }
    auto at_step = [&](NodeId seq, std::size_t t, std::size_t width) {
      return g_.reshape(g_.slice(seq, 1, t, t + 1, l.name), {batch, width}, l.name);
    };
    auto recurrent = [&](const std::string& gate, std::size_t r, const std::vector<NodeId>& h) {
      std::vector<NodeId> terms;
      for (std::size_t c = 0; c < nseg; ++c) {
        terms.push_back(g_.matmul(h[c], weight(block_id(l.name + ".u_" + gate, r, c)), false, true, l.name));
      }
      return g_.add_all(terms, l.name);
    };

    std::vector<NodeId> h;  // empty = zero initial state
    std::vector<std::vector<NodeId>> history(nseg);
    for (std::size_t t = 0; t < steps; ++t) {
      std::vector<NodeId> z(nseg), reset(nseg), next(nseg);
      for (std::size_t r = 0; r < nseg; ++r) {
        NodeId zp = at_step(proj[0][r], t, l.segments[r]);
        if (!h.empty()) zp = g_.add(zp, recurrent("z", r, h), l.name);
        z[r] = g_.sigmoid(zp, l.name + ".z");
        if (!h.empty()) {
          NodeId rp = g_.add(at_step(proj[1][r], t, l.segments[r]), recurrent("r", r, h), l.name);
          reset[r] = g_.sigmoid(rp, l.name + ".r");
        }
      }
      std::vector<NodeId> gated;
      if (!h.empty()) {
        for (std::size_t c = 0; c < nseg; ++c) gated.push_back(g_.mul(reset[c], h[c], l.name));
      }
      for (std::size_t r = 0; r < nseg; ++r) {
        NodeId cp = at_step(proj[2][r], t, l.segments[r]);
        if (!h.empty()) cp = g_.add(cp, recurrent("h", r, gated), l.name);
        NodeId cand = g_.tanh(cp, l.name + ".candidate");
        NodeId update = g_.mul(z[r], cand, l.name);
        // With a zero previous state (1 - z) * h vanishes.
        next[r] = h.empty() ? update : g_.add(g_.mul(g_.affine(z[r], -1.0, 1.0, l.name), h[r], l.name), update, l.name);
        if (l.return_sequences) history[r].push_back(g_.reshape(next[r], {batch, 1, l.segments[r]}, l.name));
      }
      h = std::move(next);
    }
    if (!l.return_sequences) return h;
    std::vector<NodeId> seqs;
    for (std::size_t r = 0; r < nseg; ++r) seqs.push_back(g_.concat(history[r], 1, l.name));
    return seqs;
  }

  struct AttentionNodes {
    NodeId output;
    std::vector<NodeId> weights;  // per head, (B,T,T)
  };

  // x: (B, T, D) -> (B, T, D)
  AttentionNodes attention(const AttentionBlock& b, NodeId x, std::size_t batch, std::size_t steps) {
    const std::size_t rows = batch * steps;
    const std::size_t d = b.model_dim;
    const double temp = 1.0 / std::sqrt(static_cast<double>(b.scale_dim()));
    NodeId flat = g_.reshape(x, {rows, d}, b.name);
    AttentionNodes res{};
    std::vector<NodeId> contributions;
    for (std::size_t h = 0; h < b.num_heads; ++h) {
      const std::string hp = b.name + ".h" + std::to_string(h);
      std::vector<NodeId> scores, values;
      for (std::size_t s = 0; s < b.segments.size(); ++s) {
        const std::size_t w = b.segments[s];
        auto project = [&](const char* which) {
          NodeId p = g_.matmul(flat, weight(segment_id(hp + "." + which, s)), false, true, hp + "." + which);
          return g_.reshape(p, {batch, steps, w}, hp);
        };
        NodeId q = project("query");
        NodeId k = project("key");
        values.push_back(project("value"));
        scores.push_back(g_.matmul(q, k, false, true, hp + ".scores"));
      }
      NodeId attn = g_.softmax(g_.scale(g_.add_all(scores, hp), temp, hp), hp + ".softmax");
      res.weights.push_back(attn);
      for (std::size_t s = 0; s < b.segments.size(); ++s) {
        NodeId ctx = g_.reshape(g_.matmul(attn, values[s], false, false, hp + ".context"), {rows, b.segments[s]}, hp);
        contributions.push_back(g_.matmul(ctx, weight(segment_id(hp + ".out", s)), false, true, hp + ".out"));
      }
    }
    NodeId x1 = g_.add(flat, g_.add_all(contributions, b.name), b.name + ".residual");
    NodeId hidden = g_.relu(g_.add_bias(g_.matmul(x1, weight(b.name + ".ffn1.weight"), false, true, b.name + ".ffn1"),
                                        g_.param(b.name + ".ffn1.bias"), 1, b.name),
                            b.name);
    NodeId ffn = g_.add_bias(g_.matmul(hidden, weight(b.name + ".ffn2.weight"), false, true, b.name + ".ffn2"),
                             g_.param(b.name + ".ffn2.bias"), 1, b.name);
    res.output = g_.reshape(g_.add(x1, ffn, b.name), {batch, steps, d}, b.name);
    return res;
  }

 private:
  static void check_count(const std::string& name, const std::vector<NodeId>& x, std::size_t expected) {
    if (x.size() != expected) {
      throw Error(ErrorKind::kShape, "layer '" + name + "' expects " + std::to_string(expected) +
                                         " input segments, got " + std::to_string(x.size()));
    }
  }

  Graph& g_;
  const ModelGraph* model_;
};

// Slices a (B, ..., F) tensor node into segments along `axis`.
std::vector<NodeId> split_segments(Graph& g, NodeId x, std::size_t axis, const std::vector<std::size_t>& segs) {
  if (segs.size() == 1) return {x};
  std::vector<NodeId> out;
  std::size_t pos = 0;
  for (auto s : segs) {
    out.push_back(g.slice(x, axis, pos, pos + s, "split"));
    pos += s;
  }
  return out;
}

NodeId join_segments(Graph& g, const std::vector<NodeId>& parts, std::size_t axis) {
  if (parts.size() == 1) return parts[0];
  return g.concat(parts, axis, "join");
}

}  // namespace

Shape batch_shape(const ModelGraph& model, std::size_t batch) {
  Shape s{batch};
  s.insert(s.end(), model.input_shape.begin(), model.input_shape.end());
  return s;
}

ModelGraphBuild build_model_graph(const ModelGraph& model, std::size_t batch, const std::vector<int>* labels) {
  if (batch == 0) throw Error(ErrorKind::kArgument, "batch size must be positive");
  ModelGraphBuild out;
  Graph& g = out.graph;
  Emitter emit(g, &model);
  out.input = g.input(batch_shape(model, batch), "input");
  std::vector<NodeId> flow{out.input};
  std::vector<std::size_t> widths;
  std::size_t h = 0, w = 0, steps = 0;
  if (model.input_kind == InputKind::kImage) {
    widths = {model.input_shape[0]};
    h = model.input_shape[1];
    w = model.input_shape[2];
  } else {
    widths = {model.input_shape[1]};
    steps = model.input_shape[0];
  }
  for (const auto& layer : model.layers) {
    std::visit(Overloaded{
                   [&](const DenseLayer& l) {
                     flow = emit.dense(l, flow);
                     widths = l.segments;
                   },
                   [&](const Conv2dLayer& l) {
                     flow = emit.conv(l, flow);
                     widths = l.segments;
                     h = (h + 2 * l.padding - l.kernel_h) / l.stride + 1;
                     w = (w + 2 * l.padding - l.kernel_w) / l.stride + 1;
                   },
                   [&](const GruLayer& l) {
                     flow = emit.gru(l, flow, batch, steps);
                     widths = l.segments;
                   },
                   [&](const AttentionBlock& b) { flow = {emit.attention(b, flow.at(0), batch, steps).output}; },
                   [&](const FlattenLayer& l) {
                     for (std::size_t i = 0; i < flow.size(); ++i) {
                       flow[i] = g.reshape(flow[i], {batch, widths[i] * h * w}, l.name);
                       widths[i] *= h * w;
                     }
                   },
                   [&](const GlobalAvgPoolLayer& l) {
                     for (std::size_t i = 0; i < flow.size(); ++i) {
                       flow[i] = g.mean_axis(g.reshape(flow[i], {batch, widths[i], h * w}, l.name), 2, l.name);
                     }
                   },
                   [&](const TimeMeanPoolLayer& l) {
                     for (auto& seg : flow) seg = g.mean_axis(seg, 1, l.name);
                   },
               },
               layer);
    out.layer_outputs.push_back(flow);
  }
  out.logits = emit.dense(model.head, flow).at(0);
  if (labels) {
    out.loss = g.softmax_cross_entropy(out.logits, *labels, "loss");
    out.has_loss = true;
    g.set_output(out.loss);
  } else {
    g.set_output(out.logits);
  }
  return out;
}

Tensor model_forward(const ModelGraph& model, const ParamStore& params, const Tensor& batch) {
  if (batch.rank() != model.input_shape.size() + 1) {
    throw Error(ErrorKind::kShape, "model '" + model.name + "' expects batch " + shape_str(batch_shape(model, 1)) +
                                       "-like input, got " + shape_str(batch.shape()));
  }
  auto built = build_model_graph(model, batch.dim(0));
  return forward(built.graph, std::span<const Tensor>(&batch, 1), params);
}

namespace {

Tensor run_single(Graph& g, const Tensor& x, const ParamStore& params) {
  return forward(g, std::span<const Tensor>(&x, 1), params);
}

template <class L>
L with_inputs(const L& layer, std::size_t in_width) {
  L copy = layer;
  if (copy.in_segments.empty()) copy.in_segments = {in_width};
  if (total_width(copy.in_segments) != in_width) {
    throw Error(ErrorKind::kShape, "layer '" + layer.name + "' expects input width " +
                                       std::to_string(total_width(copy.in_segments)) + ", got " +
                                       std::to_string(in_width));
  }
  return copy;
}

}  // namespace

Tensor dense_forward(const DenseLayer& layer, const ParamStore& params, const Tensor& x) {
  if (x.rank() != 2) throw Error(ErrorKind::kShape, "dense_forward expects (B,in), got " + shape_str(x.shape()));
  const DenseLayer l = with_inputs(layer, x.dim(1));
  Graph g;
  Emitter emit(g, nullptr);
  NodeId in = g.input(x.shape());
  g.set_output(join_segments(g, emit.dense(l, split_segments(g, in, 1, l.in_segments)), 1));
  return run_single(g, x, params);
}

Tensor conv2d_forward(const Conv2dLayer& layer, const ParamStore& params, const Tensor& x) {
  if (x.rank() != 4) throw Error(ErrorKind::kShape, "conv2d_forward expects (B,C,H,W), got " + shape_str(x.shape()));
  const Conv2dLayer l = with_inputs(layer, x.dim(1));
  Graph g;
  Emitter emit(g, nullptr);
  NodeId in = g.input(x.shape());
  g.set_output(join_segments(g, emit.conv(l, split_segments(g, in, 1, l.in_segments)), 1));
  return run_single(g, x, params);
}

Tensor gru_forward(const GruLayer& layer, const ParamStore& params, const Tensor& sequence) {
  if (sequence.rank() != 3) {
    throw Error(ErrorKind::kShape, "gru_forward expects (B,T,F), got " + shape_str(sequence.shape()));
  }
  const GruLayer l = with_inputs(layer, sequence.dim(2));
  Graph g;
  Emitter emit(g, nullptr);
  NodeId in = g.input(sequence.shape());
  auto out = emit.gru(l, split_segments(g, in, 2, l.in_segments), sequence.dim(0), sequence.dim(1));
  g.set_output(join_segments(g, out, l.return_sequences ? 2 : 1));
  return run_single(g, sequence, params);
}

Tensor attention_forward(const AttentionBlock& block, const ParamStore& params, const Tensor& sequence) {
  if (sequence.rank() != 3) {
    throw Error(ErrorKind::kShape, "attention_forward expects (B,T,D), got " + shape_str(sequence.shape()));
  }
  AttentionBlock b = block;
  if (b.model_dim == 0) b.model_dim = sequence.dim(2);
  if (b.model_dim != sequence.dim(2)) {
    throw Error(ErrorKind::kShape, "attention block '" + b.name + "' has model_dim " + std::to_string(b.model_dim) +
                                       ", input feature dim is " + std::to_string(sequence.dim(2)));
  }
  Graph g;
  Emitter emit(g, nullptr);
  NodeId in = g.input(sequence.shape());
  g.set_output(emit.attention(b, in, sequence.dim(0), sequence.dim(1)).output);
  return run_single(g, sequence, params);
}

Tensor attention_weights(const AttentionBlock& block, const ParamStore& params, const Tensor& sequence,
                         std::size_t head) {
  if (sequence.rank() != 3) throw Error(ErrorKind::kShape, "attention_weights expects (B,T,D)");
  if (head >= block.num_heads) throw Error(ErrorKind::kArgument, "head index out of range");
  AttentionBlock b = block;
  if (b.model_dim == 0) b.model_dim = sequence.dim(2);
  Graph g;
  Emitter emit(g, nullptr);
  NodeId in = g.input(sequence.shape());
  auto nodes = emit.attention(b, in, sequence.dim(0), sequence.dim(1));
  g.set_output(nodes.output);
  run_single(g, sequence, params);
  return g.value(nodes.weights[head]);
}

}  // namespace dropin
