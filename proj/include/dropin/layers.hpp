// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dropin/graph.hpp"
#include "dropin/param_store.hpp"
#include "dropin/tensor.hpp"

namespace dropin {

// Every expandable layer keeps its neurons as an ordered list of segments.
// Segment 0 holds the original neurons; each dropin appends one segment.
// Weights are stored block-wise: the block for (output segment r, input
// segment c) is its own ParamId, and the layer's effective weight is the
// block matrix assembled from them. Block (0,0) keeps the plain name, e.g.
// "layer1.weight"; others are "layer1.weight[r,c]".

enum class Activation { kNone, kRelu };
enum class ScaleMode { kExpanded, kOriginal };

std::size_t total_width(const std::vector<std::size_t>& segments);

struct DenseLayer {
  std::string name;
  std::vector<std::size_t> segments;     // output units
  std::vector<std::size_t> in_segments;  // derived from the upstream layer
  Activation activation = Activation::kRelu;

  std::size_t out_dim() const { return total_width(segments); }
  std::size_t in_dim() const { return total_width(in_segments); }
};

struct Conv2dLayer {
  std::string name;
  std::vector<std::size_t> segments;     // output channels
  std::vector<std::size_t> in_segments;  // input channels
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  Activation activation = Activation::kRelu;

  std::size_t out_channels() const { return total_width(segments); }
  std::size_t in_channels() const { return total_width(in_segments); }
};

/// z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
/// c = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * h + z * c.
struct GruLayer {
  std::string name;
  std::vector<std::size_t> segments;  // hidden units
  std::vector<std::size_t> in_segments;
  bool return_sequences = false;

  std::size_t hidden_dim() const { return total_width(segments); }
  std::size_t input_dim() const { return total_width(in_segments); }
};

/// Multi-head self-attention with residual, followed by a residual ReLU
/// feed-forward sublayer. `segments` partitions each head's head_dim.
struct AttentionBlock {
  std::string name;
  std::vector<std::size_t> segments;  // per-head query/key/value units
  std::size_t model_dim = 0;          // derived from the upstream layer
  std::size_t num_heads = 1;
  std::size_t ffn_dim = 16;
  ScaleMode scale_mode = ScaleMode::kExpanded;

  std::size_t head_dim() const { return total_width(segments); }
  /// head_dim used in the 1/sqrt(d) softmax temperature.
  std::size_t scale_dim() const { return scale_mode == ScaleMode::kOriginal ? segments.at(0) : head_dim(); }
};

struct FlattenLayer {
  std::string name;
};
struct GlobalAvgPoolLayer {
  std::string name;
};
struct TimeMeanPoolLayer {
  std::string name;
};

using Layer = std::variant<DenseLayer, Conv2dLayer, GruLayer, AttentionBlock, FlattenLayer, GlobalAvgPoolLayer,
                           TimeMeanPoolLayer>;

const std::string& layer_name(const Layer& layer);
std::string layer_type(const Layer& layer);
bool is_parametric(const Layer& layer);

/// Effective weight W + (alpha / rank) * B * A for a 2-D target.
struct LoraAdapter {
  ParamId target;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t rank = 1;
  double alpha = 1.0;

  ParamId a_id() const { return target + ".lora_a"; }
  ParamId b_id() const { return target + ".lora_b"; }
  double scaling() const { return alpha / static_cast<double>(rank); }
};

enum class InputKind { kImage, kSequence };

/// Sequential classifier: layers followed by a dense head producing
/// `num_classes` logits. Image input is (C,H,W); sequence input is (T,F).
struct ModelGraph {
  std::string name = "model";
  InputKind input_kind = InputKind::kImage;
  Shape input_shape;
  std::vector<Layer> layers;
  DenseLayer head;
  std::vector<LoraAdapter> adapters;

  ModelGraph() = default;
  ModelGraph(std::string name, InputKind kind, Shape input_shape, std::vector<Layer> layers,
             std::size_t num_classes = 2);

  /// Recomputes every derived input width from the input shape and checks
  /// that adjacent layers are compatible. Throws Error(kShape) otherwise.
  void infer();

  std::size_t num_layers() const { return layers.size(); }
  bool expandable(std::size_t index) const;
  std::vector<std::size_t> expandable_layers() const;
  /// Index of the layer that consumes `index`'s neurons; nullopt = the head.
  std::optional<std::size_t> consumer_of(std::size_t index) const;

  /// Every parameter the architecture requires, with its shape.
  std::map<ParamId, Shape> param_shapes() const;
  /// Parameters belonging to layer `index` itself (not its consumer).
  std::vector<ParamId> in_layer_params(std::size_t index) const;
  /// Element count of `in_layer_params(index)`.
  std::size_t in_layer_param_count(std::size_t index) const;

  const LoraAdapter* adapter_for(const ParamId& id) const;
};

/// Block parameter names.
ParamId block_id(const std::string& base, std::size_t row_segment, std::size_t col_segment);
ParamId segment_id(const std::string& base, std::size_t segment);

/// Builders for the common layer shapes (single original segment).
Layer make_dense(std::string name, std::size_t units, Activation act = Activation::kRelu);
Layer make_conv2d(std::string name, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1,
                  std::size_t padding = 1, Activation act = Activation::kRelu);
Layer make_gru(std::string name, std::size_t hidden, bool return_sequences = false);
Layer make_attention(std::string name, std::size_t num_heads, std::size_t head_dim, std::size_t ffn_dim,
                     ScaleMode mode = ScaleMode::kExpanded);
Layer make_flatten(std::string name);
Layer make_global_avg_pool(std::string name);
Layer make_time_mean_pool(std::string name);

/// Fan-based initialisation scale used for a layer's weights.
double default_init_sigma(const ModelGraph& model, std::size_t layer_index);

/// Draws every parameter: He-normal for dense/conv weights, N(0, 1/h) for GRU,
/// N(0, 1/d) for attention, zero biases. Deterministic in `seed`.
ParamStore init_params(const ModelGraph& model, std::uint64_t seed);

/// Throws unless `params` holds every required tensor with the right shape.
void validate_params(const ModelGraph& model, const ParamStore& params);

/// A model lowered to a graph for one batch size.
struct ModelGraphBuild {
  Graph graph;
  NodeId input;
  NodeId logits;
  NodeId loss;  // valid only when labels were given
  bool has_loss = false;
  /// Output segment nodes of each layer, in layer order.
  std::vector<std::vector<NodeId>> layer_outputs;
};

ModelGraphBuild build_model_graph(const ModelGraph& model, std::size_t batch,
                                  const std::vector<int>* labels = nullptr);

/// Batch input shape: (B,C,H,W) or (B,T,F).
Shape batch_shape(const ModelGraph& model, std::size_t batch);

/// Logits of shape (B, num_classes).
Tensor model_forward(const ModelGraph& model, const ParamStore& params, const Tensor& batch);

// Single-layer forwards. Inputs carry a leading batch dimension:
// dense (B,in), conv (B,C,H,W), gru/attention (B,T,F). The layer's
// in_segments must be filled (or are inferred from the input when empty).
Tensor dense_forward(const DenseLayer& layer, const ParamStore& params, const Tensor& x);
Tensor conv2d_forward(const Conv2dLayer& layer, const ParamStore& params, const Tensor& x);
/// Final hidden state (B,H), or the full sequence (B,T,H) if return_sequences.
Tensor gru_forward(const GruLayer& layer, const ParamStore& params, const Tensor& sequence);
Tensor attention_forward(const AttentionBlock& block, const ParamStore& params, const Tensor& sequence);

/// Softmax attention weights (B,T,T) of one head, for inspection.
Tensor attention_weights(const AttentionBlock& block, const ParamStore& params, const Tensor& sequence,
                         std::size_t head);

}  // namespace dropin
