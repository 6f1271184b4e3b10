// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dropin/param_store.hpp"
#include "dropin/tensor.hpp"

namespace dropin {

struct NodeId {
  std::size_t index = 0;
  bool operator==(const NodeId&) const = default;
};

enum class Op {
  kInput,
  kParam,
  kConstant,
  kMatMul,     // rank-2 or batched rank-3, optional transposes
  kConv2d,     // (B,Cin,H,W) x (Cout,Cin,kh,kw)
  kAdd,
  kSub,
  kMul,
  kAffine,     // scale * x + shift
  kAddBias,    // x + b broadcast along one axis
  kRelu,
  kSigmoid,
  kTanh,
  kSoftmax,    // over the last axis
  kSum,        // to scalar
  kMean,       // to scalar
  kMeanAxis,
  kReshape,
  kConcat,
  kSlice,
  kSoftmaxCrossEntropy,  // mean over rows, integer labels
};

std::string_view op_name(Op op);

/// A static DAG of primitive operations. Nodes may only reference earlier
/// nodes, so insertion order is a topological order and cycles cannot be
/// expressed. Shapes are checked when the graph is evaluated.
///
/// A Graph instance also carries the activations of its last forward pass;
/// it is single-threaded while being evaluated but may be moved freely.
class Graph {
 public:
  NodeId input(Shape shape, std::string label = "input");
  NodeId param(ParamId id);
  NodeId constant(Tensor value, std::string label = "constant");

  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false, std::string label = {});
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding, std::string label = {});
  NodeId add(NodeId a, NodeId b, std::string label = {});
  NodeId sub(NodeId a, NodeId b, std::string label = {});
  NodeId mul(NodeId a, NodeId b, std::string label = {});
  NodeId affine(NodeId x, double scale, double shift, std::string label = {});
  NodeId scale(NodeId x, double s, std::string label = {}) { return affine(x, s, 0.0, std::move(label)); }
  NodeId add_bias(NodeId x, NodeId bias, std::size_t axis, std::string label = {});
  NodeId relu(NodeId x, std::string label = {});
  NodeId sigmoid(NodeId x, std::string label = {});
  NodeId tanh(NodeId x, std::string label = {});
  NodeId softmax(NodeId x, std::string label = {});
  NodeId sum(NodeId x, std::string label = {});
  NodeId mean(NodeId x, std::string label = {});
  NodeId mean_axis(NodeId x, std::size_t axis, std::string label = {});
  NodeId reshape(NodeId x, Shape shape, std::string label = {});
  NodeId concat(std::vector<NodeId> parts, std::size_t axis, std::string label = {});
  NodeId slice(NodeId x, std::size_t axis, std::size_t begin, std::size_t end, std::string label = {});
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels, std::string label = {});

  /// Sum of several same-shaped nodes (left fold of `add`).
  NodeId add_all(std::span<const NodeId> parts, std::string label = {});

  void set_output(NodeId node);
  NodeId output() const;

  /// Ask backward to also report d(output)/d(node) for an intermediate node.
  void watch(NodeId node);

  std::size_t size() const { return nodes_.size(); }
  std::size_t num_inputs() const { return input_nodes_.size(); }
  bool evaluated() const { return evaluated_; }
  bool differentiated() const { return differentiated_; }

  /// Activation of `node` from the last forward pass.
  const Tensor& value(NodeId node) const;
  /// Gradient of the output w.r.t. a watched node from the last backward pass.
  Tensor gradient(NodeId node) const;

  /// The last inputs passed to forward (used by the finite-difference check).
  const std::vector<Tensor>& last_inputs() const { return last_inputs_; }

 private:
  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    std::string label;
    ParamId param;
    Shape shape;
    Tensor constant;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    bool trans_a = false;
    bool trans_b = false;
    double scale = 1.0;
    double shift = 0.0;
    std::vector<int> labels;
  };

  NodeId push(Node node);
  void check_ref(NodeId id) const;
  std::string describe(std::size_t index) const;
  void eval_node(std::size_t index, const ParamStore& params);
  void backprop_node(std::size_t index, const std::vector<bool>& needs);

  std::vector<Node> nodes_;
  std::vector<std::size_t> input_nodes_;
  std::vector<std::size_t> watched_;
  std::size_t output_ = 0;
  bool has_output_ = false;

  // Evaluation state.
  std::vector<Tensor> values_;
  std::vector<std::vector<double>> aux_;
  std::vector<std::vector<double>> grads_;
  std::vector<Tensor> last_inputs_;
  bool evaluated_ = false;
  bool differentiated_ = false;

  friend Tensor forward(Graph&, std::span<const Tensor>, const ParamStore&);
  friend std::map<ParamId, Tensor> backward(Graph&, const ParamStore&);
};

using GradMap = std::map<ParamId, Tensor>;

/// Evaluates every node in insertion order and caches activations.
/// Throws Error(kShape) naming the offending node on any mismatch, and
/// Error(kNumeric) if a node produces a non-finite value.
Tensor forward(Graph& graph, std::span<const Tensor> inputs, const ParamStore& params);

/// Reverse pass from the (scalar) output. Only trainable parameters get an
/// entry; subgraphs that cannot reach a trainable parameter or a watched
/// node are skipped entirely.
GradMap backward(Graph& graph, const ParamStore& params);

/// Max over trainable entries of |analytic - central difference| /
/// max(1, |central difference|). Uses the inputs of the last forward pass;
/// `params` is restored before returning.
double finite_diff_check(Graph& graph, ParamStore& params, double eps = 1e-5);

}  // namespace dropin
