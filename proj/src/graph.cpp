// SPDX-License-Identifier: Apache-2.0

#include "dropin/graph.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dropin/error.hpp"

namespace dropin {

std::string_view op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParam: return "param";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kConv2d: return "conv2d";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kAffine: return "affine";
    case Op::kAddBias: return "add_bias";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kTanh: return "tanh";
    case Op::kSoftmax: return "softmax";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kMeanAxis: return "mean_axis";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
  }
  return "?";
}

namespace {

// C(m x n) += op(A) * op(B) with op(A) m x k and op(B) k x n.
// A is stored m x k (or k x m when ta); B is stored k x n (or n x k when tb).
void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
          double* c) {
  if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        c[i * n + j] += acc;
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (!tb) {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}

struct MatDims {
  std::size_t batch, m, n, k;
};

double stable_sigmoid(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

// Splits a shape around `axis` into (outer, axis length, inner).
void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len, std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace

NodeId Graph::push(Node node) {
  for (std::size_t in : node.inputs) {
    if (in >= nodes_.size()) throw Error(ErrorKind::kArgument, "graph node references a node that does not exist yet");
  }
  if (node.label.empty()) node.label = std::string(op_name(node.op));
  nodes_.push_back(std::move(node));
  evaluated_ = false;
  differentiated_ = false;
  return NodeId{nodes_.size() - 1};
}

void Graph::check_ref(NodeId id) const {
  if (id.index >= nodes_.size()) throw Error(ErrorKind::kArgument, "invalid node id");
}

std::string Graph::describe(std::size_t index) const {
  std::ostringstream os;
  os << "node #" << index << " (" << op_name(nodes_[index].op) << " '" << nodes_[index].label << "')";
  return os.str();
}

NodeId Graph::input(Shape shape, std::string label) {
  Node n{Op::kInput, {}, std::move(label)};
  if (shape_size(shape) == 0 || shape.empty()) throw Error(ErrorKind::kShape, "input shape must be non-empty");
  n.shape = std::move(shape);
  auto id = push(std::move(n));
  input_nodes_.push_back(id.index);
  return id;
}

NodeId Graph::param(ParamId id) {
  Node n{Op::kParam, {}, id};
  n.param = std::move(id);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value, std::string label) {
  Node n{Op::kConstant, {}, std::move(label)};
  n.constant = std::move(value);
  return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b, std::string label) {
  Node n{Op::kMatMul, {a.index, b.index}, std::move(label)};
  n.trans_a = trans_a;
  n.trans_b = trans_b;
  return push(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding, std::string label) {
  if (stride == 0) throw Error(ErrorKind::kArgument, "conv2d stride must be positive");
  Node n{Op::kConv2d, {x.index, w.index}, std::move(label)};
  n.stride = stride;
  n.padding = padding;
  return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b, std::string label) { return push({Op::kAdd, {a.index, b.index}, std::move(label)}); }
NodeId Graph::sub(NodeId a, NodeId b, std::string label) { return push({Op::kSub, {a.index, b.index}, std::move(label)}); }
NodeId Graph::mul(NodeId a, NodeId b, std::string label) { return push({Op::kMul, {a.index, b.index}, std::move(label)}); }

NodeId Graph::affine(NodeId x, double scale, double shift, std::string label) {
  Node n{Op::kAffine, {x.index}, std::move(label)};
  n.scale = scale;
  n.shift = shift;
  return push(std::move(n));
}

NodeId Graph::add_bias(NodeId x, NodeId bias, std::size_t axis, std::string label) {
  Node n{Op::kAddBias, {x.index, bias.index}, std::move(label)};
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::relu(NodeId x, std::string label) { return push({Op::kRelu, {x.index}, std::move(label)}); }
NodeId Graph::sigmoid(NodeId x, std::string label) { return push({Op::kSigmoid, {x.index}, std::move(label)}); }
NodeId Graph::tanh(NodeId x, std::string label) { return push({Op::kTanh, {x.index}, std::move(label)}); }
NodeId Graph::softmax(NodeId x, std::string label) { return push({Op::kSoftmax, {x.index}, std::move(label)}); }
NodeId Graph::sum(NodeId x, std::string label) { return push({Op::kSum, {x.index}, std::move(label)}); }
NodeId Graph::mean(NodeId x, std::string label) { return push({Op::kMean, {x.index}, std::move(label)}); }

NodeId Graph::mean_axis(NodeId x, std::size_t axis, std::string label) {
  Node n{Op::kMeanAxis, {x.index}, std::move(label)};
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::reshape(NodeId x, Shape shape, std::string label) {
  Node n{Op::kReshape, {x.index}, std::move(label)};
  n.shape = std::move(shape);
  return push(std::move(n));
}

NodeId Graph::concat(std::vector<NodeId> parts, std::size_t axis, std::string label) {
  if (parts.empty()) throw Error(ErrorKind::kArgument, "concat needs at least one input");
  Node n{Op::kConcat, {}, std::move(label)};
  for (auto p : parts) n.inputs.push_back(p.index);
  n.axis = axis;
  return push(std::move(n));
}

NodeId Graph::slice(NodeId x, std::size_t axis, std::size_t begin, std::size_t end, std::string label) {
  if (begin >= end) throw Error(ErrorKind::kArgument, "slice range must be non-empty");
  Node n{Op::kSlice, {x.index}, std::move(label)};
  n.axis = axis;
  n.begin = begin;
  n.end = end;
  return push(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<int> labels, std::string label) {
  Node n{Op::kSoftmaxCrossEntropy, {logits.index}, std::move(label)};
  n.labels = std::move(labels);
  return push(std::move(n));
}

NodeId Graph::add_all(std::span<const NodeId> parts, std::string label) {
  if (parts.empty()) throw Error(ErrorKind::kArgument, "add_all needs at least one input");
  NodeId acc = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(acc, parts[i], label);
  return acc;
}

void Graph::set_output(NodeId node) {
  check_ref(node);
  output_ = node.index;
  has_output_ = true;
  evaluated_ = false;
  differentiated_ = false;
}

NodeId Graph::output() const {
  if (!has_output_) throw Error(ErrorKind::kState, "graph has no output node");
  return NodeId{output_};
}

void Graph::watch(NodeId node) {
  check_ref(node);
  if (std::find(watched_.begin(), watched_.end(), node.index) == watched_.end()) watched_.push_back(node.index);
  differentiated_ = false;
}

const Tensor& Graph::value(NodeId node) const {
  check_ref(node);
  if (!evaluated_) throw Error(ErrorKind::kState, "graph has not been evaluated");
  return values_[node.index];
}

Tensor Graph::gradient(NodeId node) const {
  check_ref(node);
  if (!differentiated_) throw Error(ErrorKind::kState, "backward has not been run");
  if (std::find(watched_.begin(), watched_.end(), node.index) == watched_.end()) {
    throw Error(ErrorKind::kState, describe(node.index) + " is not watched");
  }
  const auto& g = grads_[node.index];
  if (g.empty()) return Tensor(values_[node.index].shape(), 0.0);
  return Tensor(values_[node.index].shape(), g);
}

// ---------------------------------------------------------------------------
// Forward

void Graph::eval_node(std::size_t index, const ParamStore& params) {
  const Node& n = nodes_[index];
  auto in = [&](std::size_t i) -> const Tensor& { return values_[n.inputs[i]]; };
  auto fail = [&](const std::string& msg) { throw Error(ErrorKind::kShape, describe(index) + ": " + msg); };
  Tensor& out = values_[index];

  switch (n.op) {
    case Op::kInput:
      break;  // filled by forward()
    case Op::kParam:
      if (!params.contains(n.param)) {
        throw Error(ErrorKind::kArgument, describe(index) + ": missing parameter '" + n.param + "'");
      }
      out = params.get(n.param);
      out.clear_grad();
      break;
    case Op::kConstant:
      out = n.constant;
      break;
    case Op::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.rank() != b.rank() || (a.rank() != 2 && a.rank() != 3)) {
        fail("operands must both be rank 2 or rank 3, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
      }
      const std::size_t off = a.rank() - 2;
      const std::size_t batch = off ? a.dim(0) : 1;
      if (off && b.dim(0) != batch) fail("batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
      const std::size_t m = n.trans_a ? a.dim(off + 1) : a.dim(off);
      const std::size_t k = n.trans_a ? a.dim(off) : a.dim(off + 1);
      const std::size_t kb = n.trans_b ? b.dim(off + 1) : b.dim(off);
      const std::size_t nn = n.trans_b ? b.dim(off) : b.dim(off + 1);
      if (k != kb) fail("inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
      out = off ? Tensor({batch, m, nn}) : Tensor({m, nn});
      for (std::size_t t = 0; t < batch; ++t) {
        gemm(n.trans_a, n.trans_b, m, nn, k, a.data().data() + t * m * k, b.data().data() + t * k * nn,
             out.data().data() + t * m * nn);
      }
      break;
    }
    case Op::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      if (x.rank() != 4 || w.rank() != 4) fail("expects rank-4 input and weight");
      const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
      if (w.dim(1) != C) fail("input has " + std::to_string(C) + " channels, weight expects " + std::to_string(w.dim(1)));
      const std::size_t p = n.padding, s = n.stride;
      if (H + 2 * p < KH || W + 2 * p < KW) fail("kernel larger than padded input");
      const std::size_t OH = (H + 2 * p - KH) / s + 1, OW = (W + 2 * p - KW) / s + 1;
      out = Tensor({B, O, OH, OW});
      const double* xd = x.data().data();
      const double* wd = w.data().data();
      double* od = out.data().data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
          double* oplane = od + (b * O + o) * OH * OW;
          for (std::size_t c = 0; c < C; ++c) {
            const double* xplane = xd + (b * C + c) * H * W;
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const double wv = wd[((o * C + c) * KH + ky) * KW + kx];
                for (std::size_t oy = 0; oy < OH; ++oy) {
                  const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  const double* xrow = xplane + iy * W;
                  double* orow = oplane + oy * OW;
                  for (std::size_t ox = 0; ox < OW; ++ox) {
                    const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    orow[ox] += wv * xrow[ix];
                  }
                }
              }
          }
        }
      break;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (a.shape() != b.shape()) fail("operand shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
      out = a;
      auto& o = out.data();
      const auto& bd = b.data();
      if (n.op == Op::kAdd) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += bd[i];
      } else if (n.op == Op::kSub) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bd[i];
      } else {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bd[i];
      }
      break;
    }
    case Op::kAffine:
      out = in(0);
      for (double& v : out.data()) v = n.scale * v + n.shift;
      break;
    case Op::kAddBias: {
      const Tensor& x = in(0);
      const Tensor& b = in(1);
      if (n.axis >= x.rank()) fail("bias axis out of range for " + shape_str(x.shape()));
      if (b.size() != x.dim(n.axis)) {
        fail("bias of size " + std::to_string(b.size()) + " does not match axis " + std::to_string(n.axis) + " of " +
             shape_str(x.shape()));
      }
      std::size_t outer, len, inner;
      split_axis(x.shape(), n.axis, outer, len, inner);
      out = x;
      auto& o = out.data();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t l = 0; l < len; ++l) {
          const double bv = b[l];
          double* p = o.data() + (a * len + l) * inner;
          for (std::size_t i = 0; i < inner; ++i) p[i] += bv;
        }
      break;
    }
    case Op::kRelu:
      out = in(0);
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
      break;
    case Op::kSigmoid:
      out = in(0);
      for (double& v : out.data()) v = stable_sigmoid(v);
      break;
    case Op::kTanh:
      out = in(0);
      for (double& v : out.data()) v = std::tanh(v);
      break;
    case Op::kSoftmax: {
      out = in(0);
      const std::size_t len = out.shape().back();
      const std::size_t rows = out.size() / len;
      auto& o = out.data();
      for (std::size_t r = 0; r < rows; ++r) {
        double* row = o.data() + r * len;
        const double mx = *std::max_element(row, row + len);
        double z = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          row[i] = std::exp(row[i] - mx);
          z += row[i];
        }
        for (std::size_t i = 0; i < len; ++i) row[i] /= z;
      }
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      double acc = 0.0;
      for (double v : in(0).data()) acc += v;
      if (n.op == Op::kMean) acc /= static_cast<double>(in(0).size());
      out = Tensor::scalar(acc);
      break;
    }
    case Op::kMeanAxis: {
      const Tensor& x = in(0);
      if (n.axis >= x.rank()) fail("axis out of range for " + shape_str(x.shape()));
      std::size_t outer, len, inner;
      split_axis(x.shape(), n.axis, outer, len, inner);
      Shape s = x.shape();
      s.erase(s.begin() + static_cast<long>(n.axis));
      if (s.empty()) s = {1};
      out = Tensor(s);
      auto& o = out.data();
      const auto& xd = x.data();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t l = 0; l < len; ++l)
          for (std::size_t i = 0; i < inner; ++i) o[a * inner + i] += xd[(a * len + l) * inner + i];
      for (double& v : o) v /= static_cast<double>(len);
      break;
    }
    case Op::kReshape:
      if (shape_size(n.shape) != in(0).size()) {
        fail("cannot reshape " + shape_str(in(0).shape()) + " to " + shape_str(n.shape));
      }
      out = in(0).reshaped(n.shape);
      break;
    case Op::kConcat: {
      const Tensor& first = in(0);
      if (n.axis >= first.rank()) fail("axis out of range for " + shape_str(first.shape()));
      Shape s = first.shape();
      std::size_t total = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        Shape si = in(i).shape();
        if (si.size() != s.size()) fail("rank mismatch between concatenated parts");
        total += si[n.axis];
        si[n.axis] = s[n.axis];
        if (si != s) fail("concatenated parts differ off-axis: " + shape_str(in(i).shape()) + " vs " + shape_str(first.shape()));
      }
      s[n.axis] = total;
      out = Tensor(s);
      std::size_t outer, len, inner;
      split_axis(s, n.axis, outer, len, inner);
      std::size_t pos = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Tensor& part = in(i);
        const std::size_t plen = part.dim(n.axis);
        for (std::size_t a = 0; a < outer; ++a) {
          std::copy_n(part.data().data() + a * plen * inner, plen * inner,
                      out.data().data() + (a * len + pos) * inner);
        }
        pos += plen;
      }
      break;
    }
    case Op::kSlice: {
      const Tensor& x = in(0);
      if (n.axis >= x.rank() || n.end > x.dim(n.axis)) {
        fail("slice [" + std::to_string(n.begin) + "," + std::to_string(n.end) + ") out of range for " +
             shape_str(x.shape()));
      }
      Shape s = x.shape();
      s[n.axis] = n.end - n.begin;
      out = Tensor(s);
      std::size_t outer, len, inner;
      split_axis(x.shape(), n.axis, outer, len, inner);
      const std::size_t plen = n.end - n.begin;
      for (std::size_t a = 0; a < outer; ++a) {
        std::copy_n(x.data().data() + (a * len + n.begin) * inner, plen * inner, out.data().data() + a * plen * inner);
      }
      break;
    }
    case Op::kSoftmaxCrossEntropy: {
      const Tensor& z = in(0);
      if (z.rank() != 2) fail("logits must be rank 2, got " + shape_str(z.shape()));
      const std::size_t rows = z.dim(0), cls = z.dim(1);
      if (n.labels.size() != rows) fail("expected " + std::to_string(rows) + " labels, got " + std::to_string(n.labels.size()));
      auto& prob = aux_[index];
      prob.assign(z.size(), 0.0);
      double loss = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        const int y = n.labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= cls) fail("label out of range");
        const double* row = z.data().data() + r * cls;
        const double mx = *std::max_element(row, row + cls);
        double zsum = 0.0;
        for (std::size_t c = 0; c < cls; ++c) zsum += std::exp(row[c] - mx);
        const double lse = mx + std::log(zsum);
        for (std::size_t c = 0; c < cls; ++c) prob[r * cls + c] = std::exp(row[c] - lse);
        loss += lse - row[y];
      }
      out = Tensor::scalar(loss / static_cast<double>(rows));
      break;
    }
  }
}

Tensor forward(Graph& graph, std::span<const Tensor> inputs, const ParamStore& params) {
  if (!graph.has_output_) throw Error(ErrorKind::kState, "graph has no output node");
  if (inputs.size() != graph.input_nodes_.size()) {
    throw Error(ErrorKind::kArgument, "graph declares " + std::to_string(graph.input_nodes_.size()) +
                                          " inputs, got " + std::to_string(inputs.size()));
  }
  graph.evaluated_ = false;
  graph.differentiated_ = false;
  graph.values_.assign(graph.nodes_.size(), Tensor{});
  graph.aux_.assign(graph.nodes_.size(), {});
  graph.grads_.clear();
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t idx = graph.input_nodes_[i];
    if (inputs[i].shape() != graph.nodes_[idx].shape) {
      throw Error(ErrorKind::kShape, graph.describe(idx) + ": expected input " + shape_str(graph.nodes_[idx].shape) +
                                         ", got " + shape_str(inputs[i].shape()));
    }
    graph.values_[idx] = inputs[i];
    graph.values_[idx].clear_grad();
  }
  graph.last_inputs_.assign(inputs.begin(), inputs.end());
  // Nodes after the output cannot influence it.
  for (std::size_t i = 0; i <= graph.output_; ++i) {
    graph.eval_node(i, params);
    if (!graph.values_[i].all_finite()) {
      throw Error(ErrorKind::kNumeric, graph.describe(i) + ": produced a non-finite value");
    }
  }
  graph.evaluated_ = true;
  return graph.values_[graph.output_];
}

// ---------------------------------------------------------------------------
// Backward

void Graph::backprop_node(std::size_t index, const std::vector<bool>& needs) {
  const Node& n = nodes_[index];
  const std::vector<double>& g = grads_[index];
  if (g.empty()) return;
  auto gin = [&](std::size_t i) -> std::vector<double>* {
    const std::size_t src = n.inputs[i];
    if (!needs[src]) return nullptr;
    auto& dst = grads_[src];
    if (dst.empty()) dst.assign(values_[src].size(), 0.0);
    return &dst;
  };
  auto val = [&](std::size_t i) -> const Tensor& { return values_[n.inputs[i]]; };
  const Tensor& y = values_[index];

  switch (n.op) {
    case Op::kInput:
    case Op::kParam:
    case Op::kConstant:
      break;
    case Op::kMatMul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      const std::size_t off = a.rank() - 2;
      const std::size_t batch = off ? a.dim(0) : 1;
      const std::size_t m = n.trans_a ? a.dim(off + 1) : a.dim(off);
      const std::size_t k = n.trans_a ? a.dim(off) : a.dim(off + 1);
      const std::size_t nn = n.trans_b ? b.dim(off) : b.dim(off + 1);
      if (auto* da = gin(0)) {
        for (std::size_t t = 0; t < batch; ++t) {
          const double* dc = g.data() + t * m * nn;
          const double* bp = b.data().data() + t * k * nn;
          double* dap = da->data() + t * m * k;
          if (!n.trans_a) {
            gemm(false, !n.trans_b, m, k, nn, dc, bp, dap);
          } else {
            gemm(n.trans_b, true, k, m, nn, bp, dc, dap);
          }
        }
      }
      if (auto* db = gin(1)) {
        for (std::size_t t = 0; t < batch; ++t) {
          const double* dc = g.data() + t * m * nn;
          const double* ap = a.data().data() + t * m * k;
          double* dbp = db->data() + t * k * nn;
          if (!n.trans_b) {
            gemm(!n.trans_a, false, k, nn, m, ap, dc, dbp);
          } else {
            gemm(true, n.trans_a, nn, k, m, dc, ap, dbp);
          }
        }
      }
      break;
    }
    case Op::kConv2d: {
      const Tensor& x = val(0);
      const Tensor& w = val(1);
      const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const std::size_t O = w.dim(0), KH = w.dim(2), KW = w.dim(3);
      const std::size_t OH = y.dim(2), OW = y.dim(3);
      const std::size_t p = n.padding, s = n.stride;
      auto* dx = gin(0);
      auto* dw = gin(1);
      const double* xd = x.data().data();
      const double* wd = w.data().data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t o = 0; o < O; ++o) {
          const double* gplane = g.data() + (b * O + o) * OH * OW;
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t xoff = (b * C + c) * H * W;
            for (std::size_t ky = 0; ky < KH; ++ky)
              for (std::size_t kx = 0; kx < KW; ++kx) {
                const std::size_t widx = ((o * C + c) * KH + ky) * KW + kx;
                const double wv = wd[widx];
                double wacc = 0.0;
                for (std::size_t oy = 0; oy < OH; ++oy) {
                  const long iy = static_cast<long>(oy * s + ky) - static_cast<long>(p);
                  if (iy < 0 || iy >= static_cast<long>(H)) continue;
                  const double* grow = gplane + oy * OW;
                  const std::size_t rowoff = xoff + static_cast<std::size_t>(iy) * W;
                  for (std::size_t ox = 0; ox < OW; ++ox) {
                    const long ix = static_cast<long>(ox * s + kx) - static_cast<long>(p);
                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                    if (dx) (*dx)[rowoff + ix] += wv * grow[ox];
                    wacc += xd[rowoff + ix] * grow[ox];
                  }
                }
                if (dw) (*dw)[widx] += wacc;
              }
          }
        }
      break;
    }
    case Op::kAdd:
      if (auto* da = gin(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
      if (auto* db = gin(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i];
      break;
    case Op::kSub:
      if (auto* da = gin(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
      if (auto* db = gin(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
      break;
    case Op::kMul: {
      const auto& a = val(0).data();
      const auto& b = val(1).data();
      if (auto* da = gin(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b[i];
      if (auto* db = gin(1))
        for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a[i];
      break;
    }
    case Op::kAffine:
      if (auto* dx = gin(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += n.scale * g[i];
      break;
    case Op::kAddBias: {
      if (auto* dx = gin(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
      if (auto* db = gin(1)) {
        std::size_t outer, len, inner;
        split_axis(y.shape(), n.axis, outer, len, inner);
        for (std::size_t a = 0; a < outer; ++a)
          for (std::size_t l = 0; l < len; ++l) {
            const double* gp = g.data() + (a * len + l) * inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += gp[i];
            (*db)[l] += acc;
          }
      }
      break;
    }
    case Op::kRelu:
      if (auto* dx = gin(0)) {
        const auto& x = val(0).data();
        for (std::size_t i = 0; i < g.size(); ++i)
          if (x[i] > 0.0) (*dx)[i] += g[i];
      }
      break;
    case Op::kSigmoid:
      if (auto* dx = gin(0)) {
        const auto& yd = y.data();
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * yd[i] * (1.0 - yd[i]);
      }
      break;
    case Op::kTanh:
      if (auto* dx = gin(0)) {
        const auto& yd = y.data();
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * (1.0 - yd[i] * yd[i]);
      }
      break;
    case Op::kSoftmax:
      if (auto* dx = gin(0)) {
        const std::size_t len = y.shape().back();
        const std::size_t rows = y.size() / len;
        const auto& yd = y.data();
        for (std::size_t r = 0; r < rows; ++r) {
          double dot = 0.0;
          for (std::size_t i = 0; i < len; ++i) dot += g[r * len + i] * yd[r * len + i];
          for (std::size_t i = 0; i < len; ++i) (*dx)[r * len + i] += yd[r * len + i] * (g[r * len + i] - dot);
        }
      }
      break;
    case Op::kSum:
    case Op::kMean:
      if (auto* dx = gin(0)) {
        const double d = n.op == Op::kMean ? g[0] / static_cast<double>(dx->size()) : g[0];
        for (double& v : *dx) v += d;
      }
      break;
    case Op::kMeanAxis:
      if (auto* dx = gin(0)) {
        std::size_t outer, len, inner;
        split_axis(val(0).shape(), n.axis, outer, len, inner);
        const double inv = 1.0 / static_cast<double>(len);
        for (std::size_t a = 0; a < outer; ++a)
          for (std::size_t l = 0; l < len; ++l)
            for (std::size_t i = 0; i < inner; ++i) (*dx)[(a * len + l) * inner + i] += g[a * inner + i] * inv;
      }
      break;
    case Op::kReshape:
      if (auto* dx = gin(0))
        for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
      break;
    case Op::kConcat: {
      std::size_t outer, len, inner;
      split_axis(y.shape(), n.axis, outer, len, inner);
      std::size_t pos = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const std::size_t plen = val(i).dim(n.axis);
        if (auto* dp = gin(i)) {
          for (std::size_t a = 0; a < outer; ++a) {
            const double* src = g.data() + (a * len + pos) * inner;
            double* dst = dp->data() + a * plen * inner;
            for (std::size_t j = 0; j < plen * inner; ++j) dst[j] += src[j];
          }
        }
        pos += plen;
      }
      break;
    }
    case Op::kSlice:
      if (auto* dx = gin(0)) {
        std::size_t outer, len, inner;
        split_axis(val(0).shape(), n.axis, outer, len, inner);
        const std::size_t plen = n.end - n.begin;
        for (std::size_t a = 0; a < outer; ++a) {
          const double* src = g.data() + a * plen * inner;
          double* dst = dx->data() + (a * len + n.begin) * inner;
          for (std::size_t j = 0; j < plen * inner; ++j) dst[j] += src[j];
        }
      }
      break;
    case Op::kSoftmaxCrossEntropy:
      if (auto* dz = gin(0)) {
        const Tensor& z = val(0);
        const std::size_t rows = z.dim(0), cls = z.dim(1);
        const double scale = g[0] / static_cast<double>(rows);
        const auto& prob = aux_[index];
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cls; ++c) {
            const double onehot = static_cast<int>(c) == n.labels[r] ? 1.0 : 0.0;
            (*dz)[r * cls + c] += scale * (prob[r * cls + c] - onehot);
          }
      }
      break;
  }
}

GradMap backward(Graph& graph, const ParamStore& params) {
  if (!graph.evaluated_) throw Error(ErrorKind::kState, "backward called before forward");
  const std::size_t out = graph.output_;
  if (graph.values_[out].size() != 1) {
    throw Error(ErrorKind::kShape, "backward requires a scalar output, got " + shape_str(graph.values_[out].shape()));
  }
  const std::size_t count = out + 1;
  std::vector<bool> needs(count, false);
  for (std::size_t i = 0; i < count; ++i) {
    const auto& n = graph.nodes_[i];
    if (n.op == Op::kParam) {
      needs[i] = params.is_trainable(n.param);
    } else {
      for (std::size_t in : n.inputs) needs[i] = needs[i] || needs[in];
    }
    if (std::find(graph.watched_.begin(), graph.watched_.end(), i) != graph.watched_.end()) needs[i] = true;
  }
  graph.grads_.assign(count, {});
  graph.grads_[out] = {1.0};
  for (std::size_t i = count; i-- > 0;) {
    if (!needs[i] && i != out) continue;
    graph.backprop_node(i, needs);
  }
  GradMap result;
  for (std::size_t i = 0; i < count; ++i) {
    const auto& n = graph.nodes_[i];
    if (n.op != Op::kParam || !needs[i] || !params.is_trainable(n.param)) continue;
    const auto& g = graph.grads_[i];
    auto it = result.find(n.param);
    if (it == result.end()) {
      it = result.emplace(n.param, Tensor(graph.values_[i].shape(), 0.0)).first;
    }
    if (!g.empty()) {
      auto& acc = it->second.data();
      for (std::size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
    }
  }
  graph.differentiated_ = true;
  return result;
}

double finite_diff_check(Graph& graph, ParamStore& params, double eps) {
  if (!graph.evaluated()) throw Error(ErrorKind::kState, "finite_diff_check requires a prior forward pass");
  if (!(eps > 0.0)) throw Error(ErrorKind::kArgument, "finite_diff_check: eps must be positive");
  const std::vector<Tensor> inputs = graph.last_inputs();
  Tensor base = forward(graph, inputs, params);
  if (base.size() != 1) throw Error(ErrorKind::kShape, "finite_diff_check requires a scalar-valued graph");
  const GradMap analytic = backward(graph, params);
  double worst = 0.0;
  for (const auto& [id, grad] : analytic) {
    Tensor& p = params.get_mut(id);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + eps;
      const double fp = forward(graph, inputs, params)[0];
      p[i] = orig - eps;
      const double fm = forward(graph, inputs, params)[0];
      p[i] = orig;
      const double fd = (fp - fm) / (2.0 * eps);
      worst = std::max(worst, std::abs(grad[i] - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  forward(graph, inputs, params);
  backward(graph, params);
  return worst;
}

}  // namespace dropin
