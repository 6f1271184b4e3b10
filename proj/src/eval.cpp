// SPDX-License-Identifier: Apache-2.0

#include "dropin/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

#include "dropin/checkpoint.hpp"
#include "dropin/error.hpp"

namespace dropin {

namespace {

struct Counts {
  std::size_t bona = 0;
  std::size_t spoof = 0;
};

Counts check_scores(const ScoreSet& set) {
  if (set.scores.size() != set.labels.size()) throw Error(ErrorKind::kArgument, "scores and labels differ in length");
  Counts c;
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    if (set.labels[i] == kSpoof) {
      ++c.spoof;
    } else if (set.labels[i] == kBonaFide) {
      ++c.bona;
    } else {
      throw Error(ErrorKind::kArgument, "labels must be bona fide (0) or spoof (1)");
    }
    if (!std::isfinite(set.scores[i])) throw Error(ErrorKind::kNumeric, "score set contains a non-finite score");
  }
  if (c.bona == 0 || c.spoof == 0) throw Error(ErrorKind::kArgument, "EER needs at least one example of each class");
  return c;
}

struct RocPoint {
  double far;
  double frr;
};

// First crossing of FAR - FRR along a threshold-ordered curve.
double crossing(const std::vector<RocPoint>& curve) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const double d = curve[i].far - curve[i].frr;
    if (d < 0.0) continue;
    if (d == 0.0 || i == 0) return curve[i].far;
    const RocPoint& a = curve[i - 1];
    const RocPoint& b = curve[i];
    const double da = a.far - a.frr;
    const double lambda = -da / (d - da);
    return a.far + lambda * (b.far - a.far);
  }
  return curve.back().far;
}

}  // namespace

double compute_eer(const ScoreSet& set) {
  const Counts n = check_scores(set);
  std::vector<std::pair<double, int>> sorted;
  sorted.reserve(set.scores.size());
  for (std::size_t i = 0; i < set.scores.size(); ++i) sorted.emplace_back(set.scores[i], set.labels[i]);
  std::sort(sorted.begin(), sorted.end());

  // Sweep thresholds upward; after passing a group of equal scores, those
  // spoofs become false accepts and those bona fide stop being false rejects.
  std::vector<RocPoint> curve;
  curve.reserve(sorted.size() + 2);
  std::size_t spoof_below = 0, bona_below = 0;
  curve.push_back({0.0, 1.0});
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    while (j < sorted.size() && sorted[j].first == sorted[i].first) {
      (sorted[j].second == kSpoof ? spoof_below : bona_below)++;
      ++j;
    }
    curve.push_back({static_cast<double>(spoof_below) / static_cast<double>(n.spoof),
                     static_cast<double>(n.bona - bona_below) / static_cast<double>(n.bona)});
    i = j;
  }
  return crossing(curve);
}

double eer_bruteforce(const ScoreSet& set) {
  const Counts n = check_scores(set);
  std::vector<double> distinct = set.scores;
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());

  std::vector<double> thresholds{-std::numeric_limits<double>::infinity()};
  for (std::size_t i = 0; i < distinct.size(); ++i) {
    thresholds.push_back(distinct[i]);
    if (i + 1 < distinct.size()) thresholds.push_back(0.5 * (distinct[i] + distinct[i + 1]));
  }
  thresholds.push_back(std::numeric_limits<double>::infinity());

  std::vector<RocPoint> curve;
  for (double t : thresholds) {
    std::size_t false_accept = 0, false_reject = 0;
    for (std::size_t i = 0; i < set.scores.size(); ++i) {
      if (set.labels[i] == kSpoof && set.scores[i] < t) ++false_accept;
      if (set.labels[i] == kBonaFide && set.scores[i] >= t) ++false_reject;
    }
    curve.push_back({static_cast<double>(false_accept) / static_cast<double>(n.spoof),
                     static_cast<double>(false_reject) / static_cast<double>(n.bona)});
  }
  return crossing(curve);
}

Tensor make_batch(const ModelGraph& model, const std::vector<LabeledExample>& examples,
                  std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error(ErrorKind::kArgument, "empty batch");
  const Shape shape = batch_shape(model, indices.size());
  Tensor out(shape, 0.0);
  const std::size_t per = shape_size(model.input_shape);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const LabeledExample& ex = examples.at(indices[b]);
    const Tensor item = model.input_kind == InputKind::kImage ? ex.features : as_sequence(ex.features);
    if (item.size() != per) {
      throw Error(ErrorKind::kShape, "example features " + shape_str(ex.features.shape()) +
                                         " do not fit model input " + shape_str(model.input_shape));
    }
    std::copy(item.data().begin(), item.data().end(), out.data().begin() + static_cast<long>(b * per));
  }
  return out;
}

std::vector<int> batch_labels(const std::vector<LabeledExample>& examples, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(examples.at(i).label);
  return out;
}

ScoreSet score_examples(const ModelGraph& model, const ParamStore& params, const std::vector<LabeledExample>& examples,
                        std::size_t batch_size) {
  ScoreSet set;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) idx.push_back(i);
    const Tensor logits = model_forward(model, params, make_batch(model, examples, idx));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      set.scores.push_back(logits.at({b, 1}) - logits.at({b, 0}));
      set.labels.push_back(examples[idx[b]].label);
    }
  }
  return set;
}

double evaluate_eer(const ModelGraph& model, const ParamStore& params, const std::vector<LabeledExample>& examples) {
  return compute_eer(score_examples(model, params, examples));
}

double measure_backward_time(const ModelGraph& model, const ParamStore& params, const Tensor& batch,
                             const std::vector<int>& labels, std::size_t warmup, std::size_t iters,
                             const OptimizerConfig& optimizer) {
  if (iters == 0) throw Error(ErrorKind::kArgument, "timing needs at least one measured iteration");
  ParamStore work = params;
  Optimizer opt(optimizer);
  auto built = build_model_graph(model, batch.dim(0), &labels);
  using Clock = std::chrono::steady_clock;
  Clock::duration total{};
  for (std::size_t i = 0; i < warmup + iters; ++i) {
    forward(built.graph, std::span<const Tensor>(&batch, 1), work);
    const auto start = Clock::now();
    const GradMap grads = backward(built.graph, work);
    opt.step(work, grads);
    const auto stop = Clock::now();
    if (i >= warmup) total += stop - start;
  }
  const double ms = std::chrono::duration<double, std::milli>(total).count() / static_cast<double>(iters);
  return std::max(ms, std::numeric_limits<double>::min());
}

std::size_t gradient_element_count(const ParamStore& params) { return params.element_count(true); }

Tensor gradcam(const ModelGraph& model, const ParamStore& params, const Tensor& input, std::size_t target_layer,
               std::size_t class_index) {
  if (target_layer >= model.layers.size() || !std::holds_alternative<Conv2dLayer>(model.layers[target_layer])) {
    throw Error(ErrorKind::kArgument, "Grad-CAM target layer " + std::to_string(target_layer) + " is not a conv layer");
  }
  if (class_index >= model.head.out_dim()) throw Error(ErrorKind::kArgument, "class index out of range");
  const Tensor x = input.rank() == model.input_shape.size() ? input.reshaped(batch_shape(model, 1)) : input;
  if (x.shape() != batch_shape(model, 1)) {
    throw Error(ErrorKind::kShape, "Grad-CAM input must be " + shape_str(model.input_shape) + ", got " +
                                       shape_str(input.shape()));
  }
  ParamStore frozen = params;
  frozen.set_all_trainable(false);

  auto built = build_model_graph(model, 1);
  Graph& g = built.graph;
  Tensor onehot({1, model.head.out_dim()}, 0.0);
  onehot[class_index] = 1.0;
  g.set_output(g.sum(g.mul(built.logits, g.constant(onehot, "class_selector"))));
  const auto& maps = built.layer_outputs[target_layer];
  for (NodeId m : maps) g.watch(m);
  forward(g, std::span<const Tensor>(&x, 1), frozen);
  backward(g, frozen);

  const Tensor& first = g.value(maps.front());
  const std::size_t h = first.dim(2), w = first.dim(3), area = h * w;
  Tensor cam({h, w}, 0.0);
  for (NodeId m : maps) {
    const Tensor& a = g.value(m);
    const Tensor grad = g.gradient(m);
    for (std::size_t c = 0; c < a.dim(1); ++c) {
      double alpha = 0.0;
      for (std::size_t k = 0; k < area; ++k) alpha += grad[c * area + k];
      alpha /= static_cast<double>(area);
      for (std::size_t k = 0; k < area; ++k) cam[k] += alpha * a[c * area + k];
    }
  }
  double peak = 0.0;
  for (double& v : cam.data()) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (double& v : cam.data()) v /= peak;
  }
  return cam;
}

void write_matrix(const std::filesystem::path& path, const Tensor& matrix) {
  if (matrix.rank() != 2) throw Error(ErrorKind::kShape, "write_matrix expects a 2-D tensor");
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < matrix.dim(0); ++i) {
    for (std::size_t j = 0; j < matrix.dim(1); ++j) os << (j ? " " : "") << matrix[i * matrix.dim(1) + j];
    os << '\n';
  }
  write_file_atomic(path, os.str());
}

}  // namespace dropin
