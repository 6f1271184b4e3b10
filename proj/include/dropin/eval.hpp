// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "dropin/layers.hpp"
#include "dropin/optim.hpp"
#include "dropin/synth.hpp"

namespace dropin {

/// Detection scores (higher = more likely spoof) with parallel labels.
struct ScoreSet {
  std::vector<double> scores;
  std::vector<int> labels;  // kBonaFide or kSpoof
};

/// Equal error rate in [0, 1]. Thresholds sit at -inf, the midpoints between
/// consecutive distinct scores, and +inf; FAR(t) is the fraction of spoofs
/// scored below t and FRR(t) the fraction of bona fide scored at or above t.
/// The result interpolates linearly across the first sign change of FAR - FRR.
double compute_eer(const ScoreSet& set);

/// Quadratic reference: counts FAR/FRR from scratch at every distinct score
/// and every midpoint.
double eer_bruteforce(const ScoreSet& set);

/// Model input batch for the given example indices: (B,1,F,T) for image
/// models, (B,T,F) for sequence models.
Tensor make_batch(const ModelGraph& model, const std::vector<LabeledExample>& examples,
                  std::span<const std::size_t> indices);
std::vector<int> batch_labels(const std::vector<LabeledExample>& examples, std::span<const std::size_t> indices);

/// Score = logit[spoof] - logit[bona fide] for every example.
ScoreSet score_examples(const ModelGraph& model, const ParamStore& params, const std::vector<LabeledExample>& examples,
                        std::size_t batch_size = 128);

double evaluate_eer(const ModelGraph& model, const ParamStore& params, const std::vector<LabeledExample>& examples);

/// Mean wall-clock milliseconds of one backward pass plus the masked
/// optimizer update, over `iters` measured steps after `warmup` discarded
/// ones. Forward passes run between steps but are not timed. Works on a copy
/// of `params`.
double measure_backward_time(const ModelGraph& model, const ParamStore& params, const Tensor& batch,
                             const std::vector<int>& labels, std::size_t warmup, std::size_t iters,
                             const OptimizerConfig& optimizer = {});

/// Number of gradient elements a training step computes and applies.
std::size_t gradient_element_count(const ParamStore& params);

/// Grad-CAM for one input of shape `model.input_shape` (or with a leading
/// batch dimension of 1). The activation maps are the post-activation
/// outputs of conv layer `target_layer`; the heatmap has their spatial shape
/// and is divided by its maximum unless it is all zero.
Tensor gradcam(const ModelGraph& model, const ParamStore& params, const Tensor& input, std::size_t target_layer,
               std::size_t class_index);

/// Writes a matrix as whitespace-separated rows.
void write_matrix(const std::filesystem::path& path, const Tensor& matrix);

}  // namespace dropin
