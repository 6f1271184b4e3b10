// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "dropin/tensor.hpp"

namespace dropin {

/// Class labels. Scores follow the same polarity: higher means spoof.
inline constexpr int kBonaFide = 0;
inline constexpr int kSpoof = 1;

struct SynthSpec {
  std::size_t n_train = 2000;
  std::size_t n_dev = 500;
  std::size_t n_test = 500;
  std::size_t freq_bins = 16;
  std::size_t time_frames = 40;
  double artifact_strength = 0.5;  // delta in [0, 1]
  double noise_level = 1.0;
  double spoof_fraction = 0.5;
  std::uint64_t seed = 42;

  bool operator==(const SynthSpec&) const = default;
};

struct LabeledExample {
  Tensor features;  // (freq_bins, time_frames)
  int label = kBonaFide;
};

struct Dataset {
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> dev;
  std::vector<LabeledExample> test;
};

/// Throws Error(kConfig) on an invalid spec.
void validate(const SynthSpec& spec);

/// Bona fide examples are harmonic band patterns with a slow energy envelope
/// plus Gaussian noise. Spoof examples come from the same generator with a
/// delta-weighted artifact added: raised, frame-correlated energy in the top
/// quarter of the bands and a ripple with a fixed four-frame period. Each
/// split uses its own seeded stream; exactly round(n * spoof_fraction)
/// examples of each split are spoofs.
Dataset generate(const SynthSpec& spec);

/// (freq, time) features to a time-major (time, freq) sequence.
Tensor as_sequence(const Tensor& features);
Tensor as_sequence(const LabeledExample& example);

void save_dataset(const std::filesystem::path& path, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace dropin
