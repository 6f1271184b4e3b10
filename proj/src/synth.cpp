// SPDX-License-Identifier: Apache-2.0

#include "dropin/synth.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string_view>

#include "dropin/checkpoint.hpp"
#include "dropin/error.hpp"
#include "dropin/rng.hpp"

namespace dropin {

namespace {

constexpr std::size_t kRipplePeriod = 4;

Tensor make_example(const SynthSpec& spec, std::uint64_t seed, bool spoof) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t nf = spec.freq_bins, nt = spec.time_frames;
  const double f0 = 1.0 + 2.0 * unit(rng);
  const double env_period = 10.0 + 20.0 * unit(rng);
  const double env_phase = 2.0 * std::numbers::pi * unit(rng);
  const double width = 0.6;

  Tensor x({nf, nt}, 0.0);
  for (std::size_t t = 0; t < nt; ++t) {
    const double env = 1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / env_period + env_phase);
    for (std::size_t f = 0; f < nf; ++f) {
      double v = 0.0;
      for (std::size_t k = 1; static_cast<double>(k) * f0 < static_cast<double>(nf) + 2.0 * width; ++k) {
        const double d = static_cast<double>(f) - static_cast<double>(k) * f0;
        v += std::exp(-d * d / (2.0 * width * width)) / static_cast<double>(k);
      }
      x[f * nt + t] = v * env;
    }
  }
  for (double& v : x.data()) v += spec.noise_level * gauss(rng);

  if (spoof) {
    // Artifact draws happen after the shared ones, so with delta = 0 the two
    // classes have identical distributions.
    const double delta = spec.artifact_strength;
    const auto phase = static_cast<std::size_t>(uniform_index(rng, kRipplePeriod));
    const std::size_t high = nf - std::max<std::size_t>(1, nf / 4);
    for (std::size_t t = 0; t < nt; ++t) {
      const double shared = gauss(rng);
      const double ripple =
          0.5 + 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>((t + phase) % kRipplePeriod) /
                               static_cast<double>(kRipplePeriod));
      for (std::size_t f = 0; f < nf; ++f) {
        double a = 0.4 * ripple;
        if (f >= high) a += 0.6 * (1.0 + 0.5 * shared);
        x[f * nt + t] += delta * a;
      }
    }
  }
  return x;
}

std::vector<LabeledExample> make_split(const SynthSpec& spec, std::string_view tag, std::size_t n) {
  const std::uint64_t split_seed = derive_seed(spec.seed, tag);
  const auto n_spoof = static_cast<std::size_t>(std::llround(spec.spoof_fraction * static_cast<double>(n)));
  std::vector<int> labels(n, kBonaFide);
  for (std::size_t i = 0; i < n_spoof; ++i) labels[i] = kSpoof;
  Rng order(derive_seed(split_seed, "labels"));
  for (std::size_t i = n; i > 1; --i) std::swap(labels[i - 1], labels[uniform_index(order, i)]);

  std::vector<LabeledExample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({make_example(spec, derive_seed(split_seed, static_cast<std::uint64_t>(i)), labels[i] == kSpoof),
                   labels[i]});
  }
  return out;
}

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw Error(ErrorKind::kIo, "dataset file is truncated");
  return v;
}

constexpr char kMagic[4] = {'D', 'P', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

}  // namespace

void validate(const SynthSpec& spec) {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw Error(ErrorKind::kConfig, std::string(name) + " must be positive");
  };
  positive(spec.n_train, "n_train");
  positive(spec.n_dev, "n_dev");
  positive(spec.n_test, "n_test");
  positive(spec.freq_bins, "freq_bins");
  positive(spec.time_frames, "time_frames");
  if (!(spec.artifact_strength >= 0.0 && spec.artifact_strength <= 1.0)) {
    throw Error(ErrorKind::kConfig, "artifact_strength must lie in [0, 1]");
  }
  if (!(spec.noise_level >= 0.0) || !std::isfinite(spec.noise_level)) {
    throw Error(ErrorKind::kConfig, "noise_level must be a non-negative number");
  }
  if (!(spec.spoof_fraction > 0.0 && spec.spoof_fraction < 1.0)) {
    throw Error(ErrorKind::kConfig, "spoof_fraction must lie strictly between 0 and 1");
  }
}

Dataset generate(const SynthSpec& spec) {
  validate(spec);
  return Dataset{make_split(spec, "train", spec.n_train), make_split(spec, "dev", spec.n_dev),
                 make_split(spec, "test", spec.n_test)};
}

Tensor as_sequence(const Tensor& features) {
  if (features.rank() != 2) {
    throw Error(ErrorKind::kShape, "as_sequence expects 2-D features, got " + shape_str(features.shape()));
  }
  const std::size_t nf = features.dim(0), nt = features.dim(1);
  Tensor out({nt, nf}, 0.0);
  for (std::size_t f = 0; f < nf; ++f)
    for (std::size_t t = 0; t < nt; ++t) out[t * nf + f] = features[f * nt + t];
  return out;
}

Tensor as_sequence(const LabeledExample& example) { return as_sequence(example.features); }

void save_dataset(const std::filesystem::path& path, const Dataset& data) {
  std::ostringstream os(std::ios::binary);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  for (const auto* split : {&data.train, &data.dev, &data.test}) {
    put<std::uint64_t>(os, split->size());
    for (const auto& ex : *split) {
      put<std::int32_t>(os, ex.label);
      put<std::uint64_t>(os, ex.features.dim(0));
      put<std::uint64_t>(os, ex.features.dim(1));
      os.write(reinterpret_cast<const char*>(ex.features.data().data()),
               static_cast<std::streamsize>(ex.features.size() * sizeof(double)));
    }
  }
  write_file_atomic(path, os.str());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::kIo, "cannot open dataset file " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorKind::kIo, path.string() + " is not a dataset file");
  if (take<std::uint32_t>(is) != kVersion) throw Error(ErrorKind::kIo, "unsupported dataset file version");
  Dataset data;
  for (auto* split : {&data.train, &data.dev, &data.test}) {
    const auto n = take<std::uint64_t>(is);
    for (std::uint64_t i = 0; i < n; ++i) {
      LabeledExample ex;
      ex.label = take<std::int32_t>(is);
      const auto nf = take<std::uint64_t>(is);
      const auto nt = take<std::uint64_t>(is);
      std::vector<double> v(nf * nt);
      is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
      if (!is) throw Error(ErrorKind::kIo, "dataset file is truncated");
      ex.features = Tensor({nf, nt}, std::move(v));
      split->push_back(std::move(ex));
    }
  }
  return data;
}

}  // namespace dropin
