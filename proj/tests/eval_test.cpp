// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "dropin/error.hpp"
#include "dropin/eval.hpp"
#include "dropin/growth.hpp"
#include "dropin/report.hpp"
#include "dropin/rng.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dropin;
using namespace testing_support;

namespace {

ScoreSet make_set(std::vector<double> bona, std::vector<double> spoof) {
  ScoreSet s;
  for (double v : bona) {
    s.scores.push_back(v);
    s.labels.push_back(kBonaFide);
  }
  for (double v : spoof) {
    s.scores.push_back(v);
    s.labels.push_back(kSpoof);
  }
  return s;
}

}  // namespace

TEST(Eer, SeparableScores) {
  const ScoreSet s = make_set({0.1, 0.2}, {0.8, 0.9});
  EXPECT_EQ(compute_eer(s), 0.0);
  EXPECT_EQ(eer_bruteforce(s), 0.0);
}

TEST(Eer, AllTiedScoresGiveHalf) {
  const ScoreSet s = make_set({0.4, 0.4, 0.4}, {0.4, 0.4});
  EXPECT_DOUBLE_EQ(compute_eer(s), 0.5);
  EXPECT_DOUBLE_EQ(eer_bruteforce(s), 0.5);
}

TEST(Eer, InterleavedScoresMatchOracle) {
  const ScoreSet s = make_set({0.1, 0.8}, {0.3, 0.9});
  EXPECT_NEAR(eer_bruteforce(s), 0.5, 1e-12);
  EXPECT_NEAR(compute_eer(s), eer_bruteforce(s), 1e-9);
}

TEST(Eer, FullyInvertedScoresGiveOne) {
  const ScoreSet s = make_set({0.8, 0.9}, {0.1, 0.2});
  EXPECT_DOUBLE_EQ(compute_eer(s), 1.0);
  EXPECT_DOUBLE_EQ(eer_bruteforce(s), 1.0);
}

TEST(Eer, InvalidSetsAreRejected) {
  EXPECT_THROW(compute_eer(make_set({0.1, 0.2}, {})), Error);
  EXPECT_THROW(eer_bruteforce(make_set({}, {0.1})), Error);
  ScoreSet s = make_set({0.1}, {0.2});
  s.labels.pop_back();
  EXPECT_THROW(compute_eer(s), Error);
  s = make_set({0.1}, {0.2});
  s.labels[0] = 3;
  EXPECT_THROW(compute_eer(s), Error);
  s = make_set({0.1}, {std::nan("")});
  EXPECT_THROW(compute_eer(s), Error);
}

TEST(Eer, RandomSetsAgreeWithBruteForce) {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const ScoreSet s = random_set(rng);
    const double fast = compute_eer(s);
    ASSERT_NEAR(fast, eer_bruteforce(s), 1e-9) << "trial " << trial;
    ASSERT_GE(fast, 0.0);
    ASSERT_LE(fast, 1.0);
  }
}

TEST(Eer, InvariantUnderIncreasingTransform) {
  Rng rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const ScoreSet s = random_set(rng);
    ScoreSet t = s;
    for (double& v : t.scores) v = std::exp(v / 3.0) + v * v * v;
    ASSERT_NEAR(compute_eer(t), compute_eer(s), 1e-9) << "trial " << trial;
  }
}

TEST(Eer, InvariantUnderLabelSwapAndNegation) {
  Rng rng(78);
  for (int trial = 0; trial < 1000; ++trial) {
    const ScoreSet s = random_set(rng);
    ScoreSet t = s;
    for (double& v : t.scores) v = -v;
    for (int& l : t.labels) l = 1 - l;
    ASSERT_NEAR(compute_eer(t), compute_eer(s), 1e-9) << "trial " << trial;
  }
}


TEST(GradCam, MatchesLoopOracleOnRandomNets) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const ModelGraph model = cam_model();
    const ParamStore p = random_params(model, seed);
    Rng rng(seed + 100);
    const Tensor x = random_tensor({2, 6, 7}, rng);
    const CamOracle o = cam_forward(p, x, 4);
    for (std::size_t cls : {0u, 1u}) {
      const auto g2 = grad_a2(p, o, cls);
      const auto want2 = cam_from(o.a2, g2, 4, o.d2.oh() * o.d2.ow());
      const Tensor got2 = gradcam(model, p, x, 1, cls);
      ASSERT_EQ(got2.shape(), (Shape{o.d2.oh(), o.d2.ow()}));
      EXPECT_LE(testing_support::max_abs_diff(got2.data(), want2), 1e-10) << "seed " << seed;

      const auto want1 = cam_from(o.a1, grad_a1(p, o, g2), 3, o.d1.oh() * o.d1.ow());
      const Tensor got1 = gradcam(model, p, x, 0, cls);
      ASSERT_EQ(got1.shape(), (Shape{6, 7}));
      EXPECT_LE(testing_support::max_abs_diff(got1.data(), want1), 1e-10) << "seed " << seed;

      for (const Tensor* h : {&got1, &got2}) {
        double peak = 0.0;
        for (double v : h->data()) {
          EXPECT_GE(v, 0.0);
          EXPECT_LE(v, 1.0);
          peak = std::max(peak, v);
        }
        EXPECT_TRUE(peak == 0.0 || peak == 1.0);
      }
    }
  }
}

TEST(GradCam, ZeroGradientGivesZeroHeatmap) {
  const ModelGraph model = cam_model();
  ParamStore p = random_params(model, 5);
  Tensor w = p.get("head.weight");
  for (std::size_t k = 0; k < 4; ++k) w.at({1, k}) = 0.0;
  p.replace("head.weight", w);
  Rng rng(6);
  const Tensor x = random_tensor({2, 6, 7}, rng);
  for (std::size_t layer : {0u, 1u}) {
    const Tensor heat = gradcam(model, p, x, layer, 1);
    for (double v : heat.data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(GradCam, SingleChannelIsProportionalToItsMap) {
  const ModelGraph model = cam_model(1);
  ParamStore p = random_params(model, 8);
  Tensor w = p.get("head.weight");
  w.at({0, 0}) = 0.7;
  p.replace("head.weight", w);
  Rng rng(9);
  const Tensor x = random_tensor({2, 6, 7}, rng);
  const CamOracle o = cam_forward(p, x, 1);
  const double peak = *std::max_element(o.a2.begin(), o.a2.end());
  ASSERT_GT(peak, 0.0);
  const Tensor heat = gradcam(model, p, x, 1, 0);
  for (std::size_t i = 0; i < o.a2.size(); ++i) EXPECT_NEAR(heat[i], o.a2[i] / peak, 1e-12);
}

TEST(GradCam, RejectsNonConvTargetsAndBadClasses) {
  const ModelGraph model = cam_model();
  const ParamStore p = random_params(model, 1);
  Rng rng(2);
  const Tensor x = random_tensor({2, 6, 7}, rng);
  EXPECT_THROW(gradcam(model, p, x, 2, 0), Error);
  EXPECT_THROW(gradcam(model, p, x, 7, 0), Error);
  EXPECT_THROW(gradcam(model, p, x, 0, 2), Error);
  EXPECT_THROW(gradcam(model, p, random_tensor({2, 6, 6}, rng), 0, 0), Error);
}

TEST(GradCam, LeavesParametersUntouched) {
  const ModelGraph model = cam_model();
  const ParamStore p = random_params(model, 3);
  const ParamStore before = p;
  Rng rng(4);
  gradcam(model, p, random_tensor({1, 2, 6, 7}, rng), 0, 1);
  EXPECT_EQ(p, before);
}

TEST(MatrixDump, WritesRowsOfNumbers) {
  const auto path = std::filesystem::temp_directory_path() / "dropin_matrix.txt";
  write_matrix(path, Tensor({2, 3}, std::vector<double>{0, 0.5, 1, 0.25, 0, 0.75}));
  std::ifstream in(path);
  std::vector<double> values;
  for (double v; in >> v;) values.push_back(v);
  EXPECT_EQ(values, (std::vector<double>{0, 0.5, 1, 0.25, 0, 0.75}));
  std::filesystem::remove(path);
}

namespace {

struct TimingFixture {
  ModelGraph model = ModelGraph("toy", InputKind::kImage, {1, 16, 40},
                                {make_conv2d("conv1", 4, 3), make_conv2d("conv2", 8, 3, 2), make_global_avg_pool("gap")});
  ParamStore params = init_params(model, 42);
  Tensor batch;
  std::vector<int> labels;

  TimingFixture() {
    Rng rng(1);
    batch = random_tensor(batch_shape(model, 32), rng);
    for (std::size_t i = 0; i < 32; ++i) labels.push_back(static_cast<int>(i % 2));
  }
};

}  // namespace

TEST(BackwardTime, PositiveAndRepeatable) {
  TimingFixture f;
  const double first = measure_backward_time(f.model, f.params, f.batch, f.labels, 3, 30);
  const double second = measure_backward_time(f.model, f.params, f.batch, f.labels, 3, 30);
  EXPECT_GT(first, 0.0);
  EXPECT_TRUE(std::isfinite(first));
  EXPECT_LE(std::abs(first - second), 0.25 * std::max(first, second));
  EXPECT_THROW(measure_backward_time(f.model, f.params, f.batch, f.labels, 0, 0), Error);
}

TEST(BackwardTime, DoesNotModifyParameters) {
  TimingFixture f;
  const ParamStore before = f.params;
  measure_backward_time(f.model, f.params, f.batch, f.labels, 1, 2);
  EXPECT_EQ(f.params, before);
}

TEST(BackwardTime, FrozenDropinComputesFewerGradients) {
  TimingFixture f;
  NeuronLedger ledger = NeuronLedger::for_model(f.model);
  DropinPlan plan;
  plan.selected_layers = {1};
  dropin::dropin(f.model, f.params, ledger, plan);
  ParamStore frozen = f.params;
  apply_freeze(frozen, ledger, FreezePolicy::kFrozen);
  ParamStore unfrozen = f.params;
  apply_freeze(unfrozen, ledger, FreezePolicy::kUnfrozen);
  EXPECT_EQ(gradient_element_count(frozen), ledger.added_elements());
  EXPECT_EQ(gradient_element_count(unfrozen), param_count(f.params));
  EXPECT_LT(gradient_element_count(frozen), gradient_element_count(unfrozen));
}

namespace {

RunReport sample_report(Strategy strategy) {
  RunReport r;
  r.dataset = "synthetic";
  r.model = "toy_cnn";
  r.strategy = strategy;
  r.test_eer_percent = 3.6;
  r.params_total = 354;
  if (strategy != Strategy::kPlasticity) {
    r.backward_ms_per_step = 0.125;
    r.params_trainable = 120;
  }
  r.curves = {CurvePoint{"train", 1, 0.69, 40.0}, CurvePoint{"train", 2, 0.5, 12.5}};
  return r;
}

std::filesystem::path fresh_csv(const std::string& name) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove(path);
  std::filesystem::remove(curves_path(path));
  return path;
}

}  // namespace

TEST(Report, PlasticityRowUsesSlashes) {
  EXPECT_EQ(report_row(sample_report(Strategy::kPlasticity)), "synthetic,toy_cnn,plasticity,3.6,/,354,/");
  EXPECT_EQ(report_row(sample_report(Strategy::kDropinFrozen)), "synthetic,toy_cnn,dropin_frozen,3.6,0.125,354,120");
  EXPECT_EQ(report_row(sample_report(Strategy::kLora), false), "synthetic,toy_cnn,lora,3.6,/,354,120");
}

TEST(Report, ValidationMatchesTableConventions) {
  RunReport r = sample_report(Strategy::kPlasticity);
  r.params_trainable = 4;
  EXPECT_THROW(validate(r), Error);
  r = sample_report(Strategy::kBaseline);
  r.backward_ms_per_step.reset();
  EXPECT_THROW(validate(r), Error);
  r = sample_report(Strategy::kBaseline);
  r.dataset = "a,b";
  EXPECT_THROW(validate(r), Error);
}

TEST(Report, EmitAndReadBack) {
  const auto path = fresh_csv("dropin_report_roundtrip.csv");
  std::vector<RunReport> written;
  for (Strategy s : all_strategies()) {
    RunReport r = sample_report(s);
    r.test_eer_percent = 0.1 + static_cast<double>(written.size()) / 3.0;
    emit_report(r, path);
    written.push_back(r);
  }
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, kReportHeader);
  auto back = read_reports(path);
  ASSERT_EQ(back.size(), written.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    RunReport expected = written[i];
    expected.curves.clear();
    EXPECT_EQ(back[i], expected) << i;
  }
  std::ifstream sidecar(curves_path(path));
  std::size_t lines = 0;
  for (std::string line; std::getline(sidecar, line);) ++lines;
  EXPECT_EQ(lines, written.size());
  std::filesystem::remove(path);
  std::filesystem::remove(curves_path(path));
}

TEST(Report, RejectsForeignHeaderAndBadRows) {
  const auto path = fresh_csv("dropin_report_foreign.csv");
  {
    std::ofstream out(path);
    out << "a,b,c\n";
  }
  EXPECT_THROW(emit_report(sample_report(Strategy::kBaseline), path), Error);
  EXPECT_THROW(parse_report_row("synthetic,toy_cnn,nonsense,1,2,3,4"), Error);
  EXPECT_THROW(parse_report_row("synthetic,toy_cnn,baseline,1,2,3"), Error);
  EXPECT_THROW(emit_report(sample_report(Strategy::kBaseline), path / "report.csv"), Error);
  std::filesystem::remove(path);
}

TEST(Report, NumbersRoundTripExactly) {
  for (double v : {0.1, 1.0 / 3.0, 2.45, 1e-7, 123456.789, 0.0}) {
    EXPECT_EQ(std::stod(format_number(v)), v);
  }
  EXPECT_EQ(format_number(3.6), "3.6");
}
