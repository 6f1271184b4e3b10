// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one PASS/FAIL line per criterion. Exits 1 if any
// criterion fails.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "dropin/checkpoint.hpp"
#include "dropin/eval.hpp"
#include "dropin/experiment.hpp"
#include "dropin/growth.hpp"
#include "dropin/plasticity.hpp"
#include "dropin/rng.hpp"
#include "families.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace dropin;
using namespace testing_support;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int number;
  std::string name;
  double limit_seconds;
  std::function<Verdict()> check;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

void sgd_step(const ModelGraph& m, ParamStore& p, Optimizer& opt, const Tensor& x, const std::vector<int>& y) {
  auto built = build_model_graph(m, x.dim(0), &y);
  forward(built.graph, std::span<const Tensor>(&x, 1), p);
  opt.step(p, backward(built.graph, p));
}

std::string run_cli(const std::string& args) {
  const fs::path out = fs::temp_directory_path() / "dropin_acceptance_cli.txt";
  const std::string cmd = std::string(DROPIN_CLI) + " " + args + " >" + out.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(out);
  std::stringstream text;
  text << in.rdbuf();
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw std::runtime_error("'" + args + "' failed: " + text.str());
  }
  return text.str();
}

std::string without_timing(const std::string& row) {
  std::vector<std::string> cells;
  std::stringstream ss(row);
  for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
  if (cells.size() != 7) return row;
  cells[4] = "/";
  std::string joined;
  for (std::size_t i = 0; i < cells.size(); ++i) joined += (i ? "," : "") + cells[i];
  return joined;
}

// 1
Verdict gradients() {
  double worst = 0.0;
  std::size_t instances = 0;
  for (const std::string family : {"dense", "conv2d", "gru", "attention", "lora"}) {
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
      FamilyCase fc = make_family_case(family, 1000 + trial, trial % 2 == 1);
      worst = std::max(worst, family_gradient_error(fc));
      ++instances;
    }
  }
  return {worst <= 1e-5, "max relative error " + fmt(worst) + " over " + std::to_string(instances) + " instances"};
}

// 2
Verdict zero_init() {
  double worst = 0.0;
  for (const auto& family : family_names()) {
    ModelGraph m = family_model(family);
    ParamStore p = random_params(m, 202);
    const ModelGraph m0 = m;
    const ParamStore p0 = p;
    NeuronLedger ledger = NeuronLedger::for_model(m);
    DropinPlan plan;
    plan.selected_layers = m.expandable_layers();
    plan.init_sigma = 0.0;
    plan.attention_scale = ScaleMode::kOriginal;
    dropin::dropin(m, p, ledger, plan);
    Rng rng(203);
    for (int i = 0; i < 100; ++i) {
      const Tensor x = random_tensor(batch_shape(m, 1), rng, 2.0);
      worst = std::max(worst, max_abs_diff(model_forward(m0, p0, x).data(), model_forward(m, p, x).data()));
    }
  }
  return {worst <= 1e-12, "max |delta output| " + fmt(worst) + " over 4 families x 100 inputs"};
}

// 3
Verdict frozen_immutability() {
  std::size_t checked = 0, moved_added = 0, changed_original = 0;
  for (const auto& family : family_names()) {
    ModelGraph m = family_model(family);
    ParamStore p = random_params(m, 301);
    NeuronLedger ledger = NeuronLedger::for_model(m);
    DropinPlan plan;
    plan.selected_layers = {family_target(family)};
    dropin::dropin(m, p, ledger, plan);
    apply_freeze(p, ledger, FreezePolicy::kFrozen);
    const ParamStore before = p;
    Optimizer opt(OptimizerConfig{});
    Rng rng(302);
    for (int step = 0; step < 50; ++step) {
      const Tensor x = random_tensor(batch_shape(m, 4), rng);
      sgd_step(m, p, opt, x, {0, 1, 1, 0});
    }
    const auto added = ledger.added_params();
    for (const auto& [id, t] : p.entries()) {
      if (added.count(id)) {
        moved_added += t == before.get(id) ? 0 : 1;
      } else {
        ++checked;
        changed_original += t == before.get(id) ? 0 : 1;
      }
    }
  }
  return {changed_original == 0 && moved_added > 0,
          std::to_string(changed_original) + " of " + std::to_string(checked) +
              " original tensors changed after 50 Adam steps; " + std::to_string(moved_added) + " added tensors moved"};
}

// 4
Verdict prune_restoration() {
  bool ok = true;
  std::string note;
  for (const auto& family : family_names()) {
    for (std::optional<double> sigma : {std::optional<double>(), std::optional<double>(0.0), std::optional<double>(0.3)}) {
      ModelGraph m = family_model(family);
      ParamStore p = random_params(m, 401);
      const std::size_t base = param_count(p);
      const auto shapes = m.param_shapes();
      const ParamStore p0 = p;
      NeuronLedger ledger = NeuronLedger::for_model(m);
      DropinPlan plan;
      plan.selected_layers = m.expandable_layers();
      plan.init_sigma = sigma;
      dropin::dropin(m, p, ledger, plan);
      ModelGraph m_untrained = m;
      ParamStore p_untrained = p;
      NeuronLedger l_untrained = ledger;
      prune(m_untrained, p_untrained, l_untrained);
      if (!(p_untrained == p0)) {
        ok = false;
        note += " " + family + ":identity";
      }
      apply_freeze(p, ledger, FreezePolicy::kUnfrozen);
      Optimizer opt(OptimizerConfig{});
      Rng rng(402);
      for (int step = 0; step < 20; ++step) sgd_step(m, p, opt, random_tensor(batch_shape(m, 4), rng), {1, 0, 0, 1});
      prune(m, p, ledger);
      if (param_count(p) != base || m.param_shapes() != shapes) {
        ok = false;
        note += " " + family + ":count";
      }
      for (const auto& [id, shape] : shapes) {
        if (p.get(id).shape() != shape) ok = false;
      }
    }
  }
  return {ok, ok ? "count and shapes restored for 4 families x 3 sigmas; untrained prune bit-exact" : "failed:" + note};
}

// 5
Verdict parameter_law() {
  ModelGraph dense("dense", InputKind::kImage, {4, 1, 1}, {make_flatten("flat"), make_dense("fc", 8)});
  ParamStore dp = init_params(dense, 1);
  NeuronLedger dl = NeuronLedger::for_model(dense);
  const std::size_t dense_before = dense.in_layer_param_count(1);
  DropinPlan plan;
  plan.selected_layers = {1};
  plan.growth_ratio = 1.0;
  dropin::dropin(dense, dp, dl, plan);
  const std::size_t dense_after = dense.in_layer_param_count(1);
  std::size_t dense_added = 0;
  for (const auto& s : dl.added_slices()) dense_added += s.in_layer ? s.elements : 0;

  ModelGraph gru("gru", InputKind::kSequence, {5, 2}, {make_gru("gru", 3)});
  ParamStore gp = init_params(gru, 1);
  NeuronLedger gl = NeuronLedger::for_model(gru);
  auto gate = [&](const std::string& g) {
    std::size_t n = 0;
    for (const auto& [id, t] : gp.entries()) {
      for (const char* kind : {"w_", "u_", "b_"}) {
        if (id.starts_with("gru." + std::string(kind) + g)) n += t.size();
      }
    }
    return n;
  };
  const std::size_t gate_before = gate("z");
  plan.selected_layers = {0};
  dropin::dropin(gru, gp, gl, plan);
  const std::size_t gate_after = gate("z");
  const bool ok = dense_before == 40 && dense_after == 80 && dense_added == dense_before && gate_before == 18 &&
                  gate_after == 54 && gate("r") == 54 && gate("h") == 54;
  return {ok, "Dense(4->8) " + std::to_string(dense_before) + "->" + std::to_string(dense_after) + " (added " +
                  std::to_string(dense_added) + "); GRU gate " + std::to_string(gate_before) + "->" +
                  std::to_string(gate_after)};
}

// 6
Verdict eer_oracle() {
  Rng rng(606);
  double worst_oracle = 0.0, worst_transform = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const ScoreSet s = random_set(rng);
    const double fast = compute_eer(s);
    worst_oracle = std::max(worst_oracle, std::abs(fast - eer_bruteforce(s)));
    ScoreSet t = s;
    for (double& v : t.scores) v = std::exp(v / 3.0) + v * v * v;
    worst_transform = std::max(worst_transform, std::abs(compute_eer(t) - fast));
  }
  return {worst_oracle <= 1e-9 && worst_transform <= 1e-9,
          "max |fast - brute force| " + fmt(worst_oracle) + ", max transform drift " + fmt(worst_transform) +
              " over 1000 sets"};
}

// 7
Verdict efficiency() {
  const ExperimentConfig config = config_from_json(Json{{"strategy", "dropin_frozen"}});
  ModelGraph model = build_model(config.model, config.data);
  ParamStore params = init_params(model, derive_seed(config.seed, "init"));
  const std::size_t baseline_count = gradient_element_count(params);
  NeuronLedger ledger = NeuronLedger::for_model(model);
  DropinPlan plan;
  plan.selected_layers = select_layers(model, 1, derive_seed(config.seed, "select"));
  dropin::dropin(model, params, ledger, plan);
  ParamStore frozen = params;
  apply_freeze(frozen, ledger, FreezePolicy::kFrozen);
  ParamStore unfrozen = params;
  apply_freeze(unfrozen, ledger, FreezePolicy::kUnfrozen);
  const std::size_t frozen_count = gradient_element_count(frozen);

  Rng rng(707);
  const Tensor batch = random_tensor(batch_shape(model, 32), rng);
  std::vector<int> labels;
  for (int i = 0; i < 32; ++i) labels.push_back(i % 2);
  int wins = 0;
  std::string times;
  for (int repeat = 0; repeat < 5; ++repeat) {
    const double f = measure_backward_time(model, frozen, batch, labels, 3, 20);
    const double u = measure_backward_time(model, unfrozen, batch, labels, 3, 20);
    wins += f <= u ? 1 : 0;
    times += " " + fmt(f) + "/" + fmt(u);
  }
  return {frozen_count < baseline_count && wins >= 4,
          "gradient elements frozen " + std::to_string(frozen_count) + " < baseline " + std::to_string(baseline_count) +
              "; frozen<=unfrozen in " + std::to_string(wins) + "/5 repeats (ms frozen/unfrozen:" + times + ")"};
}

// 8
Verdict plasticity_trend() {
  int holds = 0;
  std::string rows, failures;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    ExperimentConfig base = config_from_json(Json{{"strategy", "baseline"}, {"epochs", 15}});
    base.seed = seed;
    base.data.seed = seed;
    base.data.artifact_strength = 0.5;
    ExperimentConfig plastic = base;
    plastic.strategy = Strategy::kPlasticity;
    plastic.epochs_per_stage = 5;
    if (total_epochs(base) != total_epochs(plastic)) return {false, "epoch budgets differ"};
    const Dataset data = generate(base.data);
    const double b = run_experiment(base, data).report.test_eer_percent;
    const double p = run_experiment(plastic, data).report.test_eer_percent;
    rows += " s" + std::to_string(seed) + ":" + fmt(p) + "/" + fmt(b);
    if (p <= b) {
      ++holds;
    } else {
      failures += " " + std::to_string(seed);
    }
  }
  return {holds >= 3, "plasticity<=baseline test EER% in " + std::to_string(holds) + "/5 seeds (plasticity/baseline:" +
                          rows + ")" + (failures.empty() ? "" : "; failing seeds:" + failures)};
}

// 9
Verdict determinism() {
  const fs::path dir = fs::temp_directory_path() / "dropin_acceptance_determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  int identical = 0;
  std::string detail;
  for (Strategy s : all_strategies()) {
    const fs::path cfg = dir / (to_string(s) + ".json");
    write_file_atomic(cfg, Json{{"strategy", to_string(s)}, {"seed", 42}}.dump());
    auto row = [&] {
      const std::string out = run_cli("run " + cfg.string());
      return without_timing(out.substr(out.find('\n') + 1, out.rfind('\n') - out.find('\n') - 1));
    };
    const std::string first = row();
    const std::string second = row();
    if (first == second) {
      ++identical;
    } else {
      detail += " [" + first + "] vs [" + second + "]";
    }
  }
  fs::remove_all(dir);
  return {identical == 5, std::to_string(identical) + "/5 strategies produced identical rows" + detail};
}

// 10
Verdict ablation() {
  const fs::path dir = fs::temp_directory_path() / "dropin_acceptance_sweep";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Json doc{{"strategy", "dropin_unfrozen"},
                 {"epochs", 5},
                 {"output_dir", (dir / "out").string()},
                 {"model",
                  {{"name", "toy_cnn_mlp"},
                   {"layers",
                    {{{"type", "conv2d"}, {"name", "conv1"}, {"out_channels", 4}},
                     {{"type", "conv2d"}, {"name", "conv2"}, {"out_channels", 8}, {"stride", 2}},
                     {{"type", "global_avg_pool"}, {"name", "gap"}},
                     {{"type", "dense"}, {"name", "fc1"}, {"units", 8}},
                     {{"type", "dense"}, {"name", "fc2"}, {"units", 8}}}}}}};
  write_file_atomic(dir / "sweep.json", doc.dump(2));
  const std::string out = run_cli("sweep " + (dir / "sweep.json").string());
  std::ifstream csv(dir / "out" / "ablation.csv");
  std::string line;
  std::getline(csv, line);
  std::size_t entries = 0;
  std::set<std::string> budgets;
  std::vector<double> eers;
  while (std::getline(csv, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    ++entries;
    budgets.insert(cells.at(3) + "/" + cells.at(4));
    if (cells.at(2) != "/") eers.push_back(std::stod(cells.at(2)));
  }
  fs::remove_all(dir);
  const bool ok = entries == 4 && eers.size() == 4 && budgets.size() == 1;
  std::string detail = std::to_string(eers.size()) + " EER entries, seed/budget " + *budgets.begin() + ", EER%:";
  for (double e : eers) detail += " " + fmt(e);
  if (!eers.empty()) {
    detail += "; spread " + fmt(*std::max_element(eers.begin(), eers.end()) - *std::min_element(eers.begin(), eers.end()));
  }
  return {ok, detail};
}

// 11
Verdict gradcam_checks() {
  double worst = 0.0;
  bool bounded = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const ModelGraph model = cam_model();
    const ParamStore p = random_params(model, 1100 + seed);
    Rng rng(1200 + seed);
    const Tensor x = random_tensor({2, 6, 7}, rng);
    const CamOracle o = cam_forward(p, x, 4);
    for (std::size_t cls : {0u, 1u}) {
      const auto g2 = grad_a2(p, o, cls);
      const Tensor h2 = gradcam(model, p, x, 1, cls);
      const Tensor h1 = gradcam(model, p, x, 0, cls);
      worst = std::max(worst, max_abs_diff(h2.data(), cam_from(o.a2, g2, 4, o.d2.oh() * o.d2.ow())));
      worst = std::max(worst, max_abs_diff(h1.data(), cam_from(o.a1, grad_a1(p, o, g2), 3, o.d1.oh() * o.d1.ow())));
      for (const Tensor* h : {&h1, &h2}) {
        double peak = 0.0;
        for (double v : h->data()) {
          bounded = bounded && v >= 0.0 && v <= 1.0;
          peak = std::max(peak, v);
        }
        bounded = bounded && (peak == 0.0 || peak == 1.0);
      }
    }
  }
  const ModelGraph model = cam_model();
  ParamStore p = random_params(model, 1300);
  Tensor w = p.get("head.weight");
  for (std::size_t k = 0; k < 4; ++k) w.at({1, k}) = 0.0;
  p.replace("head.weight", w);
  Rng rng(1301);
  const Tensor x = random_tensor({2, 6, 7}, rng);
  bool zero = true;
  for (std::size_t layer : {0u, 1u}) {
    const Tensor h = gradcam(model, p, x, layer, 1);
    for (double v : h.data()) zero = zero && v == 0.0;
  }
  return {worst <= 1e-10 && bounded && zero, "max |heatmap - oracle| " + fmt(worst) + " over 50 nets x 2 classes x 2 layers; " +
                                                 (bounded ? "bounded in [0,1]" : "NOT bounded") + "; zero gradient " +
                                                 (zero ? "gives zero map" : "gives NON-zero map")};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "gradient suite", 60, gradients},
      {2, "zero-init preservation", 30, zero_init},
      {3, "frozen immutability", 30, frozen_immutability},
      {4, "prune restoration", 30, prune_restoration},
      {5, "dropin parameter law", 1, parameter_law},
      {6, "EER oracle equivalence", 60, eer_oracle},
      {7, "efficiency trend", 120, efficiency},
      {8, "plasticity trend", 600, plasticity_trend},
      {9, "determinism", 300, determinism},
      {10, "ablation sweep", 600, ablation},
      {11, "Grad-CAM", 30, gradcam_checks},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = seconds < c.limit_seconds;
    const bool pass = v.pass && in_time;
    failed += pass ? 0 : 1;
    std::cout << "criterion " << c.number << " (" << c.name << "): " << (pass ? "PASS" : "FAIL") << " | " << v.detail
              << " | " << fmt(seconds) << " s of " << c.limit_seconds << " s" << (in_time ? "" : " (too slow)")
              << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
