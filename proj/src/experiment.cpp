// SPDX-License-Identifier: Apache-2.0

#include "dropin/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "dropin/checkpoint.hpp"
#include "dropin/error.hpp"
#include "dropin/eval.hpp"
#include "dropin/plasticity.hpp"
#include "dropin/rng.hpp"
#include "dropin/train.hpp"

namespace dropin {

namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& what) {
  throw Error(ErrorKind::kConfig, "'" + key + "': " + what);
}

/// One JSON object of the config. Every key read is remembered so the rest
/// can be rejected by name.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) config_error(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string key(const std::string& name) const { return path_.empty() ? name : path_ + "." + name; }
  bool has(const std::string& name) const { return j_.contains(name); }

  const Json* find(const std::string& name) {
    seen_.insert(name);
    auto it = j_.find(name);
    return it == j_.end() ? nullptr : &*it;
  }

  const Json& require(const std::string& name) {
    const Json* v = find(name);
    if (!v) config_error(key(name), "required key is missing");
    return *v;
  }

  std::size_t size(const std::string& name, std::size_t fallback) {
    const Json* v = find(name);
    return v ? as_size(*v, key(name)) : fallback;
  }
  double number(const std::string& name, double fallback) {
    const Json* v = find(name);
    if (!v) return fallback;
    if (!v->is_number()) config_error(key(name), "expected a number");
    return v->get<double>();
  }
  std::optional<double> optional_number(const std::string& name, std::optional<double> fallback) {
    const Json* v = find(name);
    if (!v) return fallback;
    if (v->is_null()) return std::nullopt;
    if (!v->is_number()) config_error(key(name), "expected a number or null");
    return v->get<double>();
  }
  bool boolean(const std::string& name, bool fallback) {
    const Json* v = find(name);
    if (!v) return fallback;
    if (!v->is_boolean()) config_error(key(name), "expected true or false");
    return v->get<bool>();
  }
  std::string string(const std::string& name, const std::string& fallback) {
    const Json* v = find(name);
    if (!v) return fallback;
    return as_string(*v, key(name));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) config_error(key(it.key()), "unknown key");
    }
  }

  static std::size_t as_size(const Json& v, const std::string& key) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      config_error(key, "expected a non-negative integer");
    }
    return v.get<std::size_t>();
  }
  static std::string as_string(const Json& v, const std::string& key) {
    if (!v.is_string()) config_error(key, "expected a string");
    return v.get<std::string>();
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Parse>
auto enum_value(const std::string& key, const std::string& text, Parse parse) {
  try {
    return parse(text);
  } catch (const Error& e) {
    config_error(key, e.what());
  }
}

std::string to_string(InputKind kind) { return kind == InputKind::kImage ? "image" : "sequence"; }

InputKind input_kind_from_string(const std::string& s) {
  if (s == "image") return InputKind::kImage;
  if (s == "sequence") return InputKind::kSequence;
  throw Error(ErrorKind::kArgument, "unknown input kind '" + s + "'");
}

const std::set<std::string>& layer_types() {
  static const std::set<std::string> types{"dense",   "conv2d",          "gru",           "attention",
                                           "flatten", "global_avg_pool", "time_mean_pool"};
  return types;
}

LayerSpec layer_from_json(const Json& j, const std::string& path, std::size_t index) {
  Section s(j, path);
  LayerSpec l;
  l.type = Section::as_string(s.require("type"), s.key("type"));
  if (!layer_types().count(l.type)) config_error(s.key("type"), "unknown layer type '" + l.type + "'");
  l.name = s.string("name", l.type + std::to_string(index + 1));
  auto positive = [&](const std::string& name) {
    const std::size_t v = Section::as_size(s.require(name), s.key(name));
    if (v == 0) config_error(s.key(name), "must be positive");
    return v;
  };
  auto activation = [&] {
    return enum_value(s.key("activation"), s.string("activation", "relu"), activation_from_string);
  };
  if (l.type == "dense") {
    l.units = positive("units");
    l.activation = activation();
  } else if (l.type == "conv2d") {
    l.out_channels = positive("out_channels");
    l.kernel = s.size("kernel", l.kernel);
    l.stride = s.size("stride", l.stride);
    l.padding = s.size("padding", l.padding);
    l.activation = activation();
  } else if (l.type == "gru") {
    l.hidden = positive("hidden");
    l.return_sequences = s.boolean("return_sequences", false);
  } else if (l.type == "attention") {
    l.heads = positive("heads");
    l.head_dim = positive("head_dim");
    l.ffn_dim = positive("ffn_dim");
    l.scale_mode = enum_value(s.key("scale_mode"), s.string("scale_mode", "expanded"), scale_mode_from_string);
  }
  s.finish();
  return l;
}

Json layer_to_json(const LayerSpec& l) {
  Json j{{"type", l.type}, {"name", l.name}};
  if (l.type == "dense") {
    j["units"] = l.units;
    j["activation"] = to_string(l.activation);
  } else if (l.type == "conv2d") {
    j["out_channels"] = l.out_channels;
    j["kernel"] = l.kernel;
    j["stride"] = l.stride;
    j["padding"] = l.padding;
    j["activation"] = to_string(l.activation);
  } else if (l.type == "gru") {
    j["hidden"] = l.hidden;
    j["return_sequences"] = l.return_sequences;
  } else if (l.type == "attention") {
    j["heads"] = l.heads;
    j["head_dim"] = l.head_dim;
    j["ffn_dim"] = l.ffn_dim;
    j["scale_mode"] = to_string(l.scale_mode);
  }
  return j;
}

Json model_spec_to_json(const ModelSpec& m) {
  Json layers = Json::array();
  for (const auto& l : m.layers) layers.push_back(layer_to_json(l));
  return Json{{"name", m.name}, {"input", to_string(m.input)}, {"layers", layers}};
}

Json synth_to_json(const SynthSpec& d) {
  return Json{{"n_train", d.n_train},
              {"n_dev", d.n_dev},
              {"n_test", d.n_test},
              {"freq_bins", d.freq_bins},
              {"time_frames", d.time_frames},
              {"artifact_strength", d.artifact_strength},
              {"noise_level", d.noise_level},
              {"spoof_fraction", d.spoof_fraction},
              {"seed", d.seed}};
}

Json optional_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

ParamStore initial_params(const ModelGraph& model, const ExperimentConfig& config) {
  return init_params(model, derive_seed(config.seed, "init"));
}

TrainResult train(const ModelGraph& model, const ParamStore& params, const Dataset& data, std::size_t epochs,
                  const ExperimentConfig& config, const std::string& phase) {
  return train_stage(model, params, data.train, data.dev, epochs, config.optimizer, derive_seed(config.seed, phase));
}

std::vector<CurvePoint> curve(const TrainResult& r, const std::string& stage) {
  std::vector<CurvePoint> points;
  for (const auto& e : r.epochs) points.push_back(CurvePoint{stage, e.epoch, e.train_loss, e.dev_eer * 100.0});
  return points;
}

double backward_ms(const ModelGraph& model, const ParamStore& params, const Dataset& data,
                   const ExperimentConfig& config) {
  std::vector<std::size_t> idx(std::min(config.timing.batch_size, data.train.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Tensor batch = make_batch(model, data.train, idx);
  return measure_backward_time(model, params, batch, batch_labels(data.train, idx), config.timing.warmup,
                               config.timing.iters, config.optimizer);
}

void write_outputs(const ExperimentConfig& config, const ExperimentResult& result) {
  const std::filesystem::path dir(config.output_dir);
  ensure_directory(dir);
  write_file_atomic(dir / "config.json", canonical_config(config) + "\n");
  Json meta{{"model", model_to_json(result.model)}};
  save_checkpoint(dir / "best.ckpt", Checkpoint{result.best, meta.dump()});
  emit_report(result.report, dir / "report.csv");
}

Json spec_fingerprint(const ExperimentConfig& c) {
  return Json{{"dataset", c.dataset_name}, {"data", synth_to_json(c.data)}, {"model", model_spec_to_json(c.model)}};
}

}  // namespace

ModelSpec toy_cnn_spec() {
  ModelSpec m;
  m.name = "toy_cnn";
  m.input = InputKind::kImage;
  LayerSpec c1{.type = "conv2d", .name = "conv1", .out_channels = 4};
  LayerSpec c2{.type = "conv2d", .name = "conv2", .out_channels = 8, .stride = 2};
  LayerSpec pool{.type = "global_avg_pool", .name = "gap"};
  m.layers = {c1, c2, pool};
  return m;
}

ExperimentConfig config_from_json(const Json& j) {
  Section root(j, "");
  ExperimentConfig c;
  if (const Json* v = root.find("seed")) c.seed = Section::as_size(*v, "seed");
  c.dataset_name = root.string("dataset_name", c.dataset_name);
  c.strategy = enum_value("strategy", Section::as_string(root.require("strategy"), "strategy"), strategy_from_string);
  c.epochs = root.size("epochs", c.epochs);
  c.epochs_per_stage = root.size("epochs_per_stage", c.epochs_per_stage);
  c.output_dir = root.string("output_dir", c.output_dir);

  if (const Json* v = root.find("model")) {
    Section s(*v, "model");
    c.model.name = s.string("name", c.model.name);
    c.model.input = enum_value("model.input", s.string("input", to_string(c.model.input)), input_kind_from_string);
    if (const Json* layers = s.find("layers")) {
      if (!layers->is_array() || layers->empty()) config_error("model.layers", "expected a non-empty array");
      c.model.layers.clear();
      for (std::size_t i = 0; i < layers->size(); ++i) {
        c.model.layers.push_back(layer_from_json((*layers)[i], "model.layers[" + std::to_string(i) + "]", i));
      }
    }
    s.finish();
  }
  if (const Json* v = root.find("data")) {
    Section s(*v, "data");
    SynthSpec& d = c.data;
    d.n_train = s.size("n_train", d.n_train);
    d.n_dev = s.size("n_dev", d.n_dev);
    d.n_test = s.size("n_test", d.n_test);
    d.freq_bins = s.size("freq_bins", d.freq_bins);
    d.time_frames = s.size("time_frames", d.time_frames);
    d.artifact_strength = s.number("artifact_strength", d.artifact_strength);
    d.noise_level = s.number("noise_level", d.noise_level);
    d.spoof_fraction = s.number("spoof_fraction", d.spoof_fraction);
    if (const Json* seed = s.find("seed")) d.seed = Section::as_size(*seed, "data.seed");
    s.finish();
  }
  if (const Json* v = root.find("optimizer")) {
    Section s(*v, "optimizer");
    OptimizerConfig& o = c.optimizer;
    o.kind = enum_value("optimizer.kind", s.string("kind", to_string(o.kind)), optimizer_kind_from_string);
    o.learning_rate = s.number("learning_rate", o.learning_rate);
    o.momentum = s.number("momentum", o.momentum);
    o.beta1 = s.number("beta1", o.beta1);
    o.beta2 = s.number("beta2", o.beta2);
    o.epsilon = s.number("epsilon", o.epsilon);
    o.batch_size = s.size("batch_size", o.batch_size);
    s.finish();
  }
  if (const Json* v = root.find("dropin")) {
    Section s(*v, "dropin");
    DropinSettings& d = c.dropin;
    d.num_layers = s.size("num_layers", d.num_layers);
    if (const Json* layers = s.find("layers")) {
      if (!layers->is_array()) config_error("dropin.layers", "expected an array of layer indices");
      d.layers.clear();
      for (const auto& x : *layers) d.layers.push_back(Section::as_size(x, "dropin.layers"));
    }
    d.growth_ratio = s.number("growth_ratio", d.growth_ratio);
    d.init_sigma = s.optional_number("init_sigma", d.init_sigma);
    if (const Json* scale = s.find("attention_scale"); scale && !scale->is_null()) {
      d.attention_scale =
          enum_value("dropin.attention_scale", Section::as_string(*scale, "dropin.attention_scale"), scale_mode_from_string);
    }
    d.train_head = s.boolean("train_head", d.train_head);
    d.pretrain_epochs = s.size("pretrain_epochs", d.pretrain_epochs);
    s.finish();
  }
  if (const Json* v = root.find("lora")) {
    Section s(*v, "lora");
    LoraSettings& l = c.lora;
    l.rank = s.size("rank", l.rank);
    l.alpha = s.number("alpha", l.alpha);
    if (const Json* targets = s.find("targets")) {
      if (!targets->is_array()) config_error("lora.targets", "expected an array of parameter names");
      l.targets.clear();
      for (const auto& x : *targets) l.targets.push_back(Section::as_string(x, "lora.targets"));
    }
    l.pretrain_epochs = s.size("pretrain_epochs", l.pretrain_epochs);
    s.finish();
  }
  if (const Json* v = root.find("timing")) {
    Section s(*v, "timing");
    c.timing.warmup = s.size("warmup", c.timing.warmup);
    c.timing.iters = s.size("iters", c.timing.iters);
    c.timing.batch_size = s.size("batch_size", c.timing.batch_size);
    s.finish();
  }
  root.finish();

  if (c.optimizer.batch_size == 0) config_error("optimizer.batch_size", "must be positive");
  if (c.timing.iters == 0) config_error("timing.iters", "must be positive");
  if (c.timing.batch_size == 0) config_error("timing.batch_size", "must be positive");
  if (!(c.dropin.growth_ratio > 0.0)) config_error("dropin.growth_ratio", "must be positive");
  if (c.dropin.init_sigma && *c.dropin.init_sigma < 0.0) config_error("dropin.init_sigma", "must be non-negative");
  if (c.lora.rank == 0) config_error("lora.rank", "must be positive");
  try {
    validate(c.data);
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, std::string("'data': ") + e.what());
  }
  try {
    Optimizer check(c.optimizer);
    build_model(c.model, c.data);
  } catch (const Error& e) {
    throw Error(ErrorKind::kConfig, e.what());
  }
  return c;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorKind::kConfig, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

Json config_to_json(const ExperimentConfig& c) {
  Json targets = Json::array();
  for (const auto& t : c.lora.targets) targets.push_back(t);
  return Json{
      {"seed", c.seed},
      {"dataset_name", c.dataset_name},
      {"strategy", to_string(c.strategy)},
      {"epochs", c.epochs},
      {"epochs_per_stage", c.epochs_per_stage},
      {"output_dir", c.output_dir},
      {"model", model_spec_to_json(c.model)},
      {"data", synth_to_json(c.data)},
      {"optimizer",
       {{"kind", to_string(c.optimizer.kind)},
        {"learning_rate", c.optimizer.learning_rate},
        {"momentum", c.optimizer.momentum},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"epsilon", c.optimizer.epsilon},
        {"batch_size", c.optimizer.batch_size}}},
      {"dropin",
       {{"num_layers", c.dropin.num_layers},
        {"layers", c.dropin.layers},
        {"growth_ratio", c.dropin.growth_ratio},
        {"init_sigma", optional_json(c.dropin.init_sigma)},
        {"attention_scale", c.dropin.attention_scale ? Json(to_string(*c.dropin.attention_scale)) : Json(nullptr)},
        {"train_head", c.dropin.train_head},
        {"pretrain_epochs", c.dropin.pretrain_epochs}}},
      {"lora",
       {{"rank", c.lora.rank},
        {"alpha", c.lora.alpha},
        {"targets", targets},
        {"pretrain_epochs", c.lora.pretrain_epochs}}},
      {"timing",
       {{"warmup", c.timing.warmup}, {"iters", c.timing.iters}, {"batch_size", c.timing.batch_size}}},
  };
}

std::string canonical_config(const ExperimentConfig& config) { return config_to_json(config).dump(2); }

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw Error(ErrorKind::kConfig, "override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const Json::parse_error&) {
    value = text;
  }
  if (value.is_structured()) config_error(key, "only scalar values can be overridden");
  if (!doc.is_object()) throw Error(ErrorKind::kConfig, "config root is not an object");
  Json* node = &doc;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (path[i].empty()) config_error(key, "empty path component");
    Json& child = (*node)[path[i]];
    if (child.is_null()) child = Json::object();
    if (!child.is_object()) config_error(key, "'" + path[i] + "' is not a section");
    node = &child;
  }
  if (path.empty() || path.back().empty()) config_error(key, "empty path component");
  Json& leaf = (*node)[path.back()];
  if (leaf.is_structured()) config_error(key, "only scalar values can be overridden");
  leaf = value;
}

ModelGraph build_model(const ModelSpec& spec, const SynthSpec& data) {
  std::vector<Layer> layers;
  for (const auto& l : spec.layers) {
    if (l.type == "dense") layers.push_back(make_dense(l.name, l.units, l.activation));
    else if (l.type == "conv2d")
      layers.push_back(make_conv2d(l.name, l.out_channels, l.kernel, l.stride, l.padding, l.activation));
    else if (l.type == "gru") layers.push_back(make_gru(l.name, l.hidden, l.return_sequences));
    else if (l.type == "attention") layers.push_back(make_attention(l.name, l.heads, l.head_dim, l.ffn_dim, l.scale_mode));
    else if (l.type == "flatten") layers.push_back(make_flatten(l.name));
    else if (l.type == "global_avg_pool") layers.push_back(make_global_avg_pool(l.name));
    else if (l.type == "time_mean_pool") layers.push_back(make_time_mean_pool(l.name));
    else throw Error(ErrorKind::kConfig, "unknown layer type '" + l.type + "'");
  }
  const Shape input = spec.input == InputKind::kImage ? Shape{1, data.freq_bins, data.time_frames}
                                                      : Shape{data.time_frames, data.freq_bins};
  return ModelGraph(spec.name, spec.input, input, std::move(layers));
}

std::size_t total_epochs(const ExperimentConfig& config) {
  switch (config.strategy) {
    case Strategy::kBaseline: return config.epochs;
    case Strategy::kDropinUnfrozen:
    case Strategy::kDropinFrozen: return config.dropin.pretrain_epochs + config.epochs;
    case Strategy::kLora: return config.lora.pretrain_epochs + config.epochs;
    case Strategy::kPlasticity: return 3 * config.epochs_per_stage;
  }
  throw Error(ErrorKind::kArgument, "bad strategy");
}

ExperimentResult run_experiment(const ExperimentConfig& config) { return run_experiment(config, generate(config.data)); }

ExperimentResult run_experiment(const ExperimentConfig& config, const Dataset& data) {
  ModelGraph model = build_model(config.model, config.data);
  ParamStore params = initial_params(model, config);
  ExperimentResult result;
  RunReport& report = result.report;
  report.dataset = config.dataset_name;
  report.model = config.model.name;
  report.strategy = config.strategy;

  if (config.strategy == Strategy::kPlasticity) {
    PlasticityConfig pc;
    pc.epochs_per_stage = config.epochs_per_stage;
    pc.plan.growth_ratio = config.dropin.growth_ratio;
    pc.plan.init_sigma = config.dropin.init_sigma;
    pc.plan.attention_scale = config.dropin.attention_scale;
    pc.plan.rng_seed = derive_seed(config.seed, "dropin");
    pc.plan.selected_layers = config.dropin.layers.empty()
                                  ? select_layers(model, config.dropin.num_layers, derive_seed(config.seed, "select"))
                                  : config.dropin.layers;
    pc.optimizer = config.optimizer;
    pc.seed = config.seed;
    if (!config.output_dir.empty()) pc.checkpoint_dir = std::filesystem::path(config.output_dir) / "checkpoints";
    PlasticityResult pr = run_plasticity(model, params, data, pc, config.dataset_name);
    report = pr.report;
    result.model = std::move(pr.model);
    result.best = std::move(pr.best);
  } else {
    std::size_t pretrain = 0;
    if (config.strategy == Strategy::kDropinFrozen || config.strategy == Strategy::kDropinUnfrozen) {
      pretrain = config.dropin.pretrain_epochs;
    } else if (config.strategy == Strategy::kLora) {
      pretrain = config.lora.pretrain_epochs;
    }
    if (pretrain > 0) {
      TrainResult pre = train(model, params, data, pretrain, config, "pretrain");
      report.curves = curve(pre, "pretrain");
      params = std::move(pre.last);
    }

    if (config.strategy == Strategy::kDropinFrozen || config.strategy == Strategy::kDropinUnfrozen) {
      NeuronLedger ledger = NeuronLedger::for_model(model);
      DropinPlan plan;
      plan.selected_layers = config.dropin.layers.empty()
                                 ? select_layers(model, config.dropin.num_layers, derive_seed(config.seed, "select"))
                                 : config.dropin.layers;
      plan.growth_ratio = config.dropin.growth_ratio;
      plan.init_sigma = config.dropin.init_sigma;
      plan.attention_scale = config.dropin.attention_scale;
      plan.rng_seed = derive_seed(config.seed, "dropin");
      plan.freeze_policy =
          config.strategy == Strategy::kDropinFrozen ? FreezePolicy::kFrozen : FreezePolicy::kUnfrozen;
      dropin::dropin(model, params, ledger, plan);
      std::set<ParamId> head;
      if (config.dropin.train_head) {
        for (const auto& [id, shape] : model.param_shapes()) {
          if (id.rfind(model.head.name, 0) == 0 && !ledger.added_params().count(id)) head.insert(id);
        }
      }
      apply_freeze(params, ledger, plan.freeze_policy, head);
    } else if (config.strategy == Strategy::kLora) {
      const auto targets = config.lora.targets.empty() ? lora_default_targets(model) : config.lora.targets;
      lora_wrap(model, params, targets, config.lora.rank, config.lora.alpha, derive_seed(config.seed, "lora"));
    }

    TrainResult trained = train(model, params, data, config.epochs, config, "train");
    const auto points = curve(trained, "train");
    report.curves.insert(report.curves.end(), points.begin(), points.end());
    report.test_eer_percent = evaluate_eer(model, trained.best, data.test) * 100.0;
    report.params_total = param_count(trained.best);
    report.params_trainable = param_count(trained.best, true);
    report.backward_ms_per_step = backward_ms(model, trained.best, data, config);
    result.model = std::move(model);
    result.best = std::move(trained.best);
  }
  validate(report);
  if (!config.output_dir.empty()) write_outputs(config, result);
  return result;
}

std::optional<double> AblationResult::spread() const {
  std::optional<double> lo, hi;
  for (const auto& e : entries) {
    if (!e.test_eer_percent) continue;
    lo = lo ? std::min(*lo, *e.test_eer_percent) : *e.test_eer_percent;
    hi = hi ? std::max(*hi, *e.test_eer_percent) : *e.test_eer_percent;
  }
  if (!lo) return std::nullopt;
  return *hi - *lo;
}

AblationResult ablation_sweep(const ExperimentConfig& config) {
  if (config.strategy != Strategy::kDropinFrozen && config.strategy != Strategy::kDropinUnfrozen) {
    throw Error(ErrorKind::kConfig, "sweep needs strategy dropin_frozen or dropin_unfrozen");
  }
  const ModelGraph model = build_model(config.model, config.data);
  const Dataset data = generate(config.data);
  AblationResult result;
  for (std::size_t index : model.expandable_layers()) {
    ExperimentConfig member = config;
    member.dropin.layers = {index};
    if (!config.output_dir.empty()) {
      member.output_dir = (std::filesystem::path(config.output_dir) / ("layer" + std::to_string(index))).string();
    }
    AblationEntry entry;
    entry.layer = index;
    entry.layer_name = layer_name(model.layers[index]);
    entry.seed = member.seed;
    entry.total_epochs = total_epochs(member);
    try {
      entry.test_eer_percent = run_experiment(member, data).report.test_eer_percent;
    } catch (const std::exception& e) {
      entry.error = e.what();
    }
    result.entries.push_back(std::move(entry));
  }
  if (!config.output_dir.empty()) write_ablation_csv(std::filesystem::path(config.output_dir) / "ablation.csv", result);
  return result;
}

void write_ablation_csv(const std::filesystem::path& path, const AblationResult& result) {
  std::string text = "layer,name,test_eer_percent,seed,total_epochs,error\n";
  for (const auto& e : result.entries) {
    std::string error = e.error;
    std::replace(error.begin(), error.end(), ',', ';');
    std::replace(error.begin(), error.end(), '\n', ' ');
    text += std::to_string(e.layer) + "," + e.layer_name + "," +
            (e.test_eer_percent ? format_number(*e.test_eer_percent) : std::string("/")) + "," +
            std::to_string(e.seed) + "," + std::to_string(e.total_epochs) + "," + error + "\n";
  }
  if (!path.parent_path().empty()) ensure_directory(path.parent_path());
  write_file_atomic(path, text);
}

std::optional<double> relative_change(double baseline, double value) {
  if (baseline == 0.0) return std::nullopt;
  return (baseline - value) / baseline * 100.0;
}

std::vector<ComparisonRow> compare_strategies(const std::vector<ExperimentConfig>& configs,
                                              bool allow_budget_mismatch) {
  if (configs.empty()) throw Error(ErrorKind::kArgument, "compare needs at least one config");
  const Json reference = spec_fingerprint(configs.front());
  std::set<Strategy> strategies;
  for (const auto& c : configs) {
    if (spec_fingerprint(c) != reference) {
      throw Error(ErrorKind::kConfig, "configs disagree on dataset or model spec (strategy " + to_string(c.strategy) + ")");
    }
    if (!strategies.insert(c.strategy).second) {
      throw Error(ErrorKind::kConfig, "strategy " + to_string(c.strategy) + " appears twice");
    }
  }
  std::string budgets;
  bool mismatch = false;
  for (const auto& c : configs) {
    budgets += " " + to_string(c.strategy) + "=" + std::to_string(total_epochs(c));
    mismatch = mismatch || total_epochs(c) != total_epochs(configs.front());
  }
  if (mismatch && !allow_budget_mismatch) throw Error(ErrorKind::kConfig, "unequal epoch budgets:" + budgets);

  std::vector<ExperimentConfig> ordered = configs;
  std::ranges::sort(ordered, {}, [](const ExperimentConfig& c) { return static_cast<int>(c.strategy); });
  const Dataset data = generate(ordered.front().data);
  std::vector<ComparisonRow> rows;
  for (const auto& c : ordered) rows.push_back(ComparisonRow{run_experiment(c, data).report, total_epochs(c), {}});
  const auto baseline = std::ranges::find(rows, Strategy::kBaseline, [](const ComparisonRow& r) { return r.report.strategy; });
  if (baseline != rows.end()) {
    const double reference_eer = baseline->report.test_eer_percent;
    for (auto& r : rows) r.relative_change_percent = relative_change(reference_eer, r.report.test_eer_percent);
  }
  return rows;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows, bool with_timing) {
  std::string text = std::string(kReportHeader) + ",total_epochs,relative_eer_change_percent\n";
  for (const auto& r : rows) {
    text += report_row(r.report, with_timing) + "," + std::to_string(r.total_epochs) + "," +
            (r.relative_change_percent ? format_number(*r.relative_change_percent) : std::string("/")) + "\n";
  }
  return text;
}

}  // namespace dropin
