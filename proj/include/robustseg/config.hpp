// SPDX-License-Identifier: Apache-2.0
#pragma once

// Run configuration. The file format is flat `key = value` text with dotted
// namespaces; '#' starts a comment. Every key has a default and may be
// overridden with a `key=value` string (the CLI's --set).

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "robustseg/distill_core.hpp"
#include "robustseg/errors.hpp"
#include "robustseg/hpdm.hpp"
#include "robustseg/optimizer.hpp"
#include "robustseg/robustness_eval.hpp"
#include "robustseg/rrm.hpp"
#include "robustseg/seg_model.hpp"
#include "robustseg/synth_data.hpp"

namespace robustseg {

struct RunConfig {
  // data
  std::string data_root = "data";
  std::string train_split = "train";
  std::string val_split = "val";
  std::size_t train_count = 200;
  std::size_t val_count = 50;
  SceneSpec scene;

  ModelConfig model;
  LossWeights loss;
  PlanGranularity plan_granularity = PlanGranularity::kPerBatch;
  bool plan_with_replacement = false;
  DropoutPolicy dropout;
  PerturbationSpec rrm;
  EvalSpec eval;
  OptimizerConfig optim;

  std::size_t epochs = 40;
  std::size_t teacher_epochs = 0;  // 0: same as epochs
  std::size_t batch_size = 8;
  std::size_t val_samples = 0;     // 0: whole validation split
  std::uint64_t seed = 1;
  std::string run_root = "runs";

  std::size_t effective_teacher_epochs() const { return teacher_epochs ? teacher_epochs : epochs; }
  // The model's class and modality counts follow the dataset.
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.num_classes = scene.num_classes;
    m.num_modalities = scene.modalities.size();
    return m;
  }

  void validate() const {
    try {
      scene.validate();
      model_config().validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    loss.validate();
    dropout.validate(scene.modalities.size());
    rrm.validate();
    try {
      eval.validate();
    } catch (const SpecError& e) {
      throw ConfigError(e.what());
    }
    optim.validate();
    if (epochs == 0) throw ConfigError("train.epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (train_count == 0 || val_count == 0) throw ConfigError("data counts must be >= 1");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (!v.empty() && v.find_first_not_of("0123456789") == std::string::npos) {
    try {
      return std::stoull(v);
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v,
             const std::vector<std::pair<std::string, E>>& table) {
  std::string options;
  for (const auto& [name, e] : table) {
    if (name == v) return e;
    options += (options.empty() ? "" : " | ") + name;
  }
  throw ConfigError("config key '" + key + "': unknown value '" + v + "' (" + options + ")");
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& table) {
  for (const auto& [name, x] : table) {
    if (x == e) return name;
  }
  return "?";
}

inline const std::vector<std::pair<std::string, PrototypeMode>>& prototype_modes() {
  static const std::vector<std::pair<std::string, PrototypeMode>> t = {
      {"hybrid", PrototypeMode::kHybrid}, {"single", PrototypeMode::kSingle}, {"off", PrototypeMode::kOff}};
  return t;
}
inline const std::vector<std::pair<std::string, RegularizerMode>>& regularizer_modes() {
  static const std::vector<std::pair<std::string, RegularizerMode>> t = {
      {"single", RegularizerMode::kSingle}, {"hybrid", RegularizerMode::kHybrid}, {"off", RegularizerMode::kOff}};
  return t;
}
inline const std::vector<std::pair<std::string, KlDirection>>& kl_directions() {
  static const std::vector<std::pair<std::string, KlDirection>> t = {
      {"teacher-student", KlDirection::kTeacherStudent}, {"student-teacher", KlDirection::kStudentTeacher}};
  return t;
}
inline const std::vector<std::pair<std::string, DropoutPolicy::Kind>>& dropout_kinds() {
  static const std::vector<std::pair<std::string, DropoutPolicy::Kind>> t = {
      {"uniform", DropoutPolicy::Kind::kUniformSubsets},
      {"bernoulli", DropoutPolicy::Kind::kBernoulli},
      {"weighted", DropoutPolicy::Kind::kWeighted}};
  return t;
}
inline const std::vector<std::pair<std::string, PlanGranularity>>& plan_granularities() {
  static const std::vector<std::pair<std::string, PlanGranularity>> t = {
      {"batch", PlanGranularity::kPerBatch}, {"stage", PlanGranularity::kPerStage}};
  return t;
}
inline const std::vector<std::pair<std::string, PerturbationSpec::SigmaPolicy>>& sigma_policies() {
  static const std::vector<std::pair<std::string, PerturbationSpec::SigmaPolicy>> t = {
      {"relative", PerturbationSpec::SigmaPolicy::kRelative},
      {"absolute", PerturbationSpec::SigmaPolicy::kAbsolute}};
  return t;
}
inline const std::vector<std::pair<std::string, MissingSemantics>>& semantics_table() {
  static const std::vector<std::pair<std::string, MissingSemantics>> t = {
      {"drop", MissingSemantics::kDrop}, {"zero-fill", MissingSemantics::kZeroFill}};
  return t;
}
inline const std::vector<std::pair<std::string, MaskGranularity>>& mask_granularities() {
  static const std::vector<std::pair<std::string, MaskGranularity>> t = {
      {"pixel", MaskGranularity::kPixel}, {"block", MaskGranularity::kBlock}};
  return t;
}

template <typename N>
std::string join_numbers(const std::vector<N>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if constexpr (std::is_floating_point_v<N>) {
      s += (i ? "," : "") + fmt_double(v[i]);
    } else {
      s += (i ? "," : "") + std::to_string(v[i]);
    }
  }
  return s;
}

struct KeyDef {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define RS_STR(k, field)                                                        \
  KeyDef{k, [](RunConfig& c, const std::string& v) { c.field = v; },            \
         [](const RunConfig& c) { return c.field; }}
#define RS_UINT(k, field)                                                                   \
  KeyDef{k, [](RunConfig& c, const std::string& v) { c.field = parse_uint(k, v); },          \
         [](const RunConfig& c) { return std::to_string(c.field); }}
#define RS_DOUBLE(k, field)                                                                 \
  KeyDef{k, [](RunConfig& c, const std::string& v) { c.field = parse_double(k, v); },        \
         [](const RunConfig& c) { return fmt_double(c.field); }}
#define RS_BOOL(k, field)                                                                   \
  KeyDef{k, [](RunConfig& c, const std::string& v) { c.field = parse_bool(k, v); },          \
         [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define RS_ENUM(k, field, table)                                                            \
  KeyDef{k, [](RunConfig& c, const std::string& v) { c.field = parse_enum(k, v, table()); }, \
         [](const RunConfig& c) { return enum_name(c.field, table()); }}
#define RS_SIZES(k, field)                                                                  \
  KeyDef{k,                                                                                 \
         [](RunConfig& c, const std::string& v) {                                          \
           c.field.clear();                                                                 \
           for (const auto& s : split_list(v)) c.field.push_back(parse_uint(k, s));          \
         },                                                                                 \
         [](const RunConfig& c) { return join_numbers(c.field); }}

inline const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> t = {
      RS_STR("data.root", data_root),
      RS_STR("data.train_split", train_split),
      RS_STR("data.val_split", val_split),
      RS_UINT("data.train_count", train_count),
      RS_UINT("data.val_count", val_count),
      RS_UINT("data.seed", scene.seed),
      RS_UINT("data.height", scene.height),
      RS_UINT("data.width", scene.width),
      RS_UINT("data.num_classes", scene.num_classes),
      RS_UINT("data.num_shapes", scene.num_shapes),
      KeyDef{"data.modalities",
             [](RunConfig& c, const std::string& v) { c.scene.modalities = split_list(v); },
             [](const RunConfig& c) {
               std::string s;
               for (std::size_t i = 0; i < c.scene.modalities.size(); ++i) s += (i ? "," : "") + c.scene.modalities[i];
               return s;
             }},
      RS_SIZES("model.stage_channels", model.stage_channels),
      RS_SIZES("model.stage_strides", model.stage_strides),
      RS_UINT("model.embed_dim", model.embed_dim),
      RS_UINT("model.blocks_per_stage", model.blocks_per_stage),
      RS_UINT("model.mlp_ratio", model.mlp_ratio),
      RS_UINT("model.input_channels", model.input_channels),
      RS_BOOL("model.shared_encoder", model.shared_encoder),
      RS_DOUBLE("loss.lambda", loss.lambda),
      RS_DOUBLE("loss.alpha", loss.alpha),
      RS_DOUBLE("loss.beta", loss.beta),
      RS_ENUM("loss.prototype_mode", loss.prototype_mode, prototype_modes),
      RS_ENUM("loss.regularizer_mode", loss.regularizer_mode, regularizer_modes),
      RS_ENUM("loss.kl_direction", loss.kl_direction, kl_directions),
      RS_ENUM("hpdm.granularity", plan_granularity, plan_granularities),
      RS_BOOL("hpdm.with_replacement", plan_with_replacement),
      RS_ENUM("dropout.kind", dropout.kind, dropout_kinds),
      RS_DOUBLE("dropout.keep_prob", dropout.keep_prob),
      KeyDef{"dropout.weights",
             [](RunConfig& c, const std::string& v) {
               c.dropout.weights.clear();
               if (v.empty()) return;
               for (const auto& s : split_list(v)) c.dropout.weights.push_back(parse_double("dropout.weights", s));
             },
             [](const RunConfig& c) { return join_numbers(c.dropout.weights); }},
      RS_BOOL("dropout.per_sample", dropout.per_sample),
      RS_ENUM("rrm.sigma_policy", rrm.sigma_policy, sigma_policies),
      RS_DOUBLE("rrm.sigma", rrm.sigma),
      RS_UINT("rrm.samples", rrm.samples),
      RS_DOUBLE("rrm.epsilon", rrm.epsilon),
      RS_BOOL("rrm.paired_noise", rrm.paired_noise),
      RS_DOUBLE("eval.p", eval.p),
      RS_DOUBLE("eval.rmm_rate", eval.rmm_rate),
      RS_ENUM("eval.semantics", eval.semantics, semantics_table),
      KeyDef{"eval.noise_level",
             [](RunConfig& c, const std::string& v) { c.eval.noise = noise_level(v); },
             [](const RunConfig& c) { return c.eval.noise.level; }},
      RS_DOUBLE("eval.noise_mu", eval.noise.mu),
      RS_DOUBLE("eval.noise_sigma", eval.noise.sigma),
      RS_DOUBLE("eval.noise_density", eval.noise.density),
      RS_BOOL("eval.renormalize", eval.renormalize),
      RS_ENUM("eval.rmm_mask", eval.rmm_granularity, mask_granularities),
      RS_UINT("eval.rmm_block", eval.rmm_block),
      RS_UINT("eval.seed", eval.seed),
      RS_DOUBLE("optim.lr", optim.lr),
      RS_DOUBLE("optim.beta1", optim.beta1),
      RS_DOUBLE("optim.beta2", optim.beta2),
      RS_DOUBLE("optim.eps", optim.eps),
      RS_DOUBLE("optim.weight_decay", optim.weight_decay),
      RS_DOUBLE("optim.warmup_epochs", optim.warmup_epochs),
      RS_DOUBLE("optim.power", optim.power),
      RS_DOUBLE("optim.clip_norm", optim.clip_norm),
      RS_UINT("train.epochs", epochs),
      RS_UINT("train.teacher_epochs", teacher_epochs),
      RS_UINT("train.batch_size", batch_size),
      RS_UINT("train.val_samples", val_samples),
      RS_UINT("train.seed", seed),
      RS_STR("run.root", run_root),
  };
  return t;
}

#undef RS_STR
#undef RS_UINT
#undef RS_DOUBLE
#undef RS_BOOL
#undef RS_ENUM
#undef RS_SIZES

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& k : detail::key_table()) keys.push_back(k.key);
  return keys;
}

inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
  for (const auto& k : detail::key_table()) {
    if (k.key == key) {
      k.set(c, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string get_config_value(const RunConfig& c, const std::string& key) {
  for (const auto& k : detail::key_table()) {
    if (k.key == key) return k.get(c);
  }
  throw ConfigError("unknown config key '" + key + "'");
}

// Applies one `key=value` override.
inline void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config_value(c, detail::trim(assignment.substr(0, eq)), detail::trim(assignment.substr(eq + 1)));
}

inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& origin = "config") {
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.find('=') == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      apply_override(c, line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline RunConfig load_config_file(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  apply_config_text(base, ss.str(), path.string());
  return base;
}

// Canonical text: every key in table order.
inline std::string config_text(const RunConfig& c) {
  std::string s;
  for (const auto& k : detail::key_table()) s += k.key + " = " + k.get(c) + "\n";
  return s;
}

// Hash of the settings that affect training results (paths excluded).
inline std::string config_hash(const RunConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& k : detail::key_table()) {
    if (k.key == "data.root" || k.key == "run.root") continue;
    h = fnv1a(k.key + "=" + k.get(c) + "\n", h);
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 8);
}

}  // namespace robustseg
