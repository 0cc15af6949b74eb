#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "vscd/errors.hpp"
#include "vscd/model.hpp"
#include "vscd/synthdata.hpp"

namespace vscd {

// Single JSON config document with dotted-key overrides. Unknown keys are
// rejected against the default tree, and every run writes its effective
// config back to the output directory.

struct EvalConfig {
  int t_key = 8;
  double threshold = 0.5;
  std::vector<int> length_bins{30, 60};        // toy-scale analog of the length strata
  std::vector<int> change_count_bins{5, 15};   // paper's changed-instance strata
  std::vector<double> size_bins{0.0270, 0.1082};  // paper's change-mask area strata
  double taxonomy_ratio = 2.0;
  bool exclude_empty_gt = false;

  void validate() const {
    if (t_key < 1) throw ConfigError("eval: t_key must be >= 1");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("eval: threshold in (0,1)");
    if (length_bins.size() != 2 || change_count_bins.size() != 2 || size_bins.size() != 2)
      throw ConfigError("eval: bins need exactly two edges");
    if (taxonomy_ratio < 1.0) throw ConfigError("eval: taxonomy_ratio must be >= 1");
  }
};

struct TrainConfig {
  int t_key = 8;
  int batch_size = 1;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9, beta2 = 0.999;
  int epochs = 4;
  uint64_t seed = 0;
  bool freeze_encoder = true;
  double dice_smooth = 1.0;
  double max_minutes = 0.0;  // soft wall-clock budget; 0 disables

  void validate() const {
    if (t_key < 1) throw ConfigError("train: t_key must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (learning_rate < 0.0) throw ConfigError("train: learning_rate must be >= 0");
    if (!(dice_smooth > 0.0)) throw ConfigError("train: dice_smooth must be > 0");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  }
};

inline json default_config() {
  json j;
  j["data"] = {
      {"root", ""},
      {"layouts", 6},
      {"scenes_per_layout", 4},
      {"frame_h", 128},
      {"frame_w", 128},
      {"traj_len_min", 24},
      {"traj_len_max", 40},
      {"change_bins", json::array({json::array({2, 4, 1.0}), json::array({5, 8, 1.0}),
                                   json::array({9, 12, 1.0})})},
      {"permanent_min", 2},
      {"permanent_max", 4},
      {"max_objects_per_layout", 30},
      {"move_fraction", 0.3},
      {"brightness_min", 0.6},
      {"brightness_max", 1.0},
      {"camera_fov", 1.2},
      {"test_layouts", 2},
      {"seed", 0},
  };
  j["model"] = {
      {"frame_h", 128},
      {"frame_w", 128},
      {"init_seed", 1},
      {"tau_f", 0.5},
      {"delta", 2},
      {"min_seg_len", 2},
      {"l_max", 5},
      {"split_quantile", 0.0},
      {"top_k", 4},
      {"candidate_cap", 6},
      {"encoder",
       {{"patch_size", 8},
        {"token_dim", 64},
        {"backbone", "tiny-vit"},
        {"frozen", true},
        {"at_heads", 8},
        {"at_layers", 1},
        {"at_layernorm", false},
        {"at_residual", false},
        {"at_enabled", true},
        {"vit_blocks", 2},
        {"vit_heads", 8},
        {"norm_mean", json::array({0.5, 0.5, 0.5})},
        {"norm_std", json::array({0.25, 0.25, 0.25})},
        {"precomputed_dir", ""}}},
      {"align", {{"refine_channels", 8}}},
      {"corr", {{"window_k", 5}, {"reduced_channels", 0}, {"change_channels", 32}}},
      {"fusion",
       {{"c_p", 0.5},
        {"c", 0.5},
        {"epsilon", 1e-8},
        {"threshold", 0.5},
        {"use_cf", true},
        {"use_csp", true}}},
      {"decoder", {{"stage_channels", json::array()}, {"rgb_proj_channels", 16}}},
  };
  j["train"] = {
      {"t_key", 8},          {"batch_size", 1},    {"learning_rate", 1e-3},
      {"weight_decay", 1e-4}, {"beta1", 0.9},       {"beta2", 0.999},
      {"epochs", 4},          {"seed", 0},          {"freeze_encoder", true},
      {"dice_smooth", 1.0},   {"max_minutes", 0.0},
  };
  j["eval"] = {
      {"t_key", 8},
      {"threshold", 0.5},
      {"length_bins", json::array({30, 60})},
      {"change_count_bins", json::array({5, 15})},
      {"size_bins", json::array({0.0270, 0.1082})},
      {"taxonomy_ratio", 2.0},
      {"exclude_empty_gt", false},
  };
  return j;
}

namespace config_detail {

inline void merge_strict(json& base, const json& overlay, const std::string& path) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key: " + key_path);
    if (base[it.key()].is_object() && it.value().is_object())
      merge_strict(base[it.key()], it.value(), key_path);
    else
      base[it.key()] = it.value();
  }
}

inline json parse_override_value(const json& current, const std::string& raw) {
  if (current.is_string()) return raw;
  if (current.is_boolean()) {
    if (raw == "true" || raw == "1") return true;
    if (raw == "false" || raw == "0") return false;
    throw ConfigError("expected boolean override, got: " + raw);
  }
  json parsed = json::parse(raw, nullptr, false);
  if (parsed.is_discarded()) throw ConfigError("cannot parse override value: " + raw);
  return parsed;
}

}  // namespace config_detail

// File config and --set overrides applied over the defaults; unknown keys fail.
inline json resolve_config(const std::string& config_path,
                           const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) throw ConfigError("cannot open config file: " + config_path);
    json file_cfg = json::parse(f, nullptr, false);
    if (file_cfg.is_discarded()) throw ConfigError("config file is not valid JSON: " + config_path);
    config_detail::merge_strict(cfg, file_cfg, "");
  }
  for (const std::string& kv : overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
    std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
    json* node = &cfg;
    size_t start = 0;
    while (true) {
      auto dot = key.find('.', start);
      std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (!node->contains(part)) throw ConfigError("unknown config key: " + key);
      node = &(*node)[part];
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    *node = config_detail::parse_override_value(*node, value);
  }
  return cfg;
}

// ---- struct materialization ----

inline GenConfig gen_config_from_json(const json& j) {
  GenConfig g;
  g.layouts = j.at("layouts");
  g.scenes_per_layout = j.at("scenes_per_layout");
  g.frame_h = j.at("frame_h");
  g.frame_w = j.at("frame_w");
  g.traj_len_min = j.at("traj_len_min");
  g.traj_len_max = j.at("traj_len_max");
  g.change_bins.clear();
  for (const auto& b : j.at("change_bins"))
    g.change_bins.push_back(ChangeBin{b.at(0), b.at(1), b.at(2)});
  g.permanent_min = j.at("permanent_min");
  g.permanent_max = j.at("permanent_max");
  g.max_objects_per_layout = j.at("max_objects_per_layout");
  g.move_fraction = j.at("move_fraction");
  g.brightness_min = j.at("brightness_min");
  g.brightness_max = j.at("brightness_max");
  g.camera_fov = j.at("camera_fov");
  g.test_layouts = j.at("test_layouts");
  g.seed = j.at("seed");
  g.validate();
  return g;
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  m.frame_h = j.at("frame_h");
  m.frame_w = j.at("frame_w");
  m.init_seed = j.at("init_seed");
  m.tau_f = j.at("tau_f");
  m.delta = j.at("delta");
  m.min_seg_len = j.at("min_seg_len");
  m.l_max = j.at("l_max");
  m.split_quantile = j.at("split_quantile");
  m.top_k = j.at("top_k");
  m.candidate_cap = j.at("candidate_cap");
  const json& e = j.at("encoder");
  m.encoder.patch_size = e.at("patch_size");
  m.encoder.token_dim = e.at("token_dim");
  m.encoder.backbone = backbone_from_string(e.at("backbone"));
  m.encoder.frozen = e.at("frozen");
  m.encoder.at_heads = e.at("at_heads");
  m.encoder.at_layers = e.at("at_layers");
  m.encoder.at_layernorm = e.at("at_layernorm");
  m.encoder.at_residual = e.at("at_residual");
  m.encoder.at_enabled = e.at("at_enabled");
  m.encoder.vit_blocks = e.at("vit_blocks");
  m.encoder.vit_heads = e.at("vit_heads");
  for (int c = 0; c < 3; ++c) {
    m.encoder.norm_mean[static_cast<size_t>(c)] = e.at("norm_mean").at(c);
    m.encoder.norm_std[static_cast<size_t>(c)] = e.at("norm_std").at(c);
  }
  m.encoder.precomputed_dir = e.at("precomputed_dir");
  m.align.refine_channels = j.at("align").at("refine_channels");
  m.corr.window_k = j.at("corr").at("window_k");
  m.corr.reduced_channels = j.at("corr").at("reduced_channels");
  m.corr.change_channels = j.at("corr").at("change_channels");
  m.fusion.conf_peak_weight = j.at("fusion").at("c_p");
  m.fusion.conf_entropy_weight = j.at("fusion").at("c");
  m.fusion.fuse_epsilon = j.at("fusion").at("epsilon");
  m.fusion.threshold = j.at("fusion").at("threshold");
  m.fusion.use_frame_confidence = j.at("fusion").at("use_cf");
  m.fusion.use_patch_confidence = j.at("fusion").at("use_csp");
  m.decoder.stage_channels.clear();
  for (const auto& c : j.at("decoder").at("stage_channels"))
    m.decoder.stage_channels.push_back(c.get<int>());
  m.decoder.rgb_proj_channels = j.at("decoder").at("rgb_proj_channels");
  m.finalize();
  return m;
}

inline TrainConfig train_config_from_json(const json& j) {
  TrainConfig t;
  t.t_key = j.at("t_key");
  t.batch_size = j.at("batch_size");
  t.learning_rate = j.at("learning_rate");
  t.weight_decay = j.at("weight_decay");
  t.beta1 = j.at("beta1");
  t.beta2 = j.at("beta2");
  t.epochs = j.at("epochs");
  t.seed = j.at("seed");
  t.freeze_encoder = j.at("freeze_encoder");
  t.dice_smooth = j.at("dice_smooth");
  t.max_minutes = j.at("max_minutes");
  t.validate();
  return t;
}

inline EvalConfig eval_config_from_json(const json& j) {
  EvalConfig e;
  e.t_key = j.at("t_key");
  e.threshold = j.at("threshold");
  e.length_bins = {j.at("length_bins").at(0), j.at("length_bins").at(1)};
  e.change_count_bins = {j.at("change_count_bins").at(0), j.at("change_count_bins").at(1)};
  e.size_bins = {j.at("size_bins").at(0), j.at("size_bins").at(1)};
  e.taxonomy_ratio = j.at("taxonomy_ratio");
  e.exclude_empty_gt = j.at("exclude_empty_gt");
  e.validate();
  return e;
}

}  // namespace vscd
