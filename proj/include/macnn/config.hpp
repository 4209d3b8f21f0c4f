#pragma once

// Run configuration: flat `key = value` text with `#` comments.
//
//   learning_rate = 0.005
//   stage2.threshold = 0.7   # override
//
// Absent keys keep their defaults; unknown or repeated keys are errors.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "macnn/evaluation.hpp"
#include "macnn/inference.hpp"
#include "macnn/network.hpp"
#include "macnn/preprocess.hpp"
#include "macnn/synthetic.hpp"
#include "macnn/trainer.hpp"

namespace macnn {

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t folds = 4;

  double fov_threshold = kDefaultFovThreshold;
  std::size_t median_kernel = kDefaultMedianWindow;

  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::optional<std::size_t> epochs;        // required by the training stages
  std::optional<std::size_t> final_epochs;  // defaults to epochs

  std::size_t epoch_size = 1000;
  double ma_fraction = 0.5;
  double stage2_threshold = 0.5;

  std::size_t infer_stride = 1;
  bool infer_cascade = true;
  std::size_t infer_tile_rows = 128;

  std::size_t post_radius = kDefaultPostRadius;
  std::size_t nms_radius = kDefaultPostRadius;
  double post_floor = kDefaultScoreFloor;
  std::size_t eval_radius = kDefaultMatchRadius;

  SyntheticConfig synth;
  ModelOptions model;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <class T>
bool parse_number(std::string_view text, T& out) {
  if (text.empty() || text.front() == '+') return false;
  if constexpr (std::is_unsigned_v<T>) {
    if (text.front() == '-') return false;
  }
  const auto res = std::from_chars(text.data(), text.data() + text.size(), out);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size()) return false;
  if constexpr (std::is_floating_point_v<T>) return std::isfinite(out);
  return true;
}

struct ConfigKey {
  std::string name;
  std::function<bool(std::string_view, RunConfig&)> set;   // false: unparsable value
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
ConfigKey number_key(std::string name, T RunConfig::*field) {
  return {std::move(name), [field](std::string_view v, RunConfig& c) { return parse_number(v, c.*field); },
          [field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_real(real_t(c.*field));
            else return std::to_string(c.*field);
          }};
}

template <class T, class Sub>
ConfigKey nested_key(std::string name, Sub RunConfig::*outer, T Sub::*field) {
  return {std::move(name), [outer, field](std::string_view v, RunConfig& c) { return parse_number(v, c.*outer.*field); },
          [outer, field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return format_real(real_t(c.*outer.*field));
            else return std::to_string(c.*outer.*field);
          }};
}

inline ConfigKey optional_key(std::string name, std::optional<std::size_t> RunConfig::*field) {
  return {std::move(name),
          [field](std::string_view v, RunConfig& c) {
            if (v == "unset") {
              c.*field = std::nullopt;
              return true;
            }
            std::size_t n = 0;
            if (!parse_number(v, n)) return false;
            c.*field = n;
            return true;
          },
          [field](const RunConfig& c) { return c.*field ? std::to_string(*(c.*field)) : std::string("unset"); }};
}

inline bool parse_bool(std::string_view v, bool& out) {
  if (v == "true") out = true;
  else if (v == "false") out = false;
  else return false;
  return true;
}

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    k.push_back(number_key("seed", &RunConfig::seed));
    k.push_back(number_key("folds", &RunConfig::folds));
    k.push_back(number_key("fov.threshold", &RunConfig::fov_threshold));
    k.push_back(number_key("preprocess.kernel", &RunConfig::median_kernel));
    k.push_back(number_key("learning_rate", &RunConfig::learning_rate));
    k.push_back(number_key("momentum", &RunConfig::momentum));
    k.push_back(number_key("batch_size", &RunConfig::batch_size));
    k.push_back(optional_key("epochs", &RunConfig::epochs));
    k.push_back(optional_key("final.epochs", &RunConfig::final_epochs));
    k.push_back(number_key("patch.epoch_size", &RunConfig::epoch_size));
    k.push_back(number_key("patch.ma_fraction", &RunConfig::ma_fraction));
    k.push_back(number_key("stage2.threshold", &RunConfig::stage2_threshold));
    k.push_back(number_key("infer.stride", &RunConfig::infer_stride));
    k.push_back({"infer.cascade", [](std::string_view v, RunConfig& c) { return parse_bool(v, c.infer_cascade); },
                 [](const RunConfig& c) { return std::string(c.infer_cascade ? "true" : "false"); }});
    k.push_back(number_key("infer.tile_rows", &RunConfig::infer_tile_rows));
    k.push_back(number_key("post.radius", &RunConfig::post_radius));
    k.push_back(number_key("post.nms_radius", &RunConfig::nms_radius));
    k.push_back(number_key("post.floor", &RunConfig::post_floor));
    k.push_back(number_key("eval.radius", &RunConfig::eval_radius));
    k.push_back(nested_key("synth.n_images", &RunConfig::synth, &SyntheticConfig::n_images));
    k.push_back(nested_key("synth.image_size", &RunConfig::synth, &SyntheticConfig::image_size));
    k.push_back(nested_key("synth.n_ma_min", &RunConfig::synth, &SyntheticConfig::n_ma_min));
    k.push_back(nested_key("synth.n_ma_max", &RunConfig::synth, &SyntheticConfig::n_ma_max));
    k.push_back(nested_key("synth.contrast_min", &RunConfig::synth, &SyntheticConfig::contrast_min));
    k.push_back(nested_key("synth.contrast_max", &RunConfig::synth, &SyntheticConfig::contrast_max));
    k.push_back(nested_key("model.leaky_slope", &RunConfig::model, &ModelOptions::leaky_slope));
    k.push_back(nested_key("model.dropout", &RunConfig::model, &ModelOptions::dropout));
    k.push_back({"model.fc_maxout", [](std::string_view v, RunConfig& c) { return parse_bool(v, c.model.fc_maxout); },
                 [](const RunConfig& c) { return std::string(c.model.fc_maxout ? "true" : "false"); }});
    k.push_back({"model.final_dropout_blocks",
                 [](std::string_view v, RunConfig& c) {
                   std::vector<std::size_t> blocks;
                   if (v != "none") {
                     while (true) {
                       const auto comma = v.find(',');
                       std::size_t b = 0;
                       if (!parse_number(trim(v.substr(0, comma)), b)) return false;
                       blocks.push_back(b);
                       if (comma == std::string_view::npos) break;
                       v.remove_prefix(comma + 1);
                     }
                   }
                   c.model.final_dropout_blocks = blocks;
                   return true;
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (std::size_t b : c.model.final_dropout_blocks) s += (s.empty() ? "" : ",") + std::to_string(b);
                   return s.empty() ? std::string("none") : s;
                 }});
    return k;
  }();
  return keys;
}

}  // namespace detail

/// Checks every value against its owner's preconditions. `where(key)` names
/// the source line of a key for messages.
inline void validate_config(const RunConfig& c, const std::function<std::string(const std::string&)>& where) {
  auto check = [&](bool ok, const std::string& key, const std::string& rule) {
    if (!ok) fail(ErrorKind::config, where(key) + key + " " + rule);
  };
  check(c.folds >= 2, "folds", "must be at least 2");
  check(c.fov_threshold >= 0 && c.fov_threshold <= 1, "fov.threshold", "must lie in [0, 1]");
  check(c.median_kernel >= 1, "preprocess.kernel", "must be at least 1");
  check(c.learning_rate > 0, "learning_rate", "must be > 0");
  check(c.momentum >= 0 && c.momentum < 1, "momentum", "must lie in [0, 1)");
  check(c.batch_size >= 1, "batch_size", "must be at least 1");
  check(!c.epochs || *c.epochs >= 1, "epochs", "must be at least 1");
  check(!c.final_epochs || *c.final_epochs >= 1, "final.epochs", "must be at least 1");
  check(c.epoch_size >= 1, "patch.epoch_size", "must be at least 1");
  check(c.ma_fraction >= 0 && c.ma_fraction <= 1, "patch.ma_fraction", "must lie in [0, 1]");
  check(c.stage2_threshold >= 0 && c.stage2_threshold <= 1, "stage2.threshold", "must lie in [0, 1]");
  check(c.infer_stride >= 1, "infer.stride", "must be at least 1");
  check(c.infer_tile_rows >= 1, "infer.tile_rows", "must be at least 1");
  check(c.post_radius >= 1, "post.radius", "must be at least 1");
  check(c.nms_radius >= 1, "post.nms_radius", "must be at least 1");
  check(c.post_floor >= 0 && c.post_floor < 1, "post.floor", "must lie in [0, 1)");
  check(c.eval_radius >= 1, "eval.radius", "must be at least 1");
  check(c.synth.n_images >= 1, "synth.n_images", "must be at least 1");
  check(c.synth.image_size >= std::size_t(kPatchSize), "synth.image_size", "must be at least 101");
  check(c.synth.n_ma_min <= c.synth.n_ma_max, "synth.n_ma_max", "must be >= synth.n_ma_min");
  check(c.synth.contrast_min >= 0 && c.synth.contrast_min <= c.synth.contrast_max, "synth.contrast_min",
        "must lie in [0, synth.contrast_max]");
  check(c.synth.contrast_max <= 1, "synth.contrast_max", "must be <= 1");
  check(c.model.leaky_slope >= 0 && c.model.leaky_slope < 1, "model.leaky_slope", "must lie in [0, 1)");
  check(c.model.dropout >= 0 && c.model.dropout < 1, "model.dropout", "must lie in [0, 1)");
  for (std::size_t b : c.model.final_dropout_blocks)
    check(b >= 1 && b <= 5, "model.final_dropout_blocks", "entries must lie in 1..5");
}

inline RunConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::string raw;
  for (std::size_t lineno = 1; std::getline(in, raw); ++lineno) {
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(ErrorKind::config, where + "expected 'key = value'");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    const auto& keys = detail::config_keys();
    const auto it = std::find_if(keys.begin(), keys.end(), [&](const auto& k) { return k.name == key; });
    if (it == keys.end()) fail(ErrorKind::config, where + "unknown key '" + key + "'");
    if (!seen.emplace(key, lineno).second) {
      fail(ErrorKind::config, where + "key '" + key + "' repeats line " + std::to_string(seen[key]));
    }
    if (!it->set(value, cfg)) fail(ErrorKind::config, where + "cannot parse value '" + std::string(value) + "' for " + key);
  }
  validate_config(cfg, [&](const std::string& key) {
    const auto s = seen.find(key);
    return s == seen.end() ? source + ": " : source + ":" + std::to_string(s->second) + ": ";
  });
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open config '" + path.string() + "'");
  return parse_config(in, path.string());
}

/// Effective configuration, one entry per key in declaration order.
inline std::vector<std::pair<std::string, std::string>> config_echo(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& k : detail::config_keys()) out.emplace_back(k.name, k.get(cfg));
  return out;
}

inline std::string config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_echo(cfg)) out += k + " = " + v + "\n";
  return out;
}

inline TrainConfig train_config(const RunConfig& cfg, Stage stage, std::size_t threads) {
  TrainConfig t;
  t.learning_rate = cfg.learning_rate;
  t.momentum = cfg.momentum;
  t.batch_size = cfg.batch_size;
  const auto epochs = stage == Stage::final && cfg.final_epochs ? cfg.final_epochs : cfg.epochs;
  if (!epochs) fail(ErrorKind::config, "epochs must be set in the config for training");
  t.epochs = *epochs;
  t.seed = cfg.seed + (stage == Stage::final ? 1 : 0);
  t.plan.epoch_size = cfg.epoch_size;
  t.plan.ma_fraction = cfg.ma_fraction;
  t.plan.stage2_threshold = cfg.stage2_threshold;
  t.threads = threads;
  return t;
}

inline InferOptions infer_options(const RunConfig& cfg, std::size_t threads) {
  return {cfg.infer_stride, threads, cfg.infer_tile_rows};
}

}  // namespace macnn
