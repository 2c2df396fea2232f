#pragma once

// Run configuration: a JSON tree with defaults, file overlay and dotted-key overrides.
// Precedence: overrides > config file > defaults.

#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "skiprec/corpus.hpp"
#include "skiprec/eval.hpp"
#include "skiprec/model.hpp"
#include "skiprec/objectives.hpp"
#include "skiprec/synth.hpp"
#include "skiprec/trainer.hpp"

namespace skiprec {

/// Environment variable naming a default config file for the CLI.
inline constexpr const char* kConfigEnv = "SKIPREC_CONFIG";

inline nlohmann::json default_config() {
  return nlohmann::json::parse(R"({
    "seed": 42,
    "data": {
      "path": "",
      "cache": "",
      "min_len": 3,
      "max_len": 20,
      "columns": {
        "session_id": "session_id", "position": "session_position", "track": "track_id_clean",
        "skip_1": "skip_1", "skip_2": "skip_2", "skip_3": "skip_3", "delimiter": ","
      }
    },
    "model": {"d": 128, "blocks": 2, "heads": 8, "max_len": 20, "ffn_dim": 128, "dropout": 0.1, "ln_eps": 1e-5},
    "loss": {"alpha": 0.5, "beta": 0.5, "temperature": 1.0, "context_mode": "predicted"},
    "train": {
      "mode": "unidirectional", "mask_prob": 0.2, "lr": 0.005,
      "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
      "batch_size": 128, "max_epochs": 20, "patience": 3, "num_negatives": 1000,
      "selection_k": 10, "clip_norm": 0.0, "threads": 1
    },
    "eval": {"num_negatives": 1000, "ks": [1, 5, 10, 20], "split": "test"},
    "synth": {
      "num_tracks": 200, "num_sessions": 5000, "min_len": 10, "max_len": 20,
      "transition_sharpness": 0.9, "skip_rate": 0.15, "disliked_fraction": 0.1, "seed": 7
    }
  })");
}

namespace detail {

inline void overlay(nlohmann::json& base, const nlohmann::json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [k, v] : patch.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) throw ConfigError("unknown config key '" + key + "'");
    if (base[k].is_object()) {
      overlay(base[k], v, key);
    } else {
      base[k] = v;
    }
  }
}

}  // namespace detail

/// Overlay a user config onto the defaults; unknown keys are rejected.
inline void merge_config(nlohmann::json& cfg, const nlohmann::json& user) { detail::overlay(cfg, user, ""); }

inline nlohmann::json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in config '" + path + "': " + e.what());
  }
}

/// Apply "a.b.c=value". The value is parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value;
  try {
    value = nlohmann::json::parse(raw);
  } catch (const nlohmann::json::exception&) {
    value = raw;
  }
  nlohmann::json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("cannot override config section '" + key + "' with a scalar");
  *node = std::move(value);
}

// Typed views. nlohmann type errors surface as ConfigError.

template <class F>
auto typed(const char* section, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad value in config section '") + section + "': " + e.what());
  }
}

inline ModelConfig model_config(const nlohmann::json& cfg) {
  return typed("model", [&] { return cfg.at("model").get<ModelConfig>(); });
}

inline LossWeights loss_weights(const nlohmann::json& cfg) {
  return typed("loss", [&] {
    const auto& j = cfg.at("loss");
    LossWeights w{j.at("alpha").get<double>(), j.at("beta").get<double>(), j.at("temperature").get<double>()};
    w.validate();
    return w;
  });
}

inline ContextMode context_mode(const nlohmann::json& cfg) {
  return typed("loss", [&] { return parse_context_mode(cfg.at("loss").at("context_mode").get<std::string>()); });
}

inline TrainConfig train_config(const nlohmann::json& cfg) {
  return typed("train", [&] {
    const auto& j = cfg.at("train");
    TrainConfig t;
    t.mode = parse_train_mode(j.at("mode").get<std::string>());
    t.mask_prob = j.at("mask_prob").get<double>();
    t.lr = j.at("lr").get<double>();
    t.adam_beta1 = j.at("adam_beta1").get<double>();
    t.adam_beta2 = j.at("adam_beta2").get<double>();
    t.adam_eps = j.at("adam_eps").get<double>();
    t.batch_size = j.at("batch_size").get<std::size_t>();
    t.max_epochs = j.at("max_epochs").get<std::size_t>();
    t.patience = j.at("patience").get<std::size_t>();
    t.num_negatives = j.at("num_negatives").get<std::size_t>();
    t.selection_k = j.at("selection_k").get<std::size_t>();
    t.clip_norm = j.at("clip_norm").get<double>();
    t.threads = j.at("threads").get<std::size_t>();
    t.seed = cfg.at("seed").get<std::uint64_t>();
    t.validate();
    return t;
  });
}

inline EvalConfig eval_config(const nlohmann::json& cfg) {
  return typed("eval", [&] {
    const auto& j = cfg.at("eval");
    EvalConfig e;
    e.num_negatives = j.at("num_negatives").get<std::size_t>();
    e.ks = j.at("ks").get<std::vector<std::size_t>>();
    e.split = parse_split(j.at("split").get<std::string>());
    e.seed = cfg.at("seed").get<std::uint64_t>();
    e.validate();
    return e;
  });
}

inline SynthConfig synth_config(const nlohmann::json& cfg) {
  return typed("synth", [&] {
    auto s = cfg.at("synth").get<SynthConfig>();
    s.validate();
    return s;
  });
}

inline ColumnMapping column_mapping(const nlohmann::json& cfg) {
  return typed("data", [&] { return cfg.at("data").at("columns").get<ColumnMapping>(); });
}

inline LengthLimits length_limits(const nlohmann::json& cfg) {
  return typed("data", [&] {
    return LengthLimits{cfg.at("data").at("min_len").get<std::size_t>(), cfg.at("data").at("max_len").get<std::size_t>()};
  });
}

}  // namespace skiprec
