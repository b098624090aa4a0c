// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mhmoe/model_config.hpp"

namespace mhmoe::harness {

// Everything a training run needs: the model plus data, schedule and output.
struct RunConfig {
  ModelConfig model;
  std::string corpus;
  double split = 0.1;               // trailing validation fraction
  std::size_t steps = 3000;
  std::size_t warmup = 100;
  double max_lr = 3e-4;
  std::size_t batch = 16;
  std::size_t eval_interval = 100;
  std::size_t eval_tokens = 8192;   // validation predictions per interval eval; 0 = whole split
  std::size_t checkpoint_interval = 500;
  double threshold = 0.0;           // activation threshold; 0 = 1/(4N)
  std::string out_dir = "runs/default";

  double activation_threshold() const {
    return threshold > 0.0 ? threshold : 1.0 / (4.0 * static_cast<double>(model.num_experts));
  }
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string doc;
  std::function<void(RunConfig&, const std::string&)> set;  // throws std::string on type errors
  std::function<std::string(const RunConfig&)> get;
};

inline std::size_t parse_size(const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) throw std::string("expected a non-negative integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, out);
  if (v.empty() || ec != std::errc() || p != end) throw std::string("expected a number, got '" + v + "'");
  return out;
}

template <typename E>
E parse_enum(const std::string& v, std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    names += names.empty() ? name : std::string("|") + name;
  }
  throw std::string("expected one of " + names + ", got '" + v + "'");
}

inline const std::vector<std::pair<std::string, Field>>& fields() {
  using R = RunConfig;
  auto size_field = [](std::string doc, std::size_t R::*outer) {
    return Field{std::move(doc), [outer](R& c, const std::string& v) { c.*outer = parse_size(v); },
                 [outer](const R& c) { return std::to_string(c.*outer); }};
  };
  auto model_size = [](std::string doc, std::size_t ModelConfig::*m) {
    return Field{std::move(doc), [m](R& c, const std::string& v) { c.model.*m = parse_size(v); },
                 [m](const R& c) { return std::to_string(c.model.*m); }};
  };
  auto dbl = [](std::string doc, double R::*outer) {
    return Field{std::move(doc), [outer](R& c, const std::string& v) { c.*outer = parse_double(v); },
                 [outer](const R& c) { return format_double(c.*outer); }};
  };
  static const std::vector<std::pair<std::string, Field>> table = {
      {"variant",
       {"dense | smoe | mhmoe",
        [](R& c, const std::string& v) {
          c.model.variant = parse_enum<Variant>(v, {{"dense", Variant::dense}, {"smoe", Variant::smoe}, {"mhmoe", Variant::mhmoe}});
        },
        [](const R& c) { return std::string(to_string(c.model.variant)); }}},
      {"vocab_size", model_size("vocabulary size (bytes: 256)", &ModelConfig::vocab_size)},
      {"d", model_size("model width", &ModelConfig::d)},
      {"n_blocks", model_size("transformer blocks", &ModelConfig::n_blocks)},
      {"n_attn_heads", model_size("attention heads", &ModelConfig::n_attn_heads)},
      {"moe_every", model_size("MoE replaces the FFN in blocks with index % moe_every == moe_every - 1",
                               &ModelConfig::moe_every)},
      {"num_experts", model_size("experts per MoE layer (N)", &ModelConfig::num_experts)},
      {"k", model_size("experts selected per (sub-)token", &ModelConfig::k)},
      {"h", model_size("sub-token heads (mhmoe)", &ModelConfig::heads)},
      {"beta",
       {"expert inner-width scale, or auto for parameter parity with smoe",
        [](R& c, const std::string& v) {
          if (v == "auto") {
            c.model.beta.reset();
          } else {
            c.model.beta = parse_double(v);
          }
        },
        [](const R& c) { return c.model.beta ? format_double(*c.model.beta) : std::string("auto"); }}},
      {"alpha",
       {"balance-loss coefficient", [](R& c, const std::string& v) { c.model.alpha = parse_double(v); },
        [](const R& c) { return format_double(c.model.alpha); }}},
      {"router",
       {"direct | reduced",
        [](R& c, const std::string& v) {
          c.model.router.mode = parse_enum<RouterMode>(v, {{"direct", RouterMode::direct}, {"reduced", RouterMode::reduced}});
        },
        [](const R& c) { return std::string(c.model.router.mode == RouterMode::direct ? "direct" : "reduced"); }}},
      {"router_dim",
       {"expert embedding width in reduced mode",
        [](R& c, const std::string& v) { c.model.router.reduced_dim = parse_size(v); },
        [](const R& c) { return std::to_string(c.model.router.reduced_dim); }}},
      {"tau0",
       {"initial router temperature in reduced mode",
        [](R& c, const std::string& v) { c.model.router.initial_temperature = parse_double(v); },
        [](const R& c) { return format_double(c.model.router.initial_temperature); }}},
      {"counting",
       {"balance-loss token fraction: hard | soft",
        [](R& c, const std::string& v) {
          c.model.counting = parse_enum<BalanceCounting>(v, {{"hard", BalanceCounting::hard}, {"soft", BalanceCounting::soft}});
        },
        [](const R& c) { return std::string(c.model.counting == BalanceCounting::hard ? "hard" : "soft"); }}},
      {"capacity_factor",
       {"expert capacity factor; 0 = unlimited",
        [](R& c, const std::string& v) { c.model.capacity_factor = parse_double(v); },
        [](const R& c) { return format_double(c.model.capacity_factor); }}},
      {"context", model_size("context length", &ModelConfig::context)},
      {"seed",
       {"seed for initialisation and batch sampling",
        [](R& c, const std::string& v) { c.model.seed = parse_size(v); },
        [](const R& c) { return std::to_string(c.model.seed); }}},
      {"corpus",
       {"training text file (bytes are tokens)", [](R& c, const std::string& v) { c.corpus = v; },
        [](const R& c) { return c.corpus; }}},
      {"split", dbl("trailing validation fraction, in (0, 1)", &R::split)},
      {"steps", size_field("optimiser steps", &R::steps)},
      {"warmup", size_field("linear warmup steps", &R::warmup)},
      {"max_lr", dbl("peak learning rate", &R::max_lr)},
      {"batch", size_field("sequences per step", &R::batch)},
      {"eval_interval", size_field("steps between validation evals", &R::eval_interval)},
      {"eval_tokens", size_field("validation predictions per interval eval; 0 = whole split", &R::eval_tokens)},
      {"checkpoint_interval", size_field("steps between checkpoints; 0 = final only", &R::checkpoint_interval)},
      {"threshold", dbl("activation threshold; 0 = 1/(4N)", &R::threshold)},
      {"out_dir",
       {"output directory", [](R& c, const std::string& v) { c.out_dir = v; },
        [](const R& c) { return c.out_dir; }}},
  };
  return table;
}

inline const Field* find_field(const std::string& key) {
  for (const auto& [name, f] : fields()) {
    if (name == key) return &f;
  }
  return nullptr;
}

}  // namespace detail

// Line numbers of the keys a config file set, for error messages.
using KeyLines = std::map<std::string, std::size_t>;

inline std::string describe_key(const KeyLines& lines, const std::string& key) {
  const auto it = lines.find(key);
  return it == lines.end() ? "key '" + key + "' (default)" : "key '" + key + "' (line " + std::to_string(it->second) + ")";
}

// Checks every invariant; messages name the offending keys and their lines.
inline void validate(const RunConfig& c, const KeyLines& lines = {}) {
  auto fail = [&](std::initializer_list<const char*> keys, const std::string& msg) {
    std::string where;
    for (const char* k : keys) where += (where.empty() ? "" : ", ") + describe_key(lines, k);
    throw ConfigError(where + ": " + msg);
  };
  const auto& m = c.model;
  if (m.variant == Variant::mhmoe && (m.heads == 0 || m.d % m.heads != 0)) {
    fail({"d", "h"}, "d not divisible by h (d = " + std::to_string(m.d) + ", h = " + std::to_string(m.heads) + ")");
  }
  if (m.n_attn_heads == 0 || m.d % m.n_attn_heads != 0) {
    fail({"d", "n_attn_heads"}, "d = " + std::to_string(m.d) + " not divisible by n_attn_heads = " +
                                    std::to_string(m.n_attn_heads));
  }
  if (m.variant != Variant::dense && (m.k < 1 || m.k > m.num_experts)) {
    fail({"k", "num_experts"}, "k = " + std::to_string(m.k) + " outside [1, " + std::to_string(m.num_experts) + "]");
  }
  if (m.beta && !(*m.beta > 0.0)) fail({"beta"}, "beta must be positive or auto");
  if (!(c.split > 0.0 && c.split < 1.0)) fail({"split"}, "split must lie in (0, 1), got " + detail::format_double(c.split));
  if (c.steps < c.warmup) {
    fail({"steps", "warmup"}, "steps (" + std::to_string(c.steps) + ") must be >= warmup (" + std::to_string(c.warmup) + ")");
  }
  if (!(c.max_lr >= 0.0)) fail({"max_lr"}, "max_lr must be >= 0");
  if (c.batch == 0) fail({"batch"}, "batch must be >= 1");
  if (c.eval_interval == 0) fail({"eval_interval"}, "eval_interval must be >= 1");
  if (c.threshold < 0.0 || c.threshold >= 1.0) fail({"threshold"}, "threshold must lie in [0, 1)");
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

// Parses `key = value` lines; `#` starts a comment. Unknown keys, malformed
// values and invariant violations raise ConfigError naming key and line.
inline RunConfig parse_config_text(std::string_view text, const std::string& source = "<config>",
                                   KeyLines* key_lines = nullptr) {
  RunConfig c;
  KeyLines lines;
  std::istringstream is{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string at = source + ":" + std::to_string(line_no);
    if (eq == std::string::npos) throw ConfigError(at + ": expected 'key = value', got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    const auto* field = detail::find_field(key);
    if (!field) throw ConfigError(at + ": unknown key '" + key + "'");
    if (lines.count(key)) {
      throw ConfigError(at + ": key '" + key + "' repeats line " + std::to_string(lines[key]));
    }
    try {
      field->set(c, value);
    } catch (const std::string& msg) {
      throw ConfigError(at + ": key '" + key + "': " + msg);
    }
    lines[key] = line_no;
  }
  validate(c, lines);
  if (key_lines) *key_lines = lines;
  return c;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path.string());
}

// Every key with its current value; parse_config_text(to_text(c)) == c.
inline std::string to_text(const RunConfig& c) {
  std::string out;
  for (const auto& [name, f] : detail::fields()) out += name + " = " + f.get(c) + "\n";
  return out;
}

// Key reference for --help.
inline std::string describe_keys() {
  const RunConfig defaults;
  std::string out;
  for (const auto& [name, f] : detail::fields()) {
    std::string line = "  " + name;
    line.resize(std::max<std::size_t>(line.size() + 1, 22), ' ');
    out += line + f.doc + " [default: " + f.get(defaults) + "]\n";
  }
  return out;
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return to_text(a) == to_text(b); }

}  // namespace mhmoe::harness
