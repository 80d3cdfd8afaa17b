/*
 * Copyright 2026 The elastic-hybrid Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "elastic/errors.hpp"
#include "elastic/hash.hpp"

namespace elastic {

using json = nlohmann::json;

enum class LayerKind { Mamba, Attention, MoE, FFN };

inline char layer_code(LayerKind k) {
  switch (k) {
    case LayerKind::Mamba: return 'M';
    case LayerKind::Attention: return '*';
    case LayerKind::MoE: return 'E';
    case LayerKind::FFN: return '-';
  }
  return '?';
}

inline std::vector<LayerKind> parse_pattern(const std::string& s) {
  std::vector<LayerKind> out;
  for (char c : s) {
    switch (c) {
      case 'M': out.push_back(LayerKind::Mamba); break;
      case '*': out.push_back(LayerKind::Attention); break;
      case 'E': out.push_back(LayerKind::MoE); break;
      case '-': out.push_back(LayerKind::FFN); break;
      default: throw ConfigError(std::string("unknown layer code '") + c + "' in pattern " + s);
    }
  }
  return out;
}

inline std::string pattern_string(const std::vector<LayerKind>& p) {
  std::string s;
  for (auto k : p) s.push_back(layer_code(k));
  return s;
}

namespace detail {

// Rejects keys of `j` that are not in `known`.
inline void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  std::set<std::string> ok(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
  }
}

}  // namespace detail

/// Architecture of the hybrid stack. Per-layer overrides of FFN width and
/// expert count are empty for uniform models and are filled in by slicing
/// heterogeneous selections.
struct ModelConfig {
  std::size_t vocab = 24;
  std::size_t d_e = 32;
  std::vector<LayerKind> pattern = parse_pattern("ME*EM-");
  std::size_t n_h = 4;
  std::size_t d_h = 8;
  std::size_t kv_heads = 4;
  std::size_t m_h = 4;
  std::size_t m_d = 8;
  std::size_t groups = 2;
  std::size_t d_s = 8;
  std::size_t conv_width = 4;
  std::size_t experts = 4;
  std::size_t topk = 2;
  std::size_t ffn_dim = 32;
  std::size_t shared_expert_dim = 0;
  float norm_eps = 1e-5f;
  std::vector<std::size_t> layer_ffn_dim;
  std::vector<std::size_t> layer_experts;

  std::size_t num_layers() const { return pattern.size(); }
  std::size_t mamba_inner() const { return m_h * m_d; }
  std::size_t attn_inner() const { return n_h * d_h; }
  std::size_t ffn_of(std::size_t j) const { return layer_ffn_dim.empty() ? ffn_dim : layer_ffn_dim.at(j); }
  std::size_t experts_of(std::size_t j) const { return layer_experts.empty() ? experts : layer_experts.at(j); }

  std::size_t count(LayerKind k) const {
    std::size_t n = 0;
    for (auto p : pattern) n += (p == k);
    return n;
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v == 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(vocab, "vocab");
    positive(d_e, "d_e");
    positive(conv_width, "conv_width");
    if (pattern.empty()) throw ConfigError("layer pattern is empty");
    if (count(LayerKind::Mamba)) {
      positive(m_h, "m_h");
      positive(m_d, "m_d");
      positive(groups, "groups");
      positive(d_s, "d_s");
      if (m_h % groups != 0) throw ConfigError("m_h must be divisible by the Mamba group count");
    }
    if (count(LayerKind::Attention)) {
      positive(n_h, "n_h");
      positive(d_h, "d_h");
      positive(kv_heads, "kv_heads");
      if (n_h % kv_heads != 0) throw ConfigError("n_h must be divisible by kv_heads");
    }
    if (!layer_ffn_dim.empty() && layer_ffn_dim.size() != pattern.size()) {
      throw ConfigError("layer_ffn_dim must have one entry per layer");
    }
    if (!layer_experts.empty() && layer_experts.size() != pattern.size()) {
      throw ConfigError("layer_experts must have one entry per layer");
    }
    for (std::size_t j = 0; j < pattern.size(); ++j) {
      if (pattern[j] == LayerKind::FFN || pattern[j] == LayerKind::MoE) positive(ffn_of(j), "ffn_dim");
      if (pattern[j] == LayerKind::MoE) {
        positive(experts_of(j), "experts");
        if (topk == 0 || topk > experts_of(j)) throw ConfigError("topk must lie in [1, experts]");
      }
    }
  }

  json to_json() const {
    json j;
    j["vocab"] = vocab;
    j["d_e"] = d_e;
    j["pattern"] = pattern_string(pattern);
    j["n_h"] = n_h;
    j["d_h"] = d_h;
    j["kv_heads"] = kv_heads;
    j["m_h"] = m_h;
    j["m_d"] = m_d;
    j["groups"] = groups;
    j["d_s"] = d_s;
    j["conv_width"] = conv_width;
    j["experts"] = experts;
    j["topk"] = topk;
    j["ffn_dim"] = ffn_dim;
    j["shared_expert_dim"] = shared_expert_dim;
    j["norm_eps"] = norm_eps;
    j["layer_ffn_dim"] = layer_ffn_dim;
    j["layer_experts"] = layer_experts;
    return j;
  }

  static ModelConfig from_json(const json& j) {
    detail::check_keys(j, {"vocab", "d_e", "pattern", "n_h", "d_h", "kv_heads", "m_h", "m_d", "groups", "d_s",
                           "conv_width", "experts", "topk", "ffn_dim", "shared_expert_dim", "norm_eps",
                           "layer_ffn_dim", "layer_experts"},
                       "model");
    ModelConfig c;
    std::string pat = pattern_string(c.pattern);
    detail::read_opt(j, "vocab", c.vocab);
    detail::read_opt(j, "d_e", c.d_e);
    detail::read_opt(j, "pattern", pat);
    c.pattern = parse_pattern(pat);
    detail::read_opt(j, "n_h", c.n_h);
    detail::read_opt(j, "d_h", c.d_h);
    detail::read_opt(j, "kv_heads", c.kv_heads);
    detail::read_opt(j, "m_h", c.m_h);
    detail::read_opt(j, "m_d", c.m_d);
    detail::read_opt(j, "groups", c.groups);
    detail::read_opt(j, "d_s", c.d_s);
    detail::read_opt(j, "conv_width", c.conv_width);
    detail::read_opt(j, "experts", c.experts);
    detail::read_opt(j, "topk", c.topk);
    detail::read_opt(j, "ffn_dim", c.ffn_dim);
    detail::read_opt(j, "shared_expert_dim", c.shared_expert_dim);
    detail::read_opt(j, "norm_eps", c.norm_eps);
    detail::read_opt(j, "layer_ffn_dim", c.layer_ffn_dim);
    detail::read_opt(j, "layer_experts", c.layer_experts);
    c.validate();
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

}  // namespace elastic
