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

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/errors.hpp"
#include "elastic/hash.hpp"
#include "elastic/rng.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

/// Ordered collection of named tensors. Iteration follows insertion order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("missing parameter " + name);
    return items_[it->second].second;
  }

  void set(const std::string& name, Tensor t) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("missing parameter " + name);
    if (items_[it->second].second.shape() != t.shape()) throw ShapeError("shape change for parameter " + name);
    items_[it->second].second = std::move(t);
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  /// Deep copy; the copy's leaves require grad iff `trainable`.
  ParamStore clone(bool trainable = false) const {
    ParamStore out;
    for (const auto& [name, t] : items_) {
      Tensor c = t.detach();
      if (trainable) c.set_requires_grad();
      out.add(name, c);
    }
    return out;
  }

  std::uint64_t digest() const {
    Fnv1a h;
    for (const auto& [name, t] : items_) {
      h.update(name);
      h.update(t.data());
    }
    return h.digest();
  }

  void zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

inline std::string layer_prefix(std::size_t j) { return "layers." + std::to_string(j) + "."; }

/// Names and shapes of every parameter of a model, in canonical order.
inline std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.tokens", Shape{c.vocab, c.d_e});
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    const std::string p = layer_prefix(j);
    out.emplace_back(p + "norm", Shape{c.d_e});
    switch (c.pattern[j]) {
      case LayerKind::Mamba: {
        const std::size_t inner = c.mamba_inner(), bc = c.groups * c.d_s, k = c.conv_width;
        out.emplace_back(p + "in_z", Shape{inner, c.d_e});
        out.emplace_back(p + "in_x", Shape{inner, c.d_e});
        out.emplace_back(p + "in_B", Shape{bc, c.d_e});
        out.emplace_back(p + "in_C", Shape{bc, c.d_e});
        out.emplace_back(p + "in_dt", Shape{c.m_h, c.d_e});
        out.emplace_back(p + "conv_x_w", Shape{inner, k});
        out.emplace_back(p + "conv_x_b", Shape{inner});
        out.emplace_back(p + "conv_B_w", Shape{bc, k});
        out.emplace_back(p + "conv_B_b", Shape{bc});
        out.emplace_back(p + "conv_C_w", Shape{bc, k});
        out.emplace_back(p + "conv_C_b", Shape{bc});
        out.emplace_back(p + "dt_bias", Shape{c.m_h});
        out.emplace_back(p + "A_log", Shape{c.m_h});
        out.emplace_back(p + "D", Shape{c.m_h});
        out.emplace_back(p + "gate_norm", Shape{inner});
        out.emplace_back(p + "out", Shape{c.d_e, inner});
        break;
      }
      case LayerKind::Attention:
        out.emplace_back(p + "q", Shape{c.n_h * c.d_h, c.d_e});
        out.emplace_back(p + "k", Shape{c.kv_heads * c.d_h, c.d_e});
        out.emplace_back(p + "v", Shape{c.kv_heads * c.d_h, c.d_e});
        out.emplace_back(p + "o", Shape{c.d_e, c.n_h * c.d_h});
        break;
      case LayerKind::FFN:
        out.emplace_back(p + "up", Shape{c.ffn_of(j), c.d_e});
        out.emplace_back(p + "down", Shape{c.d_e, c.ffn_of(j)});
        break;
      case LayerKind::MoE: {
        const std::size_t e = c.experts_of(j);
        out.emplace_back(p + "router", Shape{e, c.d_e});
        for (std::size_t i = 0; i < e; ++i) {
          const std::string q = p + "experts." + std::to_string(i) + ".";
          out.emplace_back(q + "up", Shape{c.ffn_of(j), c.d_e});
          out.emplace_back(q + "down", Shape{c.d_e, c.ffn_of(j)});
        }
        if (c.shared_expert_dim) {
          out.emplace_back(p + "shared.up", Shape{c.shared_expert_dim, c.d_e});
          out.emplace_back(p + "shared.down", Shape{c.d_e, c.shared_expert_dim});
        }
        break;
      }
    }
  }
  out.emplace_back("head.norm", Shape{c.d_e});
  out.emplace_back("head.out", Shape{c.vocab, c.d_e});
  return out;
}

namespace detail {

inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace detail

/// Seeded initialization. Each tensor draws from its own named substream so
/// adding a parameter does not shift the others.
inline ParamStore init_params(const ModelConfig& c, const Rng& root) {
  c.validate();
  ParamStore ps;
  for (const auto& [name, shape] : parameter_shapes(c)) {
    Rng r = root.substream("init/" + name);
    Tensor t(shape);
    auto w = t.mutable_data();
    using detail::ends_with;
    if (ends_with(name, "norm") || ends_with(name, "gate_norm")) {
      std::fill(w.begin(), w.end(), 1.0f);
    } else if (ends_with(name, "_b")) {
      std::fill(w.begin(), w.end(), 0.0f);
    } else if (ends_with(name, "D")) {
      std::fill(w.begin(), w.end(), 1.0f);
    } else if (ends_with(name, "A_log")) {
      for (auto& v : w) v = static_cast<float>(std::log(r.uniform(1.0, 16.0)));
    } else if (ends_with(name, "dt_bias")) {
      // softplus^-1 of a log-uniform step in [1e-3, 1e-1].
      for (auto& v : w) {
        const double dt = std::exp(r.uniform(std::log(1e-3), std::log(1e-1)));
        v = static_cast<float>(dt + std::log(-std::expm1(-dt)));
      }
    } else if (ends_with(name, "_w")) {
      const double s = 1.0 / std::sqrt(static_cast<double>(shape[1]));
      for (auto& v : w) v = static_cast<float>(r.uniform(-s, s));
    } else if (name == "embed.tokens") {
      for (auto& v : w) v = static_cast<float>(r.normal());
    } else {
      // Fan-in scaled normal for projections.
      const double s = 1.0 / std::sqrt(static_cast<double>(shape[1]));
      for (auto& v : w) v = static_cast<float>(r.normal() * s);
    }
    t.set_requires_grad();
    ps.add(name, t);
  }
  return ps;
}

}  // namespace elastic
