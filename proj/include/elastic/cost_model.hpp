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

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/errors.hpp"
#include "elastic/ops.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

/// Retained sizes per elastic axis. `experts` and `ffn` have one entry per
/// layer; entries on layers of another kind are ignored. `keep` marks layers
/// retained in depth.
struct SubnetSizes {
  std::size_t d_e = 0;
  std::size_t m_h = 0;
  std::size_t m_d = 0;
  std::size_t n_h = 0;
  std::vector<std::size_t> experts;
  std::vector<std::size_t> ffn;
  std::vector<bool> keep;

  static SubnetSizes full(const ModelConfig& c) {
    SubnetSizes s{c.d_e, c.m_h, c.m_d, c.n_h, {}, {}, std::vector<bool>(c.num_layers(), true)};
    for (std::size_t j = 0; j < c.num_layers(); ++j) {
      s.experts.push_back(c.pattern[j] == LayerKind::MoE ? c.experts_of(j) : 0);
      s.ffn.push_back(c.pattern[j] == LayerKind::MoE || c.pattern[j] == LayerKind::FFN ? c.ffn_of(j) : 0);
    }
    return s;
  }

  /// Same value of e and f on every layer that has that axis.
  static SubnetSizes uniform(const ModelConfig& c, std::size_t d_e, std::size_t m_h, std::size_t m_d, std::size_t n_h,
                             std::size_t e, std::size_t f) {
    SubnetSizes s = full(c);
    s.d_e = d_e;
    s.m_h = m_h;
    s.m_d = m_d;
    s.n_h = n_h;
    for (std::size_t j = 0; j < c.num_layers(); ++j) {
      if (c.pattern[j] == LayerKind::MoE) s.experts[j] = e;
      if (s.ffn[j]) s.ffn[j] = f;
    }
    return s;
  }

  json to_json() const {
    return json{{"d_e", d_e}, {"m_h", m_h}, {"m_d", m_d}, {"n_h", n_h}, {"experts", experts}, {"ffn", ffn}, {"keep", keep}};
  }

  static SubnetSizes from_json(const json& j) {
    detail::check_keys(j, {"d_e", "m_h", "m_d", "n_h", "experts", "ffn", "keep"}, "sizes");
    SubnetSizes s;
    s.d_e = j.at("d_e").get<std::size_t>();
    s.m_h = j.at("m_h").get<std::size_t>();
    s.m_d = j.at("m_d").get<std::size_t>();
    s.n_h = j.at("n_h").get<std::size_t>();
    s.experts = j.at("experts").get<std::vector<std::size_t>>();
    s.ffn = j.at("ffn").get<std::vector<std::size_t>>();
    s.keep = j.at("keep").get<std::vector<bool>>();
    return s;
  }

  bool operator==(const SubnetSizes&) const = default;
};

/// Architecture of the standalone model with the given sizes. Dropped layers
/// are removed from the pattern; per-layer widths are recorded only when
/// they differ across layers.
inline ModelConfig subnet_config(const ModelConfig& c, const SubnetSizes& s) {
  ModelConfig out = c;
  out.d_e = s.d_e;
  out.m_h = s.m_h;
  out.m_d = s.m_d;
  out.n_h = s.n_h;
  out.kv_heads = c.kv_heads == c.n_h ? s.n_h : c.kv_heads;
  out.pattern.clear();
  std::vector<std::size_t> ffn, experts;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    if (!s.keep.at(j)) continue;
    out.pattern.push_back(c.pattern[j]);
    ffn.push_back(s.ffn.at(j) ? s.ffn[j] : c.ffn_dim);
    experts.push_back(s.experts.at(j) ? s.experts[j] : c.experts);
  }
  std::vector<std::size_t> live_ffn, live_exp;
  for (std::size_t j = 0; j < out.pattern.size(); ++j) {
    if (out.pattern[j] == LayerKind::FFN || out.pattern[j] == LayerKind::MoE) live_ffn.push_back(ffn[j]);
    if (out.pattern[j] == LayerKind::MoE) live_exp.push_back(experts[j]);
  }
  auto uniform = [](const std::vector<std::size_t>& v) {
    return v.empty() || std::all_of(v.begin(), v.end(), [&](std::size_t x) { return x == v[0]; });
  };
  out.layer_ffn_dim.clear();
  out.layer_experts.clear();
  if (uniform(live_ffn)) {
    if (!live_ffn.empty()) out.ffn_dim = live_ffn[0];
  } else {
    out.layer_ffn_dim = ffn;
  }
  if (uniform(live_exp)) {
    if (!live_exp.empty()) out.experts = live_exp[0];
  } else {
    out.layer_experts = experts;
  }
  out.validate();
  return out;
}

template <class S>
struct CostT {
  S total;
  S active;
};

namespace detail {

// Closed-form parameter counts, generic over the scalar type so the same
// formula serves exact counting (double) and differentiable expected cost
// (Tensor).
template <class S>
CostT<S> cost_terms(const ModelConfig& c, const S& d, const S& mh, const S& md, const S& nh,
                    const std::vector<S>& e, const std::vector<S>& f, const std::vector<bool>& keep) {
  const double V = static_cast<double>(c.vocab);
  const double K = static_cast<double>(c.conv_width);
  const double gds = static_cast<double>(c.groups * c.d_s);
  const double dh = static_cast<double>(c.d_h);
  const double topk = static_cast<double>(c.topk);
  const double shared = static_cast<double>(c.shared_expert_dim);
  // Embedding, head projection and head norm.
  S total = d * (2.0 * V + 1.0);
  S active = total;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    if (!keep.at(j)) continue;
    S layer = d * 1.0;  // pre-norm gain
    S extra_total = d * 0.0;
    switch (c.pattern[j]) {
      case LayerKind::Mamba: {
        const S inner = mh * md;
        layer = layer + d * (3.0 * inner + mh + 2.0 * gds) + inner * (K + 2.0) + 3.0 * mh + 2.0 * gds * (K + 1.0);
        break;
      }
      case LayerKind::Attention: {
        const S kv = c.kv_heads == c.n_h ? nh : nh * 0.0 + static_cast<double>(c.kv_heads);
        layer = layer + d * dh * (2.0 * nh + 2.0 * kv);
        break;
      }
      case LayerKind::FFN: layer = layer + 2.0 * d * f.at(j); break;
      case LayerKind::MoE: {
        const S per_expert = 2.0 * d * f.at(j);
        layer = layer + d * e.at(j) + topk * per_expert + 2.0 * shared * d;
        extra_total = (e.at(j) + (-topk)) * per_expert;
        break;
      }
    }
    active = active + layer;
    total = total + layer + extra_total;
  }
  return {total, active};
}

}  // namespace detail

struct ParamCount {
  double total = 0.0;
  double active = 0.0;
};

/// Exact total and active (top-k experts only) parameter counts.
inline ParamCount cost_model(const ModelConfig& c, const SubnetSizes& s) {
  std::vector<double> e, f;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    e.push_back(static_cast<double>(s.experts.at(j)));
    f.push_back(static_cast<double>(s.ffn.at(j)));
  }
  const auto r = detail::cost_terms<double>(c, static_cast<double>(s.d_e), static_cast<double>(s.m_h),
                                            static_cast<double>(s.m_d), static_cast<double>(s.n_h), e, f, s.keep);
  return {r.total, r.active};
}

inline ParamCount cost_model(const ModelConfig& c) { return cost_model(c, SubnetSizes::full(c)); }

/// Expected-size cost for the router loss. Every argument is a scalar tensor
/// (expected size under the router's distribution); per-layer vectors hold
/// one scalar per layer, undefined where the axis does not apply.
inline CostT<Tensor> expected_cost(const ModelConfig& c, const Tensor& d, const Tensor& mh, const Tensor& md,
                                   const Tensor& nh, std::vector<Tensor> e, std::vector<Tensor> f) {
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    if (!e.at(j).defined()) e[j] = Tensor::scalar(0.0f);
    if (!f.at(j).defined()) f[j] = Tensor::scalar(0.0f);
  }
  return detail::cost_terms<Tensor>(c, d, mh, md, nh, e, f, std::vector<bool>(c.num_layers(), true));
}

struct MemoryReport {
  double nested_bytes = 0.0;
  double separate_bytes = 0.0;
};

/// Nested deployment stores only the largest model; separate deployment
/// stores every model.
inline MemoryReport memory_report(const std::vector<double>& total_params, double bytes_per_param) {
  if (total_params.empty()) throw ContractError("memory_report needs at least one model");
  MemoryReport r;
  for (double p : total_params) {
    r.nested_bytes = std::max(r.nested_bytes, p * bytes_per_param);
    r.separate_bytes += p * bytes_per_param;
  }
  return r;
}

inline constexpr double kGiB = 1024.0 * 1024.0 * 1024.0;

/// Public 30B-A3.6B hybrid Mamba/MoE reference used to anchor the cost model.
inline ModelConfig reference_hybrid_config() {
  ModelConfig c;
  c.vocab = 131072;
  c.d_e = 2688;
  c.pattern = parse_pattern("MEMEM*EMEMEM*EMEMEM*EMEMEM*EMEMEM*EMEMEMEM*EMEMEMEME");
  c.n_h = 32;
  c.d_h = 128;
  c.kv_heads = 2;
  c.m_h = 64;
  c.m_d = 64;
  c.groups = 8;
  c.d_s = 128;
  c.conv_width = 4;
  c.experts = 128;
  c.topk = 6;
  c.ffn_dim = 1856;
  c.shared_expert_dim = 3712;
  return c;
}

}  // namespace elastic
