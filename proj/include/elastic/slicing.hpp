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
#include <map>
#include <set>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/cost_model.hpp"
#include "elastic/errors.hpp"
#include "elastic/importance.hpp"
#include "elastic/masks.hpp"
#include "elastic/model.hpp"
#include "elastic/params.hpp"

namespace elastic {

using IndexList = std::vector<std::int32_t>;

/// Retained component indices per axis. Lists hold original indices in
/// ascending order, so a full-size axis slices to the identity and heads
/// stay grouped. Per-layer lists are empty on layers without the axis.
struct SlicePlan {
  std::string label;
  std::string source;  // hash of the checkpoint the plan was derived from
  IndexList emb;
  std::vector<IndexList> mamba_heads;
  std::vector<IndexList> mamba_channels;
  std::vector<IndexList> attn_heads;
  std::vector<IndexList> experts;
  std::vector<std::vector<IndexList>> ffn;  // per layer, per retained unit
  std::vector<bool> keep;

  json to_json() const {
    return json{{"label", label},
                {"source", source},
                {"emb", emb},
                {"mamba_heads", mamba_heads},
                {"mamba_channels", mamba_channels},
                {"attn_heads", attn_heads},
                {"experts", experts},
                {"ffn", ffn},
                {"keep", keep}};
  }

  static SlicePlan from_json(const json& j) {
    detail::check_keys(j, {"label", "source", "emb", "mamba_heads", "mamba_channels", "attn_heads", "experts", "ffn", "keep"},
                       "slice plan");
    SlicePlan p;
    p.label = j.at("label").get<std::string>();
    p.source = j.at("source").get<std::string>();
    p.emb = j.at("emb").get<IndexList>();
    p.mamba_heads = j.at("mamba_heads").get<std::vector<IndexList>>();
    p.mamba_channels = j.at("mamba_channels").get<std::vector<IndexList>>();
    p.attn_heads = j.at("attn_heads").get<std::vector<IndexList>>();
    p.experts = j.at("experts").get<std::vector<IndexList>>();
    p.ffn = j.at("ffn").get<std::vector<std::vector<IndexList>>>();
    p.keep = j.at("keep").get<std::vector<bool>>();
    return p;
  }

  bool operator==(const SlicePlan&) const = default;
};

namespace detail {

inline IndexList sorted_prefix(const std::vector<std::int32_t>& sigma, std::size_t k) {
  if (k > sigma.size()) throw MaskError("slice size exceeds axis length");
  IndexList out(sigma.begin(), sigma.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

inline bool subset(const IndexList& a, const IndexList& b) {
  return std::includes(b.begin(), b.end(), a.begin(), a.end());
}

}  // namespace detail

/// Plan keeping the sigma-prefix of each selected size.
inline SlicePlan make_slice_plan(const ModelConfig& c, const ImportanceReport& imp, const SubnetSizes& s,
                                 std::string label = "", std::string source = "") {
  const std::size_t n = c.num_layers();
  SlicePlan p;
  p.label = std::move(label);
  p.source = std::move(source);
  p.emb = detail::sorted_prefix(imp.emb.sigma, s.d_e);
  p.mamba_heads.resize(n);
  p.mamba_channels.resize(n);
  p.attn_heads.resize(n);
  p.experts.resize(n);
  p.ffn.resize(n);
  p.keep = s.keep;
  if (p.keep.size() != n) throw ConfigError("slice plan: keep list length mismatch");
  for (std::size_t j = 0; j < n; ++j) {
    switch (c.pattern[j]) {
      case LayerKind::Mamba:
        if (s.m_h % c.groups) throw MaskError("slice plan: m_h not divisible by groups");
        p.mamba_heads[j] = detail::sorted_prefix(imp.mamba_head.at(j).sigma, s.m_h);
        p.mamba_channels[j] = detail::sorted_prefix(imp.mamba_channel.at(j).sigma, s.m_d);
        {
          std::vector<float> hm(c.m_h, 0.0f);
          for (auto h : p.mamba_heads[j]) hm[static_cast<std::size_t>(h)] = 1.0f;
          check_group_balance(hm, c.groups, "slice plan layer " + std::to_string(j));
        }
        break;
      case LayerKind::Attention:
        p.attn_heads[j] = detail::sorted_prefix(imp.attn_head.at(j).sigma, s.n_h);
        if (c.kv_heads != c.n_h) {
          std::vector<float> hm(c.n_h, 0.0f);
          for (auto h : p.attn_heads[j]) hm[static_cast<std::size_t>(h)] = 1.0f;
          check_group_balance(hm, c.kv_heads, "slice plan layer " + std::to_string(j));
        }
        break;
      case LayerKind::FFN: p.ffn[j] = {detail::sorted_prefix(imp.ffn.at(j).at(0).sigma, s.ffn.at(j))}; break;
      case LayerKind::MoE:
        p.experts[j] = detail::sorted_prefix(imp.expert.at(j).sigma, s.experts.at(j));
        if (p.experts[j].size() < c.topk) throw BudgetError("slice plan: fewer experts than topk");
        for (auto e : p.experts[j])
          p.ffn[j].push_back(detail::sorted_prefix(imp.ffn.at(j).at(static_cast<std::size_t>(e)).sigma, s.ffn.at(j)));
        break;
    }
  }
  return p;
}

/// Sizes implied by a plan.
inline SubnetSizes plan_sizes(const ModelConfig& c, const SlicePlan& p) {
  SubnetSizes s = SubnetSizes::full(c);
  s.d_e = p.emb.size();
  s.keep = p.keep;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    switch (c.pattern[j]) {
      case LayerKind::Mamba:
        s.m_h = p.mamba_heads[j].size();
        s.m_d = p.mamba_channels[j].size();
        break;
      case LayerKind::Attention: s.n_h = p.attn_heads[j].size(); break;
      case LayerKind::FFN: s.ffn[j] = p.ffn[j].at(0).size(); break;
      case LayerKind::MoE:
        s.experts[j] = p.experts[j].size();
        s.ffn[j] = p.ffn[j].at(0).size();
        break;
    }
  }
  return s;
}

/// Binary masks selecting exactly the plan's components.
inline MaskSet plan_masks(const ModelConfig& c, const SlicePlan& p) {
  auto ind = [](std::size_t n, const IndexList& keep) {
    std::vector<float> v(n, 0.0f);
    for (auto i : keep) v.at(static_cast<std::size_t>(i)) = 1.0f;
    return Tensor::vector(std::move(v));
  };
  MaskSet m = MaskSet::ones(c);
  m.emb = ind(c.d_e, p.emb);
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    m.gamma[j] = p.keep[j] ? 1.0f : 0.0f;
    switch (c.pattern[j]) {
      case LayerKind::Mamba:
        m.mamba_head[j] = ind(c.m_h, p.mamba_heads[j]);
        m.mamba_channel[j] = ind(c.m_d, p.mamba_channels[j]);
        break;
      case LayerKind::Attention: m.attn_head[j] = ind(c.n_h, p.attn_heads[j]); break;
      case LayerKind::FFN: m.ffn[j] = reshape(ind(c.ffn_of(j), p.ffn[j].at(0)), Shape{1, c.ffn_of(j)}); break;
      case LayerKind::MoE: {
        const std::size_t e = c.experts_of(j), f = c.ffn_of(j);
        m.expert[j] = ind(e, p.experts[j]);
        std::vector<float> v(e * f, 0.0f);
        for (std::size_t u = 0; u < p.experts[j].size(); ++u)
          for (auto i : p.ffn[j][u]) v[static_cast<std::size_t>(p.experts[j][u]) * f + static_cast<std::size_t>(i)] = 1.0f;
        m.ffn[j] = Tensor(Shape{e, f}, std::move(v));
        break;
      }
    }
  }
  return m;
}

/// Every retained index of `small` is retained by `large`.
inline bool plan_is_subset(const SlicePlan& small, const SlicePlan& large) {
  auto all = [](const std::vector<IndexList>& a, const std::vector<IndexList>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t j = 0; j < a.size(); ++j)
      if (!detail::subset(a[j], b[j])) return false;
    return true;
  };
  if (!detail::subset(small.emb, large.emb)) return false;
  if (!all(small.mamba_heads, large.mamba_heads) || !all(small.mamba_channels, large.mamba_channels) ||
      !all(small.attn_heads, large.attn_heads) || !all(small.experts, large.experts))
    return false;
  if (small.keep.size() != large.keep.size()) return false;
  for (std::size_t j = 0; j < small.keep.size(); ++j) {
    if (small.keep[j] && !large.keep[j]) return false;
    // Per-expert FFN rows must nest for every expert both plans keep.
    for (std::size_t u = 0; u < small.ffn[j].size(); ++u) {
      const std::int32_t e = small.experts[j].empty() ? -1 : small.experts[j][u];
      std::size_t v = 0;
      if (e >= 0) {
        const auto it = std::find(large.experts[j].begin(), large.experts[j].end(), e);
        v = static_cast<std::size_t>(it - large.experts[j].begin());
      }
      if (v >= large.ffn[j].size() || !detail::subset(small.ffn[j][u], large.ffn[j][v])) return false;
    }
  }
  return true;
}

namespace detail {

inline Tensor take(const Tensor& t, const IndexList& rows, const IndexList& cols) {
  std::vector<float> v;
  v.reserve(rows.size() * cols.size());
  for (auto r : rows)
    for (auto c : cols) v.push_back(t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)));
  return Tensor(Shape{rows.size(), cols.size()}, std::move(v));
}

inline Tensor take_vec(const Tensor& t, const IndexList& idx) {
  std::vector<float> v;
  for (auto i : idx) v.push_back(t[static_cast<std::size_t>(i)]);
  return Tensor::vector(std::move(v));
}

inline IndexList iota_list(std::size_t n) {
  IndexList v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<std::int32_t>(i);
  return v;
}

}  // namespace detail

struct SlicedModel {
  ModelConfig config;
  ParamStore params;
};

/// Physically smaller model holding only the plan's components.
inline SlicedModel slice_model(const ModelConfig& c, const ParamStore& p, const SlicePlan& plan) {
  using detail::take;
  using detail::take_vec;
  const SubnetSizes sizes = plan_sizes(c, plan);
  SlicedModel out;
  out.config = subnet_config(c, sizes);
  const IndexList& E = plan.emb;
  const IndexList vocab = detail::iota_list(c.vocab);
  std::map<std::string, Tensor> t;
  t["embed.tokens"] = take(p.get("embed.tokens"), vocab, E);
  std::size_t nj = 0;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    if (!plan.keep[j]) continue;
    const std::string src = layer_prefix(j), dst = layer_prefix(nj++);
    t[dst + "norm"] = take_vec(p.get(src + "norm"), E);
    switch (c.pattern[j]) {
      case LayerKind::Mamba: {
        IndexList flat, heads = plan.mamba_heads[j];
        for (auto h : heads)
          for (auto d : plan.mamba_channels[j]) flat.push_back(h * static_cast<std::int32_t>(c.m_d) + d);
        const IndexList bc = detail::iota_list(c.groups * c.d_s), kk = detail::iota_list(c.conv_width);
        t[dst + "in_z"] = take(p.get(src + "in_z"), flat, E);
        t[dst + "in_x"] = take(p.get(src + "in_x"), flat, E);
        t[dst + "in_B"] = take(p.get(src + "in_B"), bc, E);
        t[dst + "in_C"] = take(p.get(src + "in_C"), bc, E);
        t[dst + "in_dt"] = take(p.get(src + "in_dt"), heads, E);
        t[dst + "conv_x_w"] = take(p.get(src + "conv_x_w"), flat, kk);
        t[dst + "conv_x_b"] = take_vec(p.get(src + "conv_x_b"), flat);
        t[dst + "conv_B_w"] = p.get(src + "conv_B_w").detach();
        t[dst + "conv_B_b"] = p.get(src + "conv_B_b").detach();
        t[dst + "conv_C_w"] = p.get(src + "conv_C_w").detach();
        t[dst + "conv_C_b"] = p.get(src + "conv_C_b").detach();
        t[dst + "dt_bias"] = take_vec(p.get(src + "dt_bias"), heads);
        t[dst + "A_log"] = take_vec(p.get(src + "A_log"), heads);
        t[dst + "D"] = take_vec(p.get(src + "D"), heads);
        t[dst + "gate_norm"] = take_vec(p.get(src + "gate_norm"), flat);
        t[dst + "out"] = take(p.get(src + "out"), E, flat);
        break;
      }
      case LayerKind::Attention: {
        IndexList q;
        for (auto h : plan.attn_heads[j])
          for (std::size_t e = 0; e < c.d_h; ++e) q.push_back(h * static_cast<std::int32_t>(c.d_h) + static_cast<std::int32_t>(e));
        const IndexList kv = c.kv_heads == c.n_h ? q : detail::iota_list(c.kv_heads * c.d_h);
        t[dst + "q"] = take(p.get(src + "q"), q, E);
        t[dst + "k"] = take(p.get(src + "k"), kv, E);
        t[dst + "v"] = take(p.get(src + "v"), kv, E);
        t[dst + "o"] = take(p.get(src + "o"), E, q);
        break;
      }
      case LayerKind::FFN:
        t[dst + "up"] = take(p.get(src + "up"), plan.ffn[j][0], E);
        t[dst + "down"] = take(p.get(src + "down"), E, plan.ffn[j][0]);
        break;
      case LayerKind::MoE: {
        t[dst + "router"] = take(p.get(src + "router"), plan.experts[j], E);
        for (std::size_t u = 0; u < plan.experts[j].size(); ++u) {
          const std::string se = src + "experts." + std::to_string(plan.experts[j][u]) + ".";
          const std::string de = dst + "experts." + std::to_string(u) + ".";
          t[de + "up"] = take(p.get(se + "up"), plan.ffn[j][u], E);
          t[de + "down"] = take(p.get(se + "down"), E, plan.ffn[j][u]);
        }
        if (c.shared_expert_dim) {
          const IndexList sh = detail::iota_list(c.shared_expert_dim);
          t[dst + "shared.up"] = take(p.get(src + "shared.up"), sh, E);
          t[dst + "shared.down"] = take(p.get(src + "shared.down"), E, sh);
        }
        break;
      }
    }
  }
  t["head.norm"] = take_vec(p.get("head.norm"), E);
  t["head.out"] = take(p.get("head.out"), vocab, E);
  for (const auto& [name, shape] : parameter_shapes(out.config)) {
    auto it = t.find(name);
    if (it == t.end()) throw ContractError("slice: no tensor for " + name);
    if (it->second.shape() != shape) throw ShapeError("slice: shape mismatch for " + name);
    out.params.add(name, it->second);
  }
  return out;
}

/// Largest absolute logit difference between the sliced model and the
/// masked full model on the given prompts.
inline double slice_equivalence_error(const ModelConfig& c, const ParamStore& p, const SlicePlan& plan,
                                      const std::vector<std::vector<std::int32_t>>& prompts) {
  NoGradGuard ng;
  const SlicedModel s = slice_model(c, p, plan);
  const MaskSet m = plan_masks(c, plan);
  double worst = 0.0;
  for (const auto& toks : prompts) {
    const Tensor a = logits(c, p, toks, &m);
    const Tensor b = logits(s.config, s.params, toks);
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::fabs(static_cast<double>(a[i]) - b[i]));
  }
  return worst;
}

}  // namespace elastic
