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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <future>
#include <map>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "elastic/checkpoint.hpp"
#include "elastic/data.hpp"
#include "elastic/quantization.hpp"
#include "elastic/slicing.hpp"

namespace elastic {

/// One budget of the family as a standalone sliced model.
struct DeployedModel {
  std::string label;
  SlicePlan plan;
  ModelConfig config;
  ParamStore params;
  double active = 0.0;
};

/// Every budget of a checkpoint, sliced zero-shot from the shared weights.
struct ModelFamily {
  ModelConfig parent;
  std::vector<DeployedModel> models;

  std::size_t index(const std::string& label) const {
    std::string known;
    for (std::size_t i = 0; i < models.size(); ++i) {
      if (models[i].label == label) return i;
      known += (known.empty() ? "" : ", ") + models[i].label;
    }
    throw ConfigError("unknown budget '" + label + "' (available: " + known + ")");
  }
  const DeployedModel& at(const std::string& label) const { return models[index(label)]; }
};

inline DeployedModel deploy(const ModelConfig& c, const ParamStore& p, const SlicePlan& plan) {
  SlicedModel s = slice_model(c, p, plan);
  const double active = cost_model(s.config).active;
  return {plan.label, plan, std::move(s.config), std::move(s.params), active};
}

inline ModelFamily make_family(const Checkpoint& ck) {
  if (!ck.importance) throw ContractError("checkpoint has no importance report");
  if (ck.budgets.empty()) throw ContractError("checkpoint has no budgets");
  ModelFamily f;
  f.parent = ck.config;
  const std::string source = checkpoint_hash(ck);
  for (const auto& b : ck.budgets)
    f.models.push_back(deploy(ck.config, ck.params, make_slice_plan(ck.config, *ck.importance, b.sizes, b.label, source)));
  return f;
}

enum class CachePolicy { Recompute, Transplant };

inline const char* policy_name(CachePolicy p) { return p == CachePolicy::Recompute ? "recompute" : "transplant"; }

inline CachePolicy parse_policy(const std::string& s) {
  if (s == "recompute") return CachePolicy::Recompute;
  if (s == "transplant") return CachePolicy::Transplant;
  throw ConfigError("unknown cache policy '" + s + "' (expected recompute or transplant)");
}

struct PhasePlan {
  std::size_t think_budget_tokens = 0;
  std::string think_model;
  std::string answer_model;
  CachePolicy cache_policy = CachePolicy::Recompute;
};

struct RunRecord {
  std::string think_model;
  std::string answer_model;
  CachePolicy policy = CachePolicy::Recompute;
  std::size_t cap = 0;
  std::size_t prompt_len = 0;
  std::size_t reason_len = 0;
  std::size_t answer_len = 0;
  bool capped = false;
  double flops = 0.0;
  double wall_seconds = 0.0;
  bool correct = false;
  std::vector<std::int32_t> reasoning;
  std::vector<std::int32_t> answer;

  std::size_t output_tokens() const { return reason_len + answer_len; }
};

struct DecodeOptions {
  std::size_t max_answer_tokens = 4;
  bool kv_cache_fp8 = false;
};

namespace detail {

inline std::int32_t argmax_last(const Tensor& logits) {
  const std::size_t V = logits.cols(), r = logits.rows() - 1;
  std::size_t best = 0;
  for (std::size_t v = 1; v < V; ++v)
    if (logits.at(r, v) > logits.at(r, best)) best = v;
  return static_cast<std::int32_t>(best);
}

/// Feeds tokens through a cached model and returns the greedy next token.
struct Stepper {
  const DeployedModel* model;
  CacheState cache;
  double flops = 0.0;
  bool kv_fp8 = false;

  std::int32_t feed(std::span<const std::int32_t> tokens) {
    NoGradGuard ng;
    const std::size_t before = cache.tokens;
    ForwardOptions o;
    o.cache = &cache;
    const Tensor l = forward(model->config, model->params, tokens, o).logits;
    if (kv_fp8) quantize_kv_cache(cache, before);
    flops += 2.0 * model->active * static_cast<double>(tokens.size());
    return argmax_last(l);
  }
};

inline std::vector<std::int32_t> with_think(std::vector<std::int32_t> prompt) {
  if (prompt.empty() || prompt.back() != tok::kThink) prompt.push_back(tok::kThink);
  return prompt;
}

}  // namespace detail

/// Layers of the parent kept by a plan, in order.
inline std::vector<std::size_t> kept_layers(const SlicePlan& p) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < p.keep.size(); ++j)
    if (p.keep[j]) out.push_back(j);
  return out;
}

namespace detail {

// Parent-coordinate ids of one sliced layer's cache slots: Mamba inner
// channels (head * m_d + channel) or attention KV features.
inline std::vector<std::int32_t> cache_slots(const ModelConfig& parent, const SlicePlan& p, std::size_t j) {
  std::vector<std::int32_t> out;
  if (parent.pattern[j] == LayerKind::Mamba) {
    for (auto h : p.mamba_heads[j])
      for (auto d : p.mamba_channels[j]) out.push_back(h * static_cast<std::int32_t>(parent.m_d) + d);
  } else if (parent.pattern[j] == LayerKind::Attention) {
    const std::size_t hd = parent.d_h;
    if (parent.kv_heads == parent.n_h) {
      for (auto h : p.attn_heads[j])
        for (std::size_t e = 0; e < hd; ++e) out.push_back(h * static_cast<std::int32_t>(hd) + static_cast<std::int32_t>(e));
    } else {
      for (std::size_t i = 0; i < parent.kv_heads * hd; ++i) out.push_back(static_cast<std::int32_t>(i));
    }
  }
  return out;
}

// Moves `rows` rows of per-slot blocks of width `inner` between slot layouts;
// missing source slots become zeros.
inline std::vector<float> remap_slots(const std::vector<float>& src, const std::vector<std::int32_t>& from,
                                      const std::vector<std::int32_t>& to, std::size_t rows, std::size_t inner) {
  std::map<std::int32_t, std::size_t> pos;
  for (std::size_t i = 0; i < from.size(); ++i) pos[from[i]] = i;
  std::vector<float> out(rows * to.size() * inner, 0.0f);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < to.size(); ++i) {
      auto it = pos.find(to[i]);
      if (it == pos.end()) continue;
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((r * from.size() + it->second) * inner), inner,
                  out.begin() + static_cast<std::ptrdiff_t>((r * to.size() + i) * inner));
    }
  }
  return out;
}

inline void expect_size(std::size_t got, std::size_t want, const std::string& what) {
  if (got != want) {
    throw PolicyError("transplant: " + what + " holds " + std::to_string(got) + " values, expected " +
                      std::to_string(want));
  }
}

}  // namespace detail

/// Maps a cache built by one family member onto another. Shared slots keep
/// their state, slots only the target has are zero, slots only the source
/// has are dropped. Plans must be nested.
inline CacheState transplant_cache(const CacheState& src, const ModelConfig& parent, const SlicePlan& from,
                                   const SlicePlan& to) {
  if (!plan_is_subset(from, to) && !plan_is_subset(to, from))
    throw PolicyError("transplant: plans '" + from.label + "' and '" + to.label + "' are not nested");
  const auto src_layers = kept_layers(from), dst_layers = kept_layers(to);
  if (src.layers.size() != src_layers.size()) {
    throw PolicyError("transplant: cache has " + std::to_string(src.layers.size()) + " layers, plan '" + from.label +
                      "' keeps " + std::to_string(src_layers.size()));
  }
  const std::size_t K = parent.conv_width - 1, bc = parent.groups * parent.d_s, T = src.tokens;
  CacheState out;
  out.tokens = T;
  out.layers.resize(dst_layers.size());
  for (std::size_t i = 0; i < dst_layers.size(); ++i) {
    const std::size_t j = dst_layers[i];
    const auto to_slots = detail::cache_slots(parent, to, j);
    auto it = std::find(src_layers.begin(), src_layers.end(), j);
    LayerCache& d = out.layers[i];
    if (T == 0) continue;
    if (it == src_layers.end()) {
      if (parent.pattern[j] == LayerKind::Mamba) {
        d.conv_x.assign(K * to_slots.size(), 0.0f);
        d.conv_B.assign(K * bc, 0.0f);
        d.conv_C.assign(K * bc, 0.0f);
        d.ssm.assign(to_slots.size() * parent.d_s, 0.0f);
      } else if (parent.pattern[j] == LayerKind::Attention) {
        d.kv.k.assign(T * to_slots.size(), 0.0f);
        d.kv.v.assign(T * to_slots.size(), 0.0f);
        d.kv.length = T;
      }
      continue;
    }
    const LayerCache& s = src.layers[static_cast<std::size_t>(it - src_layers.begin())];
    const auto from_slots = detail::cache_slots(parent, from, j);
    const std::string where = "layer " + std::to_string(j);
    if (parent.pattern[j] == LayerKind::Mamba) {
      detail::expect_size(s.conv_x.size(), K * from_slots.size(), where + " conv state");
      detail::expect_size(s.conv_B.size(), K * bc, where + " conv B state");
      detail::expect_size(s.conv_C.size(), K * bc, where + " conv C state");
      detail::expect_size(s.ssm.size(), from_slots.size() * parent.d_s, where + " SSM state");
      d.conv_x = detail::remap_slots(s.conv_x, from_slots, to_slots, K, 1);
      d.conv_B = s.conv_B;
      d.conv_C = s.conv_C;
      d.ssm = detail::remap_slots(s.ssm, from_slots, to_slots, 1, parent.d_s);
    } else if (parent.pattern[j] == LayerKind::Attention) {
      detail::expect_size(s.kv.length, T, where + " KV length");
      detail::expect_size(s.kv.k.size(), T * from_slots.size(), where + " key cache");
      detail::expect_size(s.kv.v.size(), T * from_slots.size(), where + " value cache");
      d.kv.k = detail::remap_slots(s.kv.k, from_slots, to_slots, T, 1);
      d.kv.v = detail::remap_slots(s.kv.v, from_slots, to_slots, T, 1);
      d.kv.length = T;
    }
  }
  return out;
}

/// Expected cache sizes of a family member after `tokens` tokens, per kept
/// layer: conv_x, conv_B, conv_C, ssm, key, value.
inline std::vector<std::array<std::size_t, 6>> cache_shape(const DeployedModel& m, std::size_t tokens) {
  const ModelConfig& c = m.config;
  std::vector<std::array<std::size_t, 6>> out;
  const std::size_t K = c.conv_width - 1, bc = c.groups * c.d_s;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    std::array<std::size_t, 6> s{};
    if (tokens && c.pattern[j] == LayerKind::Mamba) s = {K * c.mamba_inner(), K * bc, K * bc, c.mamba_inner() * c.d_s, 0, 0};
    if (tokens && c.pattern[j] == LayerKind::Attention) s = {0, 0, 0, 0, tokens * c.kv_heads * c.d_h, tokens * c.kv_heads * c.d_h};
    out.push_back(s);
  }
  return out;
}

inline std::vector<std::array<std::size_t, 6>> cache_shape(const CacheState& cs) {
  std::vector<std::array<std::size_t, 6>> out;
  for (const auto& l : cs.layers)
    out.push_back({l.conv_x.size(), l.conv_B.size(), l.conv_C.size(), l.ssm.size(), l.kv.k.size(), l.kv.v.size()});
  return out;
}

/// Thinking with one model, then answering with another. Thinking starts
/// after a think token, stops at the end-of-think token or after `cap`
/// reasoning tokens; a capped phase gets an injected end-of-think token.
inline RunRecord run_two_phase(const Episode& ep, const PhasePlan& plan, const ModelFamily& fam,
                               const DecodeOptions& o = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  const DeployedModel& tm = fam.at(plan.think_model);
  const DeployedModel& am = fam.at(plan.answer_model);
  const std::vector<std::int32_t> prompt = detail::with_think(ep.prompt());
  RunRecord r;
  r.think_model = tm.label;
  r.answer_model = am.label;
  r.policy = plan.cache_policy;
  r.cap = plan.think_budget_tokens;
  r.prompt_len = prompt.size();

  detail::Stepper think{&tm, {}, 0.0, o.kv_cache_fp8};
  std::size_t fed = 0;  // reasoning tokens already in the think cache
  if (plan.think_budget_tokens > 0) {
    std::int32_t next = think.feed(prompt);
    while (next != tok::kEndThink) {
      r.reasoning.push_back(next);
      if (r.reasoning.size() == plan.think_budget_tokens) break;
      next = think.feed(std::span<const std::int32_t>(&r.reasoning.back(), 1));
      ++fed;
    }
    r.capped = next != tok::kEndThink;
  } else {
    r.capped = true;
  }
  r.reason_len = r.reasoning.size();

  detail::Stepper ans{&am, {}, 0.0, o.kv_cache_fp8};
  std::vector<std::int32_t> pending;
  if (plan.cache_policy == CachePolicy::Transplant && plan.think_budget_tokens > 0) {
    ans.cache = transplant_cache(think.cache, fam.parent, tm.plan, am.plan);
    pending.assign(r.reasoning.begin() + static_cast<std::ptrdiff_t>(fed), r.reasoning.end());
  } else {
    pending = prompt;
    pending.insert(pending.end(), r.reasoning.begin(), r.reasoning.end());
  }
  pending.push_back(tok::kEndThink);
  std::int32_t next = ans.feed(pending);
  while (r.answer.size() < o.max_answer_tokens) {
    r.answer.push_back(next);
    if (next == tok::kEos || r.answer.size() == o.max_answer_tokens) break;
    next = ans.feed(std::span<const std::int32_t>(&r.answer.back(), 1));
  }
  r.answer_len = r.answer.size();
  r.correct = !r.answer.empty() && r.answer.front() == ep.answer;
  r.flops = think.flops + ans.flops;
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Single-model budget control: one model and one cache for both phases.
inline RunRecord run_single(const Episode& ep, std::size_t cap, const DeployedModel& m, const DecodeOptions& o = {}) {
  const std::vector<std::int32_t> prompt = detail::with_think(ep.prompt());
  RunRecord r;
  r.think_model = r.answer_model = m.label;
  r.cap = cap;
  r.prompt_len = prompt.size();
  detail::Stepper s{&m, {}, 0.0, o.kv_cache_fp8};
  std::vector<std::int32_t> tail;
  std::int32_t next = tok::kEndThink;
  if (cap == 0) {
    tail = prompt;
    r.capped = true;
  } else {
    next = s.feed(prompt);
    while (next != tok::kEndThink) {
      r.reasoning.push_back(next);
      if (r.reasoning.size() == cap) break;
      next = s.feed(std::span<const std::int32_t>(&r.reasoning.back(), 1));
    }
    r.capped = next != tok::kEndThink;
    if (r.capped) tail.push_back(r.reasoning.back());
  }
  tail.push_back(tok::kEndThink);
  next = s.feed(tail);
  while (r.answer.size() < o.max_answer_tokens) {
    r.answer.push_back(next);
    if (next == tok::kEos || r.answer.size() == o.max_answer_tokens) break;
    next = s.feed(std::span<const std::int32_t>(&r.answer.back(), 1));
  }
  r.reason_len = r.reasoning.size();
  r.answer_len = r.answer.size();
  r.correct = !r.answer.empty() && r.answer.front() == ep.answer;
  r.flops = s.flops;
  return r;
}

/// Four-way scenario of an ordered pair relative to the largest model.
inline std::string scenario(const ModelFamily& f, const std::string& think, const std::string& answer) {
  const double t = f.at(think).active, a = f.at(answer).active;
  double top = 0.0;
  for (const auto& m : f.models) top = std::max(top, m.active);
  if (think == answer) return t == top ? "L->L" : "S->S";
  return t > a ? "L->S" : "S->L";
}

struct SweepPoint {
  std::string think_model;
  std::string answer_model;
  std::string scenario;
  CachePolicy policy = CachePolicy::Recompute;
  std::size_t cap = 0;
  double accuracy = 0.0;
  double flops = 0.0;
  double wall_seconds = 0.0;
  double prompt_len = 0.0;
  double reason_len = 0.0;
  double answer_len = 0.0;
  std::size_t max_reason_len = 0;
  bool frontier = false;
};

/// Marks points no other point beats on both cost (lower FLOPs) and accuracy.
inline void mark_frontier(std::vector<SweepPoint>& pts) {
  for (auto& p : pts) {
    p.frontier = true;
    for (const auto& q : pts) {
      const bool no_worse = q.flops <= p.flops && q.accuracy >= p.accuracy;
      const bool better = q.flops < p.flops || q.accuracy > p.accuracy;
      if (no_worse && better) {
        p.frontier = false;
        break;
      }
    }
  }
}

/// Runs episodes in parallel; results keep episode order.
inline std::vector<RunRecord> run_many(const std::vector<Episode>& eps, const PhasePlan& plan, const ModelFamily& fam,
                                       const DecodeOptions& o, std::size_t threads) {
  std::vector<RunRecord> out(eps.size());
  threads = std::max<std::size_t>(1, std::min(threads, eps.size()));
  std::vector<std::future<void>> jobs;
  for (std::size_t t = 0; t < threads; ++t) {
    jobs.push_back(std::async(std::launch::async, [&, t] {
      for (std::size_t i = t; i < eps.size(); i += threads) out[i] = run_two_phase(eps[i], plan, fam, o);
    }));
  }
  for (auto& j : jobs) j.get();
  return out;
}

inline SweepPoint summarize(const PhasePlan& plan, const ModelFamily& fam, const std::vector<RunRecord>& runs) {
  SweepPoint p;
  p.think_model = plan.think_model;
  p.answer_model = plan.answer_model;
  p.scenario = scenario(fam, plan.think_model, plan.answer_model);
  p.policy = plan.cache_policy;
  p.cap = plan.think_budget_tokens;
  for (const auto& r : runs) {
    p.accuracy += r.correct;
    p.flops += r.flops;
    p.wall_seconds += r.wall_seconds;
    p.prompt_len += static_cast<double>(r.prompt_len);
    p.reason_len += static_cast<double>(r.reason_len);
    p.answer_len += static_cast<double>(r.answer_len);
    p.max_reason_len = std::max(p.max_reason_len, r.reason_len);
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, runs.size()));
  for (double* v : {&p.accuracy, &p.flops, &p.wall_seconds, &p.prompt_len, &p.reason_len, &p.answer_len}) *v /= n;
  return p;
}

/// Every ordered pair of family members (including same-model pairs) at
/// every cap, with the non-dominated points marked.
inline std::vector<SweepPoint> pareto_sweep(const ModelFamily& fam, const std::vector<std::size_t>& caps,
                                            const std::vector<Episode>& eps, CachePolicy policy = CachePolicy::Recompute,
                                            const DecodeOptions& o = {}, std::size_t threads = 1) {
  std::vector<SweepPoint> pts;
  for (const auto& t : fam.models)
    for (const auto& a : fam.models)
      for (std::size_t cap : caps) {
        const PhasePlan plan{cap, t.label, a.label, policy};
        pts.push_back(summarize(plan, fam, run_many(eps, plan, fam, o, threads)));
      }
  mark_frontier(pts);
  return pts;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepPoint>& pts) {
  os << "scenario,think,answer,policy,cap,accuracy,flops,prompt_len,reason_len,answer_len,max_reason_len,frontier\n";
  for (const auto& p : pts) {
    os << p.scenario << ',' << p.think_model << ',' << p.answer_model << ',' << policy_name(p.policy) << ',' << p.cap
       << ',';
    csv_number(os, p.accuracy) << ',';
    csv_number(os, p.flops) << ',';
    csv_number(os, p.prompt_len) << ',';
    csv_number(os, p.reason_len) << ',';
    csv_number(os, p.answer_len) << ',' << p.max_reason_len << ',' << (p.frontier ? 1 : 0) << '\n';
  }
}

struct CacheSimilarity {
  double key = 0.0;
  double value = 0.0;
  double conv = 0.0;
  double ssm = 0.0;
  std::size_t attention_layers = 0;
  std::size_t mamba_layers = 0;
};

/// Cosine similarity in double; two zero vectors count as identical.
inline double cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 && bb == 0.0) return 1.0;
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

/// Mean per-layer cosine between the caches two family members build on the
/// same prompts, over layers and slots both keep.
inline CacheSimilarity cache_similarity(const ModelFamily& fam, const std::string& small, const std::string& large,
                                        const std::vector<std::vector<std::int32_t>>& prompts) {
  const DeployedModel& a = fam.at(small);
  const DeployedModel& b = fam.at(large);
  CacheSimilarity r;
  double n_attn = 0.0, n_mamba = 0.0;
  for (const auto& p : prompts) {
    detail::Stepper sa{&a, {}, 0.0, false}, sb{&b, {}, 0.0, false};
    sa.feed(p);
    sb.feed(p);
    // b's cache expressed in a's slots, so both sides compare shared state.
    const CacheState mapped = transplant_cache(sb.cache, fam.parent, b.plan, a.plan);
    const auto la = kept_layers(a.plan), lb = kept_layers(b.plan);
    for (std::size_t i = 0; i < la.size(); ++i) {
      if (std::find(lb.begin(), lb.end(), la[i]) == lb.end()) continue;
      const LayerCache &x = sa.cache.layers[i], &y = mapped.layers[i];
      if (fam.parent.pattern[la[i]] == LayerKind::Mamba) {
        std::vector<float> cx = x.conv_x, cy = y.conv_x;
        cx.insert(cx.end(), x.conv_B.begin(), x.conv_B.end());
        cx.insert(cx.end(), x.conv_C.begin(), x.conv_C.end());
        cy.insert(cy.end(), y.conv_B.begin(), y.conv_B.end());
        cy.insert(cy.end(), y.conv_C.begin(), y.conv_C.end());
        r.conv += cosine(cx, cy);
        r.ssm += cosine(x.ssm, y.ssm);
        n_mamba += 1.0;
      } else if (fam.parent.pattern[la[i]] == LayerKind::Attention) {
        r.key += cosine(x.kv.k, y.kv.k);
        r.value += cosine(x.kv.v, y.kv.v);
        n_attn += 1.0;
      }
    }
  }
  const double np = static_cast<double>(std::max<std::size_t>(1, prompts.size()));
  r.attention_layers = static_cast<std::size_t>(n_attn / np);
  r.mamba_layers = static_cast<std::size_t>(n_mamba / np);
  r.key = n_attn ? r.key / n_attn : std::nan("");
  r.value = n_attn ? r.value / n_attn : std::nan("");
  r.conv = n_mamba ? r.conv / n_mamba : std::nan("");
  r.ssm = n_mamba ? r.ssm / n_mamba : std::nan("");
  return r;
}

}  // namespace elastic
