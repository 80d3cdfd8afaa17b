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

#include <gtest/gtest.h>

#include "elastic/budget_control.hpp"
#include "fixtures.hpp"

using namespace elastic;
using elastic::testing::random_tokens;

namespace {

const ModelFamily& family() {
  static const ModelFamily f = [] {
    Checkpoint ck;
    ck.config = ModelConfig{};
    ck.params = init_params(ck.config, Rng(21));
    Rng r(22);
    std::vector<TokenBatch> cal;
    for (int i = 0; i < 2; ++i) cal.push_back({random_tokens(r, 32, ck.config.vocab), SeqLayout::single(32)});
    ck.importance = score_importance(ck.config, ck.params, cal);
    for (const auto& [label, sz] : default_budget_sizes(ck.config))
      ck.budgets.push_back({label, cost_model(ck.config, sz).active, sz});
    return make_family(ck);
  }();
  return f;
}

std::vector<Episode> episodes(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<Episode> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_episode(r, TaskOptions{}));
  return out;
}

CacheState prefill(const DeployedModel& m, std::span<const std::int32_t> tokens) {
  NoGradGuard ng;
  CacheState cs;
  ForwardOptions o;
  o.cache = &cs;
  forward(m.config, m.params, tokens, o);
  return cs;
}

}  // namespace

TEST(BudgetControl, ZeroCapGivesAnswerOnly) {
  const auto& f = family();
  const Episode ep = episodes(1, 1)[0];
  const RunRecord r = run_two_phase(ep, {0, "small", "full", CachePolicy::Recompute}, f);
  EXPECT_EQ(r.reason_len, 0u);
  EXPECT_TRUE(r.capped);
  EXPECT_GT(r.answer_len, 0u);
  // Answer model only: prompt, end-of-think, then one token per extra answer token.
  const double tokens = static_cast<double>(r.prompt_len + 1 + r.answer_len - 1);
  EXPECT_DOUBLE_EQ(r.flops, 2.0 * f.at("full").active * tokens);
}

TEST(BudgetControl, ReasoningNeverExceedsCap) {
  const auto& f = family();
  const auto eps = episodes(100, 2);
  const char* labels[] = {"full", "mid", "small"};
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const std::size_t cap = i % 6;
    const PhasePlan plan{cap, labels[i % 3], labels[(i / 3) % 3],
                         i % 2 ? CachePolicy::Transplant : CachePolicy::Recompute};
    const RunRecord r = run_two_phase(eps[i], plan, f);
    EXPECT_LE(r.reason_len, cap);
    if (!r.capped) {
      EXPECT_LT(r.reason_len, cap);
    }
    for (auto t : r.reasoning) EXPECT_NE(t, tok::kEndThink);
  }
}

TEST(BudgetControl, SameModelMatchesSingleModelDecoding) {
  const auto& f = family();
  for (const auto& ep : episodes(20, 3)) {
    for (std::size_t cap : {0, 1, 3, 8}) {
      const RunRecord base = run_single(ep, cap, f.at("full"));
      for (auto pol : {CachePolicy::Recompute, CachePolicy::Transplant}) {
        const RunRecord r = run_two_phase(ep, {cap, "full", "full", pol}, f);
        EXPECT_EQ(r.reasoning, base.reasoning);
        EXPECT_EQ(r.answer, base.answer);
      }
    }
  }
}

TEST(BudgetControl, FlopsAdditiveAndIncreasing) {
  const auto& f = family();
  const Episode ep = episodes(1, 4)[0];
  const RunRecord r = run_two_phase(ep, {3, "small", "full", CachePolicy::Recompute}, f);
  const std::size_t think_tokens = r.prompt_len + (r.capped ? r.reason_len - 1 : r.reason_len);
  const std::size_t answer_tokens = r.prompt_len + r.reason_len + 1 + r.answer_len - 1;
  EXPECT_DOUBLE_EQ(r.flops, 2.0 * f.at("small").active * static_cast<double>(think_tokens) +
                                2.0 * f.at("full").active * static_cast<double>(answer_tokens));
  EXPECT_LT(f.at("small").active, f.at("mid").active);
  EXPECT_LT(f.at("mid").active, f.at("full").active);
}

TEST(BudgetControl, TransplantShapesForAllOrderedPairs) {
  const auto& f = family();
  Rng r(5);
  const auto toks = random_tokens(r, 20, f.parent.vocab);
  for (const auto& a : f.models) {
    const CacheState src = prefill(a, toks);
    EXPECT_EQ(cache_shape(src), cache_shape(a, toks.size()));
    for (const auto& b : f.models) {
      const CacheState dst = transplant_cache(src, f.parent, a.plan, b.plan);
      EXPECT_EQ(cache_shape(dst), cache_shape(b, toks.size())) << a.label << "->" << b.label;
      EXPECT_EQ(dst.tokens, toks.size());
      if (a.label == b.label) {
        for (std::size_t i = 0; i < src.layers.size(); ++i) {
          EXPECT_EQ(dst.layers[i].ssm, src.layers[i].ssm);
          EXPECT_EQ(dst.layers[i].conv_x, src.layers[i].conv_x);
          EXPECT_EQ(dst.layers[i].kv.k, src.layers[i].kv.k);
        }
      }
    }
  }
}

TEST(BudgetControl, TransplantKeepsSharedSlotsAndZeroFillsTheRest) {
  const auto& f = family();
  const auto& s = f.at("small");
  const auto& l = f.at("full");
  Rng r(6);
  const auto toks = random_tokens(r, 12, f.parent.vocab);
  const CacheState small = prefill(s, toks);
  const CacheState up = transplant_cache(small, f.parent, s.plan, l.plan);
  const CacheState back = transplant_cache(up, f.parent, l.plan, s.plan);
  for (std::size_t i = 0; i < small.layers.size(); ++i) {
    EXPECT_EQ(back.layers[i].ssm, small.layers[i].ssm);
    EXPECT_EQ(back.layers[i].conv_x, small.layers[i].conv_x);
    EXPECT_EQ(back.layers[i].kv.v, small.layers[i].kv.v);
  }
  // Full-model Mamba slots outside the small plan hold zeros.
  const auto layers = kept_layers(l.plan);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::size_t j = layers[i];
    if (f.parent.pattern[j] != LayerKind::Mamba) continue;
    const auto& hs = s.plan.mamba_heads[j];
    const auto& ds = s.plan.mamba_channels[j];
    for (std::size_t h = 0; h < f.parent.m_h; ++h)
      for (std::size_t d = 0; d < f.parent.m_d; ++d) {
        const bool shared = std::count(hs.begin(), hs.end(), static_cast<std::int32_t>(h)) &&
                            std::count(ds.begin(), ds.end(), static_cast<std::int32_t>(d));
        if (shared) continue;
        for (std::size_t e = 0; e < f.parent.d_s; ++e)
          EXPECT_EQ(up.layers[i].ssm[(h * f.parent.m_d + d) * f.parent.d_s + e], 0.0f);
      }
  }
}

TEST(BudgetControl, TransplantRejectsIncompatibleCaches) {
  const auto& f = family();
  const auto& s = f.at("small");
  const auto& l = f.at("full");
  Rng r(7);
  const auto toks = random_tokens(r, 6, f.parent.vocab);
  CacheState c = prefill(s, toks);
  CacheState broken = c;
  broken.layers.pop_back();
  EXPECT_THROW(transplant_cache(broken, f.parent, s.plan, l.plan), PolicyError);
  broken = c;
  broken.layers[0].ssm.pop_back();
  EXPECT_THROW(transplant_cache(broken, f.parent, s.plan, l.plan), PolicyError);
  SlicePlan odd = s.plan;
  odd.emb = {0};
  SlicePlan other = s.plan;
  other.emb = {1};
  EXPECT_THROW(transplant_cache(c, f.parent, odd, other), PolicyError);
}

TEST(BudgetControl, CacheSimilarity) {
  const auto& f = family();
  Rng r(8);
  std::vector<std::vector<std::int32_t>> prompts;
  for (int i = 0; i < 4; ++i) prompts.push_back(random_tokens(r, 16, f.parent.vocab));
  const CacheSimilarity self = cache_similarity(f, "mid", "mid", prompts);
  EXPECT_EQ(self.key, 1.0);
  EXPECT_EQ(self.value, 1.0);
  EXPECT_EQ(self.conv, 1.0);
  EXPECT_EQ(self.ssm, 1.0);
  const CacheSimilarity x = cache_similarity(f, "small", "full", prompts);
  for (double v : {x.key, x.value, x.conv, x.ssm}) {
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_LE(std::fabs(v), 1.0 + 1e-12);
  }
  EXPECT_EQ(cosine(std::vector<float>{1, 2}, std::vector<float>{2, 4}), 1.0);
  EXPECT_EQ(cosine(std::vector<float>{1, 0}, std::vector<float>{0, 3}), 0.0);
}

TEST(BudgetControl, FrontierExcludesDominatedPoints) {
  std::vector<SweepPoint> one(1);
  one[0].flops = 5;
  mark_frontier(one);
  EXPECT_TRUE(one[0].frontier);
  std::vector<SweepPoint> pts(4);
  const double flops[] = {1, 2, 3, 2}, acc[] = {0.2, 0.5, 0.5, 0.4};
  for (int i = 0; i < 4; ++i) {
    pts[i].flops = flops[i];
    pts[i].accuracy = acc[i];
  }
  mark_frontier(pts);
  EXPECT_TRUE(pts[0].frontier);
  EXPECT_TRUE(pts[1].frontier);
  EXPECT_FALSE(pts[2].frontier);
  EXPECT_FALSE(pts[3].frontier);
}

TEST(BudgetControl, SweepCoversFourScenarios) {
  const auto& f = family();
  const auto pts = pareto_sweep(f, {0, 2}, episodes(6, 9), CachePolicy::Recompute, {}, 2);
  EXPECT_EQ(pts.size(), 18u);
  std::set<std::string> seen;
  for (const auto& p : pts) {
    seen.insert(p.scenario);
    EXPECT_LE(p.max_reason_len, p.cap);
    bool dominated = false;
    for (const auto& q : pts)
      dominated |= q.flops <= p.flops && q.accuracy >= p.accuracy && (q.flops < p.flops || q.accuracy > p.accuracy);
    EXPECT_EQ(p.frontier, !dominated);
  }
  EXPECT_EQ(seen, (std::set<std::string>{"L->L", "S->S", "L->S", "S->L"}));
  const auto again = pareto_sweep(f, {0, 2}, episodes(6, 9), CachePolicy::Recompute, {}, 1);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    EXPECT_EQ(pts[i].accuracy, again[i].accuracy);
    EXPECT_EQ(pts[i].flops, again[i].flops);
  }
}

TEST(BudgetControl, Fp8KvCacheDecodes) {
  const auto& f = family();
  const Episode ep = episodes(1, 10)[0];
  DecodeOptions o;
  o.kv_cache_fp8 = true;
  const RunRecord r = run_two_phase(ep, {4, "mid", "full", CachePolicy::Transplant}, f, o);
  EXPECT_LE(r.reason_len, 4u);
  EXPECT_GT(r.answer_len, 0u);
}
