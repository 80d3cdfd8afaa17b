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

#include "elastic/slicing.hpp"
#include "fixtures.hpp"

using namespace elastic;
using elastic::testing::random_tokens;

namespace {

struct Fixture {
  ModelConfig c;
  ParamStore p;
  ImportanceReport imp;
};

Fixture make(ModelConfig c, std::uint64_t seed) {
  Fixture f{c, init_params(c, Rng(seed)), {}};
  Rng r(seed + 1);
  std::vector<TokenBatch> cal;
  for (int i = 0; i < 2; ++i) cal.push_back({random_tokens(r, 12, c.vocab), SeqLayout::single(12)});
  f.imp = score_importance(c, f.p, cal);
  return f;
}

std::vector<std::vector<std::int32_t>> prompts(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<std::vector<std::int32_t>> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_tokens(r, 4 + r.below(12), c.vocab));
  return out;
}

ModelConfig gqa_config() {
  ModelConfig c = elastic::testing::small_config();
  c.n_h = 4;
  c.kv_heads = 2;
  c.shared_expert_dim = 5;
  return c;
}

}  // namespace

TEST(Slice, MatchesMaskedModelAcrossSizes) {
  for (const ModelConfig& c : {elastic::testing::small_config(), gqa_config()}) {
    const Fixture f = make(c, 1);
    const std::size_t kv_step = c.kv_heads == c.n_h ? 1 : c.kv_heads;
    for (const auto& s : {SubnetSizes::uniform(c, 5, 2, 2, kv_step, 2, 3), SubnetSizes::uniform(c, 8, 4, 3, c.n_h, 4, 6),
                          SubnetSizes::uniform(c, 3, 2, 1, kv_step, 3, 1)}) {
      const SlicePlan plan = make_slice_plan(c, f.imp, s, "x");
      EXPECT_LT(slice_equivalence_error(c, f.p, plan, prompts(c, 32, 2)), 1e-5);
      EXPECT_EQ(plan_sizes(c, plan), s);
      EXPECT_EQ(slice_model(c, f.p, plan).params.numel(), static_cast<std::size_t>(cost_model(c, s).total));
    }
  }
}

TEST(Slice, DroppedLayersAndHeterogeneousWidths) {
  const auto c = elastic::testing::small_config();
  const Fixture f = make(c, 3);
  SubnetSizes s = SubnetSizes::uniform(c, 6, 2, 2, 1, 2, 4);
  s.keep[2] = false;
  s.ffn[1] = 2;
  s.experts[3] = 3;
  const SlicePlan plan = make_slice_plan(c, f.imp, s);
  const auto sliced = slice_model(c, f.p, plan);
  EXPECT_EQ(sliced.config.num_layers(), c.num_layers() - 1);
  EXPECT_FALSE(sliced.config.layer_ffn_dim.empty());
  EXPECT_LT(slice_equivalence_error(c, f.p, plan, prompts(c, 8, 4)), 1e-5);
}

TEST(Slice, FullBudgetIsIdentityAndDeterministic) {
  const auto c = elastic::testing::small_config();
  const Fixture f = make(c, 5);
  const SlicePlan plan = make_slice_plan(c, f.imp, SubnetSizes::full(c));
  const auto a = slice_model(c, f.p, plan), b = slice_model(c, f.p, plan);
  EXPECT_EQ(a.config, c);
  EXPECT_EQ(a.params.digest(), f.p.digest());
  EXPECT_EQ(a.params.digest(), b.params.digest());
}

TEST(Slice, PlansNestWithSizes) {
  const auto c = elastic::testing::small_config();
  const Fixture f = make(c, 6);
  const auto small = make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 4, 2, 1, 1, 2, 2));
  const auto mid = make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 6, 2, 2, 2, 3, 4));
  const auto full = make_slice_plan(c, f.imp, SubnetSizes::full(c));
  EXPECT_TRUE(plan_is_subset(small, mid));
  EXPECT_TRUE(plan_is_subset(mid, full));
  EXPECT_TRUE(plan_is_subset(small, full));
  EXPECT_FALSE(plan_is_subset(mid, small));
  const auto other = make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 8, 2, 1, 1, 2, 1));
  EXPECT_FALSE(plan_is_subset(other, mid));
}

TEST(Slice, PlanJsonAndMasks) {
  const auto c = elastic::testing::small_config();
  const Fixture f = make(c, 7);
  const auto plan = make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 4, 2, 2, 1, 2, 3), "mid", "abc");
  EXPECT_EQ(SlicePlan::from_json(json::parse(plan.to_json().dump())), plan);
  const MaskSet m = plan_masks(c, plan);
  EXPECT_TRUE(m.is_binary());
  EXPECT_NO_THROW(validate_masks(c, m));
  double live = 0;
  for (float v : m.emb.data()) live += v;
  EXPECT_EQ(live, 4.0);
  // Prefix under sigma: the top-ranked channel is always kept.
  EXPECT_EQ(m.emb[f.imp.emb.sigma[0]], 1.0f);
}

TEST(Slice, RejectsInvalidSizes) {
  const auto c = elastic::testing::small_config();
  const Fixture f = make(c, 8);
  EXPECT_THROW(make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 4, 3, 2, 1, 2, 3)), MaskError);
  EXPECT_THROW(make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 4, 2, 2, 1, 1, 3)), BudgetError);
  EXPECT_THROW(make_slice_plan(c, f.imp, SubnetSizes::uniform(c, 99, 2, 2, 1, 2, 3)), MaskError);
}
