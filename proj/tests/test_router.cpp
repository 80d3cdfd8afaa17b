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

#include <cmath>
#include <numeric>

#include "elastic/router.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace elastic;

namespace {

ModelConfig desk() {
  ModelConfig c;
  return c;
}

// Identity importance order on every axis.
ImportanceReport identity_report(const ModelConfig& c) {
  auto iota = [](std::size_t n) {
    Ranking r;
    r.score.assign(n, 0.0);
    r.sigma.resize(n);
    std::iota(r.sigma.begin(), r.sigma.end(), 0);
    return r;
  };
  ImportanceReport r;
  const std::size_t n = c.num_layers();
  r.emb = iota(c.d_e);
  r.mamba_channel.resize(n);
  r.mamba_head.resize(n);
  r.attn_head.resize(n);
  r.expert.resize(n);
  r.ffn.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    switch (c.pattern[j]) {
      case LayerKind::Mamba:
        r.mamba_channel[j] = iota(c.m_d);
        r.mamba_head[j] = iota(c.m_h);
        r.mamba_head[j].sigma = group_sigma(r.mamba_head[j].score, c.groups);
        break;
      case LayerKind::Attention: r.attn_head[j] = iota(c.n_h); break;
      case LayerKind::FFN: r.ffn[j] = {iota(c.ffn_of(j))}; break;
      case LayerKind::MoE:
        r.expert[j] = iota(c.experts_of(j));
        r.ffn[j].assign(c.experts_of(j), iota(c.ffn_of(j)));
        break;
    }
  }
  return r;
}

// Forces the logits of an axis to `z` for every budget.
void force_logits(RouterBank& b, Axis a, const std::vector<float>& z) {
  const std::string p = std::string("router.") + axis_name(a) + ".";
  const Tensor w2 = b.params().get(p + "W2");
  b.params().set(p + "W2", Tensor(w2.shape(), 0.0f));
  b.params().set(p + "b2", Tensor::vector(z));
}

double entropy(const Tensor& p) {
  double h = 0.0;
  for (float v : p.data())
    if (v > 0) h -= v * std::log(static_cast<double>(v));
  return h;
}

}  // namespace

TEST(Gumbel, ProbabilitiesSumToOne) {
  Rng rng(1);
  const auto z = Tensor::matrix(3, 4, {0.3f, -1, 2, 0.1f, 5, 5, 5, 5, -3, 0, 1, 7});
  for (double tau : {1.0, 0.5, 0.05}) {
    for (Rng* g : {&rng, static_cast<Rng*>(nullptr)}) {
      const auto out = gumbel_softmax(z, {tau, 3.0}, g);
      for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < 4; ++i) s += out.probs.at(r, i);
        EXPECT_NEAR(s, 1.0, 1e-6);
      }
    }
  }
  // Strictly positive at the final temperature for moderate logits.
  const auto m = Tensor::matrix(1, 4, {0.3f, -1, 2, 0.1f});
  const auto cold = gumbel_softmax(m, {0.05, 1.0}, nullptr);
  for (float p : cold.probs.data()) EXPECT_GT(p, 0.0f);
}

TEST(Gumbel, LowTemperatureIsOneHot) {
  const auto z = Tensor::matrix(1, 3, {0.2f, 1.5f, -0.4f});
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const auto out = gumbel_softmax(z, {1e-4, 1.0}, &rng);
    for (std::size_t i = 0; i < 3; ++i)
      EXPECT_NEAR(out.probs.at(0, i), i == out.selected[0] ? 1.0 : 0.0, 1e-4);
  }
}

TEST(Gumbel, EqualLogitsWithoutNoiseAreUniform) {
  const auto out = gumbel_softmax(Tensor::matrix(1, 4, {2, 2, 2, 2}), {0.3, 4.0}, nullptr);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.probs.at(0, i), 0.25, 1e-7);
  EXPECT_EQ(out.selected[0], 0u);
}

TEST(Gumbel, SampleFrequenciesMatchScaledSoftmax) {
  const auto z = Tensor::matrix(1, 3, {0.5f, -0.2f, 0.1f});
  const double kappa = 2.0;
  const auto ref = softmax_lastdim(scale(log_softmax_lastdim(z), static_cast<float>(kappa)));
  Rng rng(3);
  std::vector<double> freq(3, 0.0);
  const int N = 10000;
  for (int i = 0; i < N; ++i) freq[gumbel_softmax(z, {1.0, kappa}, &rng).selected[0]] += 1.0 / N;
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(freq[i], ref[i], 0.03) << i;
}

TEST(Gumbel, AnnealingLowersEntropyAndArgmaxIgnoresKappa) {
  const auto z = Tensor::matrix(1, 4, {0.4f, 0.1f, -0.3f, 0.2f});
  double prev = 1e9;
  for (std::size_t s = 0; s < 10; ++s) {
    const double h = entropy(gumbel_softmax(z, {annealed(s, 10).tau, 1.0}, nullptr).probs);
    EXPECT_LT(h, prev);
    prev = h;
  }
  for (double k : {1.0, 3.0, 10.0}) EXPECT_EQ(gumbel_softmax(z, {0.7, k}, nullptr).selected[0], 0u);
  const auto mono = Tensor::matrix(1, 4, {0.4f * 3 + 1, 0.1f * 3 + 1, -0.3f * 3 + 1, 0.2f * 3 + 1});
  EXPECT_EQ(gumbel_softmax(mono, {0.7, 1.0}, nullptr).selected[0], 0u);
  EXPECT_THROW(gumbel_softmax(Tensor::matrix(1, 2, {1, NAN}), {1, 1}, nullptr), NumericError);
  EXPECT_THROW(gumbel_softmax(z, {0.0, 1.0}, nullptr), ContractError);
}

TEST(Gumbel, Schedule) {
  EXPECT_DOUBLE_EQ(annealed(0, 100).tau, 1.0);
  EXPECT_DOUBLE_EQ(annealed(0, 100).kappa, 1.0);
  EXPECT_NEAR(annealed(99, 100).tau, 0.05, 1e-12);
  EXPECT_NEAR(annealed(99, 100).kappa, 10.0, 1e-12);
  EXPECT_NEAR(annealed(50, 101).kappa, 5.5, 1e-12);
}

TEST(RouterOptions, DefaultsAndValidation) {
  const auto c = desk();
  const auto o = RouterOptions::for_config(c);
  EXPECT_EQ(o.of(Axis::Emb), (std::vector<std::size_t>{16, 24, 32}));
  EXPECT_EQ(o.of(Axis::MambaHeads), (std::vector<std::size_t>{2, 4}));
  EXPECT_EQ(o.of(Axis::MambaChannels), (std::vector<std::size_t>{4, 6, 8}));
  EXPECT_EQ(o.of(Axis::AttnHeads), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(o.of(Axis::Experts), (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_EQ(o.of(Axis::Ffn), (std::vector<std::size_t>{16, 24, 32}));
  EXPECT_EQ(RouterOptions::from_json(json::parse(o.to_json().dump())), o);

  auto bad = o;
  bad.of(Axis::Emb) = {24, 16};
  EXPECT_THROW(bad.validate(c), ConfigError);
  bad = o;
  bad.of(Axis::MambaHeads) = {3};
  EXPECT_THROW(bad.validate(c), ConfigError);
  bad = o;
  bad.of(Axis::Experts) = {1, 4};
  EXPECT_THROW(bad.validate(c), ConfigError);
  bad = o;
  bad.of(Axis::Ffn) = {16, 64};
  EXPECT_THROW(bad.validate(c), ConfigError);
}

TEST(Router, BankShapes) {
  const auto c = desk();
  auto o = RouterOptions::for_config(c);
  o.het_experts = true;
  o.het_ffn = true;
  const RouterBank b(c, o, 3, Rng(4));
  EXPECT_EQ(b.rows(Axis::Emb), 1u);
  EXPECT_EQ(b.rows(Axis::Experts), 2u);
  EXPECT_EQ(b.rows(Axis::Ffn), 3u);
  EXPECT_EQ(b.params().get("router.e.W2").dim(0), 2u * 3u);
  EXPECT_EQ(b.params().get("router.f.W2").dim(0), 3u * 3u);
  EXPECT_EQ(b.logits(Axis::Ffn, 2).shape(), (Shape{3, 3}));
  EXPECT_THROW(b.logits(Axis::Emb, 3), ContractError);
}

TEST(Router, SoftMaskAnalyticCombination) {
  ModelConfig c = desk();
  c.d_e = 4;
  auto o = RouterOptions::for_config(c);
  o.of(Axis::Emb) = {2, 4};
  RouterBank b(c, o, 1, Rng(5));
  force_logits(b, Axis::Emb, {0.0f, 0.0f});
  const MaskBank mb(c, o, identity_report(c));
  const auto s = route(b, mb, 0, {1.0, 1.0}, MaskMode::Soft, nullptr);
  EXPECT_EQ(s.masks.emb.values(), (std::vector<float>{1, 1, 0.5f, 0.5f}));

  force_logits(b, Axis::Emb, {-50.0f, 50.0f});
  const auto full = route(b, mb, 0, {1.0, 1.0}, MaskMode::Soft, nullptr);
  for (float v : full.masks.emb.data()) EXPECT_NEAR(v, 1.0f, 1e-6);
}

TEST(Router, MaskModesRespectImportanceOrder) {
  const auto c = desk();
  const auto o = RouterOptions::for_config(c);
  Rng init(6);
  const RouterBank b(c, o, 3, init);
  auto imp = identity_report(c);
  // Reverse embedding order so the prefix runs from the top channel down.
  std::reverse(imp.emb.sigma.begin(), imp.emb.sigma.end());
  const MaskBank mb(c, o, imp);
  Rng g(7);
  for (MaskMode mode : {MaskMode::Soft, MaskMode::Hard, MaskMode::Eval}) {
    const auto s = route(b, mb, 1, {0.5, 2.0}, mode, &g);
    EXPECT_NO_THROW(validate_masks(c, s.masks));
    if (mode == MaskMode::Eval) {
      EXPECT_TRUE(s.masks.is_binary());
    }
    // Non-increasing along sigma, values in [0,1].
    for (std::size_t i = 1; i < c.d_e; ++i)
      EXPECT_LE(s.masks.emb[imp.emb.sigma[i]], s.masks.emb[imp.emb.sigma[i - 1]]);
    for (float v : s.masks.emb.data()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f + 1e-6f);
    }
    // Reconstruction as a combination of candidate prefix masks.
    const auto& ch = o.of(Axis::Emb);
    const auto& P = s.outputs[0].probs;
    for (std::size_t r = 0; r < c.d_e; ++r) {
      double want = 0.0;
      for (std::size_t i = 0; i < ch.size(); ++i) {
        const double w = mode == MaskMode::Soft ? P[i]
                         : i == s.outputs[0].selected[0] ? (mode == MaskMode::Hard ? P[i] : 1.0)
                                                         : 0.0;
        if (r < ch[i]) want += w;
      }
      EXPECT_NEAR(s.masks.emb[imp.emb.sigma[r]], want, 1e-6);
    }
  }
}

TEST(Router, EvalMasksNestAcrossChoices) {
  const auto c = desk();
  const auto o = RouterOptions::for_config(c);
  RouterBank b(c, o, 3, Rng(8));
  const MaskBank mb(c, o, identity_report(c));
  std::vector<MaskSet> ms;
  for (std::size_t k = 0; k < 3; ++k) {
    for (Axis a : kAxes) {
      const std::size_t n = o.of(a).size();
      std::vector<float> z(n, 0.0f);
      z[std::min(k, n - 1)] = 10.0f;
      force_logits(b, a, z);
    }
    ms.push_back(route(b, mb, 0, {1.0, 1.0}, MaskMode::Eval, nullptr).masks);
  }
  auto leq = [](const Tensor& a, const Tensor& b) {
    if (!a.defined()) return true;
    for (std::size_t i = 0; i < a.numel(); ++i)
      if (a[i] > b[i]) return false;
    return true;
  };
  for (std::size_t k = 0; k + 1 < 3; ++k) {
    EXPECT_TRUE(leq(ms[k].emb, ms[k + 1].emb));
    for (std::size_t j = 0; j < c.num_layers(); ++j) {
      EXPECT_TRUE(leq(ms[k].mamba_head[j], ms[k + 1].mamba_head[j]));
      EXPECT_TRUE(leq(ms[k].mamba_channel[j], ms[k + 1].mamba_channel[j]));
      EXPECT_TRUE(leq(ms[k].attn_head[j], ms[k + 1].attn_head[j]));
      EXPECT_TRUE(leq(ms[k].expert[j], ms[k + 1].expert[j]));
      EXPECT_TRUE(leq(ms[k].ffn[j], ms[k + 1].ffn[j]));
    }
  }
}

TEST(Router, LossZeroAtTargetAndExactAtOneHot) {
  const auto c = desk();
  const auto o = RouterOptions::for_config(c);
  RouterBank b(c, o, 1, Rng(9));
  const MaskBank mb(c, o, identity_report(c));
  const auto s = route(b, mb, 0, {1.0, 1.0}, MaskMode::Eval, nullptr);
  const double exact = cost_model(c, s.sizes).active;
  EXPECT_NEAR(s.expected_active.item(), exact, 1e-6 * exact);
  EXPECT_LT(router_loss(s, {0, exact, "x"}).item(), 1e-6);
  EXPECT_NEAR(router_loss(s, {0, exact * 2, "x"}).item(), 0.5, 1e-6);
  EXPECT_THROW(router_loss(s, {0, 0.0, "x"}), ContractError);
}

TEST(Router, LossGradientMatchesFiniteDifferences) {
  const auto c = desk();
  auto o = RouterOptions::for_config(c);
  o.het_ffn = true;
  RouterBank b(c, o, 3, Rng(10));
  const MaskBank mb(c, o, identity_report(c));
  const BudgetSpec target{1, 0.6 * cost_model(c).active, "small"};
  auto f = [&] {
    Rng g(11);
    return router_loss(route(b, mb, target.index, {0.7, 2.0}, MaskMode::Soft, &g), target);
  };
  std::vector<Tensor> ws;
  for (Axis a : kAxes) ws.push_back(b.params().get(std::string("router.") + axis_name(a) + ".W2"));
  ws.push_back(b.params().get("router.d_e.W1"));
  const auto r = elastic::testing::gradcheck(f, ws);
  EXPECT_LT(r.max_rel, 1e-2) << r.max_abs;
}

TEST(Router, HeterogeneousAxesMaskPerLayer) {
  const auto c = desk();
  auto o = RouterOptions::for_config(c);
  o.het_ffn = true;
  RouterBank b(c, o, 1, Rng(12));
  force_logits(b, Axis::Ffn, {9, 0, 0, 0, 9, 0, 0, 0, 9});
  const MaskBank mb(c, o, identity_report(c));
  const auto s = route(b, mb, 0, {1.0, 1.0}, MaskMode::Eval, nullptr);
  const auto layers = axis_layers(c, Axis::Ffn);
  ASSERT_EQ(layers.size(), 3u);
  EXPECT_EQ(s.sizes.ffn[layers[0]], 16u);
  EXPECT_EQ(s.sizes.ffn[layers[1]], 24u);
  EXPECT_EQ(s.sizes.ffn[layers[2]], 32u);
  double live = 0.0;
  for (float v : s.masks.ffn[layers[0]].data()) live += v;
  EXPECT_EQ(live, 16.0 * c.experts);
}
