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

#include <algorithm>
#include <cmath>
#include <numeric>

#include "elastic/importance.hpp"
#include "fixtures.hpp"

using namespace elastic;

namespace {

ModelConfig toy(const std::string& pattern) {
  ModelConfig c;
  c.vocab = 7;
  c.d_e = 4;
  c.pattern = parse_pattern(pattern);
  c.n_h = 2;
  c.d_h = 2;
  c.kv_heads = 2;
  c.m_h = 2;
  c.m_d = 2;
  c.groups = 2;
  c.d_s = 2;
  c.experts = 2;
  c.topk = 2;
  c.ffn_dim = 3;
  return c;
}

std::vector<TokenBatch> calib(std::uint64_t seed, std::size_t rows, std::size_t len, std::size_t vocab) {
  Rng rng(seed);
  std::vector<TokenBatch> out;
  for (std::size_t r = 0; r < rows; ++r) {
    auto t = elastic::testing::random_tokens(rng, len, vocab);
    out.push_back({t, SeqLayout::single(len)});
  }
  return out;
}

Tensor embed_batch(const ParamStore& p, const TokenBatch& b) { return gather_rows(p.get("embed.tokens"), b.tokens); }

void expect_close(const std::vector<double>& got, const std::vector<double>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_LE(std::fabs(got[i] - want[i]), 1e-6 * std::max(1.0, std::fabs(want[i]))) << "index " << i;
  }
}

void scale_param(ParamStore& p, const std::string& name, float s) {
  Tensor t = p.get(name).detach();
  for (auto& v : t.mutable_data()) v *= s;
  p.set(name, t);
}

}  // namespace

TEST(Ranking, DescendingWithLowIndexTies) {
  const std::vector<double> s{1.0, 3.0, 3.0, 0.0, 2.0};
  EXPECT_EQ(sigma_desc(s), (std::vector<std::int32_t>{1, 2, 4, 0, 3}));
  EXPECT_EQ(sigma_desc(std::vector<double>{0, 0, 0}), (std::vector<std::int32_t>{0, 1, 2}));
}

TEST(Ranking, GroupSigmaKeepsPrefixesBalanced) {
  const std::vector<double> s{0.1, 0.9, 0.5, 5.0, 4.0, 6.0};
  const auto sigma = group_sigma(s, 2);
  EXPECT_EQ(sigma, (std::vector<std::int32_t>{1, 5, 2, 3, 0, 4}));
  for (std::size_t k = 2; k <= s.size(); k += 2) {
    std::size_t g0 = 0;
    for (std::size_t i = 0; i < k; ++i) g0 += sigma[i] < 3;
    EXPECT_EQ(g0, k / 2);
  }
  EXPECT_THROW(group_sigma(s, 4), ContractError);
}

TEST(Ranking, FormulaHelpersOnHandToys) {
  const auto a = Tensor::matrix(2, 2, {3, -1, -2, 0.5f});
  expect_close(abs_column_sums(a), {5.0, 1.5});

  // Two heads, two channels, two tokens.
  MambaAccumulator m(2, 2);
  m.add(Tensor::matrix(2, 4, {1, 2, 3, 4, -1, 0, 1, -2}));
  // Column sums over tokens: h0 = (0, 2), h1 = (4, 2).
  expect_close(m.channel_scores(), {4.0, std::sqrt(8.0)});
  const std::vector<std::int32_t> top{0};
  expect_close(m.head_scores(top), {std::sqrt(2.0), std::sqrt(10.0)});

  const auto o = Tensor::matrix(1, 4, {3, 4, 0, 1});
  expect_close(attention_head_scores(o, 2), {5.0, 1.0});

  ReapAccumulator r(3);
  const std::vector<float> g{0.5f, 0.25f};
  r.add(0, g, Tensor::matrix(2, 2, {3, 4, 0, 2}));
  expect_close(r.scores(), {(0.5 * 5 + 0.25 * 2) / 2, 0.0, 0.0});
}

TEST(Importance, EmptyCalibrationIsContractError) {
  const auto c = toy("-");
  const auto p = init_params(c, Rng(1));
  EXPECT_THROW(score_widths(c, p, {}), ContractError);
  EXPECT_THROW(score_depth_iterative(c, p, {}), ContractError);
}

TEST(Importance, EmbeddingAndFfnMatchBruteForce) {
  const auto c = toy("-");
  const auto p = init_params(c, Rng(2));
  const auto cal = calib(3, 2, 5, c.vocab);
  const auto r = score_widths(c, p, cal);

  NoGradGuard ng;
  std::vector<double> emb(c.d_e, 0.0), ffn(c.ffn_dim, 0.0);
  for (const auto& b : cal) {
    const Tensor x = embed_batch(p, b);
    const Tensor u0 = rmsnorm(x, p.get("layers.0.norm"), c.norm_eps);
    const Tensor a = linear(u0, p.get("layers.0.up"));
    const Tensor h1 = add(x, linear(square(relu(a)), p.get("layers.0.down")));
    const Tensor u1 = rmsnorm(h1, p.get("head.norm"), c.norm_eps);
    for (std::size_t t = 0; t < b.tokens.size(); ++t) {
      for (std::size_t i = 0; i < c.d_e; ++i) emb[i] += std::fabs(u0.at(t, i)) + std::fabs(u1.at(t, i));
      for (std::size_t i = 0; i < c.ffn_dim; ++i) ffn[i] += std::fabs(a.at(t, i));
    }
  }
  expect_close(r.emb.score, emb);
  expect_close(r.ffn[0][0].score, ffn);
  EXPECT_EQ(r.emb.sigma, sigma_desc(emb));
  EXPECT_EQ(r.ffn[0][0].sigma, sigma_desc(ffn));
}

TEST(Importance, ZeroUpRowScoresZeroAndBatchOrderIrrelevant) {
  const auto c = toy("-");
  auto p = init_params(c, Rng(4));
  Tensor up = p.get("layers.0.up").detach();
  for (std::size_t i = 0; i < c.d_e; ++i) up.mutable_data()[1 * c.d_e + i] = 0.0f;
  p.set("layers.0.up", up);
  auto cal = calib(5, 3, 4, c.vocab);
  const auto r = score_widths(c, p, cal);
  EXPECT_EQ(r.ffn[0][0].score[1], 0.0);
  EXPECT_EQ(r.ffn[0][0].sigma.back(), 1);
  std::reverse(cal.begin(), cal.end());
  const auto r2 = score_widths(c, p, cal);
  expect_close(r2.ffn[0][0].score, r.ffn[0][0].score);
  expect_close(r2.emb.score, r.emb.score);
}

TEST(Importance, FfnRankIsEquivariant) {
  const auto c = toy("-");
  auto p = init_params(c, Rng(6));
  const auto cal = calib(7, 2, 6, c.vocab);
  const auto base = score_widths(c, p, cal).ffn[0][0].score;
  // Swap hidden units 0 and 2 (rows of up, columns of down).
  Tensor up = p.get("layers.0.up").detach(), down = p.get("layers.0.down").detach();
  for (std::size_t i = 0; i < c.d_e; ++i) std::swap(up.mutable_data()[0 * c.d_e + i], up.mutable_data()[2 * c.d_e + i]);
  for (std::size_t i = 0; i < c.d_e; ++i)
    std::swap(down.mutable_data()[i * c.ffn_dim + 0], down.mutable_data()[i * c.ffn_dim + 2]);
  p.set("layers.0.up", up);
  p.set("layers.0.down", down);
  const auto swapped = score_widths(c, p, cal).ffn[0][0].score;
  expect_close(swapped, {base[2], base[1], base[0]});
}

TEST(Importance, MambaMatchesBruteForce) {
  const auto c = toy("M");
  auto p = init_params(c, Rng(8));
  const auto cal = calib(9, 2, 5, c.vocab);
  const auto r = score_widths(c, p, cal);

  NoGradGuard ng;
  const std::size_t H = c.m_h, D = c.m_d;
  std::vector<std::vector<double>> col(H, std::vector<double>(D, 0.0));
  std::vector<std::vector<std::vector<double>>> all(H, std::vector<std::vector<double>>(D));
  for (const auto& b : cal) {
    const Tensor s = linear(rmsnorm(embed_batch(p, b), p.get("layers.0.norm"), c.norm_eps), p.get("layers.0.in_x"));
    for (std::size_t t = 0; t < s.rows(); ++t)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t d = 0; d < D; ++d) {
          col[h][d] += s.at(t, h * D + d);
          all[h][d].push_back(s.at(t, h * D + d));
        }
  }
  std::vector<double> fc(D);
  for (std::size_t d = 0; d < D; ++d) fc[d] = std::hypot(col[0][d], col[1][d]);
  expect_close(r.mamba_channel[0].score, fc);
  const std::size_t top = fc[1] > fc[0] ? 1 : 0;
  std::vector<double> fh(H);
  for (std::size_t h = 0; h < H; ++h) {
    double acc = 0.0;
    for (double v : all[h][top]) acc += v * v;
    fh[h] = std::sqrt(acc);
  }
  expect_close(r.mamba_head[0].score, fh);
}

TEST(Importance, MambaSymmetricAndZeroedHeads) {
  auto c = toy("M");
  c.groups = 1;
  auto p = init_params(c, Rng(10));
  const auto cal = calib(11, 2, 4, c.vocab);
  Tensor w = p.get("layers.0.in_x").detach();
  const std::size_t D = c.m_d, E = c.d_e;
  // Head 1 copies head 0.
  for (std::size_t i = 0; i < D * E; ++i) w.mutable_data()[D * E + i] = w.data()[i];
  p.set("layers.0.in_x", w);
  auto r = score_widths(c, p, cal);
  EXPECT_EQ(r.mamba_head[0].score[0], r.mamba_head[0].score[1]);
  EXPECT_EQ(r.mamba_head[0].sigma, (std::vector<std::int32_t>{0, 1}));
  for (std::size_t i = 0; i < D * E; ++i) w.mutable_data()[i] = 0.0f;
  p.set("layers.0.in_x", w);
  r = score_widths(c, p, cal);
  EXPECT_EQ(r.mamba_head[0].score[0], 0.0);
  EXPECT_GT(r.mamba_head[0].score[1], 0.0);
}

TEST(Importance, AttentionMatchesDirectComputation) {
  const auto c = toy("*");
  auto p = init_params(c, Rng(12));
  const auto cal = calib(13, 2, 5, c.vocab);
  const auto r = score_widths(c, p, cal);

  NoGradGuard ng;
  std::vector<double> want(c.n_h, 0.0);
  const std::size_t hd = c.d_h;
  for (const auto& b : cal) {
    const Tensor u = rmsnorm(embed_batch(p, b), p.get("layers.0.norm"), c.norm_eps);
    const Tensor q = linear(u, p.get("layers.0.q")), k = linear(u, p.get("layers.0.k")), v = linear(u, p.get("layers.0.v"));
    const std::size_t T = u.rows();
    for (std::size_t h = 0; h < c.n_h; ++h)
      for (std::size_t t = 0; t < T; ++t) {
        std::vector<double> w(t + 1);
        double mx = -1e300, z = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t e = 0; e < hd; ++e) dot += static_cast<double>(q.at(t, h * hd + e)) * k.at(s, h * hd + e);
          w[s] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, w[s]);
        }
        for (auto& x : w) z += (x = std::exp(x - mx));
        double nrm = 0.0;
        for (std::size_t e = 0; e < hd; ++e) {
          double o = 0.0;
          for (std::size_t s = 0; s <= t; ++s) o += w[s] / z * v.at(s, h * hd + e);
          nrm += o * o;
        }
        want[h] += std::sqrt(nrm);
      }
  }
  expect_close(r.attn_head[0].score, want);
}

TEST(Importance, AttentionZeroedValueAndDuplicateHeads) {
  const auto c = toy("*");
  auto p = init_params(c, Rng(14));
  const auto cal = calib(15, 2, 4, c.vocab);
  Tensor v = p.get("layers.0.v").detach();
  const std::size_t rows = c.d_h * c.d_e;
  for (std::size_t i = 0; i < rows; ++i) v.mutable_data()[rows + i] = 0.0f;
  p.set("layers.0.v", v);
  auto r = score_widths(c, p, cal);
  EXPECT_EQ(r.attn_head[0].score[1], 0.0);
  EXPECT_GT(r.attn_head[0].score[0], 0.0);

  for (const char* name : {"layers.0.q", "layers.0.k", "layers.0.v"}) {
    Tensor w = p.get(name).detach();
    for (std::size_t i = 0; i < rows; ++i) w.mutable_data()[rows + i] = w.data()[i];
    p.set(name, w);
  }
  r = score_widths(c, p, cal);
  EXPECT_EQ(r.attn_head[0].score[0], r.attn_head[0].score[1]);
}

TEST(Importance, ReapMatchesBruteForceAndScales) {
  const auto c = toy("E");
  auto p = init_params(c, Rng(16));
  const TokenBatch b{{1, 4, 2}, SeqLayout::single(3)};
  const auto r = score_widths(c, p, {b});

  NoGradGuard ng;
  const Tensor u = rmsnorm(embed_batch(p, b), p.get("layers.0.norm"), c.norm_eps);
  const Tensor g = softmax_lastdim(linear(u, p.get("layers.0.router")));
  std::vector<double> want(2, 0.0);
  for (std::size_t e = 0; e < 2; ++e) {
    const std::string q = "layers.0.experts." + std::to_string(e) + ".";
    const Tensor f = linear(square(relu(linear(u, p.get(q + "up")))), p.get(q + "down"));
    for (std::size_t t = 0; t < 3; ++t) {
      double nrm = 0.0;
      for (std::size_t i = 0; i < c.d_e; ++i) nrm += static_cast<double>(f.at(t, i)) * f.at(t, i);
      want[e] += g.at(t, e) * std::sqrt(nrm);
    }
    want[e] /= 3.0;
  }
  expect_close(r.expert[0].score, want);

  scale_param(p, "layers.0.experts.0.down", 2.0f);
  const auto r2 = score_widths(c, p, {b});
  EXPECT_NEAR(r2.expert[0].score[0] / r.expert[0].score[0], 2.0, 1e-6);
  EXPECT_EQ(r2.expert[0].score[1], r.expert[0].score[1]);
}

TEST(Importance, UnroutedExpertScoresZero) {
  auto c = toy("E");
  c.experts = 3;
  c.topk = 1;
  auto p = init_params(c, Rng(17));
  Tensor w = p.get("layers.0.router").detach();
  for (std::size_t i = 0; i < c.d_e; ++i) {
    w.mutable_data()[c.d_e + i] = -w.data()[i];
    w.mutable_data()[2 * c.d_e + i] = 0.0f;
  }
  p.set("layers.0.router", w);
  const auto r = score_widths(c, p, calib(18, 2, 6, c.vocab));
  EXPECT_EQ(r.expert[0].score[2], 0.0);
  EXPECT_EQ(r.expert[0].sigma.back(), 2);
}

TEST(Depth, FirstRemovalMatchesExhaustiveSearch) {
  const auto c = toy("M*-");
  const auto p = init_params(c, Rng(19));
  const auto cal = calib(20, 2, 5, c.vocab);
  const auto d = score_depth_iterative(c, p, cal);
  ASSERT_EQ(d.order.size(), 3u);
  auto sorted = d.order;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<std::int32_t>{0, 1, 2}));

  NoGradGuard ng;
  std::vector<double> s(3, 0.0);
  double den = 0.0;
  for (const auto& b : cal) {
    const auto full = logits(c, p, b.tokens, nullptr, &b.layout);
    for (float v : full.data()) den += static_cast<double>(v) * v;
  }
  for (std::size_t j = 0; j < 3; ++j) {
    double num = 0.0;
    for (const auto& b : cal) {
      const auto full = logits(c, p, b.tokens, nullptr, &b.layout);
      MaskSet m = MaskSet::ones(c);
      m.gamma[j] = 0.0f;
      const auto cut = logits(c, p, b.tokens, &m, &b.layout);
      for (std::size_t i = 0; i < full.numel(); ++i) num += std::pow(static_cast<double>(full[i]) - cut[i], 2);
    }
    s[j] = num / den;
  }
  const auto best = std::min_element(s.begin(), s.end()) - s.begin();
  EXPECT_EQ(d.order[0], best);
  EXPECT_NEAR(d.scores[0], s[static_cast<std::size_t>(best)], 1e-6 * std::max(1.0, s[best]));
}

TEST(Depth, DeadLayersGoFirstLowestIndexOnTies) {
  const auto c = toy("---");
  auto p = init_params(c, Rng(21));
  scale_param(p, "layers.1.down", 0.0f);
  scale_param(p, "layers.2.down", 0.0f);
  const auto d = score_depth_iterative(c, p, calib(22, 2, 4, c.vocab));
  EXPECT_EQ(d.order[0], 1);
  EXPECT_EQ(d.order[1], 2);
  EXPECT_EQ(d.order[2], 0);
  EXPECT_EQ(d.scores[0], 0.0);
  EXPECT_EQ(d.scores[1], 0.0);
  EXPECT_GT(d.scores[2], 0.0);
}

TEST(Importance, FullReportRoundTripsAndIsDeterministic) {
  const auto c = elastic::testing::small_config();
  const auto p = init_params(c, Rng(23));
  const auto cal = calib(24, 2, 8, c.vocab);
  const auto r = score_importance(c, p, cal);
  EXPECT_EQ(r, score_importance(c, p, cal));
  EXPECT_EQ(ImportanceReport::from_json(json::parse(r.to_json().dump())), r);
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    for (const auto* rk : {&r.mamba_channel[j], &r.mamba_head[j], &r.attn_head[j], &r.expert[j]}) {
      auto s = rk->sigma;
      std::sort(s.begin(), s.end());
      for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s[i], static_cast<std::int32_t>(i));
    }
  }
  EXPECT_EQ(r.mamba_head[0].sigma.size(), c.m_h);
  EXPECT_EQ(r.ffn[1].size(), c.experts);
  EXPECT_EQ(r.depth_order.size(), c.num_layers());
}
