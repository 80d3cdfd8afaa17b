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
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/errors.hpp"
#include "elastic/masks.hpp"
#include "elastic/model.hpp"
#include "elastic/params.hpp"
#include "elastic/seq_ops.hpp"

namespace elastic {

/// Packed token rows with their sequence boundaries.
struct TokenBatch {
  std::vector<std::int32_t> tokens;
  SeqLayout layout;
};

/// Scores for one axis and the permutation sorting them.
struct Ranking {
  std::vector<double> score;
  std::vector<std::int32_t> sigma;

  json to_json() const { return json{{"score", score}, {"sigma", sigma}}; }
  static Ranking from_json(const json& j) {
    return {j.at("score").get<std::vector<double>>(), j.at("sigma").get<std::vector<std::int32_t>>()};
  }
  bool operator==(const Ranking&) const = default;
};

/// Descending order; ties keep the lower index first.
inline std::vector<std::int32_t> sigma_desc(std::span<const double> scores) {
  std::vector<std::int32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::int32_t a, std::int32_t b) { return scores[a] > scores[b]; });
  return idx;
}

inline Ranking make_ranking(std::vector<double> scores) {
  auto s = sigma_desc(scores);
  return {std::move(scores), std::move(s)};
}

/// Group-aware order over heads laid out as `groups` consecutive blocks:
/// heads are ranked within their group, then interleaved rank by rank
/// (best of group 0, best of group 1, ..., second of group 0, ...). Any
/// prefix whose length is a multiple of `groups` keeps the same number of
/// heads in every group.
inline std::vector<std::int32_t> group_sigma(std::span<const double> scores, std::size_t groups) {
  if (groups == 0 || scores.size() % groups != 0) throw ContractError("group_sigma: heads not divisible by groups");
  const std::size_t per = scores.size() / groups;
  std::vector<std::vector<std::int32_t>> within(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    auto local = sigma_desc(scores.subspan(g * per, per));
    for (auto i : local) within[g].push_back(static_cast<std::int32_t>(g * per) + i);
  }
  std::vector<std::int32_t> out;
  for (std::size_t r = 0; r < per; ++r)
    for (std::size_t g = 0; g < groups; ++g) out.push_back(within[g][r]);
  return out;
}

/// Scores and permutations for every elastic axis. Per-layer vectors have
/// one entry per layer; entries on layers without the axis are empty.
struct ImportanceReport {
  Ranking emb;
  std::vector<Ranking> mamba_channel;
  std::vector<Ranking> mamba_head;
  std::vector<Ranking> attn_head;
  std::vector<Ranking> expert;
  std::vector<std::vector<Ranking>> ffn;
  std::vector<std::int32_t> depth_order;
  std::vector<double> depth_scores;

  json to_json() const {
    auto vec = [](const std::vector<Ranking>& v) {
      json a = json::array();
      for (const auto& r : v) a.push_back(r.to_json());
      return a;
    };
    json f = json::array();
    for (const auto& units : ffn) f.push_back(vec(units));
    return json{{"emb", emb.to_json()},           {"mamba_channel", vec(mamba_channel)},
                {"mamba_head", vec(mamba_head)},  {"attn_head", vec(attn_head)},
                {"expert", vec(expert)},          {"ffn", f},
                {"depth_order", depth_order},     {"depth_scores", depth_scores}};
  }

  static ImportanceReport from_json(const json& j) {
    detail::check_keys(j, {"emb", "mamba_channel", "mamba_head", "attn_head", "expert", "ffn", "depth_order", "depth_scores"},
                       "importance");
    auto vec = [](const json& a) {
      std::vector<Ranking> v;
      for (const auto& r : a) v.push_back(Ranking::from_json(r));
      return v;
    };
    ImportanceReport r;
    r.emb = Ranking::from_json(j.at("emb"));
    r.mamba_channel = vec(j.at("mamba_channel"));
    r.mamba_head = vec(j.at("mamba_head"));
    r.attn_head = vec(j.at("attn_head"));
    r.expert = vec(j.at("expert"));
    for (const auto& units : j.at("ffn")) r.ffn.push_back(vec(units));
    r.depth_order = j.at("depth_order").get<std::vector<std::int32_t>>();
    r.depth_scores = j.at("depth_scores").get<std::vector<double>>();
    return r;
  }

  bool operator==(const ImportanceReport&) const = default;
};

// ---------------------------------------------------------------------------
// Scoring formulas on raw activations. Each takes the activations of every
// calibration token stacked row-wise.

/// Sum over rows of |a|, per column.
inline std::vector<double> abs_column_sums(const Tensor& a) {
  std::vector<double> s(a.cols(), 0.0);
  const auto d = a.data();
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) s[c] += std::fabs(d[r * a.cols() + c]);
  return s;
}

/// Running sums for the Mamba head/channel criterion on s = LN(X) W_x^T,
/// viewed as [tokens, heads, channels].
struct MambaAccumulator {
  std::size_t heads = 0, channels = 0;
  std::vector<double> sum;     // sum_t s[t,h,d]
  std::vector<double> sum_sq;  // sum_t s[t,h,d]^2

  MambaAccumulator() = default;
  MambaAccumulator(std::size_t h, std::size_t d) : heads(h), channels(d), sum(h * d, 0.0), sum_sq(h * d, 0.0) {}

  void add(const Tensor& s) {
    if (s.cols() != heads * channels) throw ShapeError("MambaAccumulator: width mismatch");
    const auto v = s.data();
    for (std::size_t r = 0; r < s.rows(); ++r)
      for (std::size_t i = 0; i < heads * channels; ++i) {
        const double x = v[r * heads * channels + i];
        sum[i] += x;
        sum_sq[i] += x * x;
      }
  }

  /// F_d = || sum_t s[:, d] ||_2 over heads.
  std::vector<double> channel_scores() const {
    std::vector<double> f(channels, 0.0);
    for (std::size_t d = 0; d < channels; ++d) {
      double acc = 0.0;
      for (std::size_t h = 0; h < heads; ++h) acc += sum[h * channels + d] * sum[h * channels + d];
      f[d] = std::sqrt(acc);
    }
    return f;
  }

  /// F_h = || s[:, h, D_top] ||_2 over all tokens and the top channels.
  std::vector<double> head_scores(std::span<const std::int32_t> d_top) const {
    std::vector<double> f(heads, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      double acc = 0.0;
      for (auto d : d_top) acc += sum_sq[h * channels + static_cast<std::size_t>(d)];
      f[h] = std::sqrt(acc);
    }
    return f;
  }
};

/// Per-head sum over tokens of the L2 norm of the head's output.
inline std::vector<double> attention_head_scores(const Tensor& o, std::size_t heads) {
  const std::size_t hd = o.cols() / heads;
  std::vector<double> f(heads, 0.0);
  const auto v = o.data();
  for (std::size_t r = 0; r < o.rows(); ++r)
    for (std::size_t h = 0; h < heads; ++h) {
      double acc = 0.0;
      for (std::size_t e = 0; e < hd; ++e) {
        const double x = v[r * o.cols() + h * hd + e];
        acc += x * x;
      }
      f[h] += std::sqrt(acc);
    }
  return f;
}

/// REAP accumulator: mean over routed tokens of gate * ||expert output||.
/// Experts that never receive a token score 0.
struct ReapAccumulator {
  std::vector<double> total;
  std::vector<std::size_t> count;

  explicit ReapAccumulator(std::size_t experts = 0) : total(experts, 0.0), count(experts, 0) {}

  void add(std::size_t e, std::span<const float> gates, const Tensor& out) {
    for (std::size_t r = 0; r < gates.size(); ++r) {
      double nrm = 0.0;
      for (std::size_t c = 0; c < out.cols(); ++c) nrm += static_cast<double>(out.at(r, c)) * out.at(r, c);
      total[e] += gates[r] * std::sqrt(nrm);
    }
    count[e] += gates.size();
  }

  std::vector<double> scores() const {
    std::vector<double> s(total.size(), 0.0);
    for (std::size_t e = 0; e < s.size(); ++e) s[e] = count[e] ? total[e] / static_cast<double>(count[e]) : 0.0;
    return s;
  }
};

// ---------------------------------------------------------------------------

/// Collects every activation statistic in one pass over the calibration set.
class ImportanceObserver : public ForwardObserver {
 public:
  explicit ImportanceObserver(const ModelConfig& c) : cfg_(c), emb_(c.d_e, 0.0) {
    const std::size_t n = c.num_layers();
    mamba_.resize(n);
    attn_.resize(n);
    reap_.resize(n);
    ffn_.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      switch (c.pattern[j]) {
        case LayerKind::Mamba: mamba_[j] = MambaAccumulator(c.m_h, c.m_d); break;
        case LayerKind::Attention: attn_[j].assign(c.n_h, 0.0); break;
        case LayerKind::FFN: ffn_[j].assign(1, std::vector<double>(c.ffn_of(j), 0.0)); break;
        case LayerKind::MoE:
          reap_[j] = ReapAccumulator(c.experts_of(j));
          ffn_[j].assign(c.experts_of(j), std::vector<double>(c.ffn_of(j), 0.0));
          break;
      }
    }
  }

  void on_norm(std::size_t, const Tensor& u) override {
    const auto s = abs_column_sums(u);
    for (std::size_t i = 0; i < s.size(); ++i) emb_[i] += s[i];
    tokens_seen_ = std::max(tokens_seen_, u.rows());
  }
  void on_mamba_x(std::size_t j, const Tensor& s) override { mamba_[j].add(s); }
  void on_attention(std::size_t j, const Tensor& o) override {
    const auto f = attention_head_scores(o, cfg_.n_h);
    for (std::size_t h = 0; h < f.size(); ++h) attn_[j][h] += f[h];
  }
  void on_ffn_hidden(std::size_t j, std::size_t unit, const Tensor& a) override {
    const auto s = abs_column_sums(a);
    for (std::size_t i = 0; i < s.size(); ++i) ffn_[j][unit][i] += s[i];
  }
  void on_expert(std::size_t j, std::size_t e, std::span<const std::int32_t>, std::span<const float> gates,
                 const Tensor& out) override {
    reap_[j].add(e, gates, out);
  }

  /// Rankings for every width axis. `d_top` is the number of top channels
  /// used for Mamba head scores (0 means m_d/2, at least 1).
  ImportanceReport report(std::size_t d_top = 0) const {
    if (tokens_seen_ == 0) throw ContractError("importance: empty calibration set");
    const std::size_t n = cfg_.num_layers();
    ImportanceReport r;
    r.emb = make_ranking(emb_);
    r.mamba_channel.resize(n);
    r.mamba_head.resize(n);
    r.attn_head.resize(n);
    r.expert.resize(n);
    r.ffn.resize(n);
    const std::size_t k = d_top ? d_top : std::max<std::size_t>(1, cfg_.m_d / 2);
    for (std::size_t j = 0; j < n; ++j) {
      switch (cfg_.pattern[j]) {
        case LayerKind::Mamba: {
          r.mamba_channel[j] = make_ranking(mamba_[j].channel_scores());
          std::span<const std::int32_t> top(r.mamba_channel[j].sigma.data(), std::min(k, cfg_.m_d));
          auto hs = mamba_[j].head_scores(top);
          r.mamba_head[j] = {hs, group_sigma(hs, cfg_.groups)};
          break;
        }
        case LayerKind::Attention: {
          const std::size_t groups = cfg_.kv_heads == cfg_.n_h ? 1 : cfg_.kv_heads;
          r.attn_head[j] = {attn_[j], group_sigma(attn_[j], groups)};
          break;
        }
        case LayerKind::FFN: r.ffn[j] = {make_ranking(ffn_[j][0])}; break;
        case LayerKind::MoE:
          r.expert[j] = make_ranking(reap_[j].scores());
          for (const auto& u : ffn_[j]) r.ffn[j].push_back(make_ranking(u));
          break;
      }
    }
    return r;
  }

 private:
  ModelConfig cfg_;
  std::vector<double> emb_;
  std::vector<MambaAccumulator> mamba_;
  std::vector<std::vector<double>> attn_;
  std::vector<ReapAccumulator> reap_;
  std::vector<std::vector<std::vector<double>>> ffn_;
  std::size_t tokens_seen_ = 0;
};

/// Width rankings of a model from its activations on `calib`.
inline ImportanceReport score_widths(const ModelConfig& c, const ParamStore& p, const std::vector<TokenBatch>& calib,
                                     std::size_t d_top = 0) {
  if (calib.empty()) throw ContractError("importance: empty calibration set");
  NoGradGuard ng;
  ImportanceObserver obs(c);
  for (const auto& b : calib) {
    ForwardOptions o;
    o.observer = &obs;
    o.layout = &b.layout;
    forward(c, p, b.tokens, o);
  }
  return obs.report(d_top);
}

struct DepthResult {
  std::vector<std::int32_t> order;
  std::vector<double> scores;
};

/// Greedy layer removal by normalized logit MSE against the full model.
/// Each round removes the remaining layer whose removal (on top of those
/// already removed) perturbs the logits least; ties go to the lower index.
inline DepthResult score_depth_iterative(const ModelConfig& c, const ParamStore& p,
                                         const std::vector<TokenBatch>& calib, std::size_t rounds = 0) {
  if (calib.empty()) throw ContractError("importance: empty calibration set");
  const std::size_t n = c.num_layers();
  if (rounds == 0) rounds = n;
  NoGradGuard ng;
  std::vector<std::vector<float>> full;
  double denom = 0.0;
  for (const auto& b : calib) {
    full.push_back(logits(c, p, b.tokens, nullptr, &b.layout).values());
    for (float v : full.back()) denom += static_cast<double>(v) * v;
  }
  if (denom == 0.0) denom = 1.0;
  MaskSet m = MaskSet::ones(c);
  DepthResult out;
  for (std::size_t round = 0; round < std::min(rounds, n); ++round) {
    double best = std::numeric_limits<double>::infinity();
    std::int32_t best_j = -1;
    for (std::size_t j = 0; j < n; ++j) {
      if (m.gamma[j] == 0.0f) continue;
      m.gamma[j] = 0.0f;
      double num = 0.0;
      for (std::size_t b = 0; b < calib.size(); ++b) {
        const auto l = logits(c, p, calib[b].tokens, &m, &calib[b].layout);
        for (std::size_t i = 0; i < l.numel(); ++i) {
          const double d = static_cast<double>(full[b][i]) - l[i];
          num += d * d;
        }
      }
      m.gamma[j] = 1.0f;
      const double s = num / denom;
      if (s < best) {
        best = s;
        best_j = static_cast<std::int32_t>(j);
      }
    }
    m.gamma[static_cast<std::size_t>(best_j)] = 0.0f;
    out.order.push_back(best_j);
    out.scores.push_back(best);
  }
  return out;
}

/// Widths plus depth.
inline ImportanceReport score_importance(const ModelConfig& c, const ParamStore& p,
                                         const std::vector<TokenBatch>& calib, std::size_t d_top = 0) {
  auto r = score_widths(c, p, calib, d_top);
  auto d = score_depth_iterative(c, p, calib);
  r.depth_order = std::move(d.order);
  r.depth_scores = std::move(d.scores);
  return r;
}

}  // namespace elastic
