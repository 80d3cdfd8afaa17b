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

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/cost_model.hpp"
#include "elastic/errors.hpp"
#include "elastic/importance.hpp"
#include "elastic/masks.hpp"
#include "elastic/ops.hpp"
#include "elastic/params.hpp"
#include "elastic/rng.hpp"

namespace elastic {

enum class Axis { Emb = 0, MambaHeads, MambaChannels, AttnHeads, Experts, Ffn };

inline constexpr std::array<Axis, 6> kAxes{Axis::Emb,       Axis::MambaHeads, Axis::MambaChannels,
                                           Axis::AttnHeads, Axis::Experts,    Axis::Ffn};

inline const char* axis_name(Axis a) {
  switch (a) {
    case Axis::Emb: return "d_e";
    case Axis::MambaHeads: return "m_h";
    case Axis::MambaChannels: return "m_d";
    case Axis::AttnHeads: return "n_h";
    case Axis::Experts: return "e";
    case Axis::Ffn: return "f";
  }
  return "?";
}

/// Layers carrying an axis, in model order.
inline std::vector<std::size_t> axis_layers(const ModelConfig& c, Axis a) {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    const LayerKind k = c.pattern[j];
    const bool has = (a == Axis::MambaHeads || a == Axis::MambaChannels)
                         ? k == LayerKind::Mamba
                         : a == Axis::AttnHeads ? k == LayerKind::Attention
                         : a == Axis::Experts   ? k == LayerKind::MoE
                         : a == Axis::Ffn       ? (k == LayerKind::FFN || k == LayerKind::MoE)
                                                : false;
    if (has) out.push_back(j);
  }
  return out;
}

/// Full size of an axis on layer j (j ignored for the embedding).
inline std::size_t axis_size(const ModelConfig& c, Axis a, std::size_t j) {
  switch (a) {
    case Axis::Emb: return c.d_e;
    case Axis::MambaHeads: return c.m_h;
    case Axis::MambaChannels: return c.m_d;
    case Axis::AttnHeads: return c.n_h;
    case Axis::Experts: return c.experts_of(j);
    case Axis::Ffn: return c.ffn_of(j);
  }
  return 0;
}

/// Candidate sizes per axis and router shape.
struct RouterOptions {
  std::array<std::vector<std::size_t>, 6> choices;
  bool het_experts = false;
  bool het_ffn = false;
  std::size_t hidden = 16;

  const std::vector<std::size_t>& of(Axis a) const { return choices[static_cast<std::size_t>(a)]; }
  std::vector<std::size_t>& of(Axis a) { return choices[static_cast<std::size_t>(a)]; }
  bool heterogeneous(Axis a) const { return (a == Axis::Experts && het_experts) || (a == Axis::Ffn && het_ffn); }

  /// Half, three quarters and all of every axis, keeping only sizes the
  /// model accepts (group-divisible heads, at least topk experts).
  static RouterOptions for_config(const ModelConfig& c) {
    RouterOptions o;
    for (Axis a : kAxes) {
      const auto layers = axis_layers(c, a);
      const std::size_t full = a == Axis::Emb ? c.d_e : layers.empty() ? 0 : axis_size(c, a, layers[0]);
      if (full == 0) continue;
      for (std::size_t s : {full / 2, (3 * full) / 4, full}) {
        if (s == 0 || (!o.of(a).empty() && o.of(a).back() == s)) continue;
        if (a == Axis::MambaHeads && s % c.groups) continue;
        if (a == Axis::AttnHeads && c.kv_heads != c.n_h && s % c.kv_heads) continue;
        if (a == Axis::Experts && s < c.topk) continue;
        o.of(a).push_back(s);
      }
    }
    return o;
  }

  void validate(const ModelConfig& c) const {
    if (hidden == 0) throw ConfigError("router hidden width must be positive");
    for (Axis a : kAxes) {
      const auto& ch = of(a);
      const auto layers = axis_layers(c, a);
      if (a != Axis::Emb && layers.empty()) {
        if (!ch.empty()) throw ConfigError(std::string("router: choices given for absent axis ") + axis_name(a));
        continue;
      }
      if (ch.empty()) throw ConfigError(std::string("router: no choices for axis ") + axis_name(a));
      for (std::size_t i = 0; i < ch.size(); ++i) {
        if (ch[i] == 0) throw ConfigError(std::string("router: zero size on axis ") + axis_name(a));
        if (i && ch[i] <= ch[i - 1]) throw ConfigError(std::string("router: choices not ascending on ") + axis_name(a));
      }
      const std::vector<std::size_t> js = a == Axis::Emb ? std::vector<std::size_t>{0} : layers;
      for (std::size_t j : js)
        if (ch.back() > axis_size(c, a, j)) throw ConfigError(std::string("router: choice exceeds axis ") + axis_name(a));
      for (std::size_t s : ch) {
        if (a == Axis::MambaHeads && s % c.groups) throw ConfigError("router: m_h choice not divisible by groups");
        if (a == Axis::AttnHeads && c.kv_heads != c.n_h && s % c.kv_heads)
          throw ConfigError("router: n_h choice not divisible by kv heads");
        if (a == Axis::Experts && s < c.topk) throw ConfigError("router: expert choice below topk");
      }
    }
  }

  json to_json() const {
    json ch = json::object();
    for (Axis a : kAxes) ch[axis_name(a)] = of(a);
    return json{{"choices", ch}, {"het_experts", het_experts}, {"het_ffn", het_ffn}, {"hidden", hidden}};
  }

  static RouterOptions from_json(const json& j) {
    detail::check_keys(j, {"choices", "het_experts", "het_ffn", "hidden"}, "router");
    RouterOptions o;
    const auto& ch = j.at("choices");
    for (Axis a : kAxes)
      if (ch.contains(axis_name(a))) o.of(a) = ch.at(axis_name(a)).get<std::vector<std::size_t>>();
    detail::read_opt(j, "het_experts", o.het_experts);
    detail::read_opt(j, "het_ffn", o.het_ffn);
    detail::read_opt(j, "hidden", o.hidden);
    return o;
  }

  bool operator==(const RouterOptions&) const = default;
};

struct BudgetSpec {
  std::size_t index = 0;
  double target = 0.0;  // active parameters
  std::string label;
};

struct GumbelConfig {
  double tau = 1.0;
  double kappa = 1.0;
};

/// Linear schedule over the whole run: tau 1 -> 0.05, kappa 1 -> 10.
inline GumbelConfig annealed(std::size_t step, std::size_t total, double tau0 = 1.0, double tau1 = 0.05,
                             double kappa0 = 1.0, double kappa1 = 10.0) {
  const double t = total > 1 ? static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1) : 1.0;
  return {tau0 + (tau1 - tau0) * t, kappa0 + (kappa1 - kappa0) * t};
}

enum class MaskMode { Soft, Hard, Eval };

struct RouterOutput {
  Tensor logits;  // [rows, choices]
  Tensor probs;   // [rows, choices]
  std::vector<std::size_t> selected;
};

/// P = softmax((kappa * log_softmax(z) + g) / tau) row-wise. `gumbel` may be
/// null for g = 0. The selection is argmax of kappa*log_softmax(z) + g with
/// ties to the lower index.
inline RouterOutput gumbel_softmax(const Tensor& z, const GumbelConfig& gc, Rng* gumbel) {
  if (!(gc.tau > 0.0)) throw ContractError("gumbel: tau must be positive");
  if (!(gc.kappa >= 1.0)) throw ContractError("gumbel: kappa must be at least 1");
  for (float v : z.data())
    if (!std::isfinite(v)) throw NumericError("router logits are not finite");
  const std::size_t R = z.rows(), n = z.cols();
  Tensor s = scale(log_softmax_lastdim(z), static_cast<float>(gc.kappa));
  if (gumbel) {
    std::vector<float> g(R * n);
    for (auto& v : g) v = static_cast<float>(gumbel->gumbel());
    s = add(s, Tensor(z.shape(), std::move(g)));
  }
  RouterOutput out;
  out.logits = z;
  out.probs = softmax_lastdim(scale(s, static_cast<float>(1.0 / gc.tau)));
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (s.at(r, i) > s.at(r, best)) best = i;
    out.selected.push_back(best);
  }
  return out;
}

/// Per-axis two-layer leaky-ReLU networks mapping a one-hot budget to
/// choice logits. Heterogeneous axes emit one row of logits per layer.
class RouterBank {
 public:
  RouterBank() = default;

  RouterBank(const ModelConfig& c, RouterOptions opt, std::size_t n_budgets, const Rng& root)
      : cfg_(c), opt_(std::move(opt)), n_budgets_(n_budgets) {
    if (n_budgets == 0) throw ConfigError("router: need at least one budget");
    opt_.validate(c);
    for (const auto& [name, shape] : shapes()) {
      Rng r = root.substream("router/" + name);
      std::vector<float> v(shape_numel(shape), 0.0f);
      if (name.ends_with("W1") || name.ends_with("W2")) {
        const double sd = 1.0 / std::sqrt(static_cast<double>(shape[1]));
        for (auto& x : v) x = static_cast<float>(r.normal() * sd);
      }
      Tensor t(shape, std::move(v));
      t.set_requires_grad(true);
      params_.add(name, t);
    }
  }

  /// Bank with the given weights; names and shapes must match exactly.
  static RouterBank from_params(const ModelConfig& c, RouterOptions opt, std::size_t n_budgets, const ParamStore& p) {
    RouterBank b(c, std::move(opt), n_budgets, Rng(0));
    if (p.size() != b.params_.size()) throw FormatError("router weights: tensor count mismatch");
    for (const auto& [name, t] : p.items()) {
      Tensor w = t.detach();
      w.set_requires_grad(true);
      b.params_.set(name, w);
    }
    return b;
  }

  const ModelConfig& config() const { return cfg_; }
  const RouterOptions& options() const { return opt_; }
  std::size_t budgets() const { return n_budgets_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  bool active(Axis a) const { return !opt_.of(a).empty(); }

  std::size_t rows(Axis a) const { return opt_.heterogeneous(a) ? axis_layers(cfg_, a).size() : 1; }

  /// Parameter names and shapes in canonical order.
  std::vector<std::pair<std::string, Shape>> shapes() const {
    std::vector<std::pair<std::string, Shape>> out;
    for (Axis a : kAxes) {
      if (!active(a)) continue;
      const std::string p = std::string("router.") + axis_name(a) + ".";
      const std::size_t n_out = rows(a) * opt_.of(a).size();
      out.push_back({p + "W1", Shape{opt_.hidden, n_budgets_}});
      out.push_back({p + "b1", Shape{opt_.hidden}});
      out.push_back({p + "W2", Shape{n_out, opt_.hidden}});
      out.push_back({p + "b2", Shape{n_out}});
    }
    return out;
  }

  /// Raw logits z for a budget, [rows, choices].
  Tensor logits(Axis a, std::size_t budget) const {
    if (budget >= n_budgets_) throw ContractError("router: budget index out of range");
    if (!active(a)) throw ContractError(std::string("router: inactive axis ") + axis_name(a));
    const std::string p = std::string("router.") + axis_name(a) + ".";
    std::vector<float> hot(n_budgets_, 0.0f);
    hot[budget] = 1.0f;
    const Tensor u = Tensor::matrix(1, n_budgets_, std::move(hot));
    const Tensor h = leaky_relu(linear(u, params_.get(p + "W1"), &params_.get(p + "b1")));
    const Tensor z = linear(h, params_.get(p + "W2"), &params_.get(p + "b2"));
    return reshape(z, Shape{rows(a), opt_.of(a).size()});
  }

  RouterOutput forward(Axis a, std::size_t budget, const GumbelConfig& gc, Rng* gumbel) const {
    return gumbel_softmax(logits(a, budget), gc, gumbel);
  }

 private:
  ModelConfig cfg_;
  RouterOptions opt_;
  std::size_t n_budgets_ = 0;
  ParamStore params_;
};

/// Binary candidate masks per axis and layer, built from importance order.
/// Each bank is [choices, width]; row i keeps the first choices[i]
/// components under sigma. MoE FFN banks concatenate one block per expert.
class MaskBank {
 public:
  MaskBank() = default;

  MaskBank(const ModelConfig& c, const RouterOptions& opt, const ImportanceReport& imp) : cfg_(c), opt_(opt) {
    opt.validate(c);
    const std::size_t n = c.num_layers();
    for (auto& b : banks_) b.resize(n);
    auto build = [&](const std::vector<std::size_t>& choices, const std::vector<const Ranking*>& blocks,
                     std::size_t width, const char* what) {
      const std::size_t cols = width * blocks.size();
      std::vector<float> v(choices.size() * cols, 0.0f);
      for (std::size_t b = 0; b < blocks.size(); ++b) {
        if (blocks[b]->sigma.size() != width) throw ConfigError(std::string("mask bank: sigma length mismatch on ") + what);
        for (std::size_t i = 0; i < choices.size(); ++i) {
          const auto m = prefix_mask(blocks[b]->sigma, choices[i]);
          std::copy(m.begin(), m.end(), v.begin() + static_cast<std::ptrdiff_t>(i * cols + b * width));
        }
      }
      return Tensor(Shape{choices.size(), cols}, std::move(v));
    };
    banks_[0][0] = build(opt.of(Axis::Emb), {&imp.emb}, c.d_e, "d_e");
    for (Axis a : kAxes) {
      if (a == Axis::Emb || opt.of(a).empty()) continue;
      for (std::size_t j : axis_layers(c, a)) {
        std::vector<const Ranking*> blocks;
        switch (a) {
          case Axis::MambaHeads: blocks = {&imp.mamba_head.at(j)}; break;
          case Axis::MambaChannels: blocks = {&imp.mamba_channel.at(j)}; break;
          case Axis::AttnHeads: blocks = {&imp.attn_head.at(j)}; break;
          case Axis::Experts: blocks = {&imp.expert.at(j)}; break;
          case Axis::Ffn:
            for (const auto& r : imp.ffn.at(j)) blocks.push_back(&r);
            break;
          case Axis::Emb: break;
        }
        banks_[static_cast<std::size_t>(a)][j] = build(opt.of(a), blocks, axis_size(c, a, j), axis_name(a));
      }
    }
  }

  const Tensor& bank(Axis a, std::size_t j) const { return banks_[static_cast<std::size_t>(a)].at(a == Axis::Emb ? 0 : j); }

 private:
  ModelConfig cfg_;
  RouterOptions opt_;
  std::array<std::vector<Tensor>, 6> banks_;
};

/// Everything the training loop needs from one routing decision.
struct Selection {
  MaskSet masks;
  Tensor expected_active;  // differentiable expected active-parameter count
  SubnetSizes sizes;       // argmax choice per axis
  std::array<RouterOutput, 6> outputs;
};

/// Runs every axis router for `budget` and turns the result into masks.
/// Soft: sum_i P_i I_i. Hard: P_i* I_i* for the selected choice. Eval: the
/// selected binary mask with no Gumbel noise. `gumbel` is ignored in Eval.
inline Selection route(const RouterBank& bank, const MaskBank& masks, std::size_t budget, const GumbelConfig& gc,
                       MaskMode mode, Rng* gumbel) {
  const ModelConfig& c = bank.config();
  const RouterOptions& opt = bank.options();
  Selection sel;
  sel.masks = MaskSet::ones(c);
  sel.sizes = SubnetSizes::full(c);
  Tensor exp_d, exp_mh, exp_md, exp_nh;
  std::vector<Tensor> exp_e(c.num_layers()), exp_f(c.num_layers());
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    if (c.pattern[j] == LayerKind::MoE) exp_e[j] = Tensor::scalar(static_cast<float>(c.experts_of(j)));
    if (c.pattern[j] == LayerKind::MoE || c.pattern[j] == LayerKind::FFN)
      exp_f[j] = Tensor::scalar(static_cast<float>(c.ffn_of(j)));
  }
  exp_d = Tensor::scalar(static_cast<float>(c.d_e));
  exp_mh = Tensor::scalar(static_cast<float>(c.m_h));
  exp_md = Tensor::scalar(static_cast<float>(c.m_d));
  exp_nh = Tensor::scalar(static_cast<float>(c.n_h));

  for (Axis a : kAxes) {
    if (!bank.active(a)) continue;
    const auto& ch = opt.of(a);
    RouterOutput out = bank.forward(a, budget, gc, mode == MaskMode::Eval ? nullptr : gumbel);
    std::vector<float> cv(ch.begin(), ch.end());
    const Tensor cvec = Tensor(Shape{ch.size(), 1}, std::move(cv));
    const auto layers = axis_layers(c, a);
    const std::vector<std::size_t> js = a == Axis::Emb ? std::vector<std::size_t>{0} : layers;
    for (std::size_t r = 0; r < js.size(); ++r) {
      const std::size_t j = js[r];
      const std::size_t row = out.probs.rows() == 1 ? 0 : r;
      const std::size_t pick = out.selected[row];
      const std::vector<std::int32_t> rid{static_cast<std::int32_t>(row)};
      const Tensor p = gather_rows(out.probs, rid);
      Tensor weights;
      switch (mode) {
        case MaskMode::Soft: weights = p; break;
        case MaskMode::Hard: {
          std::vector<float> hot(ch.size(), 0.0f);
          hot[pick] = 1.0f;
          weights = mul(p, Tensor::matrix(1, ch.size(), std::move(hot)));
          break;
        }
        case MaskMode::Eval: {
          std::vector<float> hot(ch.size(), 0.0f);
          hot[pick] = 1.0f;
          weights = Tensor::matrix(1, ch.size(), std::move(hot));
          break;
        }
      }
      const Tensor m = matmul(weights, masks.bank(a, j));
      const Tensor size = reshape(mode == MaskMode::Eval ? matmul(weights, cvec) : matmul(p, cvec), Shape{1});
      switch (a) {
        case Axis::Emb:
          sel.masks.emb = reshape(m, Shape{c.d_e});
          exp_d = size;
          sel.sizes.d_e = ch[pick];
          break;
        case Axis::MambaHeads:
          sel.masks.mamba_head[j] = reshape(m, Shape{c.m_h});
          exp_mh = size;
          sel.sizes.m_h = ch[pick];
          break;
        case Axis::MambaChannels:
          sel.masks.mamba_channel[j] = reshape(m, Shape{c.m_d});
          exp_md = size;
          sel.sizes.m_d = ch[pick];
          break;
        case Axis::AttnHeads:
          sel.masks.attn_head[j] = reshape(m, Shape{c.n_h});
          exp_nh = size;
          sel.sizes.n_h = ch[pick];
          break;
        case Axis::Experts:
          sel.masks.expert[j] = reshape(m, Shape{c.experts_of(j)});
          exp_e[j] = size;
          sel.sizes.experts[j] = ch[pick];
          break;
        case Axis::Ffn:
          sel.masks.ffn[j] = reshape(m, sel.masks.ffn[j].shape());
          exp_f[j] = size;
          sel.sizes.ffn[j] = ch[pick];
          break;
      }
    }
    sel.outputs[static_cast<std::size_t>(a)] = std::move(out);
  }
  sel.expected_active = expected_cost(c, exp_d, exp_mh, exp_md, exp_nh, exp_e, exp_f).active;
  return sel;
}

/// |C - C_hat| / C_hat on expected active parameters.
inline Tensor router_loss(const Selection& s, const BudgetSpec& b) {
  if (!(b.target > 0.0)) throw ContractError("router_loss: target must be positive");
  return scale(abs(add_scalar(s.expected_active, static_cast<float>(-b.target))), static_cast<float>(1.0 / b.target));
}

}  // namespace elastic
