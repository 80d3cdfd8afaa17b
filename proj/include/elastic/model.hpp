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

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/errors.hpp"
#include "elastic/masks.hpp"
#include "elastic/ops.hpp"
#include "elastic/params.hpp"
#include "elastic/seq_ops.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

/// Per-layer decoding state. Conv histories hold the last K-1 pre-conv rows;
/// the SSM state is [m_h, m_d, d_s].
struct LayerCache {
  std::vector<float> conv_x;
  std::vector<float> conv_B;
  std::vector<float> conv_C;
  std::vector<float> ssm;
  KVHistory kv;
};

struct CacheState {
  std::vector<LayerCache> layers;
  std::size_t tokens = 0;
};

/// Activation taps used for importance scoring. Defaults ignore everything.
class ForwardObserver {
 public:
  virtual ~ForwardObserver() = default;
  /// Normalized input at a norm site: layer index, or num_layers for the head.
  virtual void on_norm(std::size_t /*site*/, const Tensor& /*normed*/) {}
  /// Mamba input projection LN(X) W_x^T, [T, m_h*m_d].
  virtual void on_mamba_x(std::size_t /*layer*/, const Tensor& /*s*/) {}
  /// Attention output before the output projection, [T, n_h*d_h].
  virtual void on_attention(std::size_t /*layer*/, const Tensor& /*o*/) {}
  /// First up-projection X W_up^T of an FFN unit (unit = expert on MoE layers).
  virtual void on_ffn_hidden(std::size_t /*layer*/, std::size_t /*unit*/, const Tensor& /*pre*/) {}
  /// Expert output before gating for the routed rows.
  virtual void on_expert(std::size_t /*layer*/, std::size_t /*expert*/, std::span<const std::int32_t> /*rows*/,
                         std::span<const float> /*gates*/, const Tensor& /*out*/) {}
};

struct ForwardOptions {
  const MaskSet* masks = nullptr;
  CacheState* cache = nullptr;
  ForwardObserver* observer = nullptr;
  const SeqLayout* layout = nullptr;
  bool aux_loss = false;
};

struct ForwardOutput {
  Tensor logits;
  Tensor aux_loss;
};

namespace detail {

inline Tensor sq_relu(const Tensor& x) { return square(relu(x)); }

inline Tensor norm_in(const ModelConfig& c, const Tensor& h, const Tensor& gain, const MaskSet* m) {
  return m ? masked_rmsnorm(h, gain, m->emb, c.norm_eps) : rmsnorm(h, gain, c.norm_eps);
}

inline Tensor mask_out(const Tensor& y, const MaskSet* m) { return m ? mul(y, m->emb) : y; }

// Last K-1 rows of [old; fresh] where both are row-major with `width` columns.
inline std::vector<float> roll_history(const std::vector<float>& old, std::span<const float> fresh, std::size_t k,
                                       std::size_t width) {
  std::vector<float> all = old.empty() ? std::vector<float>((k - 1) * width, 0.0f) : old;
  all.insert(all.end(), fresh.begin(), fresh.end());
  return std::vector<float>(all.end() - static_cast<std::ptrdiff_t>((k - 1) * width), all.end());
}

}  // namespace detail

inline Tensor embed_tokens(const ModelConfig&, const ParamStore& p, std::span<const std::int32_t> tokens,
                           const MaskSet* m) {
  return detail::mask_out(gather_rows(p.get("embed.tokens"), tokens), m);
}

inline Tensor mamba_forward(const ModelConfig& c, const ParamStore& p, std::size_t j, const Tensor& h,
                            const MaskSet* m, LayerCache* cache, ForwardObserver* obs, const SeqLayout& layout) {
  const std::string pre = layer_prefix(j);
  const Tensor u = detail::norm_in(c, h, p.get(pre + "norm"), m);
  if (obs) obs->on_norm(j, u);
  Tensor im, ih;
  if (m) {
    ih = m->mamba_head[j];
    im = mamba_flat_mask(ih, m->mamba_channel[j]);
  }
  Tensor z = linear(u, p.get(pre + "in_z"));
  Tensor xr = linear(u, p.get(pre + "in_x"));
  if (obs) obs->on_mamba_x(j, xr);
  Tensor br = linear(u, p.get(pre + "in_B"));
  Tensor cr = linear(u, p.get(pre + "in_C"));
  Tensor dt = softplus(add(linear(u, p.get(pre + "in_dt")), p.get(pre + "dt_bias")));
  if (m) {
    z = mul(z, im);
    dt = mul(dt, ih);
  }
  const bool has_hist = cache && !cache->conv_x.empty();
  Tensor x = silu(causal_conv1d(xr, p.get(pre + "conv_x_w"), p.get(pre + "conv_x_b"), layout,
                                has_hist ? &cache->conv_x : nullptr));
  if (m) x = mul(x, im);
  Tensor b = silu(causal_conv1d(br, p.get(pre + "conv_B_w"), p.get(pre + "conv_B_b"), layout,
                                has_hist ? &cache->conv_B : nullptr));
  Tensor cc = silu(causal_conv1d(cr, p.get(pre + "conv_C_w"), p.get(pre + "conv_C_b"), layout,
                                 has_hist ? &cache->conv_C : nullptr));
  const Tensor A = neg(exp(p.get(pre + "A_log")));
  const ScanDims dims{c.m_h, c.m_d, c.groups, c.d_s};
  std::vector<float> final_state;
  Tensor y = ssm_scan(x, dt, A, b, cc, p.get(pre + "D"), dims, layout,
                      cache && !cache->ssm.empty() ? &cache->ssm : nullptr, cache ? &final_state : nullptr);
  if (cache) {
    const std::size_t k = c.conv_width;
    cache->conv_x = detail::roll_history(cache->conv_x, xr.data(), k, xr.cols());
    cache->conv_B = detail::roll_history(cache->conv_B, br.data(), k, br.cols());
    cache->conv_C = detail::roll_history(cache->conv_C, cr.data(), k, cr.cols());
    cache->ssm = std::move(final_state);
  }
  y = mul(y, silu(z));
  y = m ? masked_rmsnorm(y, p.get(pre + "gate_norm"), im, c.norm_eps) : rmsnorm(y, p.get(pre + "gate_norm"), c.norm_eps);
  return detail::mask_out(linear(y, p.get(pre + "out")), m);
}

inline Tensor attention_forward(const ModelConfig& c, const ParamStore& p, std::size_t j, const Tensor& h,
                                const MaskSet* m, LayerCache* cache, ForwardObserver* obs, const SeqLayout& layout) {
  const std::string pre = layer_prefix(j);
  const Tensor u = detail::norm_in(c, h, p.get(pre + "norm"), m);
  if (obs) obs->on_norm(j, u);
  const Tensor q = linear(u, p.get(pre + "q"));
  const Tensor k = linear(u, p.get(pre + "k"));
  const Tensor v = linear(u, p.get(pre + "v"));
  const AttnDims dims{c.n_h, c.kv_heads, c.d_h};
  Tensor o = causal_attention(q, k, v, dims, layout, cache && cache->kv.length ? &cache->kv : nullptr);
  if (cache) {
    cache->kv.k.insert(cache->kv.k.end(), k.data().begin(), k.data().end());
    cache->kv.v.insert(cache->kv.v.end(), v.data().begin(), v.data().end());
    cache->kv.length += k.rows();
  }
  if (obs) obs->on_attention(j, o);
  if (m) o = mul(o, attn_flat_mask(m->attn_head[j], c.d_h));
  return detail::mask_out(linear(o, p.get(pre + "o")), m);
}

inline Tensor ffn_forward(const ModelConfig& c, const ParamStore& p, std::size_t j, const Tensor& h,
                          const MaskSet* m, ForwardObserver* obs) {
  const std::string pre = layer_prefix(j);
  const Tensor u = detail::norm_in(c, h, p.get(pre + "norm"), m);
  if (obs) obs->on_norm(j, u);
  const Tensor a = linear(u, p.get(pre + "up"));
  if (obs) obs->on_ffn_hidden(j, 0, a);
  Tensor hid = detail::sq_relu(a);
  if (m) hid = mul(hid, m->ffn[j]);
  return detail::mask_out(linear(hid, p.get(pre + "down")), m);
}

/// Top-k MoE. Masked experts receive kMaskedLogit before selection; gates
/// are a softmax over the selected experts. `aux` receives the switch-style
/// balance term when non-null.
inline Tensor moe_forward(const ModelConfig& c, const ParamStore& p, std::size_t j, const Tensor& h,
                          const MaskSet* m, ForwardObserver* obs, Tensor* aux) {
  const std::string pre = layer_prefix(j);
  const std::size_t ne = c.experts_of(j);
  const Tensor u = detail::norm_in(c, h, p.get(pre + "norm"), m);
  if (obs) obs->on_norm(j, u);
  Tensor logits = linear(u, p.get(pre + "router"));
  if (m) {
    std::size_t live = 0;
    for (float v : m->expert[j].data()) live += v > 0.0f;
    if (live < c.topk) {
      throw BudgetError("layer " + std::to_string(j) + ": fewer than topk unmasked experts");
    }
    logits = add_log_mask(logits, m->expert[j]);
  }
  std::vector<std::vector<std::int32_t>> sel;
  const Tensor gates = topk_softmax(logits, c.topk, &sel);
  const std::size_t T = u.rows();
  std::vector<std::vector<std::int32_t>> rows(ne);
  for (std::size_t t = 0; t < T; ++t)
    for (auto e : sel[t]) rows[static_cast<std::size_t>(e)].push_back(static_cast<std::int32_t>(t));
  Tensor out(Shape{T, c.d_e}, 0.0f);
  for (std::size_t e = 0; e < ne; ++e) {
    if (rows[e].empty()) continue;
    const std::string q = pre + "experts." + std::to_string(e) + ".";
    const Tensor xe = gather_rows(u, rows[e]);
    const Tensor a = linear(xe, p.get(q + "up"));
    if (obs) obs->on_ffn_hidden(j, e, a);
    Tensor hid = detail::sq_relu(a);
    if (m) hid = mul(hid, gather_rows(m->ffn[j], std::vector<std::int32_t>{static_cast<std::int32_t>(e)}));
    const Tensor ye = linear(hid, p.get(q + "down"));
    const std::vector<std::int32_t> cols(rows[e].size(), static_cast<std::int32_t>(e));
    const Tensor g = gather_elements(gates, rows[e], cols);
    if (obs) obs->on_expert(j, e, rows[e], g.data(), ye);
    out = index_add_rows(out, mul(ye, reshape(g, Shape{rows[e].size(), 1})), rows[e]);
  }
  if (c.shared_expert_dim) {
    out = add(out, linear(detail::sq_relu(linear(u, p.get(pre + "shared.up"))), p.get(pre + "shared.down")));
  }
  if (aux) {
    std::vector<float> frac(ne, 0.0f);
    for (std::size_t e = 0; e < ne; ++e) frac[e] = static_cast<float>(rows[e].size()) / static_cast<float>(T * c.topk);
    const Tensor probs = softmax_lastdim(logits);
    Tensor mean_p = scale(sum_rows(transpose(probs)), 1.0f / static_cast<float>(T));
    *aux = scale(sum(mul(mean_p, Tensor::vector(frac))), static_cast<float>(ne));
  }
  return detail::mask_out(out, m);
}

/// Full forward pass. Without masks this is the plain parent model; with an
/// all-ones MaskSet the result is bit-identical. Layers with gamma 0 are
/// skipped entirely.
inline ForwardOutput forward(const ModelConfig& c, const ParamStore& p, std::span<const std::int32_t> tokens,
                             const ForwardOptions& opt = {}) {
  const MaskSet* m = opt.masks;
  if (m) validate_masks(c, *m);
  const SeqLayout layout = opt.layout ? *opt.layout : SeqLayout::single(tokens.size());
  if (opt.cache) {
    if (grad_enabled() && opt.cache) {
      for (const auto& [name, t] : p.items())
        if (t.requires_grad()) throw ContractError("cached decoding requires a NoGradGuard");
    }
    if (layout.count() != 1) throw ContractError("cached decoding handles one sequence");
    if (opt.cache->layers.empty()) opt.cache->layers.resize(c.num_layers());
    if (opt.cache->layers.size() != c.num_layers()) throw PolicyError("cache layer count does not match the model");
  }
  Tensor h = embed_tokens(c, p, tokens, m);
  Tensor aux_total;
  for (std::size_t j = 0; j < c.num_layers(); ++j) {
    if (m && m->gamma[j] == 0.0f) continue;
    LayerCache* lc = opt.cache ? &opt.cache->layers[j] : nullptr;
    Tensor y;
    switch (c.pattern[j]) {
      case LayerKind::Mamba: y = mamba_forward(c, p, j, h, m, lc, opt.observer, layout); break;
      case LayerKind::Attention: y = attention_forward(c, p, j, h, m, lc, opt.observer, layout); break;
      case LayerKind::FFN: y = ffn_forward(c, p, j, h, m, opt.observer); break;
      case LayerKind::MoE: {
        Tensor aux;
        y = moe_forward(c, p, j, h, m, opt.observer, opt.aux_loss ? &aux : nullptr);
        if (opt.aux_loss) aux_total = aux_total.defined() ? add(aux_total, aux) : aux;
        break;
      }
    }
    h = add(h, y);
  }
  if (opt.cache) opt.cache->tokens += tokens.size();
  const Tensor u = detail::norm_in(c, h, p.get("head.norm"), m);
  if (opt.observer) opt.observer->on_norm(c.num_layers(), u);
  return {linear(u, p.get("head.out")), aux_total};
}

inline Tensor logits(const ModelConfig& c, const ParamStore& p, std::span<const std::int32_t> tokens,
                     const MaskSet* masks = nullptr, const SeqLayout* layout = nullptr) {
  ForwardOptions o;
  o.masks = masks;
  o.layout = layout;
  return forward(c, p, tokens, o).logits;
}

}  // namespace elastic
