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
#include "elastic/ops.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

/// Structured masks for every elastic axis. Per-layer entries are undefined
/// tensors on layers of a different kind. `ffn` holds one row per unit:
/// a single row on dense FFN layers and one row per expert on MoE layers.
/// Mamba masks are kept factorized as (head, channel); the flat I_m is their
/// outer product, which makes the per-head channel pattern uniform by
/// construction.
struct MaskSet {
  Tensor emb;
  std::vector<Tensor> mamba_head;
  std::vector<Tensor> mamba_channel;
  std::vector<Tensor> attn_head;
  std::vector<Tensor> ffn;
  std::vector<Tensor> expert;
  std::vector<float> gamma;

  static MaskSet ones(const ModelConfig& c) {
    const std::size_t n = c.num_layers();
    MaskSet m;
    m.emb = Tensor(Shape{c.d_e}, 1.0f);
    m.mamba_head.resize(n);
    m.mamba_channel.resize(n);
    m.attn_head.resize(n);
    m.ffn.resize(n);
    m.expert.resize(n);
    m.gamma.assign(n, 1.0f);
    for (std::size_t j = 0; j < n; ++j) {
      switch (c.pattern[j]) {
        case LayerKind::Mamba:
          m.mamba_head[j] = Tensor(Shape{c.m_h}, 1.0f);
          m.mamba_channel[j] = Tensor(Shape{c.m_d}, 1.0f);
          break;
        case LayerKind::Attention: m.attn_head[j] = Tensor(Shape{c.n_h}, 1.0f); break;
        case LayerKind::FFN: m.ffn[j] = Tensor(Shape{1, c.ffn_of(j)}, 1.0f); break;
        case LayerKind::MoE:
          m.ffn[j] = Tensor(Shape{c.experts_of(j), c.ffn_of(j)}, 1.0f);
          m.expert[j] = Tensor(Shape{c.experts_of(j)}, 1.0f);
          break;
      }
    }
    return m;
  }

  /// Every entry is exactly 0 or 1.
  bool is_binary() const {
    auto bin = [](const Tensor& t) {
      if (!t.defined()) return true;
      for (float v : t.data())
        if (v != 0.0f && v != 1.0f) return false;
      return true;
    };
    if (!bin(emb)) return false;
    for (const auto* vec : {&mamba_head, &mamba_channel, &attn_head, &ffn, &expert})
      for (const auto& t : *vec)
        if (!bin(t)) return false;
    for (float g : gamma)
      if (g != 0.0f && g != 1.0f) return false;
    return true;
  }
};

/// Binary mask selecting the first k entries of `sigma`.
inline std::vector<float> prefix_mask(std::span<const std::int32_t> sigma, std::size_t k) {
  if (k > sigma.size()) throw MaskError("prefix size exceeds axis length");
  std::vector<float> m(sigma.size(), 0.0f);
  for (std::size_t i = 0; i < k; ++i) m.at(static_cast<std::size_t>(sigma[i])) = 1.0f;
  return m;
}

/// Flat I_m of length m_h*m_d.
inline Tensor mamba_flat_mask(const Tensor& head, const Tensor& channel) {
  return reshape(outer(head, channel), Shape{head.numel() * channel.numel()});
}

/// Flat I_a of length n_h*d_h (head dimension not elastic).
inline Tensor attn_flat_mask(const Tensor& head, std::size_t d_h) {
  return reshape(outer(head, Tensor(Shape{d_h}, 1.0f)), Shape{head.numel() * d_h});
}

/// Checks that a binary head mask keeps the same number of heads in every
/// group of consecutive heads.
inline void check_group_balance(std::span<const float> head, std::size_t groups, const std::string& where) {
  if (groups == 0 || head.size() % groups != 0) throw MaskError(where + ": heads not divisible by groups");
  const std::size_t per = head.size() / groups;
  double first = -1.0;
  for (std::size_t g = 0; g < groups; ++g) {
    double s = 0.0;
    for (std::size_t i = 0; i < per; ++i) s += head[g * per + i];
    if (g == 0) first = s;
    if (std::fabs(s - first) > 1e-5) throw MaskError(where + ": unequal retained heads across groups");
  }
}

/// Factorizes a flat binary I_m into (head, channel) masks, rejecting masks
/// that are not an outer product or that retain unequal heads per group.
inline std::pair<Tensor, Tensor> factor_mamba_mask(std::span<const float> flat, std::size_t m_h, std::size_t m_d,
                                                   std::size_t groups) {
  if (flat.size() != m_h * m_d) throw MaskError("I_m has wrong length");
  std::vector<float> head(m_h, 0.0f), chan(m_d, 0.0f);
  for (std::size_t h = 0; h < m_h; ++h)
    for (std::size_t d = 0; d < m_d; ++d) {
      const float v = flat[h * m_d + d];
      if (v != 0.0f && v != 1.0f) throw MaskError("I_m must be binary to factorize");
      if (v != 0.0f) {
        head[h] = 1.0f;
        chan[d] = 1.0f;
      }
    }
  for (std::size_t h = 0; h < m_h; ++h)
    for (std::size_t d = 0; d < m_d; ++d) {
      if (flat[h * m_d + d] != head[h] * chan[d]) {
        throw MaskError("I_m channel pattern differs between retained heads");
      }
    }
  check_group_balance(head, groups, "I_m");
  return {Tensor::vector(head), Tensor::vector(chan)};
}

/// Shape and structure checks; binary masks must also satisfy the group
/// constraint and keep at least topk experts per MoE layer.
inline void validate_masks(const ModelConfig& c, const MaskSet& m) {
  const std::size_t n = c.num_layers();
  auto need = [](const Tensor& t, std::size_t len, const std::string& what) {
    if (!t.defined() || t.numel() != len) throw MaskError(what + ": expected length " + std::to_string(len));
  };
  need(m.emb, c.d_e, "I_e");
  if (m.mamba_head.size() != n || m.mamba_channel.size() != n || m.attn_head.size() != n || m.ffn.size() != n ||
      m.expert.size() != n || m.gamma.size() != n) {
    throw MaskError("mask set does not cover every layer");
  }
  const bool binary = m.is_binary();
  for (std::size_t j = 0; j < n; ++j) {
    const std::string where = "layer " + std::to_string(j);
    switch (c.pattern[j]) {
      case LayerKind::Mamba:
        need(m.mamba_head[j], c.m_h, where + " Mamba head mask");
        need(m.mamba_channel[j], c.m_d, where + " Mamba channel mask");
        if (binary) check_group_balance(m.mamba_head[j].data(), c.groups, where);
        break;
      case LayerKind::Attention:
        need(m.attn_head[j], c.n_h, where + " attention head mask");
        if (binary && c.kv_heads != c.n_h) check_group_balance(m.attn_head[j].data(), c.kv_heads, where);
        break;
      case LayerKind::FFN:
        if (!m.ffn[j].defined() || m.ffn[j].rows() != 1 || m.ffn[j].cols() != c.ffn_of(j)) {
          throw MaskError(where + " FFN mask shape");
        }
        break;
      case LayerKind::MoE: {
        need(m.expert[j], c.experts_of(j), where + " expert mask");
        if (!m.ffn[j].defined() || m.ffn[j].rows() != c.experts_of(j) || m.ffn[j].cols() != c.ffn_of(j)) {
          throw MaskError(where + " expert FFN mask shape");
        }
        std::size_t live = 0;
        for (float v : m.expert[j].data()) live += v > 0.0f;
        if (live < c.topk) {
          throw BudgetError(where + ": " + std::to_string(live) + " unmasked experts, topk needs " +
                            std::to_string(c.topk));
        }
        break;
      }
    }
  }
}

/// Masks `t` along whichever dimension has length d_e (the last one when
/// both do), broadcasting over the other.
inline Tensor mask_embedding(const Tensor& t, const Tensor& i_e) {
  const std::size_t d = i_e.numel();
  if (t.cols() == d) return mul(t, i_e);
  if (t.rank() == 2 && t.dim(0) == d) return mul(t, reshape(i_e, Shape{d, 1}));
  throw ShapeError("mask_embedding: no dimension of " + shape_str(t.shape()) + " equals d_e=" + std::to_string(d));
}

}  // namespace elastic
