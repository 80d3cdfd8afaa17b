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
#include <span>
#include <string>
#include <vector>

#include "elastic/errors.hpp"
#include "elastic/ops.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

/// Packed variable-length sequences: rows [offsets[i], offsets[i+1]) of a
/// token-major tensor form sequence i. Recurrences and attention never cross
/// a boundary.
struct SeqLayout {
  std::vector<std::size_t> offsets{0};

  static SeqLayout single(std::size_t len) { return SeqLayout{{0, len}}; }

  static SeqLayout from_lengths(std::span<const std::size_t> lengths) {
    SeqLayout l;
    for (auto n : lengths) l.offsets.push_back(l.offsets.back() + n);
    return l;
  }

  std::size_t count() const { return offsets.size() - 1; }
  std::size_t total() const { return offsets.back(); }

  void validate(std::size_t rows, const char* op) const {
    if (offsets.empty() || offsets.front() != 0 || offsets.back() != rows) {
      throw ShapeError(std::string(op) + ": sequence layout does not cover " + std::to_string(rows) + " rows");
    }
    for (std::size_t i = 1; i < offsets.size(); ++i) {
      if (offsets[i] < offsets[i - 1]) throw ShapeError(std::string(op) + ": offsets must be non-decreasing");
    }
  }
};

/// Depthwise causal convolution along time.
/// y[t,c] = b[c] + sum_k w[c,k] * x[t-K+1+k, c], zero-padded at each sequence
/// start. `history` optionally supplies the K-1 rows preceding x (single
/// sequence only, no gradient).
inline Tensor causal_conv1d(const Tensor& x, const Tensor& w, const Tensor& b, const SeqLayout& layout,
                            const std::vector<float>* history = nullptr) {
  const std::size_t t_total = x.rows(), c = x.cols();
  if (w.rank() != 2 || w.dim(0) != c || b.numel() != c) throw ShapeError("causal_conv1d: weight shape mismatch");
  const std::size_t k = w.dim(1);
  layout.validate(t_total, "causal_conv1d");
  if (history && (layout.count() != 1 || history->size() != (k - 1) * c)) {
    throw ShapeError("causal_conv1d: history requires a single sequence and (K-1)*C values");
  }
  const auto xs = x.data();
  const auto ws = w.data();
  // Value at time index `s` relative to the sequence start; s < 0 reads history.
  auto at = [&](std::size_t start, std::ptrdiff_t s, std::size_t ch) -> float {
    if (s >= 0) return xs[(start + static_cast<std::size_t>(s)) * c + ch];
    if (!history) return 0.0f;
    const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(k - 1) + s;
    return h >= 0 ? (*history)[static_cast<std::size_t>(h) * c + ch] : 0.0f;
  };
  std::vector<float> y(t_total * c);
  for (std::size_t sq = 0; sq < layout.count(); ++sq) {
    const std::size_t start = layout.offsets[sq], len = layout.offsets[sq + 1] - start;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        float acc = b[ch];
        for (std::size_t j = 0; j < k; ++j) {
          const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(k - 1 - j);
          acc += ws[ch * k + j] * at(start, s, ch);
        }
        y[(start + t) * c + ch] = acc;
      }
    }
  }
  std::vector<float> hist = history ? *history : std::vector<float>{};
  return detail::make_result(
      "causal_conv1d", x.shape(), std::move(y), {&x, &w, &b},
      [x, w, layout, hist = std::move(hist), c, k](std::span<const float> g, std::span<float* const> gin) {
        const auto xs = x.data();
        const auto ws = w.data();
        for (std::size_t sq = 0; sq < layout.count(); ++sq) {
          const std::size_t start = layout.offsets[sq], len = layout.offsets[sq + 1] - start;
          for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const float gy = g[(start + t) * c + ch];
              if (gin[2]) gin[2][ch] += gy;
              for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t) - static_cast<std::ptrdiff_t>(k - 1 - j);
                float xv = 0.0f;
                if (s >= 0) {
                  xv = xs[(start + static_cast<std::size_t>(s)) * c + ch];
                  if (gin[0]) gin[0][(start + static_cast<std::size_t>(s)) * c + ch] += gy * ws[ch * k + j];
                } else if (!hist.empty()) {
                  const std::ptrdiff_t h = static_cast<std::ptrdiff_t>(k - 1) + s;
                  if (h >= 0) xv = hist[static_cast<std::size_t>(h) * c + ch];
                }
                if (gin[1]) gin[1][ch * k + j] += gy * xv;
              }
            }
          }
        }
      });
}

/// Dimensions of a selective state-space scan with one scalar decay per head.
struct ScanDims {
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  std::size_t groups = 1;
  std::size_t state = 0;
};

/// Selective scan. Per head h in group g = h / (heads/groups):
///   S_t = exp(dt[t,h] A[h]) S_{t-1} + dt[t,h] x_t[h] B_t[g]^T
///   y_t[h] = S_t C_t[g] + D[h] x_t[h]
/// x: [T, heads*head_dim], dt: [T, heads], A, D: [heads], B, C: [T, groups*state].
/// `init_state`/`final_state` carry [heads, head_dim, state] across calls for a
/// single sequence; no gradient flows into the initial state.
inline Tensor ssm_scan(const Tensor& x, const Tensor& dt, const Tensor& A, const Tensor& B, const Tensor& C,
                       const Tensor& D, ScanDims d, const SeqLayout& layout,
                       const std::vector<float>* init_state = nullptr, std::vector<float>* final_state = nullptr) {
  const std::size_t T = x.rows(), H = d.heads, P = d.head_dim, G = d.groups, N = d.state;
  if (G == 0 || H % G != 0) throw ShapeError("ssm_scan: heads must be a multiple of groups");
  if (x.cols() != H * P || dt.rows() != T || dt.cols() != H || A.numel() != H || D.numel() != H ||
      B.rows() != T || B.cols() != G * N || C.rows() != T || C.cols() != G * N) {
    throw ShapeError("ssm_scan: operand shapes do not match dimensions");
  }
  layout.validate(T, "ssm_scan");
  const std::size_t SZ = H * P * N;
  if (init_state && (init_state->size() != SZ || layout.count() != 1)) {
    throw ShapeError("ssm_scan: initial state requires a single sequence and heads*head_dim*state values");
  }
  const std::size_t hpg = H / G;
  const auto xs = x.data(), dts = dt.data(), as = A.data(), bs = B.data(), cs = C.data(), ds = D.data();
  const bool record = grad_enabled() && (x.requires_grad() || dt.requires_grad() || A.requires_grad() ||
                                         B.requires_grad() || C.requires_grad() || D.requires_grad());
  // states[t] is the state after step t.
  std::vector<float> states(record ? T * SZ : 0);
  std::vector<float> init = init_state ? *init_state : std::vector<float>(SZ, 0.0f);
  std::vector<float> y(T * H * P, 0.0f);
  std::vector<float> S(SZ);
  for (std::size_t sq = 0; sq < layout.count(); ++sq) {
    const std::size_t start = layout.offsets[sq], end = layout.offsets[sq + 1];
    std::copy(init.begin(), init.end(), S.begin());
    for (std::size_t t = start; t < end; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t g = h / hpg;
        const float dtv = dts[t * H + h];
        const float decay = std::exp(dtv * as[h]);
        const float* bt = bs.data() + t * G * N + g * N;
        const float* ct = cs.data() + t * G * N + g * N;
        for (std::size_t p = 0; p < P; ++p) {
          const float xv = xs[t * H * P + h * P + p];
          float* srow = S.data() + (h * P + p) * N;
          float acc = 0.0f;
          for (std::size_t n = 0; n < N; ++n) {
            srow[n] = decay * srow[n] + dtv * xv * bt[n];
            acc += srow[n] * ct[n];
          }
          y[t * H * P + h * P + p] = acc + ds[h] * xv;
        }
      }
      if (record) std::copy(S.begin(), S.end(), states.begin() + t * SZ);
    }
  }
  if (final_state) *final_state = S;
  return detail::make_result(
      "ssm_scan", Shape{T, H * P}, std::move(y), {&x, &dt, &A, &B, &C, &D},
      [x, dt, A, B, C, D, layout, states = std::move(states), init = std::move(init), T, H, P, G, N, SZ, hpg](
          std::span<const float> gy, std::span<float* const> gin) {
        const auto xs = x.data(), dts = dt.data(), as = A.data(), bs = B.data(), cs = C.data(), ds = D.data();
        float* gx = gin[0];
        float* gdt = gin[1];
        float* gA = gin[2];
        float* gB = gin[3];
        float* gC = gin[4];
        float* gD = gin[5];
        std::vector<float> dS(SZ);
        for (std::size_t sq = 0; sq < layout.count(); ++sq) {
          const std::size_t start = layout.offsets[sq], end = layout.offsets[sq + 1];
          std::fill(dS.begin(), dS.end(), 0.0f);
          for (std::size_t t = end; t-- > start;) {
            const float* St = states.data() + t * SZ;
            const float* Sprev = t > start ? states.data() + (t - 1) * SZ : init.data();
            for (std::size_t h = 0; h < H; ++h) {
              const std::size_t g = h / hpg;
              const float dtv = dts[t * H + h];
              const float decay = std::exp(dtv * as[h]);
              const float* bt = bs.data() + t * G * N + g * N;
              const float* ct = cs.data() + t * G * N + g * N;
              double gdt_acc = 0.0, gA_acc = 0.0;
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t xi = t * H * P + h * P + p;
                const float xv = xs[xi];
                const float g_out = gy[xi];
                const float* srow = St + (h * P + p) * N;
                const float* sprev = Sprev + (h * P + p) * N;
                float* drow = dS.data() + (h * P + p) * N;
                if (gD) gD[h] += g_out * xv;
                float gx_acc = g_out * ds[h];
                for (std::size_t n = 0; n < N; ++n) {
                  if (gC) gC[t * G * N + g * N + n] += g_out * srow[n];
                  drow[n] += g_out * ct[n];
                  const float dsn = drow[n];
                  gx_acc += dsn * dtv * bt[n];
                  if (gB) gB[t * G * N + g * N + n] += dsn * dtv * xv;
                  const double dd = static_cast<double>(dsn) * decay * sprev[n];
                  gdt_acc += dsn * xv * bt[n] + dd * as[h];
                  gA_acc += dd * dtv;
                  drow[n] = dsn * decay;
                }
                if (gx) gx[xi] += gx_acc;
              }
              if (gdt) gdt[t * H + h] += static_cast<float>(gdt_acc);
              if (gA) gA[h] += static_cast<float>(gA_acc);
            }
          }
        }
      });
}

/// Past keys/values for incremental decoding of one sequence.
struct KVHistory {
  std::vector<float> k;
  std::vector<float> v;
  std::size_t length = 0;
};

struct AttnDims {
  std::size_t heads = 0;
  std::size_t kv_heads = 0;
  std::size_t head_dim = 0;
};

/// Causal softmax attention without positional rotation. Query head h reads
/// key/value head h / (heads/kv_heads). q: [T, heads*hd], k, v: [T, kv*hd].
inline Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, AttnDims d,
                               const SeqLayout& layout, const KVHistory* past = nullptr) {
  const std::size_t T = q.rows(), H = d.heads, KV = d.kv_heads, hd = d.head_dim;
  if (KV == 0 || H % KV != 0) throw ShapeError("causal_attention: heads must be a multiple of kv_heads");
  if (q.cols() != H * hd || k.rows() != T || v.rows() != T || k.cols() != KV * hd || v.cols() != KV * hd) {
    throw ShapeError("causal_attention: operand shapes do not match dimensions");
  }
  layout.validate(T, "causal_attention");
  const std::size_t L = past ? past->length : 0;
  if (past && (layout.count() != 1 || past->k.size() != L * KV * hd || past->v.size() != L * KV * hd)) {
    throw ShapeError("causal_attention: history requires a single sequence of matching width");
  }
  const std::size_t grp = H / KV;
  const float sc = 1.0f / std::sqrt(static_cast<float>(hd));
  const auto qs = q.data(), ks = k.data(), vs = v.data();
  auto key = [&](std::size_t start, std::ptrdiff_t j, std::size_t kvh) -> const float* {
    if (j < 0) return past->k.data() + (static_cast<std::size_t>(static_cast<std::ptrdiff_t>(L) + j)) * KV * hd + kvh * hd;
    return ks.data() + (start + static_cast<std::size_t>(j)) * KV * hd + kvh * hd;
  };
  auto val = [&](std::size_t start, std::ptrdiff_t j, std::size_t kvh) -> const float* {
    if (j < 0) return past->v.data() + (static_cast<std::size_t>(static_cast<std::ptrdiff_t>(L) + j)) * KV * hd + kvh * hd;
    return vs.data() + (start + static_cast<std::size_t>(j)) * KV * hd + kvh * hd;
  };
  const bool record = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  if (record && past) throw ContractError("causal_attention: gradients through a KV history are not supported");
  // probs[(t*H + h)] holds weights over keys 0..t of t's sequence.
  std::vector<std::vector<float>> probs(record ? T * H : 0);
  std::vector<float> y(T * H * hd, 0.0f);
  std::vector<float> w;
  for (std::size_t sq = 0; sq < layout.count(); ++sq) {
    const std::size_t start = layout.offsets[sq], len = layout.offsets[sq + 1] - start;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t kvh = h / grp;
        const float* qv = qs.data() + (start + t) * H * hd + h * hd;
        const std::size_t nk = L + t + 1;
        w.assign(nk, 0.0f);
        float mx = -std::numeric_limits<float>::infinity();
        for (std::size_t j = 0; j < nk; ++j) {
          const float* kv = key(start, static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(L), kvh);
          float s = 0.0f;
          for (std::size_t e = 0; e < hd; ++e) s += qv[e] * kv[e];
          w[j] = s * sc;
          mx = std::max(mx, w[j]);
        }
        double z = 0.0;
        for (auto& wj : w) {
          wj = std::exp(wj - mx);
          z += wj;
        }
        float* out = y.data() + (start + t) * H * hd + h * hd;
        for (std::size_t j = 0; j < nk; ++j) {
          w[j] = static_cast<float>(w[j] / z);
          const float* vv = val(start, static_cast<std::ptrdiff_t>(j) - static_cast<std::ptrdiff_t>(L), kvh);
          for (std::size_t e = 0; e < hd; ++e) out[e] += w[j] * vv[e];
        }
        if (record) probs[(start + t) * H + h] = w;
      }
    }
  }
  return detail::make_result(
      "causal_attention", Shape{T, H * hd}, std::move(y), {&q, &k, &v},
      [q, k, v, layout, probs = std::move(probs), H, KV, hd, grp, sc](std::span<const float> g,
                                                                     std::span<float* const> gin) {
        const auto qs = q.data(), ks = k.data(), vs = v.data();
        std::vector<float> dw;
        for (std::size_t sq = 0; sq < layout.count(); ++sq) {
          const std::size_t start = layout.offsets[sq], len = layout.offsets[sq + 1] - start;
          for (std::size_t t = 0; t < len; ++t) {
            for (std::size_t h = 0; h < H; ++h) {
              const std::size_t kvh = h / grp;
              const auto& p = probs[(start + t) * H + h];
              const float* go = g.data() + (start + t) * H * hd + h * hd;
              const float* qv = qs.data() + (start + t) * H * hd + h * hd;
              dw.assign(t + 1, 0.0f);
              double dot = 0.0;
              for (std::size_t j = 0; j <= t; ++j) {
                const std::size_t row = (start + j) * KV * hd + kvh * hd;
                float s = 0.0f;
                for (std::size_t e = 0; e < hd; ++e) s += go[e] * vs[row + e];
                dw[j] = s;
                dot += s * p[j];
                if (gin[2])
                  for (std::size_t e = 0; e < hd; ++e) gin[2][row + e] += p[j] * go[e];
              }
              for (std::size_t j = 0; j <= t; ++j) {
                const float ds = p[j] * static_cast<float>(dw[j] - dot) * sc;
                const std::size_t row = (start + j) * KV * hd + kvh * hd;
                if (gin[0])
                  for (std::size_t e = 0; e < hd; ++e) gin[0][(start + t) * H * hd + h * hd + e] += ds * ks[row + e];
                if (gin[1])
                  for (std::size_t e = 0; e < hd; ++e) gin[1][row + e] += ds * qv[e];
              }
            }
          }
        }
      });
}

}  // namespace elastic
