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
#include <cstddef>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "elastic/checkpoint.hpp"
#include "elastic/training.hpp"

namespace elastic {

enum class QuantFormat { Fp8, Fp4 };

inline const char* format_name(QuantFormat f) { return f == QuantFormat::Fp8 ? "fp8" : "fp4"; }

inline QuantFormat parse_format(const std::string& s) {
  if (s == "fp8") return QuantFormat::Fp8;
  if (s == "fp4") return QuantFormat::Fp4;
  throw ConfigError("unknown quantization format '" + s + "' (expected fp8 or fp4)");
}

inline constexpr double kE4M3Max = 448.0;
inline constexpr double kFp4Max = 6.0;

/// Round to nearest (ties to even) on a sign-symmetric minifloat grid with
/// `mbits` mantissa bits, smallest normal exponent `emin`, saturating at `vmax`.
inline double round_minifloat(double x, int mbits, int emin, double vmax) {
  const double a = std::fabs(x);
  if (a == 0.0 || std::isnan(a)) return 0.0;
  if (a >= vmax) return std::copysign(vmax, x);
  const int e = std::max(static_cast<int>(std::floor(std::log2(a))), emin);
  const double step = std::ldexp(1.0, e - mbits);
  return std::copysign(std::min(std::nearbyint(a / step) * step, vmax), x);
}

inline double round_e4m3(double x) { return round_minifloat(x, 3, -6, kE4M3Max); }
inline double round_fp4(double x) { return round_minifloat(x, 1, 0, kFp4Max); }

/// Smallest positive E4M3 value not below x, for x in (0, 448].
inline double ceil_e4m3(double x) {
  const double r = round_e4m3(x);
  if (r >= x * (1.0 - 1e-6)) return std::max(r, std::ldexp(1.0, -9));
  const int e = std::max(static_cast<int>(std::floor(std::log2(x))), -6);
  return std::min(r + std::ldexp(1.0, e - 3), kE4M3Max);
}

/// Low-precision weight format. The 4-bit format scales each block of
/// `block_size` consecutive inner-dimension weights by an E4M3 factor on top
/// of one full-precision tensor scale.
struct QuantSpec {
  QuantFormat format = QuantFormat::Fp4;
  std::size_t block_size = 16;
  std::vector<std::size_t> keep_high_precision;
  bool kv_cache_fp8 = false;

  /// Attention layers and the nearest Mamba layer before each stay unquantized.
  static QuantSpec for_config(const ModelConfig& c, QuantFormat f) {
    QuantSpec s;
    s.format = f;
    std::set<std::size_t> keep;
    for (std::size_t j = 0; j < c.num_layers(); ++j) {
      if (c.pattern[j] != LayerKind::Attention) continue;
      keep.insert(j);
      for (std::size_t i = j; i-- > 0;) {
        if (c.pattern[i] == LayerKind::Mamba) {
          keep.insert(i);
          break;
        }
      }
    }
    s.keep_high_precision.assign(keep.begin(), keep.end());
    return s;
  }

  bool keeps(std::size_t layer) const {
    return std::find(keep_high_precision.begin(), keep_high_precision.end(), layer) != keep_high_precision.end();
  }

  json to_json() const {
    return json{{"format", format_name(format)},
                {"block_size", block_size},
                {"keep_high_precision", keep_high_precision},
                {"kv_cache_fp8", kv_cache_fp8}};
  }

  static QuantSpec from_json(const json& j) {
    detail::check_keys(j, {"format", "block_size", "keep_high_precision", "kv_cache_fp8"}, "quant spec");
    QuantSpec s;
    if (j.contains("format")) s.format = parse_format(j.at("format").get<std::string>());
    if (j.contains("block_size")) s.block_size = j.at("block_size").get<std::size_t>();
    if (j.contains("keep_high_precision")) s.keep_high_precision = j.at("keep_high_precision").get<std::vector<std::size_t>>();
    if (j.contains("kv_cache_fp8")) s.kv_cache_fp8 = j.at("kv_cache_fp8").get<bool>();
    return s;
  }

  bool operator==(const QuantSpec&) const = default;
};

/// Layer index of a per-layer parameter name, or npos.
inline std::size_t param_layer(const std::string& name) {
  if (name.rfind("layers.", 0) != 0) return std::string::npos;
  return std::stoul(name.substr(7, name.find('.', 7) - 7));
}

/// Projection matrices of layers outside the keep set. Embeddings, the
/// output head, norms, convolutions, SSM parameters and expert gates stay in
/// full precision.
inline bool is_quantized(const ModelConfig& c, const QuantSpec& s, const std::string& name) {
  const std::size_t j = param_layer(name);
  if (j == std::string::npos || j >= c.num_layers() || s.keeps(j)) return false;
  const std::string leaf = name.substr(name.rfind('.') + 1);
  static const std::set<std::string> kProjections{"in_z", "in_x", "in_B", "in_C", "in_dt", "out", "q",
                                                  "k",    "v",    "o",    "up",   "down"};
  return kProjections.count(leaf) != 0;
}

inline void validate_quant_spec(const ModelConfig& c, const QuantSpec& s) {
  if (s.block_size == 0) throw ConfigError("quant spec: block_size must be positive");
  for (std::size_t j : s.keep_high_precision)
    if (j >= c.num_layers()) throw ConfigError("quant spec: keep layer " + std::to_string(j) + " out of range");
  if (s.format != QuantFormat::Fp4) return;
  for (const auto& [name, shape] : parameter_shapes(c)) {
    if (is_quantized(c, s, name) && shape.back() % s.block_size) {
      throw ConfigError("quant spec: block_size " + std::to_string(s.block_size) + " does not divide the inner dimension of " +
                        name + " " + shape_str(shape));
    }
  }
}

namespace detail {

inline double abs_max(std::span<const float> v) {
  double m = 0.0;
  for (float x : v) m = std::max(m, std::fabs(static_cast<double>(x)));
  return m;
}

inline std::vector<float> fake_quant_values(std::span<const float> w, std::size_t cols, QuantFormat f,
                                            std::size_t block) {
  std::vector<float> out(w.size(), 0.0f);
  const double amax = abs_max(w);
  if (amax == 0.0) return out;
  if (f == QuantFormat::Fp8) {
    const double s = amax / kE4M3Max;
    for (std::size_t i = 0; i < w.size(); ++i) out[i] = static_cast<float>(s * round_e4m3(w[i] / s));
    return out;
  }
  if (cols % block) throw ShapeError("fake_quant: block size does not divide the inner dimension");
  const double st = amax / (kFp4Max * kE4M3Max);
  for (std::size_t b = 0; b < w.size(); b += block) {
    const auto blk = w.subspan(b, block);
    const double bmax = abs_max(blk);
    if (bmax == 0.0) continue;
    const double s = st * ceil_e4m3(bmax / (kFp4Max * st));
    for (std::size_t i = 0; i < block; ++i) out[b + i] = static_cast<float>(s * round_fp4(blk[i] / s));
  }
  return out;
}

}  // namespace detail

/// Quantize-dequantize of one tensor. No gradient.
inline Tensor fake_quant(const Tensor& w, QuantFormat f, std::size_t block_size = 16) {
  detail::require_finite(w, "fake_quant");
  return Tensor(w.shape(), detail::fake_quant_values(w.data(), w.cols(), f, block_size));
}

/// fake_quant in the forward pass, identity in the backward pass.
inline Tensor fake_quant_ste(const Tensor& w, QuantFormat f, std::size_t block_size = 16) {
  detail::require_finite(w, "fake_quant_ste");
  const std::size_t n = w.numel();
  return detail::make_result("fake_quant_ste", w.shape(), detail::fake_quant_values(w.data(), w.cols(), f, block_size),
                             {&w}, [n](std::span<const float> g, std::span<float* const> gi) {
                               if (gi[0])
                                 for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[i];
                             });
}

/// Parameters with every in-scope tensor quantized. With `ste`, quantized
/// tensors keep a straight-through link to the latent weights and the rest
/// alias them.
inline ParamStore quantize_params(const ModelConfig& c, const ParamStore& p, const QuantSpec& s, bool ste = false) {
  ParamStore out;
  for (const auto& [name, t] : p.items()) {
    if (!is_quantized(c, s, name)) {
      out.add(name, ste ? t : t.detach());
    } else {
      out.add(name, ste ? fake_quant_ste(t, s.format, s.block_size) : fake_quant(t, s.format, s.block_size));
    }
  }
  return out;
}

/// One-shot quantization of a checkpoint's weights. Rankings, router and
/// budgets are carried over unchanged.
inline Checkpoint ptq(const Checkpoint& ck, const QuantSpec& s) {
  validate_quant_spec(ck.config, s);
  Checkpoint out = ck;
  out.params = quantize_params(ck.config, ck.params, s);
  out.metadata["quant"] = s.to_json();
  return out;
}

/// Per-row FP8 quantization of KV rows [from, length) of every attention cache.
inline void quantize_kv_cache(CacheState& cache, std::size_t from) {
  for (auto& l : cache.layers) {
    const std::size_t len = l.kv.length;
    if (len <= from) continue;
    const std::size_t w = l.kv.k.size() / len;
    for (auto* v : {&l.kv.k, &l.kv.v}) {
      for (std::size_t r = from; r < len; ++r) {
        std::span<float> row(v->data() + r * w, w);
        const auto q = detail::fake_quant_values(row, w, QuantFormat::Fp8, w);
        std::copy(q.begin(), q.end(), row.begin());
      }
    }
  }
}

struct QadOptions {
  std::size_t steps = 500;
  double lr = 1e-4;
  std::size_t rows = 1;
  std::size_t len = 256;
  std::vector<double> alpha{0.5, 0.3, 0.2};
  std::size_t eval_batches = 4;
  std::size_t eval_rows = 4;
  std::size_t eval_len = 64;
  double abort_factor = 10.0;

  json to_json() const {
    return json{{"steps", steps}, {"lr", lr},           {"rows", rows},           {"len", len},
                {"alpha", alpha}, {"eval_batches", eval_batches}, {"eval_rows", eval_rows}, {"eval_len", eval_len},
                {"abort_factor", abort_factor}};
  }
};

struct QadResult {
  ParamStore latent;
  ParamStore quantized;
  std::vector<double> initial_kd;
  std::vector<double> final_kd;
};

/// Per-budget KD of a quantized student under fixed masks against an
/// unmasked teacher.
inline std::vector<double> masked_kd(const ModelConfig& c, const ParamStore& teacher, const ParamStore& student,
                                     const std::vector<MaskSet>& masks, const std::vector<Batch>& batches) {
  NoGradGuard ng;
  std::vector<double> out;
  for (const auto& m : masks) {
    double acc = 0.0;
    for (const auto& b : batches) {
      const Tensor t = logits(c, teacher, b.input.tokens, nullptr, &b.input.layout);
      const Tensor s = logits(c, student, b.input.tokens, &m, &b.input.layout);
      acc += kd_loss(t, s, target_rows(b)).item();
    }
    out.push_back(acc / static_cast<double>(batches.size()));
  }
  return out;
}

/// Eval-mode masks of every budget from a checkpoint's router.
inline std::vector<MaskSet> frozen_masks(const Checkpoint& ck) {
  if (!ck.importance) throw ContractError("checkpoint has no importance report");
  const RouterBank bank = ck.router_bank();
  const MaskBank mb(ck.config, ck.router->options, *ck.importance);
  std::vector<MaskSet> out;
  for (std::size_t b = 0; b < ck.budgets.size(); ++b)
    out.push_back(route(bank, mb, b, {1.0, 1.0}, MaskMode::Eval, nullptr).masks);
  return out;
}

/// Distills a quantized student from the unmasked full-precision teacher.
/// Each step samples one budget and applies its frozen mask to the student
/// only; rounding gradients pass straight through. Writes "step,budget,kd".
inline QadResult nested_qad(const ModelConfig& c, const ParamStore& teacher, const std::vector<MaskSet>& masks,
                            const std::vector<std::string>& labels, const QuantSpec& spec, const TaskOptions& task,
                            const QadOptions& o, const Rng& root, std::ostream* csv = nullptr) {
  validate_quant_spec(c, spec);
  if (masks.empty() || masks.size() != labels.size()) throw ContractError("nested_qad: one label per budget mask");
  if (o.alpha.size() != masks.size()) throw ConfigError("nested_qad: alpha needs one weight per budget");
  if (!(o.lr > 0.0)) throw ConfigError("nested_qad: lr must be positive");
  CurriculumSchedule sampler;
  sampler.alpha = o.alpha;
  QadResult r;
  r.latent = teacher.clone(true);
  const auto eval = heldout_batches(root, task, o.eval_batches, o.eval_rows, o.eval_len);
  r.initial_kd = masked_kd(c, teacher, quantize_params(c, r.latent, spec), masks, eval);
  Adam opt(r.latent.items());
  Rng data = root.substream("data/qad");
  Rng pick = root.substream("budget/qad");
  // Per-budget running loss; single batches are too noisy to judge divergence.
  std::vector<double> trend = r.initial_kd;
  if (csv) *csv << "step,budget,kd\n";
  for (std::size_t step = 0; step < o.steps; ++step) {
    const std::size_t bi = sample_budget(sampler, 2, masks.size(), pick);
    const Batch b = make_batch(data, task, o.rows, o.len);
    Tensor t_logits;
    {
      NoGradGuard ng;
      t_logits = logits(c, teacher, b.input.tokens, nullptr, &b.input.layout);
    }
    const ParamStore q = quantize_params(c, r.latent, spec, true);
    const Tensor kd = kd_loss(t_logits, logits(c, q, b.input.tokens, &masks[bi], &b.input.layout), target_rows(b));
    const double limit = o.abort_factor * std::max(r.initial_kd[bi], 1e-4);
    trend[bi] = 0.9 * trend[bi] + 0.1 * kd.item();
    if (!std::isfinite(kd.item()) || trend[bi] > limit) {
      throw NumericError("nested_qad: loss " + std::to_string(kd.item()) + " (running " + std::to_string(trend[bi]) +
                         ") at step " + std::to_string(step) + " exceeds " + std::to_string(limit) + " for budget " +
                         labels[bi]);
    }
    opt.zero_grad();
    backward(kd);
    opt.step(static_cast<float>(o.lr));
    if (csv) {
      *csv << step << ',' << labels[bi] << ',';
      csv_number(*csv, kd.item()) << '\n';
    }
  }
  r.quantized = quantize_params(c, r.latent, spec);
  r.final_kd = masked_kd(c, teacher, r.quantized, masks, eval);
  return r;
}

}  // namespace elastic
