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

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "elastic/errors.hpp"
#include "elastic/ops.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

namespace detail {

// Row-wise log-softmax of x/temperature in double.
inline void log_softmax_row(const float* x, std::size_t n, double temperature, std::vector<double>& out) {
  out.resize(n);
  double mx = -INFINITY;
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j] / temperature);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] / temperature - mx);
  const double lz = std::log(z) + mx;
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] / temperature - lz;
}

inline std::vector<std::int32_t> all_rows(std::size_t n) {
  std::vector<std::int32_t> r(n);
  for (std::size_t i = 0; i < n; ++i) r[i] = static_cast<std::int32_t>(i);
  return r;
}

}  // namespace detail

/// Mean over `rows` of KL(softmax(t/T) || softmax(s/T)). The teacher is a
/// constant; gradients flow to the student logits only. An empty row list
/// means every row.
inline Tensor kd_loss(const Tensor& teacher, const Tensor& student, std::span<const std::int32_t> rows = {},
                      double temperature = 1.0) {
  if (teacher.shape() != student.shape())
    throw ShapeError("kd_loss: teacher " + shape_str(teacher.shape()) + " vs student " + shape_str(student.shape()));
  if (!(temperature > 0.0)) throw ContractError("kd_loss: temperature must be positive");
  detail::require_finite(student, "kd_loss");
  detail::require_finite(teacher, "kd_loss");
  const std::size_t n = student.cols();
  std::vector<std::int32_t> own;
  if (rows.empty()) {
    own = detail::all_rows(student.rows());
    rows = own;
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  std::vector<float> dz(student.numel(), 0.0f);
  std::vector<double> lt, ls;
  double total = 0.0;
  const auto ts = teacher.data(), ss = student.data();
  for (auto r : rows) {
    const std::size_t i = static_cast<std::size_t>(r);
    if (i >= student.rows()) throw ShapeError("kd_loss: row index out of range");
    detail::log_softmax_row(ts.data() + i * n, n, temperature, lt);
    detail::log_softmax_row(ss.data() + i * n, n, temperature, ls);
    for (std::size_t j = 0; j < n; ++j) {
      const double pt = std::exp(lt[j]);
      total += pt * (lt[j] - ls[j]);
      dz[i * n + j] += static_cast<float>(inv * (std::exp(ls[j]) - pt) / temperature);
    }
  }
  return detail::make_result("kd_loss", Shape{1}, {static_cast<float>(total * inv)}, {&student},
                             [dz = std::move(dz)](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < dz.size(); ++i) gin[0][i] += g[0] * dz[i];
                             });
}

/// Mean next-token cross entropy over the rows with a target >= 0.
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  if (targets.size() != logits.rows()) throw ShapeError("cross_entropy: one target per row required");
  detail::require_finite(logits, "cross_entropy");
  const std::size_t n = logits.cols();
  std::size_t count = 0;
  for (auto t : targets) {
    if (t >= static_cast<std::int32_t>(n)) throw ShapeError("cross_entropy: target out of range");
    count += t >= 0;
  }
  if (count == 0) throw ContractError("cross_entropy: no targets");
  const double inv = 1.0 / static_cast<double>(count);
  std::vector<float> dz(logits.numel(), 0.0f);
  std::vector<double> ls;
  double total = 0.0;
  const auto xs = logits.data();
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    detail::log_softmax_row(xs.data() + i * n, n, 1.0, ls);
    const std::size_t t = static_cast<std::size_t>(targets[i]);
    total -= ls[t];
    for (std::size_t j = 0; j < n; ++j) dz[i * n + j] = static_cast<float>(inv * (std::exp(ls[j]) - (j == t)));
  }
  return detail::make_result("cross_entropy", Shape{1}, {static_cast<float>(total * inv)}, {&logits},
                             [dz = std::move(dz)](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < dz.size(); ++i) gin[0][i] += g[0] * dz[i];
                             });
}

/// Fraction of rows with a target whose argmax matches it.
inline double token_accuracy(const Tensor& logits, std::span<const std::int32_t> targets) {
  const std::size_t n = logits.cols();
  std::size_t hit = 0, count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0) continue;
    const float* row = logits.data().data() + i * n;
    const auto best = static_cast<std::int32_t>(std::max_element(row, row + n) - row);
    hit += best == targets[i];
    ++count;
  }
  return count ? static_cast<double>(hit) / static_cast<double>(count) : 0.0;
}

/// L_KD + lambda * L_router.
inline Tensor total_loss(const Tensor& kd, const Tensor& router, double lambda = 1.0) {
  if (lambda == 0.0) return kd;
  return add(kd, scale(router, static_cast<float>(lambda)));
}

}  // namespace elastic
