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
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "elastic/errors.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

// Logit assigned to experts removed by a zero mask entry. Finite so that
// every intermediate stays finite; exp() of it underflows to exactly 0.
inline constexpr float kMaskedLogit = -1.0e30f;

namespace detail {

inline void require_finite(const Tensor& t, const char* op) {
  for (float v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
  }
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

enum class Bcast { Same, Scalar, Row, Col };

// How `b` broadcasts onto `a`: identical shape, scalar, row vector over the
// last dimension, or [M,1] column over a matrix.
inline Bcast broadcast_mode(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Bcast::Same;
  if (b.numel() == 1) return Bcast::Scalar;
  if (a.rank() >= 1 && ((b.rank() == 1 && b.dim(0) == a.cols()) ||
                        (b.rank() == 2 && b.dim(0) == 1 && b.dim(1) == a.cols()))) {
    return Bcast::Row;
  }
  if (a.rank() == 2 && b.rank() == 2 && b.dim(0) == a.dim(0) && b.dim(1) == 1) return Bcast::Col;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                   shape_str(a.shape()));
}

inline std::size_t bindex(Bcast mode, std::size_t i, std::size_t cols) {
  switch (mode) {
    case Bcast::Same: return i;
    case Bcast::Scalar: return 0;
    case Bcast::Row: return i % cols;
    case Bcast::Col: return i / cols;
  }
  return 0;
}

template <class Fwd, class Bwd>
Tensor unary(const char* op, const Tensor& x, Fwd f, Bwd df) {
  std::vector<float> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
  auto saved_y = y;
  return make_result(op, x.shape(), std::move(y), {&x},
                     [x, df, saved_y = std::move(saved_y)](std::span<const float> g, std::span<float* const> gin) {
                       const auto xs = x.data();
                       for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * df(xs[i], saved_y[i]);
                     });
}

inline float sigmoid_f(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with limited broadcasting of the second operand.

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.numel() < b.numel()) return add(b, a);
  const auto mode = detail::broadcast_mode(a, b, "add");
  const std::size_t cols = a.cols();
  std::vector<float> y(a.values());
  const auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bs[detail::bindex(mode, i, cols)];
  return detail::make_result("add", a.shape(), std::move(y), {&a, &b},
                             [mode, cols](std::span<const float> g, std::span<float* const> gin) {
                               if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                               if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) gin[1][detail::bindex(mode, i, cols)] += g[i];
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const auto mode = detail::broadcast_mode(a, b, "sub");
  const std::size_t cols = a.cols();
  std::vector<float> y(a.values());
  const auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bs[detail::bindex(mode, i, cols)];
  return detail::make_result("sub", a.shape(), std::move(y), {&a, &b},
                             [mode, cols](std::span<const float> g, std::span<float* const> gin) {
                               if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                               if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) gin[1][detail::bindex(mode, i, cols)] -= g[i];
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.numel() < b.numel()) return mul(b, a);
  const auto mode = detail::broadcast_mode(a, b, "mul");
  const std::size_t cols = a.cols();
  std::vector<float> y(a.values());
  const auto bs = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bs[detail::bindex(mode, i, cols)];
  return detail::make_result("mul", a.shape(), std::move(y), {&a, &b},
                             [a, b, mode, cols](std::span<const float> g, std::span<float* const> gin) {
                               const auto as = a.data();
                               const auto bs = b.data();
                               if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * bs[detail::bindex(mode, i, cols)];
                               if (gin[1]) for (std::size_t i = 0; i < g.size(); ++i) gin[1][detail::bindex(mode, i, cols)] += g[i] * as[i];
                             });
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> y(a.values());
  for (auto& v : y) v *= s;
  return detail::make_result("scale", a.shape(), std::move(y), {&a},
                             [s](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * s;
                             });
}

inline Tensor add_scalar(const Tensor& a, float s) {
  std::vector<float> y(a.values());
  for (auto& v : y) v += s;
  return detail::make_result("add_scalar", a.shape(), std::move(y), {&a},
                             [](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                             });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, static_cast<float>(s)); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, static_cast<float>(s)); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, static_cast<float>(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, static_cast<float>(s)); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.

inline Tensor silu(const Tensor& x) {
  return detail::unary("silu", x, [](float v) { return v * detail::sigmoid_f(v); },
                       [](float v, float) {
                         const float s = detail::sigmoid_f(v);
                         return s * (1.0f + v * (1.0f - s));
                       });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, [](float v) { return detail::sigmoid_f(v); },
                       [](float, float y) { return y * (1.0f - y); });
}

inline Tensor leaky_relu(const Tensor& x, float slope = 0.01f) {
  return detail::unary("leaky_relu", x, [slope](float v) { return v > 0.0f ? v : slope * v; },
                       [slope](float v, float) { return v > 0.0f ? 1.0f : slope; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](float v) { return v > 0.0f ? v : 0.0f; },
                       [](float v, float) { return v > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor exp(const Tensor& x) {
  detail::require_finite(x, "exp");
  return detail::unary("exp", x, [](float v) { return std::exp(v); }, [](float, float y) { return y; });
}

inline Tensor log(const Tensor& x) {
  for (float v : x.data()) {
    if (!std::isfinite(v) || v <= 0.0f) throw NumericError("log: input must be finite and positive");
  }
  return detail::unary("log", x, [](float v) { return std::log(v); }, [](float v, float) { return 1.0f / v; });
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary("softplus", x,
                       [](float v) { return v > 20.0f ? v : std::log1p(std::exp(v)); },
                       [](float v, float) { return detail::sigmoid_f(v); });
}

inline Tensor abs(const Tensor& x) {
  return detail::unary("abs", x, [](float v) { return std::fabs(v); },
                       [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

inline Tensor square(const Tensor& x) {
  return detail::unary("square", x, [](float v) { return v * v; }, [](float v, float) { return 2.0f * v; });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping.

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (float v : a.data()) s += v;
  const std::size_t n = a.numel();
  return detail::make_result("sum", Shape{1}, {static_cast<float>(s)}, {&a},
                             [n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < n; ++i) gin[0][i] += g[0];
                             });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// Row sums of a matrix, shape [M].
inline Tensor sum_rows(const Tensor& a) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<float> y(m, 0.0f);
  const auto as = a.data();
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += as[i * n + j];
    y[i] = static_cast<float>(s);
  }
  return detail::make_result("sum_rows", Shape{m}, std::move(y), {&a},
                             [m, n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[i];
                             });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result("reshape", std::move(shape), a.values(), {&a},
                             [](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra.

inline Tensor transpose(const Tensor& a) {
  detail::require_rank2(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<float> y(m * n);
  const auto as = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = as[i * n + j];
  return detail::make_result("transpose", Shape{n, m}, std::move(y), {&a},
                             [m, n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) gin[0][i * n + j] += g[j * m + i];
                             });
}

namespace detail {

// c[M,N] += a[M,K] * b[K,N], all row-major.
inline void gemm_acc(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const float av = a[i * k + p];
      if (av == 0.0f) continue;
      const float* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline std::vector<float> transposed(std::span<const float> a, std::size_t m, std::size_t n) {
  std::vector<float> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  return t;
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<float> y(m * n, 0.0f);
  detail::gemm_acc(a.data().data(), b.data().data(), y.data(), m, k, n);
  return detail::make_result("matmul", Shape{m, n}, std::move(y), {&a, &b},
                             [a, b, m, k, n](std::span<const float> g, std::span<float* const> gin) {
                               if (gin[0]) {
                                 const auto bt = detail::transposed(b.data(), k, n);
                                 detail::gemm_acc(g.data(), bt.data(), gin[0], m, n, k);
                               }
                               if (gin[1]) {
                                 const auto at = detail::transposed(a.data(), m, k);
                                 detail::gemm_acc(at.data(), g.data(), gin[1], k, m, n);
                               }
                             });
}

/// y = x W^T (+ bias), with W stored [out, in].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
  detail::require_rank2(w, "linear");
  const std::size_t out = w.dim(0), in = w.dim(1);
  if (x.cols() != in) {
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  }
  if (bias && bias->numel() != out) throw ShapeError("linear: bias size mismatch");
  const std::size_t m = x.rows();
  std::vector<float> y(m * out, 0.0f);
  if (bias) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < out; ++j) y[i * out + j] = (*bias)[j];
  }
  const auto wt = detail::transposed(w.data(), out, in);
  detail::gemm_acc(x.data().data(), wt.data(), y.data(), m, in, out);
  Shape shape = x.shape();
  shape.back() = out;
  return detail::make_result("linear", std::move(shape), std::move(y), {&x, &w, bias},
                             [x, w, m, in, out](std::span<const float> g, std::span<float* const> gin) {
                               if (gin[0]) detail::gemm_acc(g.data(), w.data().data(), gin[0], m, out, in);
                               if (gin[1]) {
                                 const auto gt = detail::transposed(g, m, out);
                                 detail::gemm_acc(gt.data(), x.data().data(), gin[1], out, m, in);
                               }
                               if (gin.size() > 2 && gin[2]) {
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < out; ++j) gin[2][j] += g[i * out + j];
                               }
                             });
}

inline Tensor outer(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.numel(), n = b.numel();
  std::vector<float> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = a[i] * b[j];
  return detail::make_result("outer", Shape{m, n}, std::move(y), {&a, &b},
                             [a, b, m, n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) {
                                   if (gin[0]) gin[0][i] += g[i * n + j] * b[j];
                                   if (gin[1]) gin[1][j] += g[i * n + j] * a[i];
                                 }
                             });
}

/// Stacks equally shaped tensors along a new leading dimension.
inline Tensor stack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("stack of no tensors");
  const Shape inner = parts[0].shape();
  const std::size_t n = parts[0].numel();
  std::vector<float> y;
  y.reserve(n * parts.size());
  for (const auto& p : parts) {
    if (p.shape() != inner) throw ShapeError("stack: mismatched shapes");
    y.insert(y.end(), p.data().begin(), p.data().end());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor out(std::move(shape), std::move(y));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::GraphNode>();
  node->op = "stack";
  for (const auto& p : parts) node->inputs.push_back(p.impl_ptr());
  const std::size_t k = parts.size();
  node->backward = [n, k](std::span<const float> g, std::span<float* const> gin) {
    for (std::size_t p = 0; p < k; ++p) {
      if (!gin[p]) continue;
      for (std::size_t i = 0; i < n; ++i) gin[p][i] += g[p * n + i];
    }
  };
  out.impl_ptr()->requires_grad = true;
  out.impl_ptr()->node = std::move(node);
  return out;
}

/// Concatenates matrices with equal column count along rows.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat of no tensors");
  const std::size_t n = parts[0].cols();
  std::vector<float> y;
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    y.insert(y.end(), p.data().begin(), p.data().end());
    sizes.push_back(p.numel());
    rows += p.rows();
  }
  Tensor out(Shape{rows, n}, std::move(y));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<detail::GraphNode>();
  node->op = "concat_rows";
  for (const auto& p : parts) node->inputs.push_back(p.impl_ptr());
  node->backward = [sizes](std::span<const float> g, std::span<float* const> gin) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < sizes.size(); ++p) {
      if (gin[p])
        for (std::size_t i = 0; i < sizes[p]; ++i) gin[p][i] += g[off + i];
      off += sizes[p];
    }
  };
  out.impl_ptr()->requires_grad = true;
  out.impl_ptr()->node = std::move(node);
  return out;
}

/// Columns [begin, begin+count) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  const std::size_t m = a.rows(), n = a.cols();
  if (begin + count > n) throw ShapeError("slice_cols out of range");
  std::vector<float> y(m * count);
  const auto as = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) y[i * count + j] = as[i * n + begin + j];
  return detail::make_result("slice_cols", Shape{m, count}, std::move(y), {&a},
                             [m, n, begin, count](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < count; ++j) gin[0][i * n + begin + j] += g[i * count + j];
                             });
}

// ---------------------------------------------------------------------------
// Indexing.

inline Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids) {
  detail::require_rank2(table, "gather_rows");
  const std::size_t v = table.dim(0), d = table.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  std::vector<float> y(idx.size() * d);
  const auto ts = table.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= v) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[r]) + " out of range " + std::to_string(v));
    }
    std::copy_n(ts.begin() + idx[r] * d, d, y.begin() + r * d);
  }
  return detail::make_result("gather_rows", Shape{idx.size(), d}, std::move(y), {&table},
                             [idx, d](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t r = 0; r < idx.size(); ++r)
                                 for (std::size_t j = 0; j < d; ++j) gin[0][idx[r] * d + j] += g[r * d + j];
                             });
}

/// base + scatter of src rows into rows idx of base.
inline Tensor index_add_rows(const Tensor& base, const Tensor& src, std::span<const std::int32_t> ids) {
  detail::require_rank2(base, "index_add_rows");
  const std::size_t m = base.dim(0), n = base.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  if (src.rows() != idx.size() || src.cols() != n) throw ShapeError("index_add_rows: src shape mismatch");
  std::vector<float> y(base.values());
  const auto ss = src.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= m) throw ShapeError("index_add_rows: index out of range");
    for (std::size_t j = 0; j < n; ++j) y[idx[r] * n + j] += ss[r * n + j];
  }
  return detail::make_result("index_add_rows", base.shape(), std::move(y), {&base, &src},
                             [idx, n](std::span<const float> g, std::span<float* const> gin) {
                               if (gin[0]) for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
                               if (gin[1])
                                 for (std::size_t r = 0; r < idx.size(); ++r)
                                   for (std::size_t j = 0; j < n; ++j) gin[1][r * n + j] += g[idx[r] * n + j];
                             });
}

/// out[r] = a[rows[r], cols[r]].
inline Tensor gather_elements(const Tensor& a, std::span<const std::int32_t> rows, std::span<const std::int32_t> cols) {
  if (rows.size() != cols.size()) throw ShapeError("gather_elements: index lengths differ");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<float> y(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || cols[r] < 0 || static_cast<std::size_t>(rows[r]) >= m ||
        static_cast<std::size_t>(cols[r]) >= n) {
      throw ShapeError("gather_elements: index out of range");
    }
    flat[r] = static_cast<std::size_t>(rows[r]) * n + static_cast<std::size_t>(cols[r]);
    y[r] = a[flat[r]];
  }
  return detail::make_result("gather_elements", Shape{rows.size()}, std::move(y), {&a},
                             [flat](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t r = 0; r < flat.size(); ++r) gin[0][flat[r]] += g[r];
                             });
}

// ---------------------------------------------------------------------------
// Softmax family.

inline Tensor softmax_lastdim(const Tensor& x) {
  detail::require_finite(x, "softmax");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<float> y(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = xs.data() + i * n;
    const float mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[i * n + j] = std::exp(row[j] - mx);
      z += y[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = static_cast<float>(y[i * n + j] / z);
  }
  auto saved = y;
  return detail::make_result("softmax", x.shape(), std::move(y), {&x},
                             [saved = std::move(saved), m, n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * saved[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   gin[0][i * n + j] += saved[i * n + j] * static_cast<float>(g[i * n + j] - dot);
                               }
                             });
}

inline Tensor log_softmax_lastdim(const Tensor& x) {
  detail::require_finite(x, "log_softmax");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<float> y(x.numel());
  std::vector<float> p(x.numel());
  const auto xs = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = xs.data() + i * n;
    const float mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double lz = std::log(z) + mx;
    for (std::size_t j = 0; j < n; ++j) {
      y[i * n + j] = static_cast<float>(row[j] - lz);
      p[i * n + j] = static_cast<float>(std::exp(row[j] - lz));
    }
  }
  return detail::make_result("log_softmax", x.shape(), std::move(y), {&x},
                             [p = std::move(p), m, n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i) {
                                 double gs = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   gin[0][i * n + j] += g[i * n + j] - p[i * n + j] * static_cast<float>(gs);
                               }
                             });
}

/// theta + log(mask) per column; columns with mask <= 0 get kMaskedLogit and
/// receive no gradient.
inline Tensor add_log_mask(const Tensor& theta, const Tensor& mask) {
  const std::size_t m = theta.rows(), n = theta.cols();
  if (mask.numel() != n) throw ShapeError("add_log_mask: mask size mismatch");
  for (float v : mask.data()) {
    if (!std::isfinite(v)) throw MaskError("add_log_mask: non-finite mask entry");
  }
  std::vector<float> y(theta.numel());
  const auto ts = theta.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      y[i * n + j] = mask[j] > 0.0f ? ts[i * n + j] + std::log(mask[j]) : kMaskedLogit;
  return detail::make_result("add_log_mask", theta.shape(), std::move(y), {&theta, &mask},
                             [mask, m, n](std::span<const float> g, std::span<float* const> gin) {
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) {
                                   if (!(mask[j] > 0.0f)) continue;
                                   if (gin[0]) gin[0][i * n + j] += g[i * n + j];
                                   if (gin[1]) gin[1][j] += g[i * n + j] / mask[j];
                                 }
                             });
}

/// Top-k selection per row (ties to the lower index); returns dense gates
/// that are a softmax over the selected logits and zero elsewhere.
inline Tensor topk_softmax(const Tensor& logits, std::size_t k, std::vector<std::vector<std::int32_t>>* selected = nullptr) {
  detail::require_finite(logits, "topk_softmax");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (k == 0 || k > n) throw ShapeError("topk_softmax: k out of range");
  std::vector<float> y(logits.numel(), 0.0f);
  std::vector<std::vector<std::int32_t>> sel(m);
  const auto ls = logits.data();
  std::vector<std::int32_t> order(n);
  for (std::size_t i = 0; i < m; ++i) {
    const float* row = ls.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) order[j] = static_cast<std::int32_t>(j);
    std::stable_sort(order.begin(), order.end(), [row](std::int32_t a, std::int32_t b) { return row[a] > row[b]; });
    sel[i].assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    const float mx = row[sel[i][0]];
    double z = 0.0;
    for (auto e : sel[i]) z += std::exp(static_cast<double>(row[e] - mx));
    for (auto e : sel[i]) y[i * n + e] = static_cast<float>(std::exp(static_cast<double>(row[e] - mx)) / z);
  }
  auto saved = y;
  if (selected) *selected = sel;
  return detail::make_result("topk_softmax", logits.shape(), std::move(y), {&logits},
                             [saved = std::move(saved), sel = std::move(sel), n](std::span<const float> g,
                                                                                  std::span<float* const> gin) {
                               for (std::size_t i = 0; i < sel.size(); ++i) {
                                 double dot = 0.0;
                                 for (auto e : sel[i]) dot += g[i * n + e] * saved[i * n + e];
                                 for (auto e : sel[i])
                                   gin[0][i * n + e] += saved[i * n + e] * static_cast<float>(g[i * n + e] - dot);
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalization.

/// RMSNorm over the last dimension with a learned gain.
inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, float eps = 1e-5f) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n) throw ShapeError("rmsnorm: gain size mismatch");
  std::vector<float> y(x.numel());
  std::vector<float> inv(m);
  const auto xs = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    float s = 0.0f;
    for (std::size_t j = 0; j < n; ++j) s += xs[i * n + j] * xs[i * n + j];
    const float ms = s / static_cast<float>(n);
    inv[i] = 1.0f / std::sqrt(ms + eps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = (xs[i * n + j] * inv[i]) * gain[j];
  }
  return detail::make_result("rmsnorm", x.shape(), std::move(y), {&x, &gain},
                             [x, gain, inv = std::move(inv), m, n](std::span<const float> g, std::span<float* const> gin) {
                               const auto xs = x.data();
                               for (std::size_t i = 0; i < m; ++i) {
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * gain[j] * xs[i * n + j] * inv[i];
                                 const float c = static_cast<float>(dot / static_cast<double>(n));
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const float xh = xs[i * n + j] * inv[i];
                                   if (gin[0]) gin[0][i * n + j] += inv[i] * (g[i * n + j] * gain[j] - xh * c);
                                   if (gin[1]) gin[1][j] += g[i * n + j] * xh;
                                 }
                               }
                             });
}

/// RMSNorm whose statistics cover only the active channels:
/// y = m * gain * x / sqrt(sum(m x^2) / sum(m) + eps). The mask may be soft
/// and receives a gradient. With a 0/1 mask this equals RMSNorm applied to
/// the sliced tensor, scattered back with zeros.
inline Tensor masked_rmsnorm(const Tensor& x, const Tensor& gain, const Tensor& mask, float eps = 1e-5f) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || mask.numel() != n) throw ShapeError("masked_rmsnorm: size mismatch");
  float count = 0.0f;
  for (float v : mask.data()) count += v;
  if (!(count > 0.0f)) throw MaskError("masked_rmsnorm: mask has no active channel");
  std::vector<float> y(x.numel());
  std::vector<float> inv(m), msq(m);
  const auto xs = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    float s = 0.0f;
    for (std::size_t j = 0; j < n; ++j) s += mask[j] * (xs[i * n + j] * xs[i * n + j]);
    msq[i] = s / count;
    inv[i] = 1.0f / std::sqrt(msq[i] + eps);
    for (std::size_t j = 0; j < n; ++j) y[i * n + j] = ((xs[i * n + j] * inv[i]) * gain[j]) * mask[j];
  }
  return detail::make_result(
      "masked_rmsnorm", x.shape(), std::move(y), {&x, &gain, &mask},
      [x, gain, mask, inv = std::move(inv), msq = std::move(msq), count, m, n](std::span<const float> g,
                                                                                  std::span<float* const> gin) {
        const auto xs = x.data();
        for (std::size_t i = 0; i < m; ++i) {
          const double r = 1.0 / inv[i];
          // q = dL/dr summed over the row.
          double q = 0.0;
          for (std::size_t j = 0; j < n; ++j) q -= g[i * n + j] * mask[j] * gain[j] * xs[i * n + j];
          q /= r * r;
          for (std::size_t j = 0; j < n; ++j) {
            const double xv = xs[i * n + j];
            const double gy = g[i * n + j];
            if (gin[0]) gin[0][i * n + j] += static_cast<float>(gy * mask[j] * gain[j] / r + q * mask[j] * xv / (count * r));
            if (gin[1]) gin[1][j] += static_cast<float>(gy * mask[j] * xv / r);
            if (gin[2]) gin[2][j] += static_cast<float>(gy * gain[j] * xv / r + q * (xv * xv - msq[i]) / (2.0 * count * r));
          }
        }
      });
}

inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f) {
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) throw ShapeError("layernorm: size mismatch");
  std::vector<float> y(x.numel()), xhat(x.numel()), inv(m);
  const auto xs = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xs[i * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xs[i * n + j] - mu) * (xs[i * n + j] - mu);
    var /= static_cast<double>(n);
    inv[i] = static_cast<float>(1.0 / std::sqrt(var + eps));
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = static_cast<float>((xs[i * n + j] - mu) * inv[i]);
      y[i * n + j] = xhat[i * n + j] * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      "layernorm", x.shape(), std::move(y), {&x, &gain, &bias},
      [gain, xhat = std::move(xhat), inv = std::move(inv), m, n](std::span<const float> g, std::span<float* const> gin) {
        for (std::size_t i = 0; i < m; ++i) {
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[i * n + j] * gain[j];
            s1 += gh;
            s2 += gh * xhat[i * n + j];
          }
          s1 /= static_cast<double>(n);
          s2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[i * n + j] * gain[j];
            if (gin[0]) gin[0][i * n + j] += static_cast<float>(inv[i] * (gh - s1 - xhat[i * n + j] * s2));
            if (gin[1]) gin[1][j] += g[i * n + j] * xhat[i * n + j];
            if (gin[2]) gin[2][j] += g[i * n + j];
          }
        }
      });
}

}  // namespace elastic
