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
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "elastic/errors.hpp"

namespace elastic {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct TensorImpl;

// Gradient callback: receives the output gradient and one (possibly null)
// accumulation buffer per input.
using BackwardFn = std::function<void(std::span<const float> grad_out, std::span<float* const> grad_in)>;

struct GraphNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;
  std::shared_ptr<GraphNode> node;
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Dense row-major float32 tensor with reverse-mode autodiff.
///
/// Tensor is a shared handle: copies alias the same storage and graph node.
/// Leaves with requires_grad() accumulate gradients across backward() calls
/// until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f) : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(shape_numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<float> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  static Tensor scalar(float v) { return Tensor(Shape{1}, std::vector<float>{v}); }

  static Tensor vector(std::vector<float> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> v) {
    return Tensor(Shape{rows, cols}, std::move(v));
  }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw ShapeError("dim index out of range for " + shape_str(shape()));
    return impl().shape[i];
  }
  std::size_t numel() const { return impl().data.size(); }

  // Leading dimensions collapsed; last dimension kept.
  std::size_t rows() const { return rank() == 0 ? 1 : numel() / impl().shape.back(); }
  std::size_t cols() const { return rank() == 0 ? 1 : impl().shape.back(); }

  std::span<const float> data() const { return impl().data; }
  std::span<float> mutable_data() { return impl().data; }
  const std::vector<float>& values() const { return impl().data; }

  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return impl().data[0];
  }
  float operator[](std::size_t i) const { return impl().data[i]; }
  float at(std::size_t r, std::size_t c) const { return impl().data[r * cols() + c]; }

  bool requires_grad() const { return defined() && impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (impl().node) throw ContractError("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return !impl().node; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const float> grad() const { return impl().grad; }
  Tensor grad_tensor() const {
    if (!has_grad()) return Tensor(shape(), 0.0f);
    return Tensor(shape(), impl().grad);
  }
  void zero_grad() { impl().grad.clear(); }

  /// Same values, no graph history, not requiring grad.
  Tensor detach() const { return Tensor(shape(), impl().data); }
  Tensor clone() const { return detach(); }

  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  detail::TensorImpl& impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

/// Wraps a freshly computed value as an op output, recording a graph node
/// when any input requires grad and recording is enabled.
inline Tensor make_result(const char* op, Shape shape, std::vector<float> data,
                          std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || (t && t->requires_grad());
  if (!any) return out;
  auto node = std::make_shared<GraphNode>();
  node->op = op;
  for (const Tensor* t : inputs) node->inputs.push_back(t ? t->impl_ptr() : nullptr);
  node->backward = std::move(backward);
  auto& impl = *out.impl_ptr();
  impl.requires_grad = true;
  impl.node = std::move(node);
  return out;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. The traversed graph is released
/// afterwards; calling backward again through it is a contract error.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) throw ContractError("loss does not depend on any parameter");
  using detail::TensorImpl;

  // Holding owning pointers keeps intermediates alive while the graph is torn
  // down node by node below.
  std::vector<std::shared_ptr<TensorImpl>> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::pair<std::shared_ptr<TensorImpl>, std::size_t>> stack;
  stack.emplace_back(loss.impl_ptr(), 0);
  seen.insert(loss.impl_ptr().get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && impl->node->consumed) {
      throw ContractError("backward() through a graph that was already consumed");
    }
    if (impl->node && next < impl->node->inputs.size()) {
      std::shared_ptr<TensorImpl> child = impl->node->inputs[next++];
      if (child && child->requires_grad && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  TensorImpl* root = loss.impl_ptr().get();
  if (root->grad.empty()) root->grad.assign(1, 0.0f);
  root->grad[0] += 1.0f;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = it->get();
    if (!impl->node) continue;
    auto& node = *impl->node;
    std::vector<float*> sinks(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      TensorImpl* in = node.inputs[i].get();
      if (!in || !in->requires_grad) continue;
      if (in->grad.empty()) in->grad.assign(in->data.size(), 0.0f);
      sinks[i] = in->grad.data();
    }
    if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0f);
    node.backward(impl->grad, sinks);
    node.consumed = true;
    node.backward = nullptr;
    node.inputs.clear();
    impl->grad.clear();
    impl->grad.shrink_to_fit();
  }
}

}  // namespace elastic
