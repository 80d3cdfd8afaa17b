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
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "elastic/errors.hpp"
#include "elastic/tensor.hpp"

namespace elastic {

struct AdamOptions {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

/// Adam over a fixed list of named leaf tensors. Parameters whose gradient
/// is absent in a step are left untouched.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<std::pair<std::string, Tensor>> params, AdamOptions opt = {})
      : params_(std::move(params)), opt_(opt) {
    for (auto& [name, t] : params_) {
      if (!t.requires_grad() || !t.is_leaf()) throw ContractError("Adam: parameter " + name + " is not a trainable leaf");
      m_.emplace_back(t.numel(), 0.0f);
      v_.emplace_back(t.numel(), 0.0f);
    }
  }

  void step(float lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& g = params_[i].second.grad();
      if (g.empty()) continue;
      for (float gv : g) {
        if (!std::isfinite(gv)) throw NumericError("non-finite gradient in parameter " + params_[i].first);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(opt_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(opt_.beta2), static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      const auto g = p.grad();
      if (g.empty()) continue;
      auto w = p.mutable_data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = opt_.beta1 * m[j] + (1.0f - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (1.0f - opt_.beta2) * g[j] * g[j];
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        w[j] -= static_cast<float>(lr * (mh / (std::sqrt(vh) + opt_.eps) + opt_.weight_decay * w[j]));
      }
      for (float x : w) {
        if (!std::isfinite(x)) throw NumericError("parameter " + params_[i].first + " became non-finite");
      }
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  long steps() const { return t_; }
  const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  AdamOptions opt_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace elastic
