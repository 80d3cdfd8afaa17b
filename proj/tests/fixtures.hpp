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
#include <vector>

#include "elastic/config.hpp"
#include "elastic/rng.hpp"

namespace elastic::testing {

inline ModelConfig small_config() {
  ModelConfig c;
  c.vocab = 11;
  c.d_e = 8;
  c.pattern = parse_pattern("ME*EM-");
  c.n_h = 2;
  c.d_h = 4;
  c.kv_heads = 2;
  c.m_h = 4;
  c.m_d = 3;
  c.groups = 2;
  c.d_s = 3;
  c.experts = 4;
  c.topk = 2;
  c.ffn_dim = 6;
  return c;
}

inline std::vector<std::int32_t> random_tokens(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> t(n);
  for (auto& v : t) v = static_cast<std::int32_t>(rng.below(vocab));
  return t;
}

}  // namespace elastic::testing
