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
#include <string>
#include <vector>

#include "elastic/errors.hpp"
#include "elastic/importance.hpp"
#include "elastic/rng.hpp"
#include "elastic/seq_ops.hpp"

namespace elastic {

/// Token ids of the synthetic vocabulary.
namespace tok {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kThink = 3;
inline constexpr std::int32_t kEndThink = 4;
inline constexpr std::int32_t kSep = 5;
inline constexpr std::int32_t kHop1 = 6;  // kHop1 + h - 1 for h hops, h in 1..4
inline constexpr std::int32_t kMaxHops = 4;
inline constexpr std::int32_t kSym0 = 10;
inline constexpr std::int32_t kSymbols = 14;
inline constexpr std::int32_t kVocab = kSym0 + kSymbols;

inline bool is_symbol(std::int32_t t) { return t >= kSym0 && t < kVocab; }
}  // namespace tok

/// One training or evaluation sequence. `prompt_len` counts the tokens the
/// model is given (through THINK for chains, through SEP for copies).
struct Episode {
  std::vector<std::int32_t> tokens;
  std::size_t prompt_len = 0;
  std::int32_t answer = tok::kPad;
  std::size_t hops = 0;

  std::vector<std::int32_t> prompt() const { return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(prompt_len)}; }
};

enum class Task { Chain, Copy };

inline Task parse_task(const std::string& s) {
  if (s == "chain") return Task::Chain;
  if (s == "copy") return Task::Copy;
  throw ConfigError("unknown task '" + s + "' (expected chain or copy)");
}

struct TaskOptions {
  Task task = Task::Chain;
  std::size_t pairs = 6;  // chain length of the hidden cycle
  std::size_t min_hops = 1;
  std::size_t max_hops = 4;
  std::size_t copy_len = 6;

  json to_json() const {
    return json{{"task", task == Task::Chain ? "chain" : "copy"},
                {"pairs", pairs},
                {"min_hops", min_hops},
                {"max_hops", max_hops},
                {"copy_len", copy_len}};
  }
  static TaskOptions from_json(const json& j) {
    detail::check_keys(j, {"task", "pairs", "min_hops", "max_hops", "copy_len"}, "task");
    TaskOptions o;
    std::string t = "chain";
    detail::read_opt(j, "task", t);
    o.task = parse_task(t);
    detail::read_opt(j, "pairs", o.pairs);
    detail::read_opt(j, "min_hops", o.min_hops);
    detail::read_opt(j, "max_hops", o.max_hops);
    detail::read_opt(j, "copy_len", o.copy_len);
    return o;
  }
};

/// Pointer chasing over a hidden cycle.
///
///   BOS (a b SEP)x pairs HOP_h x0 THINK r1 .. rh END_THINK rh EOS
///
/// The pairs list f(a) = b for a random cycle over `pairs` distinct symbols,
/// in shuffled order. r_i = f^i(x0) and the answer repeats r_h.
inline Episode chain_episode(Rng& rng, const TaskOptions& o) {
  if (o.pairs < 2 || o.pairs > static_cast<std::size_t>(tok::kSymbols)) throw ConfigError("chain: pairs out of range");
  if (o.min_hops < 1 || o.max_hops > static_cast<std::size_t>(tok::kMaxHops) || o.min_hops > o.max_hops)
    throw ConfigError("chain: hops out of range");
  std::vector<std::int32_t> pool(tok::kSymbols);
  for (std::int32_t i = 0; i < tok::kSymbols; ++i) pool[i] = tok::kSym0 + i;
  for (std::size_t i = 0; i < o.pairs; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  std::vector<std::int32_t> cyc(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(o.pairs));
  std::vector<std::size_t> order(o.pairs);
  for (std::size_t i = 0; i < o.pairs; ++i) order[i] = i;
  for (std::size_t i = o.pairs - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  auto next = [&](std::int32_t s) {
    for (std::size_t i = 0; i < o.pairs; ++i)
      if (cyc[i] == s) return cyc[(i + 1) % o.pairs];
    return tok::kPad;
  };
  Episode e;
  e.tokens.push_back(tok::kBos);
  for (std::size_t i : order) {
    e.tokens.push_back(cyc[i]);
    e.tokens.push_back(cyc[(i + 1) % o.pairs]);
    e.tokens.push_back(tok::kSep);
  }
  e.hops = o.min_hops + rng.below(o.max_hops - o.min_hops + 1);
  std::int32_t x = cyc[rng.below(o.pairs)];
  e.tokens.push_back(tok::kHop1 + static_cast<std::int32_t>(e.hops) - 1);
  e.tokens.push_back(x);
  e.tokens.push_back(tok::kThink);
  e.prompt_len = e.tokens.size();
  for (std::size_t h = 0; h < e.hops; ++h) e.tokens.push_back(x = next(x));
  e.answer = x;
  e.tokens.push_back(tok::kEndThink);
  e.tokens.push_back(x);
  e.tokens.push_back(tok::kEos);
  return e;
}

///   BOS x1 .. xn SEP x1 .. xn EOS
inline Episode copy_episode(Rng& rng, const TaskOptions& o) {
  if (o.copy_len == 0) throw ConfigError("copy: length must be positive");
  Episode e;
  e.tokens.push_back(tok::kBos);
  std::vector<std::int32_t> xs;
  for (std::size_t i = 0; i < o.copy_len; ++i) xs.push_back(tok::kSym0 + static_cast<std::int32_t>(rng.below(tok::kSymbols)));
  e.tokens.insert(e.tokens.end(), xs.begin(), xs.end());
  e.tokens.push_back(tok::kSep);
  e.prompt_len = e.tokens.size();
  e.tokens.insert(e.tokens.end(), xs.begin(), xs.end());
  e.tokens.push_back(tok::kEos);
  e.answer = xs.back();
  return e;
}

inline Episode make_episode(Rng& rng, const TaskOptions& o) {
  return o.task == Task::Chain ? chain_episode(rng, o) : copy_episode(rng, o);
}

/// Packed rows of whole episodes. Every episode is its own sequence in the
/// layout; any row tail is one PAD sequence.
struct Batch {
  TokenBatch input;
  std::vector<std::int32_t> target;     // next token within the episode, -1 elsewhere
  std::vector<std::uint8_t> supervised;  // 1 on targets past the prompt
  std::vector<Episode> episodes;

  std::size_t tokens() const { return input.tokens.size(); }
};

/// Rows indices carrying any target, the KD positions.
inline std::vector<std::int32_t> target_rows(const Batch& b) {
  std::vector<std::int32_t> r;
  for (std::size_t i = 0; i < b.target.size(); ++i)
    if (b.target[i] >= 0) r.push_back(static_cast<std::int32_t>(i));
  return r;
}

inline std::vector<std::int32_t> supervised_rows(const Batch& b) {
  std::vector<std::int32_t> r;
  for (std::size_t i = 0; i < b.target.size(); ++i)
    if (b.supervised[i]) r.push_back(static_cast<std::int32_t>(i));
  return r;
}

/// Draws episodes into `rows` rows of `seq_len` tokens each.
inline Batch make_batch(Rng& rng, const TaskOptions& o, std::size_t rows, std::size_t seq_len) {
  Batch b;
  std::vector<std::size_t> lengths;
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t used = 0;
    for (;;) {
      Rng probe = rng;
      Episode e = make_episode(probe, o);
      if (used + e.tokens.size() > seq_len) break;
      rng = probe;
      b.input.tokens.insert(b.input.tokens.end(), e.tokens.begin(), e.tokens.end());
      for (std::size_t i = 0; i < e.tokens.size(); ++i) {
        const bool has = i + 1 < e.tokens.size();
        b.target.push_back(has ? e.tokens[i + 1] : -1);
        b.supervised.push_back(has && i + 1 >= e.prompt_len);
      }
      lengths.push_back(e.tokens.size());
      used += e.tokens.size();
      b.episodes.push_back(std::move(e));
    }
    if (used == 0) throw ConfigError("seq_len " + std::to_string(seq_len) + " is shorter than one episode");
    if (used < seq_len) {
      b.input.tokens.insert(b.input.tokens.end(), seq_len - used, tok::kPad);
      b.target.insert(b.target.end(), seq_len - used, -1);
      b.supervised.insert(b.supervised.end(), seq_len - used, 0);
      lengths.push_back(seq_len - used);
    }
  }
  b.input.layout = SeqLayout::from_lengths(lengths);
  return b;
}

}  // namespace elastic
