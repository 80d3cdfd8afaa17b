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
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "elastic/config.hpp"
#include "elastic/cost_model.hpp"
#include "elastic/data.hpp"
#include "elastic/errors.hpp"
#include "elastic/importance.hpp"
#include "elastic/losses.hpp"
#include "elastic/model.hpp"
#include "elastic/optim.hpp"
#include "elastic/params.hpp"
#include "elastic/router.hpp"

namespace elastic {

/// Two-stage budget curriculum: uniform sampling on short rows, then
/// weighted sampling on long rows.
struct CurriculumSchedule {
  std::size_t stage1_steps = 2000;
  std::size_t stage1_rows = 4;
  std::size_t stage1_len = 64;
  std::size_t stage2_steps = 1000;
  std::size_t stage2_rows = 1;
  std::size_t stage2_len = 256;
  std::vector<double> alpha{0.5, 0.3, 0.2};

  std::size_t total_steps() const { return stage1_steps + stage2_steps; }
  int stage_of(std::size_t step) const { return step < stage1_steps ? 1 : 2; }
  std::size_t rows(int stage) const { return stage == 1 ? stage1_rows : stage2_rows; }
  std::size_t len(int stage) const { return stage == 1 ? stage1_len : stage2_len; }

  void validate(std::size_t n_budgets) const {
    if (alpha.size() != n_budgets) throw ConfigError("curriculum: one alpha per budget required");
    double s = 0.0;
    for (double a : alpha) {
      if (!(a >= 0.0)) throw ConfigError("curriculum: alpha must be non-negative");
      s += a;
    }
    if (std::fabs(s - 1.0) > 1e-9) throw ConfigError("curriculum: alpha must sum to 1");
    if (stage2_steps && stage2_len <= stage1_len) throw ConfigError("curriculum: stage 2 rows must be longer");
    if (!stage1_rows || !stage1_len || (stage2_steps && (!stage2_rows || !stage2_len)))
      throw ConfigError("curriculum: empty batch shape");
  }

  json to_json() const {
    return json{{"stage1_steps", stage1_steps}, {"stage1_rows", stage1_rows}, {"stage1_len", stage1_len},
                {"stage2_steps", stage2_steps}, {"stage2_rows", stage2_rows}, {"stage2_len", stage2_len},
                {"alpha", alpha}};
  }

  static CurriculumSchedule from_json(const json& j) {
    detail::check_keys(j, {"stage1_steps", "stage1_rows", "stage1_len", "stage2_steps", "stage2_rows", "stage2_len", "alpha"},
                       "curriculum");
    CurriculumSchedule s;
    detail::read_opt(j, "stage1_steps", s.stage1_steps);
    detail::read_opt(j, "stage1_rows", s.stage1_rows);
    detail::read_opt(j, "stage1_len", s.stage1_len);
    detail::read_opt(j, "stage2_steps", s.stage2_steps);
    detail::read_opt(j, "stage2_rows", s.stage2_rows);
    detail::read_opt(j, "stage2_len", s.stage2_len);
    detail::read_opt(j, "alpha", s.alpha);
    return s;
  }

  bool operator==(const CurriculumSchedule&) const = default;
};

/// Budget index for one step: uniform in stage 1, alpha-weighted in stage 2.
inline std::size_t sample_budget(const CurriculumSchedule& s, int stage, std::size_t n_budgets, Rng& rng) {
  if (n_budgets == 0) throw ContractError("sample_budget: no budgets");
  if (stage == 1) return static_cast<std::size_t>(rng.below(n_budgets));
  if (s.alpha.size() != n_budgets) throw ConfigError("curriculum: one alpha per budget required");
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t b = 0; b < n_budgets; ++b) {
    if (s.alpha[b] <= 0.0) continue;
    last = b;
    acc += s.alpha[b];
    if (u < acc) return b;
  }
  return last;
}

/// Linear warmup to `lr` over `warmup` steps.
inline float warmup_lr(double lr, std::size_t step, std::size_t warmup) {
  if (warmup == 0) return static_cast<float>(lr);
  return static_cast<float>(lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(warmup)));
}

inline std::ostream& csv_number(std::ostream& os, double v) {
  return os << std::setprecision(9) << v;
}

// ---------------------------------------------------------------------------
// Parent.

struct ParentOptions {
  std::size_t steps = 3000;
  std::size_t rows = 4;
  std::size_t seq_len = 64;
  double lr = 3e-3;
  std::size_t warmup = 60;
  double aux_coef = 0.01;
  std::size_t eval_batches = 8;

  json to_json() const {
    return json{{"steps", steps}, {"rows", rows},         {"seq_len", seq_len},        {"lr", lr},
                {"warmup", warmup}, {"aux_coef", aux_coef}, {"eval_batches", eval_batches}};
  }
  static ParentOptions from_json(const json& j) {
    detail::check_keys(j, {"steps", "rows", "seq_len", "lr", "warmup", "aux_coef", "eval_batches"}, "parent");
    ParentOptions o;
    detail::read_opt(j, "steps", o.steps);
    detail::read_opt(j, "rows", o.rows);
    detail::read_opt(j, "seq_len", o.seq_len);
    detail::read_opt(j, "lr", o.lr);
    detail::read_opt(j, "warmup", o.warmup);
    detail::read_opt(j, "aux_coef", o.aux_coef);
    detail::read_opt(j, "eval_batches", o.eval_batches);
    return o;
  }
};

/// Held-out batches drawn from their own substream.
inline std::vector<Batch> heldout_batches(const Rng& root, const TaskOptions& task, std::size_t n, std::size_t rows,
                                          std::size_t len) {
  Rng r = root.substream("data/heldout");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_batch(r, task, rows, len));
  return out;
}

/// Teacher-forced argmax accuracy on the supervised positions.
inline double answer_accuracy(const ModelConfig& c, const ParamStore& p, const std::vector<Batch>& batches,
                              const MaskSet* masks = nullptr) {
  NoGradGuard ng;
  std::size_t hit = 0, count = 0;
  for (const auto& b : batches) {
    const Tensor l = logits(c, p, b.input.tokens, masks, &b.input.layout);
    std::vector<std::int32_t> t(b.target.size(), -1);
    std::size_t k = 0;
    for (std::size_t i = 0; i < t.size(); ++i)
      if (b.supervised[i]) {
        t[i] = b.target[i];
        ++k;
      }
    hit += static_cast<std::size_t>(std::llround(token_accuracy(l, t) * static_cast<double>(k)));
    count += k;
  }
  return count ? static_cast<double>(hit) / static_cast<double>(count) : 0.0;
}

struct ParentResult {
  ParamStore params;
  double initial_accuracy = 0.0;
  double final_accuracy = 0.0;
};

/// Trains the dense parent on the supervised part of the task with cross
/// entropy plus the MoE balance term. Writes "step,loss,aux" rows to `csv`.
inline ParentResult train_parent(const ModelConfig& c, const TaskOptions& task, const ParentOptions& o, const Rng& root,
                                 std::ostream* csv = nullptr) {
  c.validate();
  ParentResult r;
  r.params = init_params(c, root.substream("init"));
  const auto eval = heldout_batches(root, task, o.eval_batches, o.rows, o.seq_len);
  r.initial_accuracy = answer_accuracy(c, r.params, eval);
  Adam opt(r.params.items());
  Rng data = root.substream("data/parent");
  if (csv) *csv << "step,loss,aux\n";
  for (std::size_t step = 0; step < o.steps; ++step) {
    const Batch b = make_batch(data, task, o.rows, o.seq_len);
    std::vector<std::int32_t> t(b.target.size(), -1);
    for (std::size_t i = 0; i < t.size(); ++i)
      if (b.supervised[i]) t[i] = b.target[i];
    ForwardOptions fo;
    fo.layout = &b.input.layout;
    fo.aux_loss = o.aux_coef > 0.0;
    const ForwardOutput out = forward(c, r.params, b.input.tokens, fo);
    Tensor loss = cross_entropy(out.logits, t);
    const double ce = loss.item();
    double aux = 0.0;
    if (out.aux_loss.defined()) {
      aux = out.aux_loss.item();
      loss = add(loss, scale(out.aux_loss, static_cast<float>(o.aux_coef)));
    }
    if (!std::isfinite(loss.item())) throw NumericError("parent training: non-finite loss at step " + std::to_string(step));
    opt.zero_grad();
    backward(loss);
    opt.step(warmup_lr(o.lr, step, o.warmup));
    if (csv) {
      *csv << step << ',';
      csv_number(*csv, ce) << ',';
      csv_number(*csv, aux) << '\n';
    }
  }
  r.final_accuracy = answer_accuracy(c, r.params, eval);
  return r;
}

// ---------------------------------------------------------------------------
// Elastic.

struct ElasticOptions {
  CurriculumSchedule schedule;
  RouterOptions router;
  double model_lr = 1e-4;
  double router_lr = 1e-2;
  std::size_t warmup = 60;
  double lambda = 1.0;
  double kd_temperature = 1.0;
  MaskMode mask_mode = MaskMode::Soft;
  std::size_t eval_batches = 4;
  // When false the KD term updates only the model and the router loss only
  // the routers.
  bool kd_to_router = false;
};

/// Same mask values with no graph history.
inline MaskSet detach_masks(const MaskSet& m) {
  MaskSet out = m;
  auto d = [](Tensor& t) {
    if (t.defined()) t = t.detach();
  };
  d(out.emb);
  for (auto* v : {&out.mamba_head, &out.mamba_channel, &out.attn_head, &out.ffn, &out.expert})
    for (auto& t : *v) d(t);
  return out;
}

/// Per-budget KD of the student under eval-mode router masks.
inline std::vector<double> eval_kd(const ModelConfig& c, const ParamStore& teacher, const ParamStore& student,
                                   const RouterBank& bank, const MaskBank& mb, const std::vector<BudgetSpec>& budgets,
                                   const std::vector<Batch>& batches, double temperature = 1.0) {
  NoGradGuard ng;
  std::vector<double> out;
  for (const auto& b : budgets) {
    const Selection s = route(bank, mb, b.index, {1.0, 1.0}, MaskMode::Eval, nullptr);
    double acc = 0.0;
    for (const auto& batch : batches) {
      const auto rows = target_rows(batch);
      const Tensor t = logits(c, teacher, batch.input.tokens, nullptr, &batch.input.layout);
      const Tensor st = logits(c, student, batch.input.tokens, &s.masks, &batch.input.layout);
      acc += kd_loss(t, st, rows, temperature).item();
    }
    out.push_back(acc / static_cast<double>(batches.size()));
  }
  return out;
}

struct ElasticResult {
  ParamStore student;
  RouterBank bank;
  std::vector<double> initial_kd;
  std::vector<double> final_kd;
  std::vector<SubnetSizes> selected;
  std::vector<double> selected_active;
  std::vector<std::size_t> budget_counts;
};

/// Joint training of the student and the routers against a frozen teacher.
/// One budget per step; soft masks from the Gumbel routers; both parameter
/// groups warm up linearly. Writes "step,stage,budget,kd,router,total".
inline ElasticResult train_elastic(const ModelConfig& c, const ParamStore& teacher, const ImportanceReport& imp,
                                   const std::vector<BudgetSpec>& budgets, const TaskOptions& task,
                                   const ElasticOptions& o, const Rng& root, std::ostream* csv = nullptr) {
  c.validate();
  o.schedule.validate(budgets.size());
  for (std::size_t i = 0; i < budgets.size(); ++i)
    if (budgets[i].index != i) throw ConfigError("budgets must be listed in index order");
  ElasticResult r;
  r.student = teacher.clone(true);
  r.bank = RouterBank(c, o.router, budgets.size(), root.substream("router"));
  const MaskBank mb(c, o.router, imp);
  const auto eval = heldout_batches(root, task, o.eval_batches, o.schedule.stage1_rows, o.schedule.stage1_len);
  r.initial_kd = eval_kd(c, teacher, r.student, r.bank, mb, budgets, eval, o.kd_temperature);
  r.budget_counts.assign(budgets.size(), 0);

  Adam model_opt(r.student.items());
  Adam router_opt(r.bank.params().items());
  Rng data = root.substream("data/elastic");
  Rng pick = root.substream("budget");
  Rng gumbel = root.substream("gumbel");
  const std::size_t total = o.schedule.total_steps();
  if (csv) *csv << "step,stage,budget,kd,router,total\n";
  for (std::size_t step = 0; step < total; ++step) {
    const int stage = o.schedule.stage_of(step);
    const std::size_t bi = sample_budget(o.schedule, stage, budgets.size(), pick);
    ++r.budget_counts[bi];
    const Batch b = make_batch(data, task, o.schedule.rows(stage), o.schedule.len(stage));
    const auto rows = target_rows(b);
    Tensor t_logits;
    {
      NoGradGuard ng;
      t_logits = logits(c, teacher, b.input.tokens, nullptr, &b.input.layout);
    }
    const Selection s = route(r.bank, mb, bi, annealed(step, total), o.mask_mode, &gumbel);
    const MaskSet masks = o.kd_to_router ? s.masks : detach_masks(s.masks);
    const Tensor s_logits = logits(c, r.student, b.input.tokens, &masks, &b.input.layout);
    const Tensor kd = kd_loss(t_logits, s_logits, rows, o.kd_temperature);
    const Tensor rl = router_loss(s, budgets[bi]);
    const Tensor loss = add(kd, scale(rl, static_cast<float>(o.lambda)));
    if (!std::isfinite(loss.item())) {
      throw NumericError("elastic training: non-finite loss at step " + std::to_string(step) + " (budget " +
                         budgets[bi].label + ", kd " + std::to_string(kd.item()) + ", router " +
                         std::to_string(rl.item()) + ")");
    }
    model_opt.zero_grad();
    router_opt.zero_grad();
    backward(loss);
    model_opt.step(warmup_lr(o.model_lr, step, o.warmup));
    router_opt.step(warmup_lr(o.router_lr, step, o.warmup));
    if (csv) {
      *csv << step << ',' << stage << ',' << budgets[bi].label << ',';
      csv_number(*csv, kd.item()) << ',';
      csv_number(*csv, rl.item()) << ',';
      csv_number(*csv, loss.item()) << '\n';
    }
  }
  r.final_kd = eval_kd(c, teacher, r.student, r.bank, mb, budgets, eval, o.kd_temperature);
  for (const auto& b : budgets) {
    const Selection s = route(r.bank, mb, b.index, {1.0, 1.0}, MaskMode::Eval, nullptr);
    r.selected.push_back(s.sizes);
    r.selected_active.push_back(cost_model(c, s.sizes).active);
  }
  return r;
}

/// Sizes of the standard trio: the full model; three-quarter embedding,
/// Mamba channel and FFN widths; and half of every width with three
/// quarters of the experts.
inline std::vector<std::pair<std::string, SubnetSizes>> default_budget_sizes(const ModelConfig& c) {
  auto q = [](std::size_t v, std::size_t num, std::size_t den) { return std::max<std::size_t>(1, v * num / den); };
  const std::size_t f = c.ffn_dim, e = c.experts;
  return {{"full", SubnetSizes::full(c)},
          {"mid", SubnetSizes::uniform(c, q(c.d_e, 3, 4), c.m_h, q(c.m_d, 3, 4), c.n_h, e, q(f, 3, 4))},
          {"small", SubnetSizes::uniform(c, q(c.d_e, 1, 2), q(c.m_h, 1, 2), q(c.m_d, 1, 2), q(c.n_h, 1, 2),
                                         std::max(c.topk, q(e, 3, 4)), q(f, 1, 2))}};
}

inline std::vector<BudgetSpec> budgets_for(const ModelConfig& c,
                                           const std::vector<std::pair<std::string, SubnetSizes>>& sizes) {
  std::vector<BudgetSpec> out;
  for (std::size_t i = 0; i < sizes.size(); ++i) out.push_back({i, cost_model(c, sizes[i].second).active, sizes[i].first});
  return out;
}

}  // namespace elastic
