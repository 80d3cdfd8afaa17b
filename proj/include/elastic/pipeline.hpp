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

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "elastic/budget_control.hpp"
#include "elastic/checkpoint.hpp"
#include "elastic/quantization.hpp"
#include "elastic/slicing.hpp"
#include "elastic/training.hpp"

namespace elastic {

struct BudgetControlOptions {
  std::vector<std::size_t> caps{0, 1, 2, 3, 4, 6};
  std::size_t episodes = 50;
  std::size_t max_answer_tokens = 4;
  std::size_t similarity_prompts = 16;
  bool kv_cache_fp8 = false;
  std::size_t threads = 1;

  json to_json() const {
    return json{{"caps", caps},
                {"episodes", episodes},
                {"max_answer_tokens", max_answer_tokens},
                {"similarity_prompts", similarity_prompts},
                {"kv_cache_fp8", kv_cache_fp8},
                {"threads", threads}};
  }
  static BudgetControlOptions from_json(const json& j) {
    detail::check_keys(j, {"caps", "episodes", "max_answer_tokens", "similarity_prompts", "kv_cache_fp8", "threads"},
                       "budget_control");
    BudgetControlOptions o;
    detail::read_opt(j, "caps", o.caps);
    detail::read_opt(j, "episodes", o.episodes);
    detail::read_opt(j, "max_answer_tokens", o.max_answer_tokens);
    detail::read_opt(j, "similarity_prompts", o.similarity_prompts);
    detail::read_opt(j, "kv_cache_fp8", o.kv_cache_fp8);
    detail::read_opt(j, "threads", o.threads);
    return o;
  }
};

/// Everything one pipeline run depends on. Unknown keys are rejected; absent
/// keys keep their defaults.
struct RunConfig {
  std::uint64_t seed = 1234;
  std::string out_dir = "runs/desk";
  ModelConfig model;
  TaskOptions task;
  ParentOptions parent;
  std::size_t calib_batches = 256;
  std::size_t calib_len = 64;
  ElasticOptions elastic;
  std::vector<std::pair<std::string, SubnetSizes>> budgets;
  BudgetControlOptions budget_control;
  QuantSpec quant;
  QadOptions qad;

  RunConfig() { resolve(); }

  /// Fills the config-dependent defaults.
  void resolve(bool router = true, bool sizes = true, bool keep = true) {
    if (router) elastic.router = RouterOptions::for_config(model);
    if (sizes) budgets = default_budget_sizes(model);
    if (keep) quant.keep_high_precision = QuantSpec::for_config(model, quant.format).keep_high_precision;
    elastic.model_lr = 1e-3;
  }

  void validate() const {
    model.validate();
    elastic.router.validate(model);
    elastic.schedule.validate(budgets.size());
    validate_quant_spec(model, quant);
    if (budgets.empty()) throw ConfigError("config: at least one budget required");
    for (const auto& [label, s] : budgets) {
      if (label.empty()) throw ConfigError("config: empty budget label");
      if (s.keep.size() != model.num_layers() || s.experts.size() != model.num_layers() ||
          s.ffn.size() != model.num_layers())
        throw ConfigError("config: budget '" + label + "' sizes do not match the layer pattern");
    }
    if (qad.alpha.size() != budgets.size()) throw ConfigError("config: qad.alpha needs one weight per budget");
    if (calib_batches == 0 || calib_len == 0) throw ConfigError("config: calibration set must be non-empty");
    if (budget_control.caps.empty()) throw ConfigError("config: budget_control.caps must be non-empty");
  }

  json elastic_json() const {
    return json{{"schedule", elastic.schedule.to_json()},
                {"router", elastic.router.to_json()},
                {"model_lr", elastic.model_lr},
                {"router_lr", elastic.router_lr},
                {"warmup", elastic.warmup},
                {"lambda", elastic.lambda},
                {"kd_temperature", elastic.kd_temperature},
                {"eval_batches", elastic.eval_batches}};
  }

  /// Everything except the output directory.
  json to_json() const {
    json b = json::array();
    for (const auto& [label, s] : budgets) b.push_back(json{{"label", label}, {"sizes", s.to_json()}});
    return json{{"seed", seed},
                {"model", model.to_json()},
                {"task", task.to_json()},
                {"parent", parent.to_json()},
                {"calibration", json{{"batches", calib_batches}, {"seq_len", calib_len}}},
                {"elastic", elastic_json()},
                {"budgets", b},
                {"budget_control", budget_control.to_json()},
                {"quant", quant.to_json()},
                {"qad", qad.to_json()}};
  }

  static RunConfig from_json(const json& j) {
    detail::check_keys(j, {"seed", "out_dir", "model", "task", "parent", "calibration", "elastic", "budgets",
                           "budget_control", "quant", "qad"},
                       "config");
    RunConfig r;
    detail::read_opt(j, "seed", r.seed);
    detail::read_opt(j, "out_dir", r.out_dir);
    if (j.contains("model")) r.model = ModelConfig::from_json(j.at("model"));
    if (j.contains("task")) r.task = TaskOptions::from_json(j.at("task"));
    if (j.contains("parent")) r.parent = ParentOptions::from_json(j.at("parent"));
    if (j.contains("calibration")) {
      const auto& c = j.at("calibration");
      detail::check_keys(c, {"batches", "seq_len"}, "calibration");
      detail::read_opt(c, "batches", r.calib_batches);
      detail::read_opt(c, "seq_len", r.calib_len);
    }
    if (j.contains("quant")) r.quant = QuantSpec::from_json(j.at("quant"));
    const bool keep_given = j.contains("quant") && j.at("quant").contains("keep_high_precision");
    const json* e = j.contains("elastic") ? &j.at("elastic") : nullptr;
    r.resolve(!(e && e->contains("router")), !j.contains("budgets"), !keep_given);
    if (e) {
      detail::check_keys(*e, {"schedule", "router", "model_lr", "router_lr", "warmup", "lambda", "kd_temperature",
                              "eval_batches"},
                         "elastic");
      if (e->contains("schedule")) r.elastic.schedule = CurriculumSchedule::from_json(e->at("schedule"));
      if (e->contains("router")) {
        RouterOptions base = RouterOptions::for_config(r.model);
        const auto& rj = e->at("router");
        detail::check_keys(rj, {"choices", "het_experts", "het_ffn", "hidden"}, "router");
        if (rj.contains("choices")) {
          const auto& ch = rj.at("choices");
          std::vector<const char*> names;
          for (Axis a : kAxes) names.push_back(axis_name(a));
          for (const auto& [k, v] : ch.items())
            if (std::find_if(names.begin(), names.end(), [&](const char* n) { return k == n; }) == names.end())
              throw ConfigError("router: unknown axis '" + k + "'");
          for (Axis a : kAxes)
            if (ch.contains(axis_name(a))) base.of(a) = ch.at(axis_name(a)).get<std::vector<std::size_t>>();
        }
        detail::read_opt(rj, "het_experts", base.het_experts);
        detail::read_opt(rj, "het_ffn", base.het_ffn);
        detail::read_opt(rj, "hidden", base.hidden);
        r.elastic.router = base;
      }
      detail::read_opt(*e, "model_lr", r.elastic.model_lr);
      detail::read_opt(*e, "router_lr", r.elastic.router_lr);
      detail::read_opt(*e, "warmup", r.elastic.warmup);
      detail::read_opt(*e, "lambda", r.elastic.lambda);
      detail::read_opt(*e, "kd_temperature", r.elastic.kd_temperature);
      detail::read_opt(*e, "eval_batches", r.elastic.eval_batches);
    }
    if (j.contains("budgets")) {
      r.budgets.clear();
      for (const auto& b : j.at("budgets")) {
        detail::check_keys(b, {"label", "sizes"}, "budget");
        r.budgets.emplace_back(b.at("label").get<std::string>(), SubnetSizes::from_json(b.at("sizes")));
      }
    }
    if (j.contains("budget_control")) r.budget_control = BudgetControlOptions::from_json(j.at("budget_control"));
    if (j.contains("qad")) {
      const auto& q = j.at("qad");
      detail::check_keys(q, {"steps", "lr", "rows", "len", "alpha", "eval_batches", "eval_rows", "eval_len",
                             "abort_factor"},
                         "qad");
      detail::read_opt(q, "steps", r.qad.steps);
      detail::read_opt(q, "lr", r.qad.lr);
      detail::read_opt(q, "rows", r.qad.rows);
      detail::read_opt(q, "len", r.qad.len);
      detail::read_opt(q, "alpha", r.qad.alpha);
      detail::read_opt(q, "eval_batches", r.qad.eval_batches);
      detail::read_opt(q, "eval_rows", r.qad.eval_rows);
      detail::read_opt(q, "eval_len", r.qad.eval_len);
      detail::read_opt(q, "abort_factor", r.qad.abort_factor);
    }
    r.validate();
    return r;
  }

  std::string hash() const { return hex64(fnv1a(to_json().dump())); }
  Rng root() const { return Rng(seed); }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

/// Stage outputs live in one directory; every artifact records the config hash.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg, std::ostream* log = nullptr) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    hash_ = cfg_.hash();
  }

  const RunConfig& config() const { return cfg_; }
  const std::string& hash() const { return hash_; }
  std::filesystem::path path(const std::string& name) const { return std::filesystem::path(cfg_.out_dir) / name; }

  json train_parent() {
    say("train-parent: " + std::to_string(cfg_.parent.steps) + " steps");
    std::ostringstream csv;
    const ParentResult r = elastic::train_parent(cfg_.model, cfg_.task, cfg_.parent, cfg_.root(), &csv);
    Checkpoint ck;
    ck.config = cfg_.model;
    ck.params = r.params;
    ck.metadata = meta("train-parent", json{{"initial_accuracy", r.initial_accuracy}, {"final_accuracy", r.final_accuracy}});
    save(ck, "parent.ckpt");
    write_csv("parent_loss.csv", csv.str());
    write_file_atomic(path("config.json"), cfg_.to_json().dump(2) + "\n");
    return ck.metadata;
  }

  json rank() {
    const Checkpoint parent = load("parent.ckpt", "train-parent");
    Rng r = cfg_.root().substream("data/calib");
    std::vector<TokenBatch> calib;
    for (std::size_t i = 0; i < cfg_.calib_batches; ++i) calib.push_back(make_batch(r, cfg_.task, 1, cfg_.calib_len).input);
    say("rank: " + std::to_string(calib.size()) + " calibration sequences");
    const ImportanceReport imp = score_importance(cfg_.model, parent.params, calib);
    const json out{{"config_hash", hash_}, {"importance", imp.to_json()}};
    write_file_atomic(path("importance.json"), out.dump() + "\n");
    return out;
  }

  ImportanceReport importance() const {
    const auto p = path("importance.json");
    if (!std::filesystem::exists(p)) throw ConfigError(missing(p, "rank"));
    const json j = json::parse(read_file(p));
    check_hash(j.at("config_hash").get<std::string>(), p, "rank");
    return ImportanceReport::from_json(j.at("importance"));
  }

  std::vector<BudgetSpec> budget_specs() const { return budgets_for(cfg_.model, cfg_.budgets); }

  json elastify() {
    const Checkpoint parent = load("parent.ckpt", "train-parent");
    const ImportanceReport imp = importance();
    const auto budgets = budget_specs();
    say("elastify: " + std::to_string(cfg_.elastic.schedule.total_steps()) + " steps, " +
        std::to_string(budgets.size()) + " budgets");
    std::ostringstream csv;
    const ElasticResult r = train_elastic(cfg_.model, parent.params, imp, budgets, cfg_.task, cfg_.elastic, cfg_.root(), &csv);
    Checkpoint ck;
    ck.config = cfg_.model;
    ck.params = r.student.clone();
    ck.importance = imp;
    ck.router = RouterState{cfg_.elastic.router, r.bank.params().clone()};
    json rows = json::array();
    std::ostringstream table;
    table << "label,target,selected,rel_error,initial_kd,final_kd,steps,sizes\n";
    for (std::size_t b = 0; b < budgets.size(); ++b) {
      ck.budgets.push_back({budgets[b].label, budgets[b].target, r.selected[b]});
      const double rel = (r.selected_active[b] - budgets[b].target) / budgets[b].target;
      rows.push_back(json{{"label", budgets[b].label},
                          {"target", budgets[b].target},
                          {"selected", r.selected_active[b]},
                          {"rel_error", rel},
                          {"initial_kd", r.initial_kd[b]},
                          {"final_kd", r.final_kd[b]},
                          {"steps", r.budget_counts[b]}});
      table << budgets[b].label << ',';
      csv_number(table, budgets[b].target) << ',';
      csv_number(table, r.selected_active[b]) << ',';
      csv_number(table, rel) << ',';
      csv_number(table, r.initial_kd[b]) << ',';
      csv_number(table, r.final_kd[b]) << ',' << r.budget_counts[b] << ",\"" << sizes_string(r.selected[b]) << "\"\n";
    }
    ck.metadata = meta("elastify", json{{"budgets", rows}, {"schedule", cfg_.elastic.schedule.to_json()}});
    save(ck, "elastic.ckpt");
    write_csv("elastic_loss.csv", csv.str());
    write_csv("budgets.csv", table.str());
    return ck.metadata;
  }

  Checkpoint elastic_checkpoint() const { return load("elastic.ckpt", "elastify"); }

  json slice(const std::string& label) {
    const Checkpoint ck = elastic_checkpoint();
    const BudgetEntry& b = ck.budget(label);
    const SlicePlan plan = make_slice_plan(ck.config, *ck.importance, b.sizes, label, checkpoint_hash(ck));
    SlicedModel s = slice_model(ck.config, ck.params, plan);
    Checkpoint out;
    out.config = s.config;
    out.params = std::move(s.params);
    out.metadata = meta("slice", json{{"budget", label}, {"plan", plan.to_json()}, {"active", cost_model(s.config).active}});
    save(out, "slice_" + label + ".ckpt");
    say("slice: " + label + " -> " + path("slice_" + label + ".ckpt").string());
    return out.metadata;
  }

  json eval() {
    const Checkpoint ck = elastic_checkpoint();
    const Checkpoint parent = load("parent.ckpt", "train-parent");
    const auto eval = heldout_batches(cfg_.root(), cfg_.task, cfg_.elastic.eval_batches, cfg_.elastic.schedule.stage1_rows,
                                      cfg_.elastic.schedule.stage1_len);
    const auto masks = frozen_masks(ck);
    const auto kd = masked_kd(ck.config, parent.params, ck.params, masks, eval);
    Rng pr = cfg_.root().substream("data/prompts");
    std::vector<std::vector<std::int32_t>> prompts;
    for (int i = 0; i < 32; ++i) prompts.push_back(make_episode(pr, cfg_.task).prompt());
    std::ostringstream table;
    table << "label,active,total,kd,accuracy,sliced_accuracy,slice_max_abs_diff\n";
    json rows = json::array();
    for (std::size_t b = 0; b < ck.budgets.size(); ++b) {
      const auto& e = ck.budgets[b];
      const SlicePlan plan = make_slice_plan(ck.config, *ck.importance, e.sizes, e.label);
      const SlicedModel s = slice_model(ck.config, ck.params, plan);
      const ParamCount pc = cost_model(ck.config, e.sizes);
      const double acc = answer_accuracy(ck.config, ck.params, eval, &masks[b]);
      const double sacc = answer_accuracy(s.config, s.params, eval);
      const double err = slice_equivalence_error(ck.config, ck.params, plan, prompts);
      rows.push_back(json{{"label", e.label}, {"active", pc.active}, {"kd", kd[b]}, {"accuracy", acc},
                          {"sliced_accuracy", sacc}, {"slice_error", err}});
      table << e.label << ',';
      csv_number(table, pc.active) << ',';
      csv_number(table, pc.total) << ',';
      csv_number(table, kd[b]) << ',';
      csv_number(table, acc) << ',';
      csv_number(table, sacc) << ',';
      csv_number(table, err) << '\n';
    }
    write_csv("eval.csv", table.str());
    say("eval: " + std::to_string(rows.size()) + " budgets");
    return rows;
  }

  std::vector<Episode> episodes(std::size_t n, const std::string& stream) const {
    Rng r = cfg_.root().substream(stream);
    std::vector<Episode> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_episode(r, cfg_.task));
    return out;
  }

  json budget_control() {
    const Checkpoint ck = elastic_checkpoint();
    const ModelFamily fam = make_family(ck);
    const auto& o = cfg_.budget_control;
    DecodeOptions d;
    d.max_answer_tokens = o.max_answer_tokens;
    d.kv_cache_fp8 = o.kv_cache_fp8;
    const auto eps = episodes(o.episodes, "data/budget");
    say("budget-control: " + std::to_string(fam.models.size() * fam.models.size() * o.caps.size()) + " sweep points");
    const auto pts = pareto_sweep(fam, o.caps, eps, CachePolicy::Recompute, d, o.threads);
    std::ostringstream sweep, lengths;
    write_sweep_csv(sweep, pts);
    lengths << "think,answer,cap,avg_prompt,avg_reason,avg_answer\n";
    for (const auto& p : pts) {
      lengths << p.think_model << ',' << p.answer_model << ',' << p.cap << ',';
      csv_number(lengths, p.prompt_len) << ',';
      csv_number(lengths, p.reason_len) << ',';
      csv_number(lengths, p.answer_len) << '\n';
    }
    std::ostringstream wall;
    wall << "think,answer,cap,wall_seconds\n";
    for (const auto& p : pts) {
      wall << p.think_model << ',' << p.answer_model << ',' << p.cap << ',';
      csv_number(wall, p.wall_seconds) << '\n';
    }
    write_csv("pareto.csv", sweep.str());
    write_csv("wall_time.csv", wall.str());
    write_csv("length_stats.csv", lengths.str());

    const std::string large = fam.models.front().label;
    std::vector<std::vector<std::int32_t>> prompts;
    for (const auto& e : episodes(o.similarity_prompts, "data/similarity")) prompts.push_back(e.prompt());
    std::ostringstream sim;
    sim << "small,large,key,value,conv,ssm\n";
    json sims = json::array();
    for (const auto& m : fam.models) {
      const auto& big = fam.models.front().plan;
      if (!plan_is_subset(m.plan, big) && !plan_is_subset(big, m.plan)) continue;
      const CacheSimilarity s = cache_similarity(fam, m.label, large, prompts);
      sim << m.label << ',' << large << ',';
      csv_number(sim, s.key) << ',';
      csv_number(sim, s.value) << ',';
      csv_number(sim, s.conv) << ',';
      csv_number(sim, s.ssm) << '\n';
      sims.push_back(json{{"small", m.label}, {"large", large}, {"key", s.key}, {"value", s.value}, {"conv", s.conv},
                          {"ssm", s.ssm}});
    }
    write_csv("cache_similarity.csv", sim.str());

    std::ostringstream tr;
    tr << "think,answer,cap,recompute_accuracy,transplant_accuracy\n";
    json trs = json::array();
    const std::size_t cap = *std::max_element(o.caps.begin(), o.caps.end());
    for (const auto& t : fam.models) {
      for (const auto& a : fam.models) {
        const auto rec = summarize({cap, t.label, a.label, CachePolicy::Recompute}, fam,
                                   run_many(eps, {cap, t.label, a.label, CachePolicy::Recompute}, fam, d, o.threads));
        // Caches only transplant between nested plans; other pairs leave the cell empty.
        std::optional<double> tra;
        if (plan_is_subset(t.plan, a.plan) || plan_is_subset(a.plan, t.plan)) {
          tra = summarize({cap, t.label, a.label, CachePolicy::Transplant}, fam,
                          run_many(eps, {cap, t.label, a.label, CachePolicy::Transplant}, fam, d, o.threads))
                    .accuracy;
        }
        tr << t.label << ',' << a.label << ',' << cap << ',';
        csv_number(tr, rec.accuracy) << ',';
        if (tra) csv_number(tr, *tra);
        tr << '\n';
        trs.push_back(json{{"think", t.label}, {"answer", a.label}, {"recompute", rec.accuracy},
                           {"transplant", tra ? json(*tra) : json(nullptr)}});
      }
    }
    write_csv("transplant.csv", tr.str());
    json pj = json::array();
    for (const auto& p : pts)
      pj.push_back(json{{"scenario", p.scenario}, {"think", p.think_model}, {"answer", p.answer_model}, {"cap", p.cap},
                        {"accuracy", p.accuracy}, {"flops", p.flops}, {"max_reason_len", p.max_reason_len},
                        {"frontier", p.frontier}});
    return json{{"sweep", pj}, {"similarity", sims}, {"transplant", trs}};
  }

  json quantize(QuantFormat format, std::size_t qad_steps) {
    const Checkpoint ck = elastic_checkpoint();
    QuantSpec spec = cfg_.quant;
    spec.format = format;
    const Checkpoint q = ptq(ck, spec);
    const auto masks = frozen_masks(ck);
    std::vector<std::string> labels;
    for (const auto& b : ck.budgets) labels.push_back(b.label);
    QadOptions qo = cfg_.qad;
    qo.steps = qad_steps;
    say(std::string("quantize: ") + format_name(format) + ", " + std::to_string(qad_steps) + " distillation steps");
    std::ostringstream csv;
    const QadResult r = nested_qad(ck.config, ck.params, masks, labels, spec, cfg_.task, qo, cfg_.root(), &csv);
    Checkpoint out = q;
    out.params = r.quantized;
    Rng pr = cfg_.root().substream("data/prompts");
    std::vector<std::vector<std::int32_t>> prompts;
    for (int i = 0; i < 32; ++i) prompts.push_back(make_episode(pr, cfg_.task).prompt());
    std::ostringstream table;
    table << "label,ptq_kd,qad_kd,slice_max_abs_diff\n";
    json rows = json::array();
    for (std::size_t b = 0; b < labels.size(); ++b) {
      const SlicePlan plan = make_slice_plan(out.config, *out.importance, out.budgets[b].sizes, labels[b]);
      const double err = slice_equivalence_error(out.config, out.params, plan, prompts);
      table << labels[b] << ',';
      csv_number(table, r.initial_kd[b]) << ',';
      csv_number(table, r.final_kd[b]) << ',';
      csv_number(table, err) << '\n';
      rows.push_back(json{{"label", labels[b]}, {"ptq_kd", r.initial_kd[b]}, {"qad_kd", r.final_kd[b]}, {"slice_error", err}});
    }
    out.metadata = meta("quantize", json{{"quant", spec.to_json()}, {"qad", qo.to_json()}, {"budgets", rows}});
    const std::string tag = format_name(format);
    save(out, "quant_" + tag + ".ckpt");
    write_csv("qad_loss_" + tag + ".csv", csv.str());
    write_csv("quant_" + tag + ".csv", table.str());
    return out.metadata;
  }

  /// Checks every artifact against this config and writes report.md.
  std::string report() {
    std::ostringstream md;
    md << "# Run report\n\nconfig hash `" << hash_ << "`\n\n";
    std::size_t found = 0;
    for (const auto& entry : std::filesystem::directory_iterator(cfg_.out_dir)) {
      const auto p = entry.path();
      const std::string ext = p.extension().string();
      if (ext == ".csv") {
        const std::string s = read_file(p);
        const std::string first = s.substr(0, s.find('\n'));
        check_hash(first.rfind("# config ", 0) == 0 ? first.substr(9) : "", p, "the stage that wrote it");
        ++found;
      } else if (ext == ".ckpt") {
        const Checkpoint ck = load_checkpoint(p);
        check_hash(ck.metadata.value("run_hash", ""), p, ck.metadata.value("stage", "the stage that wrote it"));
        ++found;
      } else if (p.filename() == "importance.json") {
        check_hash(json::parse(read_file(p)).value("config_hash", ""), p, "rank");
        ++found;
      }
    }
    if (!found) throw ConfigError("report: no artifacts in " + cfg_.out_dir + "; run `train-parent` first");
    for (const char* name : {"budgets.csv", "eval.csv", "quant_fp4.csv", "quant_fp8.csv", "cache_similarity.csv",
                             "transplant.csv"}) {
      const auto p = path(name);
      if (!std::filesystem::exists(p)) continue;
      md << "## " << name << "\n\n" << markdown_table(read_file(p)) << "\n";
    }
    const auto pareto = path("pareto.csv");
    if (std::filesystem::exists(pareto)) {
      std::istringstream is(read_file(pareto));
      std::string line, frontier;
      std::getline(is, line);
      std::getline(is, line);
      frontier = line + "\n";
      while (std::getline(is, line))
        if (!line.empty() && line.back() == '1') frontier += line + "\n";
      md << "## pareto.csv (frontier)\n\n" << markdown_table("# config " + hash_ + "\n" + frontier) << "\n";
    }
    write_file_atomic(path("report.md"), md.str());
    say("report: " + std::to_string(found) + " artifacts verified");
    return md.str();
  }

 private:
  static std::string sizes_string(const SubnetSizes& s) {
    std::ostringstream os;
    os << "d_e=" << s.d_e << " m_h=" << s.m_h << " m_d=" << s.m_d << " n_h=" << s.n_h << " e=";
    for (std::size_t i = 0; i < s.experts.size(); ++i)
      if (s.experts[i]) os << s.experts[i] << '/';
    os << " f=";
    for (std::size_t i = 0; i < s.ffn.size(); ++i)
      if (s.ffn[i]) os << s.ffn[i] << '/';
    return os.str();
  }

  static std::string markdown_table(const std::string& csv) {
    std::istringstream is(csv);
    std::string line, out;
    std::size_t row = 0;
    while (std::getline(is, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::string cells;
      std::size_t n = 0;
      bool quoted = false;
      std::string cell;
      for (char ch : line + ",") {
        if (ch == '"') {
          quoted = !quoted;
        } else if (ch == ',' && !quoted) {
          cells += "| " + cell + " ";
          cell.clear();
          ++n;
        } else {
          cell += ch;
        }
      }
      out += cells + "|\n";
      if (row++ == 0) {
        for (std::size_t i = 0; i < n; ++i) out += "|---";
        out += "|\n";
      }
    }
    return out;
  }

  json meta(const std::string& stage, json extra) const {
    extra["stage"] = stage;
    extra["run_hash"] = hash_;
    extra["seed"] = cfg_.seed;
    return extra;
  }

  std::string missing(const std::filesystem::path& p, const std::string& producer) const {
    return "missing " + p.string() + "; run `" + producer + "` first";
  }

  void check_hash(const std::string& got, const std::filesystem::path& p, const std::string& producer) const {
    if (got != hash_) {
      throw ConfigError(p.string() + " was produced by config " + (got.empty() ? "<none>" : got) +
                        ", current config is " + hash_ + "; rerun `" + producer + "`");
    }
  }

  Checkpoint load(const std::string& name, const std::string& producer) const {
    const auto p = path(name);
    if (!std::filesystem::exists(p)) throw ConfigError(missing(p, producer));
    Checkpoint ck = load_checkpoint(p);
    check_hash(ck.metadata.value("run_hash", ""), p, producer);
    return ck;
  }

  void save(const Checkpoint& ck, const std::string& name) const { save_checkpoint(path(name), ck); }

  void write_csv(const std::string& name, const std::string& body) const {
    write_file_atomic(path(name), "# config " + hash_ + "\n" + body);
  }

  void say(const std::string& s) const {
    if (log_) *log_ << s << std::endl;
  }

  RunConfig cfg_;
  std::ostream* log_;
  std::string hash_;
};

}  // namespace elastic
