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

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "elastic/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace elastic;
  CLI::App app{"Elastic hybrid model pipeline"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "run config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "output directory (overrides out_dir)");
  app.add_option("--seed", seed, "root seed (overrides seed)");

  auto* train = app.add_subcommand("train-parent", "train the parent model");
  auto* rank = app.add_subcommand("rank", "score component importance on calibration data");
  auto* elastify = app.add_subcommand("elastify", "train routers and the elastic student");
  auto* slice = app.add_subcommand("slice", "extract one budget as a standalone checkpoint");
  std::vector<std::string> slice_budgets;
  slice->add_option("--budget", slice_budgets, "budget label (repeatable)")->required();
  auto* eval = app.add_subcommand("eval", "evaluate every budget");
  auto* bc = app.add_subcommand("budget-control", "two-phase decoding sweep and cache analysis");
  auto* quant = app.add_subcommand("quantize", "post-training quantization and nested distillation");
  std::string format = "fp4";
  std::optional<std::size_t> qad_steps;
  quant->add_option("--format", format, "fp8 or fp4")->check(CLI::IsMember({"fp8", "fp4"}));
  quant->add_option("--qad-steps", qad_steps, "distillation steps (0 = PTQ only)");
  auto* report = app.add_subcommand("report", "verify artifacts and write report.md");

  CLI11_PARSE(app, argc, argv);

  try {
    json j = config_path.empty() ? json::object() : json::parse(read_file(config_path));
    if (!out_dir.empty()) j["out_dir"] = out_dir;
    if (seed) j["seed"] = *seed;
    RunConfig cfg = RunConfig::from_json(j);
    std::filesystem::create_directories(cfg.out_dir);
    Pipeline p(cfg, &std::cerr);
    json out;
    if (*train) out = p.train_parent();
    if (*rank) out = p.rank();
    if (*elastify) out = p.elastify();
    if (*slice)
      for (const auto& b : slice_budgets) out[b] = p.slice(b);
    if (*eval) out = p.eval();
    if (*bc) out = p.budget_control();
    if (*quant) out = p.quantize(parse_format(format), qad_steps.value_or(cfg.qad.steps));
    if (*report) {
      p.report();
      out = json{{"report", p.path("report.md").string()}};
    }
    std::cout << out.dump(2) << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
