// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// pemma: desk-scale CT->CT+PET adaptation experiments on synthetic phantoms.
//
//   pemma gen-data
//   pemma pretrain
//   pemma adapt --method {early|late|pemma}
//   pemma finetune --task {task1|task2} [--modalities C|CP] [--lora-only] [--method ...]
//   pemma infer --modalities {CP|C|P} --sample <id> [--checkpoint <dir>] [--out-pred <file>]
//   pemma report {grid|params|forgetting}
//   pemma gradcheck
//
// All subcommands honor --config <json>, repeated --set key=value overrides,
// --out <dir>, and --seed. PEMMA_LOG={error,info,debug} controls logging.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "pemma/experiment.hpp"

namespace {

pemma::ExperimentConfig build_config(const std::string& config_path, const std::vector<std::string>& sets,
                                     const std::string& out_dir, uint64_t seed, bool seed_given) {
  pemma::ExperimentConfig cfg =
      config_path.empty() ? pemma::default_experiment_config() : pemma::load_experiment_config(config_path);
  if (seed_given) cfg.seed = seed;
  for (const std::string& s : sets) pemma::apply_override(cfg, s);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  return cfg;
}

void print_dice(const pemma::DiceResult& d) {
  std::cout << "dice tumor " << d.tumor << "  lymph " << d.lymph << "  avg " << d.avg << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PEMMA desk-scale lab: parameter-efficient CT -> CT+PET adaptation on synthetic phantoms"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
  app.add_option("--config", config_path, "experiment config JSON");
  app.add_option("--set", sets, "override config entry, e.g. --set adapt.max_steps=1000")->take_all();
  app.add_option("--out", out_dir, "output directory (default: out)");
  app.add_option("--seed", seed, "top-level seed")->each([&](const std::string&) { seed_given = true; });

  auto* cmd_gen = app.add_subcommand("gen-data", "generate the synthetic dataset and manifest");
  auto* cmd_pretrain = app.add_subcommand("pretrain", "train the uni-modal CT model on the pretrain split");

  std::string adapt_method = "pemma";
  auto* cmd_adapt = app.add_subcommand("adapt", "multi-modal adaptation on the adapt split");
  cmd_adapt->add_option("--method", adapt_method, "early | late | pemma")
      ->check(CLI::IsMember({"early", "late", "pemma"}));

  std::string ft_task, ft_mods = "CP", ft_method = "pemma";
  bool lora_only = false;
  auto* cmd_finetune = app.add_subcommand("finetune", "continual-learning stage on task1/task2");
  cmd_finetune->add_option("--task", ft_task, "task1 | task2")
      ->required()
      ->check(CLI::IsMember({"task1", "task2"}));
  cmd_finetune->add_option("--modalities", ft_mods, "C | CP")->check(CLI::IsMember({"C", "CP"}));
  cmd_finetune->add_flag("--lora-only", lora_only, "update only the LoRA adapters");
  cmd_finetune->add_option("--method", ft_method, "early | late | pemma")
      ->check(CLI::IsMember({"early", "late", "pemma"}));

  std::string infer_mods = "CP", infer_ckpt, infer_sample, infer_out;
  auto* cmd_infer = app.add_subcommand("infer", "segment one dataset sample");
  cmd_infer->add_option("--modalities", infer_mods, "CP | C | P")->check(CLI::IsMember({"CP", "C", "P"}));
  cmd_infer->add_option("--checkpoint", infer_ckpt, "model checkpoint dir (default: latest pemma)");
  cmd_infer->add_option("--sample", infer_sample, "sample id from the dataset manifest")->required();
  cmd_infer->add_option("--out-pred", infer_out, "write the predicted label map here (PVOL u8)");

  std::string report_kind;
  auto* cmd_report = app.add_subcommand("report", "emit grid / params / forgetting reports");
  cmd_report->add_option("kind", report_kind, "grid | params | forgetting")
      ->required()
      ->check(CLI::IsMember({"grid", "params", "forgetting"}));

  auto* cmd_gradcheck = app.add_subcommand("gradcheck", "finite-difference checks for every layer type");

  // global options (--config/--set/--out/--seed) may appear after the subcommand
  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; })) {
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  try {
    pemma::ExperimentConfig cfg = build_config(config_path, sets, out_dir, seed, seed_given);

    if (cmd_gen->parsed()) {
      pemma::run_gen_data(cfg);
      std::cout << "dataset ready under " << cfg.data_dir() << "\n";
    } else if (cmd_pretrain->parsed()) {
      const pemma::TrainReport r = pemma::run_pretrain(cfg);
      std::cout << "pretrain best step " << r.best_step << " avg val dice " << r.best_val.avg << " -> "
                << r.checkpoint_dir << "\n";
    } else if (cmd_adapt->parsed()) {
      cfg.adaptation.method = adapt_method;
      const pemma::TrainReport r = pemma::run_adapt(cfg);
      std::cout << "adapt (" << adapt_method << ") best step " << r.best_step << " avg val dice "
                << r.best_val.avg << " -> " << r.checkpoint_dir << "\n";
    } else if (cmd_finetune->parsed()) {
      const pemma::TrainReport r =
          pemma::run_finetune(cfg, ft_task, pemma::parse_modalities(ft_mods), lora_only, ft_method);
      std::cout << "finetune " << ft_task << " (" << ft_method << ", " << ft_mods
                << (lora_only ? ", lora-only" : "") << ") best step " << r.best_step << " avg val dice "
                << r.best_val.avg << "\n";
    } else if (cmd_infer->parsed()) {
      pemma::InferRequest req;
      req.checkpoint = infer_ckpt;
      req.sample_id = infer_sample;
      req.modalities = pemma::parse_modalities(infer_mods);
      req.output_path = infer_out;
      print_dice(pemma::run_infer(cfg, req));
    } else if (cmd_report->parsed()) {
      if (report_kind == "grid") {
        std::cout << pemma::run_report_grid(cfg).to_table();
      } else if (report_kind == "params") {
        std::cout << pemma::run_report_params(cfg).to_table();
      } else {
        std::cout << pemma::run_report_forgetting(cfg).to_table();
      }
      std::cout << "reports written under " << cfg.report_dir() << "\n";
    } else if (cmd_gradcheck->parsed()) {
      const int failures = pemma::run_gradcheck(std::cout);
      if (failures > 0) {
        std::cerr << failures << " gradient check(s) failed\n";
        return 1;
      }
      std::cout << "all gradient checks passed\n";
    }
  } catch (const pemma::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const pemma::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
