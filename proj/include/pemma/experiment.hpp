// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration shared by the CLI and the acceptance suite: the
// JSON experiment config with dotted-key overrides, the staged pipeline
// (gen-data / pretrain / adapt / finetune / infer), and the report builders.
// Every stage derives its randomness from the one top-level seed.

#pragma once

#include <iosfwd>
#include <optional>
#include <string>

#include "pemma/eval.hpp"
#include "pemma/model.hpp"
#include "pemma/phantom.hpp"
#include "pemma/train.hpp"

namespace pemma {

struct AdaptationConfig {
  std::string method = "pemma";  // early | late | pemma
  int rank = 8;
  float alpha = 16.0f;  // 2 * rank
  float beta = 1.0f;
  Routing routing = Routing::kCtOnly;
  InitStrategy init = InitStrategy::kCrossModal;
  float w_c = 0.5f;
};

struct ExperimentConfig {
  uint64_t seed = 42;
  ModelConfig model;  // model.seed == 0 -> derived from the top seed
  DataConfig data;    // data.seed == 0 -> derived
  TrainConfig pretrain;
  TrainConfig adapt;
  TrainConfig finetune;
  AdaptationConfig adaptation;
  std::string out_dir = "out";

  std::string data_dir() const;
  std::string checkpoint_dir(std::string_view name) const;
  std::string report_dir() const;
};

/// Defaults with stage seeds left at 0 (derived) and the reference training
/// recipe (lr 1e-4, wd 1e-5, batch 2).
ExperimentConfig default_experiment_config();

/// Fills every seed that is still 0 from the top-level seed via
/// fork(stage-tag); called by the stage runners, idempotent.
void resolve_seeds(ExperimentConfig& cfg);

ExperimentConfig load_experiment_config(const std::string& path);
/// "a.b.c=value" override on the JSON form of the config.
void apply_override(ExperimentConfig& cfg, const std::string& assignment);
std::string experiment_config_json(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Stages. Checkpoints land under <out>/checkpoints/<stage>, reports under
// <out>/reports.
// ---------------------------------------------------------------------------

void run_gen_data(ExperimentConfig cfg);
TrainReport run_pretrain(ExperimentConfig cfg);

/// Multi-modal adaptation on the `adapt` split with the configured method:
/// pemma (build_pemma over the pretrained model), early (build_early_fusion),
/// or late (train the PET branch; the CT branch stays pretrained).
TrainReport run_adapt(ExperimentConfig cfg);

/// Continual-learning stage on task1/task2. For pemma this continues from
/// the latest pemma checkpoint; --lora-only restricts training to the
/// adapters and stores a per-task adapter file plus a completion record
/// (validation Dice and a logit hash) for the forgetting report.
TrainReport run_finetune(ExperimentConfig cfg, const std::string& task, Modalities mods, bool lora_only,
                         const std::string& method);

struct InferRequest {
  std::string checkpoint;  // model checkpoint dir; empty -> latest pemma
  std::string sample_id;   // from the dataset manifest
  Modalities modalities = Modalities::kCP;
  std::string output_path;  // predicted label map (PVOL u8); empty -> skip write
};

DiceResult run_infer(ExperimentConfig cfg, const InferRequest& req);

EvalGridReport run_report_grid(ExperimentConfig cfg);
ParamReport run_report_params(ExperimentConfig cfg);
ForgettingReport run_report_forgetting(ExperimentConfig cfg);

/// Layer-by-layer and full-model gradient checks; prints one line per check
/// to `os` and returns the number of failures.
int run_gradcheck(std::ostream& os);

}  // namespace pemma
