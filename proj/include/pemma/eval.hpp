// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Metrics and experiment reports: per-class Dice, tiled full-volume
// prediction (including missing-modality and late-fusion paths), the
// method x train-modality x infer-modality grid, parameter-efficiency
// accounting, and the forgetting report.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pemma/model.hpp"
#include "pemma/phantom.hpp"

namespace pemma {

enum class Modalities { kCP, kC, kP };
std::string_view to_string(Modalities m);
Modalities parse_modalities(std::string_view s);

struct DiceResult {
  float tumor = 0.0f;
  float lymph = 0.0f;
  float avg = 0.0f;  // (tumor + lymph) / 2
};

/// 2|P n G| / (|P| + |G|); 1.0 when both sets are empty.
float dice_score(const LabelMap& pred, const LabelMap& gt, int class_id);
DiceResult dice_result(const LabelMap& pred, const LabelMap& gt);

/// Tiled full-volume class probabilities (3 channels). Volumes larger than
/// the model input are split into non-overlapping input-sized tiles; the
/// missing modality under kC / kP is zero-filled.
Volume predict_probs(const SegModel& model, const Volume& ct, const Volume& pet, Modalities mods);
LabelMap predict_labels(const SegModel& model, const Volume& ct, const Volume& pet, Modalities mods);

/// Late fusion: per-voxel convex blend of the two branch probability fields;
/// a missing branch contributes the uniform distribution, and the blend is
/// renormalized before argmax.
Volume predict_probs_late(const LateFusionPair& pair, const Volume& ct, const Volume& pet, Modalities mods);
LabelMap predict_labels_late(const LateFusionPair& pair, const Volume& ct, const Volume& pet, Modalities mods);

struct LoadedSample;  // phantom.hpp

/// Mean per-class Dice over a set of samples.
DiceResult evaluate_split(const SegModel& model, const std::vector<LoadedSample>& samples, Modalities mods);
DiceResult evaluate_split_late(const LateFusionPair& pair, const std::vector<LoadedSample>& samples,
                               Modalities mods);

/// FNV-1a over the logit bytes of every sample in order; bit-level evidence
/// for zero-forgetting checks.
uint64_t val_logits_hash(const SegModel& model, const std::vector<LoadedSample>& samples, Modalities mods);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct GridCell {
  std::string method;      // late | early | pemma
  std::string dataset;     // adapt | task1 | task2
  std::string train_mods;  // C | CP
  Modalities infer = Modalities::kCP;
  bool present = false;    // false when the needed checkpoint is missing
  DiceResult dice;
};

struct EvalGridReport {
  std::vector<GridCell> cells;
  std::string to_table() const;  // aligned text, Table-2-like layout
  std::string to_json() const;
};

/// Full-scale reference constants printed beside measured ratios.
struct ParamReportRow {
  std::string method;
  int64_t total = 0;
  int64_t trainable = 0;
  double trainable_over_theta = 0.0;  // vs the uni-modal model's own size
  std::string full_scale_reference;        // e.g. "2 Phi", "1.0043 Phi", "0.08 Phi"
};

struct ParamReport {
  int64_t theta = 0;  // |Theta| of the uni-modal model at this scale
  std::vector<ParamReportRow> rows;
  std::string to_table() const;
  std::string to_json() const;
};

ParamReport make_param_report(const SegModel& unimodal, const SegModel* early, const SegModel* pemma,
                              const LateFusionPair* late);

struct ForgettingEntry {
  std::string task;
  DiceResult at_completion;
  DiceResult with_latest;    // measured with the newest adapters (drift)
  DiceResult with_restored;  // measured after restoring this task's adapters
  double drift_avg_delta = 0.0;
  bool restoration_bit_identical = false;
};

struct ForgettingReport {
  std::vector<ForgettingEntry> entries;
  std::string to_table() const;
  std::string to_json() const;
};

}  // namespace pemma
