// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "pemma/eval.hpp"
#include "pemma/experiment.hpp"

using namespace pemma;
namespace fs = std::filesystem;

namespace {

LabelMap labels_from(std::array<int, 3> dims, const std::vector<uint8_t>& v) {
  LabelMap l;
  l.dims = dims;
  l.labels = v;
  return l;
}

std::string temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("pemma_eval_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

ModelConfig tiny_config(uint64_t seed = 17) {
  ModelConfig c;
  c.blocks = 2;
  c.dim = 8;
  c.heads = 4;
  c.patch = 4;
  c.input_size = 8;
  c.skip_features = 4;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("dice_score basics") {
  const LabelMap a = labels_from({2, 2, 2}, {1, 1, 1, 1, 0, 0, 0, 0});
  CHECK(dice_score(a, a, 1) == 1.0f);

  const LabelMap b = labels_from({2, 2, 2}, {0, 0, 0, 0, 1, 1, 1, 1});
  CHECK(dice_score(a, b, 1) == 0.0f);

  // |P| = |G| = 4, overlap 2 -> 0.5
  const LabelMap c = labels_from({2, 2, 2}, {1, 1, 0, 0, 1, 1, 0, 0});
  CHECK(dice_score(a, c, 1) == 0.5f);

  // both empty for a class -> 1.0
  CHECK(dice_score(a, a, 2) == 1.0f);

  CHECK_THROWS_AS(dice_score(a, labels_from({2, 2, 1}, {0, 0, 0, 0}), 1), ShapeError);
}

TEST_CASE("dice is symmetric and permutation-invariant; avg is the class mean") {
  Rng rng(3);
  std::vector<uint8_t> pv(27), gv(27);
  for (size_t i = 0; i < 27; ++i) {
    pv[i] = static_cast<uint8_t>(rng.uniform_int(0, 2));
    gv[i] = static_cast<uint8_t>(rng.uniform_int(0, 2));
  }
  const LabelMap p = labels_from({3, 3, 3}, pv);
  const LabelMap g = labels_from({3, 3, 3}, gv);
  for (int cls : {1, 2}) CHECK(dice_score(p, g, cls) == dice_score(g, p, cls));

  // one shared voxel permutation
  std::vector<size_t> perm(27);
  for (size_t i = 0; i < 27; ++i) perm[i] = i;
  for (size_t i = 26; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, static_cast<int>(i))]);
  std::vector<uint8_t> pv2(27), gv2(27);
  for (size_t i = 0; i < 27; ++i) {
    pv2[i] = pv[perm[i]];
    gv2[i] = gv[perm[i]];
  }
  const LabelMap p2 = labels_from({3, 3, 3}, pv2);
  const LabelMap g2 = labels_from({3, 3, 3}, gv2);
  for (int cls : {1, 2}) CHECK(dice_score(p, g, cls) == dice_score(p2, g2, cls));

  const DiceResult r = dice_result(p, g);
  CHECK(r.avg == 0.5f * (r.tumor + r.lymph));
}

TEST_CASE("tiled prediction covers volumes larger than the model input") {
  SegModel m = build_unimodal(tiny_config(), Topology::kUnimodalCt);
  PhantomSpec spec;
  spec.seed = 4;
  spec.dims = {16, 16, 16};
  spec.tumor_r_min = 2.0f;
  spec.tumor_r_max = 3.0f;
  spec.lymph_r_min = 2.0f;
  spec.lymph_r_max = 3.0f;
  const Phantom ph = generate_phantom(spec);
  const Volume probs = predict_probs(m, ph.ct, ph.pet, Modalities::kC);
  CHECK(probs.channels == 3);
  CHECK(probs.dims == spec.dims);
  const int64_t v = probs.voxels_per_channel();
  for (int64_t i = 0; i < v; ++i) {
    float total = 0;
    for (int c = 0; c < 3; ++c) total += probs.voxels[static_cast<size_t>(c * v + i)];
    CHECK(total == doctest::Approx(1.0f).epsilon(1e-5));
  }
  const LabelMap pred = predict_labels(m, ph.ct, ph.pet, Modalities::kC);
  CHECK(pred.dims == spec.dims);
}

TEST_CASE("late fusion with a missing branch reduces to the present branch's argmax") {
  SegModel pre = build_unimodal(tiny_config(23), Topology::kUnimodalCt);
  LateFusionPair pair = build_late_fusion(pre);
  pair.w_c = 0.3f;
  PhantomSpec spec;
  spec.seed = 9;
  spec.dims = {8, 8, 8};
  spec.tumor_r_min = 1.0f;
  spec.tumor_r_max = 1.6f;
  spec.lymph_r_min = 1.0f;
  spec.lymph_r_max = 1.6f;
  const Phantom ph = generate_phantom(spec);

  // infer P: the CT branch is uniform, so argmax equals the PET model's own
  const LabelMap fused = predict_labels_late(pair, ph.ct, ph.pet, Modalities::kP);
  const LabelMap pet_only = predict_labels(pair.pet_model, ph.ct, ph.pet, Modalities::kP);
  CHECK(fused.labels == pet_only.labels);

  // blended fields stay valid probability fields
  const Volume probs = predict_probs_late(pair, ph.ct, ph.pet, Modalities::kCP);
  const int64_t v = probs.voxels_per_channel();
  for (int64_t i = 0; i < v; ++i) {
    float total = 0;
    for (int c = 0; c < 3; ++c) {
      const float pv = probs.voxels[static_cast<size_t>(c * v + i)];
      CHECK(pv >= 0.0f);
      total += pv;
    }
    CHECK(total == doctest::Approx(1.0f).epsilon(1e-5));
  }
}

TEST_CASE("param report carries the exact accounting identities") {
  ModelConfig cfg = tiny_config(31);
  SegModel unimodal = build_unimodal(cfg, Topology::kUnimodalCt);
  SegModel early = build_early_fusion(unimodal, InitStrategy::kCrossModal);
  SegModel pemma = build_pemma(unimodal, 2, 4.0f, 1.0f, Routing::kCtOnly);
  LateFusionPair late = build_late_fusion(unimodal);

  const ParamReport rep = make_param_report(unimodal, &early, &pemma, &late);
  REQUIRE(rep.rows.size() == 3);
  const int64_t theta = count_params(unimodal).total;
  CHECK(rep.theta == theta);

  const ParamReportRow& late_row = rep.rows[0];
  CHECK(late_row.method == "late");
  CHECK(late_row.trainable == 2 * theta);
  CHECK(late_row.trainable_over_theta == doctest::Approx(2.0).epsilon(1e-12));

  const ParamReportRow& early_row = rep.rows[1];
  const int p3 = cfg.patch * cfg.patch * cfg.patch;
  CHECK(early_row.trainable == theta + int64_t(p3) * cfg.dim + 27 * cfg.skip_features);
  CHECK(early_row.trainable == early_row.total);

  const ParamReportRow& pemma_row = rep.rows[2];
  const ParamCounts pc = count_params(pemma);
  CHECK(pemma_row.trainable == pc.pet_pe + lora_param_count(cfg.blocks, 2, cfg.dim) + pc.pet_sk);

  // the printed table carries the full-scale reference constants
  const std::string table = rep.to_table();
  CHECK(table.find("92.58M") != std::string::npos);
  CHECK(table.find("2 Phi") != std::string::npos);
  CHECK(table.find("1.0043 Phi") != std::string::npos);
  CHECK(table.find("0.08 Phi") != std::string::npos);
}

TEST_CASE("count_trainable over an empty group set is zero") {
  SegModel m = build_unimodal(tiny_config(37), Topology::kUnimodalCt);
  CHECK(count_trainable(m, {}) == 0);
  CHECK(count_trainable(m, {ParamGroup::kBase}) == count_params(m).total);
}

TEST_CASE("grid report enumerates 5 column groups x 3 infer columns per method") {
  // fresh out dir: no checkpoints -> every cell present=false, run continues
  ExperimentConfig cfg = default_experiment_config();
  cfg.out_dir = temp_dir("grid");
  cfg.data.dims = {8, 8, 8};
  for (auto& [name, split] : cfg.data.splits) {
    split.train_count = 1;
    split.val_count = 1;
    split.phantom.tumor_r_min = 1.0f;
    split.phantom.tumor_r_max = 1.6f;
    split.phantom.lymph_r_min = 1.0f;
    split.phantom.lymph_r_max = 1.6f;
  }
  run_gen_data(cfg);
  const EvalGridReport grid = run_report_grid(cfg);
  CHECK(grid.cells.size() == 3 * 5 * 3);
  int per_method = 0;
  for (const GridCell& c : grid.cells) {
    if (c.method == "pemma") ++per_method;
    CHECK_FALSE(c.present);
  }
  CHECK(per_method == 15);
}

TEST_CASE("forgetting report with zero tasks is empty") {
  ExperimentConfig cfg = default_experiment_config();
  cfg.out_dir = temp_dir("forget_empty");
  const ForgettingReport rep = run_report_forgetting(cfg);
  CHECK(rep.entries.empty());
}

TEST_CASE("val_logits_hash is deterministic and modality-sensitive") {
  SegModel m = build_unimodal(tiny_config(41), Topology::kUnimodalCt);
  PhantomSpec spec;
  spec.seed = 6;
  spec.dims = {8, 8, 8};
  spec.tumor_r_min = 1.0f;
  spec.tumor_r_max = 1.6f;
  spec.lymph_r_min = 1.0f;
  spec.lymph_r_max = 1.6f;
  const Phantom ph = generate_phantom(spec);
  std::vector<LoadedSample> samples(1);
  samples[0].id = "a";
  samples[0].sample = Sample{ph.ct, ph.pet, ph.labels};
  const uint64_t h1 = val_logits_hash(m, samples, Modalities::kC);
  const uint64_t h2 = val_logits_hash(m, samples, Modalities::kC);
  CHECK(h1 == h2);
}
