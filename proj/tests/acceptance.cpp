// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: runs every gate end to end and prints one PASS/FAIL line
// per criterion. Training-based gates share one pipeline (gen-data ->
// pretrain -> adapt -> finetune x2) under ./acceptance_out.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "pemma/experiment.hpp"
#include "pemma/lora.hpp"

using namespace pemma;
namespace fs = std::filesystem;

namespace {

struct Gate {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

std::vector<Gate> g_gates;

void run_gate(int id, const std::string& name, const std::function<std::string()>& body) {
  Gate gate;
  gate.id = id;
  gate.name = name;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    gate.detail = body();
    gate.pass = true;
  } catch (const std::exception& e) {
    gate.pass = false;
    gate.detail = e.what();
  }
  gate.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cerr << "criterion " << id << (gate.pass ? " ok (" : " FAILED (") << gate.seconds << "s)\n";
  g_gates.push_back(std::move(gate));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::runtime_error(msg);
}

Tensor random_volume(int side, uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<float> v(static_cast<size_t>(side) * side * side);
  for (float& x : v) x = static_cast<float>(rng.uniform(lo, hi));
  return Tensor({1, side, side, side}, std::move(v));
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(float)) == 0;
}

/// The shared pipeline configuration: a compact but real PEMMA lab. The
/// adapt split has CT-invisible tumors (ct_contrast 0) with a strong PET
/// hotspot (snr 5).
ExperimentConfig pipeline_config(const std::string& out_dir) {
  ExperimentConfig cfg = default_experiment_config();
  cfg.seed = 20260808;
  cfg.out_dir = out_dir;
  cfg.model.blocks = 4;
  cfg.model.dim = 32;
  cfg.model.heads = 4;
  cfg.model.patch = 4;
  cfg.model.input_size = 16;
  cfg.model.skip_features = 8;

  cfg.data.dims = {32, 32, 32};
  cfg.data.splits["pretrain"].train_count = 8;
  cfg.data.splits["pretrain"].val_count = 3;
  cfg.data.splits["adapt"].train_count = 8;
  cfg.data.splits["adapt"].val_count = 3;
  cfg.data.splits["adapt"].phantom.ct_contrast = 0.0f;
  cfg.data.splits["adapt"].phantom.pet_snr = 5.0f;
  cfg.data.splits["task1"].train_count = 4;
  cfg.data.splits["task1"].val_count = 2;
  cfg.data.splits["task2"].train_count = 4;
  cfg.data.splits["task2"].val_count = 2;

  cfg.pretrain.max_steps = 1000;
  cfg.pretrain.val_every = 100;
  cfg.pretrain.lr = 1e-3f;
  cfg.pretrain.crops_per_sample = 1;
  cfg.adapt.max_steps = 1000;
  cfg.adapt.val_every = 100;
  cfg.adapt.lr = 1e-3f;
  cfg.adapt.crops_per_sample = 1;
  cfg.finetune.max_steps = 120;
  cfg.finetune.val_every = 40;
  cfg.finetune.lr = 1e-3f;
  cfg.finetune.crops_per_sample = 1;
  cfg.adaptation.rank = 8;
  cfg.adaptation.alpha = 16.0f;
  cfg.adaptation.beta = 1.0f;
  cfg.adaptation.routing = Routing::kCtOnly;
  return cfg;
}

std::string format_seconds(double s) {
  std::ostringstream os;
  os.precision(1);
  os << std::fixed << s << "s";
  return os.str();
}

}  // namespace

int main() {
  const std::string out_dir = "acceptance_out";
  fs::remove_all(out_dir);

  // ---- 1. gradient correctness -------------------------------------------
  run_gate(1, "gradcheck: every layer type + full PEMMA loss on 8^3", [] {
    std::ostringstream os;
    const auto t0 = std::chrono::steady_clock::now();
    const int failures = run_gradcheck(os);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (failures != 0) throw std::runtime_error("failing checks:\n" + os.str());
    require(secs < 120.0, "gradcheck exceeded the 2-minute budget");
    return format_msg("all checks ok in ", format_seconds(secs));
  });

  // ---- 2. LoRA zero-delta birth -------------------------------------------
  run_gate(2, "inject_lora leaves outputs bit-identical (10 random inputs)", [] {
    ModelConfig mc;
    mc.blocks = 4;
    mc.dim = 32;
    mc.heads = 4;
    mc.patch = 4;
    mc.input_size = 16;
    mc.skip_features = 8;
    mc.seed = 321;
    SegModel model = build_unimodal(mc, Topology::kUnimodalCt);
    std::vector<Tensor> inputs, before;
    for (int i = 0; i < 10; ++i) {
      inputs.push_back(random_volume(16, 1000 + static_cast<uint64_t>(i), -1.0, 1.0));
      before.push_back(model.forward(inputs.back(), Tensor()));
    }
    inject_lora(model, 8, 16.0f);
    for (int i = 0; i < 10; ++i) {
      require(bit_equal(before[static_cast<size_t>(i)], model.forward(inputs[static_cast<size_t>(i)], Tensor())),
              format_msg("output ", i, " changed after injection"));
    }
    return std::string("10/10 bit-identical");
  });

  // ---- 4. parameter accounting at defaults --------------------------------
  run_gate(4, "parameter accounting (L=12, d=32, r=8, p=4)", [] {
    ModelConfig mc;  // library defaults: L=12, d=32, r=8, p=4
    mc.blocks = 12;
    mc.dim = 32;
    mc.heads = 4;
    mc.patch = 4;
    mc.input_size = 16;
    mc.skip_features = 16;
    mc.seed = 7;
    SegModel unimodal = build_unimodal(mc, Topology::kUnimodalCt);
    SegModel early = build_early_fusion(unimodal, InitStrategy::kCrossModal);
    SegModel pemma = build_pemma(unimodal, 8, 16.0f, 1.0f, Routing::kCtOnly);
    LateFusionPair late = build_late_fusion(unimodal);
    const int64_t theta = count_params(unimodal).total;

    const int64_t late_trainable =
        count_params(late.ct_model).trainable + count_params(late.pet_model).trainable;
    require(late_trainable == 2 * theta, "late fusion trainable != 2|Theta|");

    const ParamCounts ec = count_params(early);
    const int64_t p3 = int64_t(mc.patch) * mc.patch * mc.patch;
    require(ec.trainable == theta + p3 * mc.dim + 27 * mc.skip_features,
            "early fusion trainable != |Theta| + extra channel slices");

    const ParamCounts pc = count_params(pemma);
    require(pc.trainable == pc.pet_pe + 4ll * mc.blocks * 8 * mc.dim + pc.pet_sk,
            "pemma trainable != |pet_pe| + 4 L r d + |pet_sk|");
    const double ratio = static_cast<double>(pc.trainable) / static_cast<double>(theta);
    require(ratio < 0.15, format_msg("pemma trainable ratio ", ratio, " >= 0.15"));

    const ParamReport rep = make_param_report(unimodal, &early, &pemma, &late);
    const std::string table = rep.to_table();
    for (const char* ref : {"92.58M", "2 Phi", "1.0043 Phi", "0.08 Phi"}) {
      require(table.find(ref) != std::string::npos, format_msg("reference ", ref, " missing from report"));
    }
    return format_msg("|Theta|=", theta, ", pemma trainable=", pc.trainable, " (ratio ", ratio, ")");
  });

  // ---- 5. Eq. 1 contract ---------------------------------------------------
  run_gate(5, "late_fusion_combine: bit-exact endpoints, 100 valid blends", [] {
    Rng rng(17);
    const int64_t v = 5 * 5 * 5;
    auto random_probs = [&](uint64_t seed) {
      Rng r(seed);
      std::vector<float> vals(static_cast<size_t>(3 * v));
      for (int64_t i = 0; i < v; ++i) {
        float total = 0;
        for (int c = 0; c < 3; ++c) {
          const float e = static_cast<float>(std::exp(r.normal(0.0, 2.0)));
          vals[static_cast<size_t>(c * v + i)] = e;
          total += e;
        }
        for (int c = 0; c < 3; ++c) vals[static_cast<size_t>(c * v + i)] /= total;
      }
      return Tensor({3, 5, 5, 5}, std::move(vals));
    };
    Tensor m_c = random_probs(1), m_p = random_probs(2);
    require(bit_equal(late_fusion_combine(m_c, m_p, 1.0f), m_c), "w_c=1 is not bit-exact");
    require(bit_equal(late_fusion_combine(m_c, m_p, 0.0f), m_p), "w_c=0 is not bit-exact");
    for (int t = 0; t < 100; ++t) {
      const float w = static_cast<float>(rng.uniform());
      Tensor mix = late_fusion_combine(m_c, m_p, w);
      for (int64_t i = 0; i < v; ++i) {
        float total = 0;
        for (int c = 0; c < 3; ++c) {
          const float p = mix.data()[static_cast<size_t>(c * v + i)];
          require(p >= 0.0f, "negative probability");
          total += p;
        }
        require(std::abs(total - 1.0f) <= 1e-6f, format_msg("voxel sum ", total, " off by > 1e-6"));
      }
    }
    return std::string("endpoints bit-exact, 100 random w_c valid");
  });

  // ---- 6. token routing ----------------------------------------------------
  run_gate(6, "2N through the encoder, N per decoder tap, mix alternation", [] {
    ModelConfig mc;
    mc.blocks = 4;
    mc.dim = 32;
    mc.heads = 4;
    mc.patch = 4;
    mc.input_size = 16;
    mc.skip_features = 8;
    mc.seed = 11;
    SegModel pre = build_unimodal(mc, Topology::kUnimodalCt);
    const int64_t n = mc.tokens();
    for (Routing r : {Routing::kCtOnly, Routing::kPetOnly, Routing::kMix}) {
      SegModel m = build_pemma(pre, 4, 8.0f, 1.0f, r);
      ForwardTrace trace;
      m.forward(random_volume(16, 5, -1.0, 1.0), random_volume(16, 6, 0.0, 1.0), &trace);
      require(trace.block_token_counts.size() == 4, "expected 4 block records");
      for (int64_t c : trace.block_token_counts) require(c == 2 * n, "block saw != 2N tokens");
      for (int64_t c : trace.tap_token_counts) require(c == n, "tap saw != N tokens");
    }
    // mix alternates CT/PET rows: [0, N+1, 2, N+3, ...]
    std::vector<float> coded;
    for (int i = 0; i < 8; ++i) coded.push_back(static_cast<float>(i));
    Tensor tokens({8, 1}, coded);
    Tensor mixed = route_tokens(tokens, Routing::kMix);
    const std::vector<float> expect{0, 5, 2, 7};
    for (int i = 0; i < 4; ++i) {
      require(mixed.data()[static_cast<size_t>(i)] == expect[static_cast<size_t>(i)], "mix pattern wrong");
    }
    return std::string("all three routings verified");
  });

  // ---- 10. format round trips ----------------------------------------------
  run_gate(10, "100 randomized volume/checkpoint round trips", [] {
    const std::string dir = "acceptance_out/roundtrip";
    fs::create_directories(dir);
    Rng rng(90);
    int done = 0;
    // 40 float volumes with random dims/channels
    for (int i = 0; i < 40; ++i, ++done) {
      Volume v = make_volume(rng.uniform_int(1, 3),
                             {rng.uniform_int(2, 9), rng.uniform_int(2, 9), rng.uniform_int(2, 9)});
      for (float& x : v.voxels) x = static_cast<float>(rng.normal(0.0, 1.0));
      const std::string path = format_msg(dir, "/v", i, ".pvol");
      write_volume(path, v);
      const Volume r = read_volume(path);
      require(r.channels == v.channels && r.dims == v.dims, "volume header changed");
      require(std::memcmp(r.voxels.data(), v.voxels.data(), v.voxels.size() * sizeof(float)) == 0,
              "volume payload changed");
    }
    // 30 label maps
    for (int i = 0; i < 30; ++i, ++done) {
      LabelMap l;
      l.dims = {rng.uniform_int(2, 9), rng.uniform_int(2, 9), rng.uniform_int(2, 9)};
      l.labels.resize(static_cast<size_t>(l.dims[0]) * l.dims[1] * l.dims[2]);
      for (uint8_t& x : l.labels) x = static_cast<uint8_t>(rng.uniform_int(0, 2));
      const std::string path = format_msg(dir, "/l", i, ".pvol");
      write_labels(path, l);
      require(read_labels(path).labels == l.labels, "label payload changed");
    }
    // 30 checkpoints, a third of them adapter-only
    for (int i = 0; i < 30; ++i, ++done) {
      ModelConfig mc;
      mc.blocks = rng.uniform_int(1, 3);
      mc.dim = 8;
      mc.heads = 4;
      mc.patch = 4;
      mc.input_size = 8;
      mc.skip_features = rng.uniform_int(2, 4);
      mc.seed = rng.next_u64();
      SegModel pre = build_unimodal(mc, Topology::kUnimodalCt);
      SegModel m = build_pemma(pre, 2, 4.0f, 1.0f, Routing::kCtOnly);
      for (Parameter& p : m.params.items()) {
        for (float& x : p.tensor.data()) x += static_cast<float>(rng.normal(0.0, 0.05));
      }
      const std::string path = format_msg(dir, "/ckpt", i);
      if (i % 3 == 0) {
        const std::set<ParamGroup> lora_only{ParamGroup::kLora};
        save_checkpoint(m, path, &lora_only);
        SegModel other = build_pemma(pre, 2, 4.0f, 1.0f, Routing::kCtOnly);
        load_checkpoint(other, path);
        for (const Parameter& p : m.params.items()) {
          if (p.group != ParamGroup::kLora) continue;
          require(bit_equal(p.tensor, other.params.find(p.name)->tensor), "adapter round trip changed");
        }
      } else {
        save_checkpoint(m, path);
        SegModel r = load_model(path);
        for (const Parameter& p : m.params.items()) {
          require(bit_equal(p.tensor, r.params.find(p.name)->tensor), "checkpoint round trip changed");
        }
      }
    }
    return format_msg(done, " round trips bit-exact");
  });

  // ---- 11. augmentation statistics ------------------------------------------
  run_gate(11, "crop 0.5, flips 0.2/axis, rot90 0.2 within +-0.02 over 10k", [] {
    const int side = 4;
    Sample s;
    s.ct = make_volume(1, {side, side, side});
    s.labels.dims = {side, side, side};
    s.labels.labels.assign(64, 0);
    for (int z = 0; z < side; ++z)
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          s.ct.at(0, z, y, x) = static_cast<float>(z * 16 + y * 4 + x);
          s.labels.at(z, y, x) = static_cast<uint8_t>((z + y + x) % 3);
        }
    s.pet = s.ct;
    const int draws = 10000;
    const int64_t c1 = s.labels.count(1), c2 = s.labels.count(2);
    std::ostringstream detail;

    {
      AugmentConfig cfg;
      cfg.crop_size = 2;
      Rng rng(111);
      int crops = 0;
      for (int i = 0; i < draws; ++i) {
        if (augment(s, cfg, rng).ct.dims[0] == cfg.crop_size) ++crops;
      }
      const double rate = static_cast<double>(crops) / draws;
      require(std::abs(rate - 0.5) <= 0.02, format_msg("crop rate ", rate));
      detail << "crop " << rate;
    }
    {
      // flips decode exactly from the coordinate-coded corner voxel;
      // rotations are disabled here because flip+rot compositions coincide
      // pairwise and hide the generator draws
      AugmentConfig cfg;
      cfg.crop_prob = 0.0f;
      cfg.rot_prob = 0.0f;
      Rng rng(112);
      int flips[3] = {0, 0, 0};
      for (int i = 0; i < draws; ++i) {
        const Sample out = augment(s, cfg, rng);
        const int code = static_cast<int>(out.ct.voxels[0]);
        flips[0] += code / 16 == 3;
        flips[1] += (code / 4) % 4 == 3;
        flips[2] += code % 4 == 3;
        require(out.labels.count(1) == c1 && out.labels.count(2) == c2, "flip broke label counts");
      }
      for (int a = 0; a < 3; ++a) {
        const double rate = static_cast<double>(flips[a]) / draws;
        require(std::abs(rate - 0.2) <= 0.02, format_msg("flip axis ", a, " rate ", rate));
        detail << ", flip" << a << " " << rate;
      }
    }
    {
      AugmentConfig cfg;
      cfg.crop_prob = 0.0f;
      cfg.flip_prob = 0.0f;
      Rng rng(113);
      int rots = 0;
      for (int i = 0; i < draws; ++i) {
        const Sample out = augment(s, cfg, rng);
        if (out.ct.voxels != s.ct.voxels) {
          ++rots;
          require(out.labels.count(1) == c1 && out.labels.count(2) == c2, "rot broke label counts");
        }
      }
      const double rate = static_cast<double>(rots) / draws;
      require(std::abs(rate - 0.2) <= 0.02, format_msg("rot rate ", rate));
      detail << ", rot " << rate;
    }
    return detail.str();
  });

  // ---- shared pipeline (criteria 8, 3, 7, 9) --------------------------------
  ExperimentConfig cfg = pipeline_config(out_dir);
  double pipeline_seconds = 0.0;
  DiceResult ct_only_on_adapt, pemma_on_adapt;

  run_gate(8, "PET gain >= +0.15 tumor Dice; pipeline < 30 min", [&] {
    const auto t0 = std::chrono::steady_clock::now();
    run_gen_data(cfg);
    run_pretrain(cfg);
    TrainReport adapt_rep = run_adapt(cfg);
    pipeline_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // frozen CT-only baseline vs adapted PEMMA on the same (PET-necessary) split
    ExperimentConfig rcfg = cfg;
    resolve_seeds(rcfg);
    const DatasetManifest manifest = read_dataset_manifest(rcfg.data_dir() + "/manifest.json");
    const auto val = load_split(manifest, rcfg.data_dir(), "adapt", false);
    SegModel ct_model = load_model(rcfg.checkpoint_dir("pretrain_ct"));
    SegModel pemma_model = load_model(rcfg.checkpoint_dir("adapt_pemma"));
    ct_only_on_adapt = evaluate_split(ct_model, val, Modalities::kC);
    pemma_on_adapt = evaluate_split(pemma_model, val, Modalities::kCP);

    const float gain = pemma_on_adapt.tumor - ct_only_on_adapt.tumor;
    require(pipeline_seconds < 1800.0,
            format_msg("pipeline took ", format_seconds(pipeline_seconds), " (budget 30 min)"));
    require(gain >= 0.15f, format_msg("tumor Dice gain ", gain, " < 0.15 (ct-only ", ct_only_on_adapt.tumor,
                                      ", pemma ", pemma_on_adapt.tumor, ")"));
    return format_msg("tumor Dice ", ct_only_on_adapt.tumor, " -> ", pemma_on_adapt.tumor, " (gain ",
                      pemma_on_adapt.tumor - ct_only_on_adapt.tumor, "), pipeline ",
                      format_seconds(pipeline_seconds), ", best adapt step ", adapt_rep.best_step);
  });

  run_gate(3, "freeze integrity: base hash unchanged after >= 500 adapt steps", [&] {
    ExperimentConfig rcfg = cfg;
    resolve_seeds(rcfg);
    const uint64_t pre_hash = checkpoint_group_hash(rcfg.checkpoint_dir("pretrain_ct"), ParamGroup::kBase);
    const uint64_t post_hash = checkpoint_group_hash(rcfg.checkpoint_dir("adapt_pemma"), ParamGroup::kBase);
    require(pre_hash == post_hash, "base group hash changed during adaptation");
    return format_msg("fnv64 ", pre_hash, " == ", post_hash, " after ", cfg.adapt.max_steps, " steps");
  });

  run_gate(7, "trained adapters leak PET into logits with beta=0, ct_only", [&] {
    ExperimentConfig rcfg = cfg;
    resolve_seeds(rcfg);
    SegModel m = load_model(rcfg.checkpoint_dir("adapt_pemma"));
    m.beta = 0.0f;  // silence the PET skip path entirely
    require(m.routing == Routing::kCtOnly, "expected ct_only routing");
    Tensor ct = random_volume(16, 901, -1.0, 1.0);
    Tensor pet = random_volume(16, 902, 0.0, 1.0);
    Tensor pet_shift = pet.clone();
    for (float& v : pet_shift.data()) v += 1e-2f;
    Tensor y0 = m.forward(ct, pet);
    Tensor y1 = m.forward(ct, pet_shift);
    float linf = 0.0f;
    for (int64_t i = 0; i < y0.size(); ++i) {
      linf = std::max(linf,
                      std::abs(y0.data()[static_cast<size_t>(i)] - y1.data()[static_cast<size_t>(i)]));
    }
    require(linf > 1e-6f, format_msg("L-inf response ", linf, " <= 1e-6"));
    return format_msg("L-inf logit response ", linf, " to a 1e-2 PET shift");
  });

  run_gate(9, "zero forgetting: task1 adapters restore bit-identical logits", [&] {
    run_finetune(cfg, "task1", Modalities::kCP, true, "pemma");
    run_finetune(cfg, "task2", Modalities::kCP, true, "pemma");
    const ForgettingReport rep = run_report_forgetting(cfg);
    require(rep.entries.size() == 2, "expected two task records");
    for (const ForgettingEntry& e : rep.entries) {
      require(e.restoration_bit_identical, format_msg(e.task, " restoration not bit-identical"));
      require(std::abs(e.with_restored.avg - e.at_completion.avg) == 0.0f,
              format_msg(e.task, " restored Dice differs from completion"));
    }
    return format_msg("task1 drift ", rep.entries[0].drift_avg_delta, ", restorations bit-identical");
  });

  // ---- summary ---------------------------------------------------------------
  std::sort(g_gates.begin(), g_gates.end(), [](const Gate& a, const Gate& b) { return a.id < b.id; });
  int failed = 0;
  std::cout << "\n== acceptance criteria ==\n";
  for (const Gate& g : g_gates) {
    std::cout << (g.pass ? "[PASS] " : "[FAIL] ") << "criterion " << g.id << ": " << g.name << " — "
              << g.detail << " [" << format_seconds(g.seconds) << "]\n";
    failed += g.pass ? 0 : 1;
  }
  std::cout << (failed == 0 ? "ACCEPTANCE: all criteria passed\n"
                            : format_msg("ACCEPTANCE: ", failed, " criteria FAILED\n"));
  return failed == 0 ? 0 : 1;
}
