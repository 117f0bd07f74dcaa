// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

using nlohmann::json;

namespace pemma {

std::string_view to_string(Modalities m) {
  switch (m) {
    case Modalities::kCP: return "CP";
    case Modalities::kC: return "C";
    case Modalities::kP: return "P";
  }
  return "?";
}

Modalities parse_modalities(std::string_view s) {
  if (s == "CP") return Modalities::kCP;
  if (s == "C") return Modalities::kC;
  if (s == "P") return Modalities::kP;
  throw ConfigError(format_msg("unknown modalities '", s, "' (expected CP, C, or P)"));
}

float dice_score(const LabelMap& pred, const LabelMap& gt, int class_id) {
  if (pred.dims != gt.dims) throw ShapeError("dice_score: label map dims differ");
  int64_t p_count = 0, g_count = 0, inter = 0;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_p = pred.labels[i] == class_id;
    const bool in_g = gt.labels[i] == class_id;
    p_count += in_p;
    g_count += in_g;
    inter += in_p && in_g;
  }
  if (p_count + g_count == 0) return 1.0f;
  return 2.0f * static_cast<float>(inter) / static_cast<float>(p_count + g_count);
}

DiceResult dice_result(const LabelMap& pred, const LabelMap& gt) {
  DiceResult r;
  r.tumor = dice_score(pred, gt, 1);
  r.lymph = dice_score(pred, gt, 2);
  r.avg = 0.5f * (r.tumor + r.lymph);
  return r;
}

// ---------------------------------------------------------------------------
// Tiled prediction
// ---------------------------------------------------------------------------

namespace {

void check_tiling(const Volume& v, int side) {
  for (int d : v.dims) {
    if (d % side != 0) {
      throw ShapeError(format_msg("volume dim ", d, " not tileable by model input ", side));
    }
  }
}

Volume crop_channel_volume(const Volume& v, std::array<int, 3> off, int size) {
  Volume out = make_volume(v.channels, {size, size, size});
  for (int c = 0; c < v.channels; ++c) {
    for (int z = 0; z < size; ++z) {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          out.at(c, z, y, x) = v.at(c, z + off[0], y + off[1], x + off[2]);
        }
      }
    }
  }
  return out;
}

}  // namespace

Volume predict_probs(const SegModel& model, const Volume& ct, const Volume& pet, Modalities mods) {
  if (ct.dims != pet.dims) throw ShapeError("predict_probs: ct/pet dims differ");
  const int side = model.config.input_size;
  check_tiling(ct, side);
  Volume probs = make_volume(kNumClasses, ct.dims);
  Tensor zero({1, side, side, side}, 0.0f);
  for (int oz = 0; oz < ct.dims[0]; oz += side) {
    for (int oy = 0; oy < ct.dims[1]; oy += side) {
      for (int ox = 0; ox < ct.dims[2]; ox += side) {
        const std::array<int, 3> off{oz, oy, ox};
        Tensor tc = mods == Modalities::kP ? zero : to_tensor(crop_channel_volume(ct, off, side));
        Tensor tp = mods == Modalities::kC ? zero : to_tensor(crop_channel_volume(pet, off, side));
        Tensor logits = model.forward(tc, tp);
        Tensor p = softmax(reshape(logits, {kNumClasses, int64_t(side) * side * side}), 0);
        const auto pd = p.data();
        for (int c = 0; c < kNumClasses; ++c) {
          for (int z = 0; z < side; ++z) {
            for (int y = 0; y < side; ++y) {
              for (int x = 0; x < side; ++x) {
                probs.at(c, oz + z, oy + y, ox + x) =
                    pd[static_cast<size_t>(((int64_t(c) * side + z) * side + y) * side + x)];
              }
            }
          }
        }
      }
    }
  }
  return probs;
}

namespace {

LabelMap argmax_labels(const Volume& probs) {
  LabelMap out;
  out.dims = probs.dims;
  const int64_t v = probs.voxels_per_channel();
  out.labels.assign(static_cast<size_t>(v), 0);
  for (int64_t i = 0; i < v; ++i) {
    int best = 0;
    float best_p = probs.voxels[static_cast<size_t>(i)];
    for (int c = 1; c < kNumClasses; ++c) {
      const float p = probs.voxels[static_cast<size_t>(c * v + i)];
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    out.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(best);
  }
  return out;
}

}  // namespace

LabelMap predict_labels(const SegModel& model, const Volume& ct, const Volume& pet, Modalities mods) {
  return argmax_labels(predict_probs(model, ct, pet, mods));
}

Volume predict_probs_late(const LateFusionPair& pair, const Volume& ct, const Volume& pet, Modalities mods) {
  const int64_t v = int64_t(ct.dims[0]) * ct.dims[1] * ct.dims[2];
  Volume pc, pp;
  if (mods != Modalities::kP) {
    pc = predict_probs(pair.ct_model, ct, pet, Modalities::kC);
  } else {
    pc = make_volume(kNumClasses, ct.dims, 1.0f / kNumClasses);  // uninformative branch
  }
  if (mods != Modalities::kC) {
    pp = predict_probs(pair.pet_model, ct, pet, Modalities::kP);
  } else {
    pp = make_volume(kNumClasses, ct.dims, 1.0f / kNumClasses);
  }
  Volume blended = make_volume(kNumClasses, ct.dims);
  for (int64_t i = 0; i < v * kNumClasses; ++i) {
    blended.voxels[static_cast<size_t>(i)] =
        pair.w_c * pc.voxels[static_cast<size_t>(i)] + (1.0f - pair.w_c) * pp.voxels[static_cast<size_t>(i)];
  }
  // renormalize per voxel
  for (int64_t i = 0; i < v; ++i) {
    float total = 0.0f;
    for (int c = 0; c < kNumClasses; ++c) total += blended.voxels[static_cast<size_t>(c * v + i)];
    const float inv = 1.0f / total;
    for (int c = 0; c < kNumClasses; ++c) blended.voxels[static_cast<size_t>(c * v + i)] *= inv;
  }
  return blended;
}

LabelMap predict_labels_late(const LateFusionPair& pair, const Volume& ct, const Volume& pet, Modalities mods) {
  return argmax_labels(predict_probs_late(pair, ct, pet, mods));
}

DiceResult evaluate_split(const SegModel& model, const std::vector<LoadedSample>& samples, Modalities mods) {
  DiceResult mean;
  if (samples.empty()) return mean;
  for (const LoadedSample& s : samples) {
    const DiceResult r = dice_result(predict_labels(model, s.sample.ct, s.sample.pet, mods), s.sample.labels);
    mean.tumor += r.tumor;
    mean.lymph += r.lymph;
  }
  mean.tumor /= static_cast<float>(samples.size());
  mean.lymph /= static_cast<float>(samples.size());
  mean.avg = 0.5f * (mean.tumor + mean.lymph);
  return mean;
}

DiceResult evaluate_split_late(const LateFusionPair& pair, const std::vector<LoadedSample>& samples,
                               Modalities mods) {
  DiceResult mean;
  if (samples.empty()) return mean;
  for (const LoadedSample& s : samples) {
    const DiceResult r =
        dice_result(predict_labels_late(pair, s.sample.ct, s.sample.pet, mods), s.sample.labels);
    mean.tumor += r.tumor;
    mean.lymph += r.lymph;
  }
  mean.tumor /= static_cast<float>(samples.size());
  mean.lymph /= static_cast<float>(samples.size());
  mean.avg = 0.5f * (mean.tumor + mean.lymph);
  return mean;
}

uint64_t val_logits_hash(const SegModel& model, const std::vector<LoadedSample>& samples, Modalities mods) {
  const int side = model.config.input_size;
  uint64_t h = 0xcbf29ce484222325ull;
  Tensor zero({1, side, side, side}, 0.0f);
  for (const LoadedSample& s : samples) {
    check_tiling(s.sample.ct, side);
    for (int oz = 0; oz < s.sample.ct.dims[0]; oz += side) {
      for (int oy = 0; oy < s.sample.ct.dims[1]; oy += side) {
        for (int ox = 0; ox < s.sample.ct.dims[2]; ox += side) {
          const std::array<int, 3> off{oz, oy, ox};
          Tensor tc = mods == Modalities::kP ? zero : to_tensor(crop_channel_volume(s.sample.ct, off, side));
          Tensor tp = mods == Modalities::kC ? zero : to_tensor(crop_channel_volume(s.sample.pet, off, side));
          Tensor logits = model.forward(tc, tp);
          const auto d = logits.data();
          h = fnv1a(d.data(), d.size() * sizeof(float), h);
        }
      }
    }
  }
  return h;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

namespace {

std::string fmt_dice(const DiceResult& d) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << d.tumor << "/" << d.lymph << "/" << d.avg;
  return os.str();
}

json dice_json(const DiceResult& d) {
  return json{{"tumor", d.tumor}, {"lymph", d.lymph}, {"avg", d.avg}};
}

}  // namespace

std::string EvalGridReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "method" << std::setw(8) << "dataset" << std::setw(7) << "train"
     << std::setw(7) << "infer" << "tumor/lymph/avg\n";
  for (const GridCell& c : cells) {
    os << std::left << std::setw(8) << c.method << std::setw(8) << c.dataset << std::setw(7) << c.train_mods
       << std::setw(7) << to_string(c.infer);
    os << (c.present ? fmt_dice(c.dice) : std::string("absent")) << "\n";
  }
  return os.str();
}

std::string EvalGridReport::to_json() const {
  json j = json::array();
  for (const GridCell& c : cells) {
    json cell{{"method", c.method},
              {"dataset", c.dataset},
              {"train_modalities", c.train_mods},
              {"infer_modalities", to_string(c.infer)},
              {"present", c.present}};
    if (c.present) cell["dice"] = dice_json(c.dice);
    j.push_back(std::move(cell));
  }
  return j.dump(2);
}

ParamReport make_param_report(const SegModel& unimodal, const SegModel* early, const SegModel* pemma,
                              const LateFusionPair* late) {
  ParamReport rep;
  rep.theta = count_params(unimodal).total;
  if (late != nullptr) {
    const int64_t total = count_params(late->ct_model).total + count_params(late->pet_model).total;
    const int64_t trainable =
        count_params(late->ct_model).trainable + count_params(late->pet_model).trainable;
    rep.rows.push_back(ParamReportRow{"late", total, trainable,
                                      static_cast<double>(trainable) / static_cast<double>(rep.theta),
                                      "2 Phi"});
  }
  if (early != nullptr) {
    const ParamCounts c = count_params(*early);
    rep.rows.push_back(ParamReportRow{"early", c.total, c.trainable,
                                      static_cast<double>(c.trainable) / static_cast<double>(rep.theta),
                                      "1.0043 Phi"});
  }
  if (pemma != nullptr) {
    const ParamCounts c = count_params(*pemma);
    rep.rows.push_back(ParamReportRow{"pemma", c.total, c.trainable,
                                      static_cast<double>(c.trainable) / static_cast<double>(rep.theta),
                                      "0.08 Phi"});
  }
  return rep;
}

std::string ParamReport::to_table() const {
  std::ostringstream os;
  os << "|Theta| (uni-modal total) = " << theta
     << "   [full-scale reference: Phi = 92.58M params, UNETR]\n";
  os << std::left << std::setw(8) << "method" << std::right << std::setw(12) << "total" << std::setw(12)
     << "trainable" << std::setw(18) << "trainable/Theta" << "  full-scale reference\n";
  for (const ParamReportRow& r : rows) {
    os << std::left << std::setw(8) << r.method << std::right << std::setw(12) << r.total << std::setw(12)
       << r.trainable << std::setw(18) << std::fixed << std::setprecision(4) << r.trainable_over_theta
       << "  " << r.full_scale_reference << "\n";
  }
  return os.str();
}

std::string ParamReport::to_json() const {
  json j;
  j["theta"] = theta;
  j["full_scale_phi"] = "92.58M";
  j["rows"] = json::array();
  for (const ParamReportRow& r : rows) {
    j["rows"].push_back(json{{"method", r.method},
                             {"total", r.total},
                             {"trainable", r.trainable},
                             {"trainable_over_theta", r.trainable_over_theta},
                             {"full_scale_reference", r.full_scale_reference}});
  }
  return j.dump(2);
}

std::string ForgettingReport::to_table() const {
  std::ostringstream os;
  os << std::left << std::setw(8) << "task" << std::setw(20) << "at completion" << std::setw(20)
     << "latest adapters" << std::setw(20) << "restored" << std::setw(12) << "drift(avg)"
     << "restored bit-identical\n";
  for (const ForgettingEntry& e : entries) {
    os << std::left << std::setw(8) << e.task << std::setw(20) << fmt_dice(e.at_completion) << std::setw(20)
       << fmt_dice(e.with_latest) << std::setw(20) << fmt_dice(e.with_restored) << std::setw(12)
       << std::fixed << std::setprecision(4) << e.drift_avg_delta
       << (e.restoration_bit_identical ? "yes" : "NO") << "\n";
  }
  return os.str();
}

std::string ForgettingReport::to_json() const {
  json j = json::array();
  for (const ForgettingEntry& e : entries) {
    j.push_back(json{{"task", e.task},
                     {"at_completion", dice_json(e.at_completion)},
                     {"with_latest", dice_json(e.with_latest)},
                     {"with_restored", dice_json(e.with_restored)},
                     {"drift_avg_delta", e.drift_avg_delta},
                     {"restoration_bit_identical", e.restoration_bit_identical}});
  }
  return j.dump(2);
}

}  // namespace pemma
