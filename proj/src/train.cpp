// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/train.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>

using nlohmann::json;

namespace pemma {

void TrainConfig::validate() const {
  if (lr <= 0.0f) throw ConfigError("lr must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (dice_w + ce_w <= 0.0f) throw ConfigError("dice_w + ce_w must be > 0");
  if (max_steps < 0) throw ConfigError("max_steps must be >= 0");
  if (val_every < 1) throw ConfigError("val_every must be >= 1");
  if (crops_per_sample < 1) throw ConfigError("crops_per_sample must be >= 1");
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

Tensor dice_ce_loss(const Tensor& logits, const LabelMap& labels, float dice_w, float ce_w) {
  if (logits.rank() != 4 || logits.dim(0) != kNumClasses || logits.dim(1) != labels.dims[0] ||
      logits.dim(2) != labels.dims[1] || logits.dim(3) != labels.dims[2]) {
    throw ShapeError(format_msg("dice_ce_loss: logits ", shape_str(logits.shape()), " vs labels [",
                                labels.dims[0], "x", labels.dims[1], "x", labels.dims[2], "]"));
  }
  const int64_t v = static_cast<int64_t>(labels.labels.size());
  std::array<std::vector<float>, kNumClasses> one_hot;
  std::array<int64_t, kNumClasses> gt_count{};
  for (auto& oh : one_hot) oh.assign(static_cast<size_t>(v), 0.0f);
  for (int64_t i = 0; i < v; ++i) {
    const uint8_t cls = labels.labels[static_cast<size_t>(i)];
    if (cls >= kNumClasses) throw DataError(format_msg("label ", int(cls), " outside {0,1,2}"));
    one_hot[cls][static_cast<size_t>(i)] = 1.0f;
    ++gt_count[cls];
  }

  Tensor flat = reshape(logits, {kNumClasses, v});
  // cross-entropy: mean over voxels of -log p(true class)
  std::vector<float> hot_flat;
  hot_flat.reserve(static_cast<size_t>(kNumClasses) * v);
  for (const auto& oh : one_hot) hot_flat.insert(hot_flat.end(), oh.begin(), oh.end());
  Tensor hot({kNumClasses, v}, std::move(hot_flat));
  Tensor ce = scale(sum(mul(log_softmax(flat, 0), hot)), -1.0f / static_cast<float>(v));

  // soft Dice over the foreground classes
  constexpr float kSmooth = 1e-5f;
  Tensor probs = softmax(flat, 0);
  Tensor dice_sum;
  for (int cls = 1; cls < kNumClasses; ++cls) {
    Tensor p_c = gather_rows(probs, {cls});
    Tensor g_c({1, v}, std::vector<float>(one_hot[cls]));
    Tensor inter = sum(mul(p_c, g_c));
    Tensor num = add_scalar(scale(inter, 2.0f), kSmooth);
    Tensor den = add_scalar(sum(p_c), static_cast<float>(gt_count[cls]) + kSmooth);
    Tensor dice_c = div(num, den);
    dice_sum = dice_sum.defined() ? add(dice_sum, dice_c) : dice_c;
  }
  Tensor dice_loss = add_scalar(scale(dice_sum, -0.5f), 1.0f);
  return add(scale(dice_loss, dice_w), scale(ce, ce_w));
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

void AdamW::step(ParamRegistry& params) {
  for (Parameter& p : params.items()) {
    if (!p.trainable) continue;
    if (!p.tensor.has_grad()) {
      throw ContractError(format_msg("trainable parameter '", p.name, "' has no gradient"));
    }
    State& s = state_[p.name];
    if (s.m.empty()) {
      s.m.assign(p.tensor.data().size(), 0.0f);
      s.v.assign(p.tensor.data().size(), 0.0f);
      s.t = 0;
    }
    ++s.t;
    const float bc1 = 1.0f - std::pow(hyper_.beta1, static_cast<float>(s.t));
    const float bc2 = 1.0f - std::pow(hyper_.beta2, static_cast<float>(s.t));
    auto w = p.tensor.data();
    const auto g = p.tensor.grad();
    for (size_t i = 0; i < w.size(); ++i) {
      s.m[i] = hyper_.beta1 * s.m[i] + (1.0f - hyper_.beta1) * g[i];
      s.v[i] = hyper_.beta2 * s.v[i] + (1.0f - hyper_.beta2) * g[i] * g[i];
      const float m_hat = s.m[i] / bc1;
      const float v_hat = s.v[i] / bc2;
      w[i] -= hyper_.lr * (m_hat / (std::sqrt(v_hat) + hyper_.eps)) + hyper_.lr * hyper_.weight_decay * w[i];
    }
  }
}

void AdamW::sync_trainable(const ParamRegistry& params) {
  for (auto it = state_.begin(); it != state_.end();) {
    const Parameter* p = params.find(it->first);
    if (p == nullptr || !p->trainable) {
      it = state_.erase(it);
    } else {
      ++it;
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

SplitData load_split_data(const DatasetManifest& manifest, const std::string& dataset_dir,
                          std::string_view split) {
  SplitData d;
  d.train = load_split(manifest, dataset_dir, split, true);
  d.val = load_split(manifest, dataset_dir, split, false);
  return d;
}

namespace {

Tensor modality_tensor(const Volume& v, bool present, int side) {
  if (!present) return Tensor({1, side, side, side}, 0.0f);
  return to_tensor(v);
}

}  // namespace

TrainReport train(SegModel& model, const SplitData& data, const TrainConfig& config,
                  const std::string& checkpoint_dir) {
  config.validate();
  if (data.train.empty()) throw DataError("training split is empty");
  if (config.trainable_groups.has_value()) {
    model.params.set_trainable_groups(*config.trainable_groups);
  }

  AdamW opt(AdamW::Hyper{config.lr, config.weight_decay, 0.9f, 0.999f, 1e-8f});
  opt.sync_trainable(model.params);

  Rng rng(config.seed);
  AugmentConfig aug;
  aug.crop_prob = 1.0f;  // the training path always crops to the model input size
  aug.crop_size = model.config.input_size;
  aug.flip_prob = config.flip_prob;
  aug.rot_prob = config.rot_prob;

  TrainReport report;
  report.checkpoint_dir = checkpoint_dir;
  float best_avg = -1.0f;
  const int side = model.config.input_size;

  auto validate_now = [&](int step, float loss_value) {
    const DiceResult val = evaluate_split(model, data.val, config.modalities);
    report.curve.push_back(TrainPoint{step, loss_value, val});
    if (val.avg > best_avg) {
      best_avg = val.avg;
      report.best_step = step;
      report.best_val = val;
      save_checkpoint(model, checkpoint_dir);
    }
    log_info("step ", step, " loss ", loss_value, " val dice tumor ", val.tumor, " lymph ", val.lymph,
             " avg ", val.avg);
  };

  float last_loss = 0.0f;
  for (int step = 1; step <= config.max_steps; ++step) {
    std::vector<Sample> crops;
    crops.reserve(static_cast<size_t>(config.batch_size) * config.crops_per_sample);
    for (int b = 0; b < config.batch_size; ++b) {
      const auto& sample = data.train[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(data.train.size()) - 1))];
      for (int c = 0; c < config.crops_per_sample; ++c) {
        crops.push_back(augment(sample.sample, aug, rng));
      }
    }

    model.params.zero_grads();
    Tape tape;
    Tensor loss;
    try {
      for (const Sample& crop : crops) {
        Tensor ct = modality_tensor(crop.ct, config.modalities != Modalities::kP, side);
        Tensor pet = modality_tensor(crop.pet, config.modalities != Modalities::kC, side);
        Tensor logits = model.forward(ct, pet);
        Tensor l = dice_ce_loss(logits, crop.labels, config.dice_w, config.ce_w);
        loss = loss.defined() ? add(loss, l) : l;
      }
      loss = scale(loss, 1.0f / static_cast<float>(crops.size()));
    } catch (const DataError& e) {
      throw DataError(format_msg("non-finite loss at step ", step, " (lr ", config.lr, "): ", e.what()));
    }
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) {
      throw DataError(format_msg("non-finite loss at step ", step, " (lr ", config.lr, ")"));
    }
    tape.backward(loss);
    opt.step(model.params);

    if (step % config.val_every == 0 || step == config.max_steps) {
      validate_now(step, last_loss);
    }
    report.steps_run = step;
  }
  if (config.max_steps == 0) {
    validate_now(0, 0.0f);
  }
  if (report.best_step < 0) {
    // no validation point improved on -1 (empty val split): persist final weights
    save_checkpoint(model, checkpoint_dir);
  }
  return report;
}

std::string TrainReport::to_json() const {
  json j;
  j["best_step"] = best_step;
  j["best_val"] = json{{"tumor", best_val.tumor}, {"lymph", best_val.lymph}, {"avg", best_val.avg}};
  j["checkpoint"] = checkpoint_dir;
  j["steps_run"] = steps_run;
  j["curve"] = json::array();
  for (const TrainPoint& p : curve) {
    j["curve"].push_back(json{{"step", p.step},
                              {"train_loss", p.train_loss},
                              {"val", json{{"tumor", p.val.tumor}, {"lymph", p.val.lymph}, {"avg", p.val.avg}}}});
  }
  return j.dump(2);
}

void write_train_report(const std::string& path, const TrainReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(format_msg("cannot write '", path, "'"));
  out << report.to_json() << "\n";
}

}  // namespace pemma
