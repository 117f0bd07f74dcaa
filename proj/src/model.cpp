// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/model.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace pemma {

std::string_view to_string(Topology t) {
  switch (t) {
    case Topology::kUnimodalCt: return "unimodal_ct";
    case Topology::kUnimodalPet: return "unimodal_pet";
    case Topology::kEarlyFusion: return "early_fusion";
    case Topology::kPemma: return "pemma";
  }
  return "?";
}

std::string_view to_string(Routing r) {
  switch (r) {
    case Routing::kCtOnly: return "ct_only";
    case Routing::kPetOnly: return "pet_only";
    case Routing::kMix: return "mix";
  }
  return "?";
}

std::string_view to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::kRandom: return "random";
    case InitStrategy::kZero: return "zero";
    case InitStrategy::kCrossModal: return "cross_modal";
  }
  return "?";
}

Topology parse_topology(std::string_view s) {
  if (s == "unimodal_ct") return Topology::kUnimodalCt;
  if (s == "unimodal_pet") return Topology::kUnimodalPet;
  if (s == "early_fusion") return Topology::kEarlyFusion;
  if (s == "pemma") return Topology::kPemma;
  throw ConfigError(format_msg("unknown topology '", s, "'"));
}

Routing parse_routing(std::string_view s) {
  if (s == "ct_only") return Routing::kCtOnly;
  if (s == "pet_only") return Routing::kPetOnly;
  if (s == "mix") return Routing::kMix;
  throw ConfigError(format_msg("unknown routing '", s, "'"));
}

InitStrategy parse_init_strategy(std::string_view s) {
  if (s == "random") return InitStrategy::kRandom;
  if (s == "zero") return InitStrategy::kZero;
  if (s == "cross_modal") return InitStrategy::kCrossModal;
  throw ConfigError(format_msg("unknown init strategy '", s, "'"));
}

void ModelConfig::validate() const {
  if (blocks < 1) throw ConfigError("blocks must be >= 1");
  if (patch != 4) throw ConfigError("the decoder upsampling ladder requires patch size 4");
  if (input_size % patch != 0 || input_size / patch < 1) {
    throw ConfigError(format_msg("input size ", input_size, " not divisible by patch ", patch));
  }
  if (dim < heads || dim % heads != 0) {
    throw ConfigError(format_msg("dim ", dim, " must be a positive multiple of heads ", heads));
  }
  if (skip_features < 1) throw ConfigError("skip_features must be >= 1");
}

std::array<int, 4> SegModel::tap_blocks() const {
  const int L = config.blocks;
  auto tap = [L](int k) { return std::max(1, (k * L + 3) / 4); };
  return {tap(1), tap(2), tap(3), L};
}

// ---------------------------------------------------------------------------
// Architecture
// ---------------------------------------------------------------------------

namespace {

std::string block_name(int index) {
  return format_msg("encoder.block", index < 10 ? "0" : "", index);
}

Decoder make_decoder(ParamRegistry& reg, const ModelConfig& c, const Rng& base) {
  Decoder dec;
  const int d = c.dim;
  const int f = c.skip_features;
  dec.up4 = make_deconv(reg, "decoder.up4", ParamGroup::kBase, d, f, 2, 2, base);
  dec.lat3 = make_deconv(reg, "decoder.lat3", ParamGroup::kBase, d, f, 2, 2, base);
  dec.merge3 = make_conv(reg, "decoder.merge3", ParamGroup::kBase, 2 * f, f, 3, 1, 1, base);
  dec.up_mid = make_deconv(reg, "decoder.up_mid", ParamGroup::kBase, f, f, 2, 2, base);
  dec.lat2_a = make_deconv(reg, "decoder.lat2_a", ParamGroup::kBase, d, f, 2, 2, base);
  dec.lat2_b = make_deconv(reg, "decoder.lat2_b", ParamGroup::kBase, f, f, 2, 2, base);
  dec.merge2 = make_conv(reg, "decoder.merge2", ParamGroup::kBase, 2 * f, f, 3, 1, 1, base);
  dec.lat1_a = make_deconv(reg, "decoder.lat1_a", ParamGroup::kBase, d, f, 2, 2, base);
  dec.lat1_b = make_deconv(reg, "decoder.lat1_b", ParamGroup::kBase, f, f, 2, 2, base);
  dec.merge1 = make_conv(reg, "decoder.merge1", ParamGroup::kBase, 2 * f, f, 3, 1, 1, base);
  dec.merge_stem = make_conv(reg, "decoder.merge_stem", ParamGroup::kBase, 2 * f, f, 3, 1, 1, base);
  dec.head = make_conv(reg, "decoder.head", ParamGroup::kBase, f, 3, 1, 1, 0, base);
  return dec;
}

SegModel make_arch(const ModelConfig& config, Topology topo, int rank, float alpha, float beta,
                   Routing routing) {
  config.validate();
  SegModel m;
  m.config = config;
  m.topology = topo;
  m.routing = routing;
  m.beta = beta;
  Rng base(config.seed);
  const int in_ch = topo == Topology::kEarlyFusion ? 2 : 1;
  m.embed = make_patch_embed(m.params, "encoder.patch_embed", ParamGroup::kBase, config.patch, in_ch,
                             config.dim, config.grid(), true, base);
  m.blocks.reserve(static_cast<size_t>(config.blocks));
  for (int l = 0; l < config.blocks; ++l) {
    m.blocks.push_back(make_block(m.params, block_name(l), config.dim, config.heads, base));
  }
  m.skip_main = make_skip_conv(m.params, "skip.main", ParamGroup::kBase, in_ch, config.skip_features, base, false);
  m.decoder = make_decoder(m.params, config, base);
  if (topo == Topology::kPemma) {
    m.embed_pet = make_patch_embed(m.params, "pet.patch_embed", ParamGroup::kPetPe, config.patch, 1,
                                   config.dim, config.grid(), false, base);
    m.skip_pet = make_skip_conv(m.params, "skip.pet", ParamGroup::kPetSk, 1, config.skip_features, base, true);
    m.adapters = make_adapter_set(m.params, config.blocks, config.dim, rank, alpha, base);
  }
  return m;
}

void copy_values(const Tensor& src, Tensor dst) {
  std::memcpy(dst.data().data(), src.data().data(), src.data().size() * sizeof(float));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Shape out_shape = a.shape();
  out_shape[0] = a.dim(0) + b.dim(0);
  Tensor a2 = reshape(a, {a.dim(0), a.size() / a.dim(0)});
  Tensor b2 = reshape(b, {b.dim(0), b.size() / b.dim(0)});
  return reshape(concat_rows(a2, b2), std::move(out_shape));
}

void check_volume(const Tensor& v, int side, const char* what) {
  if (v.rank() != 4 || v.dim(0) != 1 || v.dim(1) != side || v.dim(2) != side || v.dim(3) != side) {
    throw ShapeError(format_msg(what, ": expected [1,", side, ",", side, ",", side, "], got ",
                                shape_str(v.shape())));
  }
}

Tensor decode(const SegModel& m, const std::array<Tensor, 4>& taps, const Tensor& stem_out) {
  const Decoder& dec = m.decoder;
  const int g = m.config.grid();
  Tensor g1 = tokens_to_grid(taps[0], g);
  Tensor g2 = tokens_to_grid(taps[1], g);
  Tensor g3 = tokens_to_grid(taps[2], g);
  Tensor g4 = tokens_to_grid(taps[3], g);

  Tensor x = gelu(deconv_forward(dec.up4, g4));                                        // [f, 2g]
  Tensor l3 = gelu(deconv_forward(dec.lat3, g3));                                      // [f, 2g]
  x = gelu(conv_forward(dec.merge3, concat_channels(x, l3)));                          // [f, 2g]
  x = gelu(deconv_forward(dec.up_mid, x));                                             // [f, D]
  Tensor l2 = gelu(deconv_forward(dec.lat2_b, gelu(deconv_forward(dec.lat2_a, g2))));  // [f, D]
  x = gelu(conv_forward(dec.merge2, concat_channels(x, l2)));
  Tensor l1 = gelu(deconv_forward(dec.lat1_b, gelu(deconv_forward(dec.lat1_a, g1))));
  x = gelu(conv_forward(dec.merge1, concat_channels(x, l1)));
  x = gelu(conv_forward(dec.merge_stem, concat_channels(x, stem_out)));
  return conv_forward(dec.head, x);  // [3, D, D, D] logits
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Tensor route_tokens(const Tensor& tokens, Routing strategy) {
  if (tokens.rank() != 2 || tokens.dim(0) % 2 != 0) {
    throw ShapeError(format_msg("route_tokens: even token count required, got ", shape_str(tokens.shape())));
  }
  const int64_t n = tokens.dim(0) / 2;
  std::vector<int64_t> rows(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    switch (strategy) {
      case Routing::kCtOnly: rows[static_cast<size_t>(i)] = i; break;
      case Routing::kPetOnly: rows[static_cast<size_t>(i)] = n + i; break;
      case Routing::kMix: rows[static_cast<size_t>(i)] = (i % 2 == 0) ? i : n + i; break;
    }
  }
  return gather_rows(tokens, std::move(rows));
}

Tensor combine_skips(const Tensor& z_c, const Tensor& z_p, float beta) {
  if (z_c.shape() != z_p.shape()) {
    throw ShapeError(format_msg("combine_skips: ", shape_str(z_c.shape()), " vs ", shape_str(z_p.shape())));
  }
  return add(z_c, scale(z_p, beta));
}

Tensor SegModel::forward(const Tensor& ct, const Tensor& pet, ForwardTrace* trace) const {
  const int side = config.input_size;
  Tensor tokens;
  Tensor stem_out;
  switch (topology) {
    case Topology::kUnimodalCt: {
      check_volume(ct, side, "ct");
      tokens = patch_embed_forward(embed, ct);
      stem_out = skip_forward(skip_main, ct);
      break;
    }
    case Topology::kUnimodalPet: {
      check_volume(pet, side, "pet");
      tokens = patch_embed_forward(embed, pet);
      stem_out = skip_forward(skip_main, pet);
      break;
    }
    case Topology::kEarlyFusion: {
      check_volume(ct, side, "ct");
      check_volume(pet, side, "pet");
      Tensor both = concat_channels(ct, pet);
      tokens = patch_embed_forward(embed, both);
      stem_out = skip_forward(skip_main, both);
      break;
    }
    case Topology::kPemma: {
      check_volume(ct, side, "ct");
      check_volume(pet, side, "pet");
      Tensor t_c = patch_embed_forward(embed, ct);
      // the PET stream reuses the base positional table (same spatial grid)
      Tensor t_p = patch_embed_forward(embed_pet, pet, embed.pos);
      tokens = concat_rows(t_c, t_p);
      Tensor z_c = skip_forward(skip_main, ct);
      Tensor z_p = skip_forward(skip_pet, pet);
      stem_out = combine_skips(z_c, z_p, beta);
      break;
    }
  }

  const std::array<int, 4> tap_at = tap_blocks();
  std::vector<Tensor> block_outputs;
  block_outputs.reserve(blocks.size());
  Tensor t = tokens;
  for (size_t l = 0; l < blocks.size(); ++l) {
    if (trace != nullptr) trace->block_token_counts.push_back(t.dim(0));
    t = block_forward(blocks[l], t, adapters.find(static_cast<int>(l), LoraTarget::kQuery),
                      adapters.find(static_cast<int>(l), LoraTarget::kValue));
    block_outputs.push_back(t);
  }

  std::array<Tensor, 4> taps;
  for (size_t s = 0; s < 4; ++s) {
    Tensor tap = block_outputs[static_cast<size_t>(tap_at[s] - 1)];
    if (topology == Topology::kPemma) tap = route_tokens(tap, routing);
    if (trace != nullptr) trace->tap_token_counts.push_back(tap.dim(0));
    taps[s] = tap;
  }
  return decode(*this, taps, stem_out);
}

Tensor infer_with_missing(const SegModel& model, const std::optional<Tensor>& ct,
                          const std::optional<Tensor>& pet, ForwardTrace* trace) {
  if (!ct.has_value() && !pet.has_value()) {
    throw DataError("at least one input modality is required");
  }
  const int side = model.config.input_size;
  Tensor zero({1, side, side, side}, 0.0f);
  return model.forward(ct.has_value() ? *ct : zero, pet.has_value() ? *pet : zero, trace);
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

SegModel build_unimodal(const ModelConfig& config, Topology topology) {
  if (topology != Topology::kUnimodalCt && topology != Topology::kUnimodalPet) {
    throw ConfigError("build_unimodal expects a unimodal topology");
  }
  return make_arch(config, topology, 0, 0.0f, 1.0f, Routing::kCtOnly);
}

SegModel build_early_fusion(const SegModel& pretrained_ct, InitStrategy init) {
  if (pretrained_ct.topology != Topology::kUnimodalCt || pretrained_ct.has_adapters()) {
    throw StateError("early fusion must start from an unadapted uni-modal CT model");
  }
  SegModel m = make_arch(pretrained_ct.config, Topology::kEarlyFusion, 0, 0.0f, pretrained_ct.beta,
                         Routing::kCtOnly);
  const int p3 = pretrained_ct.config.patch * pretrained_ct.config.patch * pretrained_ct.config.patch;
  const int d = pretrained_ct.config.dim;
  for (const Parameter& src : pretrained_ct.params.items()) {
    Parameter* dst = m.params.find(src.name);
    if (dst == nullptr) throw StateError(format_msg("missing parameter '", src.name, "' in early-fusion arch"));
    if (src.tensor.shape() == dst->tensor.shape()) {
      copy_values(src.tensor, dst->tensor);
      continue;
    }
    if (src.name == "encoder.patch_embed.weight") {
      // rows [0, p^3) are the CT channel, rows [p^3, 2 p^3) the PET channel
      auto s = src.tensor.data();
      auto t = dst->tensor.data();
      const size_t ct_block = static_cast<size_t>(p3) * static_cast<size_t>(d);
      std::memcpy(t.data(), s.data(), ct_block * sizeof(float));
      float* pet_rows = t.data() + ct_block;
      switch (init) {
        case InitStrategy::kRandom: break;  // keep the fresh draw
        case InitStrategy::kZero: std::fill(pet_rows, pet_rows + ct_block, 0.0f); break;
        case InitStrategy::kCrossModal: std::memcpy(pet_rows, s.data(), ct_block * sizeof(float)); break;
      }
    } else if (src.name == "skip.main.conv1.weight") {
      // [f, 1, 3,3,3] -> [f, 2, 3,3,3]: channel 0 copied, channel 1 per init
      const int f = static_cast<int>(src.tensor.shape()[0]);
      const size_t k3 = 27;
      auto s = src.tensor.data();
      auto t = dst->tensor.data();
      for (int fi = 0; fi < f; ++fi) {
        const float* src_ch = s.data() + static_cast<size_t>(fi) * k3;
        float* ct_ch = t.data() + static_cast<size_t>(fi) * 2 * k3;
        float* pet_ch = ct_ch + k3;
        std::memcpy(ct_ch, src_ch, k3 * sizeof(float));
        switch (init) {
          case InitStrategy::kRandom: break;
          case InitStrategy::kZero: std::fill(pet_ch, pet_ch + k3, 0.0f); break;
          case InitStrategy::kCrossModal: std::memcpy(pet_ch, src_ch, k3 * sizeof(float)); break;
        }
      }
    } else {
      throw StateError(format_msg("unexpected shape change for '", src.name, "'"));
    }
  }
  m.params.set_trainable_groups({ParamGroup::kBase});  // the entire model is learned
  return m;
}

SegModel build_pemma(const SegModel& pretrained_ct, int rank, float alpha, float beta, Routing routing) {
  if (pretrained_ct.topology != Topology::kUnimodalCt || pretrained_ct.has_adapters()) {
    throw StateError("re-building over an already-adapted model");
  }
  SegModel m = make_arch(pretrained_ct.config, Topology::kPemma, rank, alpha, beta, routing);
  for (const Parameter& src : pretrained_ct.params.items()) {
    Parameter* dst = m.params.find(src.name);
    if (dst == nullptr || dst->tensor.shape() != src.tensor.shape()) {
      throw StateError(format_msg("base parameter '", src.name, "' does not match the PEMMA arch"));
    }
    copy_values(src.tensor, dst->tensor);
  }
  m.params.set_trainable_groups({ParamGroup::kPetPe, ParamGroup::kLora, ParamGroup::kPetSk});
  return m;
}

AdapterSet& inject_lora(SegModel& model, int rank, float alpha) {
  if (model.has_adapters()) throw StateError("LoRA adapters already injected");
  Rng base(model.config.seed);
  model.adapters = make_adapter_set(model.params, model.config.blocks, model.config.dim, rank, alpha, base);
  return model.adapters;
}

LateFusionPair build_late_fusion(const SegModel& pretrained_ct) {
  if (pretrained_ct.topology != Topology::kUnimodalCt) {
    throw StateError("late fusion starts from the uni-modal CT model");
  }
  LateFusionPair pair;
  pair.ct_model = clone_model(pretrained_ct);
  ModelConfig pet_cfg = pretrained_ct.config;
  pet_cfg.seed = pet_cfg.seed ^ fnv1a("late_fusion_pet");
  pair.pet_model = build_unimodal(pet_cfg, Topology::kUnimodalPet);
  return pair;
}

Tensor late_fusion_combine(const Tensor& m_c, const Tensor& m_p, float w_c) {
  if (w_c < 0.0f || w_c > 1.0f) throw ConfigError(format_msg("w_c must lie in [0,1], got ", w_c));
  if (m_c.shape() != m_p.shape()) {
    throw ShapeError(format_msg("late_fusion_combine: ", shape_str(m_c.shape()), " vs ", shape_str(m_p.shape())));
  }
  return add(scale(m_c, w_c), scale(m_p, 1.0f - w_c));
}

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

ParamCounts count_params(const SegModel& model) {
  ParamCounts c;
  c.base = model.params.count(ParamGroup::kBase);
  c.pet_pe = model.params.count(ParamGroup::kPetPe);
  c.lora = model.params.count(ParamGroup::kLora);
  c.pet_sk = model.params.count(ParamGroup::kPetSk);
  c.total = model.params.total_count();
  c.trainable = model.params.trainable_count();
  return c;
}

int64_t count_trainable(const SegModel& model, const std::set<ParamGroup>& groups) {
  int64_t n = 0;
  for (ParamGroup g : groups) n += model.params.count(g);
  return n;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr int kCheckpointVersion = 1;

json model_config_json(const ModelConfig& c) {
  return json{{"blocks", c.blocks},
              {"dim", c.dim},
              {"heads", c.heads},
              {"patch", c.patch},
              {"input_size", c.input_size},
              {"skip_features", c.skip_features},
              {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.blocks = j.at("blocks").get<int>();
  c.dim = j.at("dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.patch = j.at("patch").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.skip_features = j.at("skip_features").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

json read_manifest(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw FormatError(format_msg("cannot open checkpoint manifest in '", dir, "'"));
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw FormatError(format_msg("malformed manifest in '", dir, "': ", e.what()));
  }
  if (!manifest.contains("format_version") || manifest["format_version"].get<int>() != kCheckpointVersion) {
    throw FormatError(format_msg("unsupported checkpoint version in '", dir, "'"));
  }
  return manifest;
}

std::vector<char> read_blob(const std::string& dir, size_t expected_bytes) {
  std::ifstream in(fs::path(dir) / "params.bin", std::ios::binary);
  if (!in) throw FormatError(format_msg("cannot open params.bin in '", dir, "'"));
  std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (blob.size() != expected_bytes) {
    throw FormatError(format_msg("manifest/blob length mismatch in '", dir, "': manifest expects ",
                                 expected_bytes, " bytes, params.bin holds ", blob.size()));
  }
  return blob;
}

}  // namespace

void save_checkpoint(const SegModel& model, const std::string& dir,
                     const std::set<ParamGroup>* group_filter) {
  fs::create_directories(dir);
  json manifest;
  manifest["format_version"] = kCheckpointVersion;
  manifest["topology"] = to_string(model.topology);
  manifest["model"] = model_config_json(model.config);
  manifest["adaptation"] = json{{"rank", model.has_adapters() ? model.adapters.rank : 0},
                                {"alpha", model.has_adapters() ? model.adapters.alpha : 0.0f},
                                {"beta", model.beta},
                                {"routing", to_string(model.routing)}};
  json records = json::array();
  std::ofstream bin(fs::path(dir) / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw FormatError(format_msg("cannot write params.bin in '", dir, "'"));
  for (const Parameter& p : model.params.items()) {
    if (group_filter != nullptr && group_filter->count(p.group) == 0) continue;
    records.push_back(json{{"name", p.name},
                           {"shape", p.tensor.shape()},
                           {"group", to_string(p.group)},
                           {"trainable", p.trainable}});
    const auto d = p.tensor.data();
    bin.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(float)));
  }
  manifest["params"] = std::move(records);
  std::ofstream out(fs::path(dir) / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
}

void load_checkpoint(SegModel& model, const std::string& dir) {
  const json manifest = read_manifest(dir);
  const json& records = manifest.at("params");
  size_t total = 0;
  for (const json& r : records) {
    total += static_cast<size_t>(numel(r.at("shape").get<Shape>())) * sizeof(float);
  }
  const std::vector<char> blob = read_blob(dir, total);
  size_t offset = 0;
  for (const json& r : records) {
    const std::string name = r.at("name").get<std::string>();
    const Shape shape = r.at("shape").get<Shape>();
    const size_t bytes = static_cast<size_t>(numel(shape)) * sizeof(float);
    Parameter* p = model.params.find(name);
    if (p == nullptr) {
      throw FormatError(format_msg("checkpoint parameter '", name, "' not present in the model"));
    }
    if (p->tensor.shape() != shape) {
      throw FormatError(format_msg("checkpoint parameter '", name, "' has shape ", shape_str(shape),
                                   ", model expects ", shape_str(p->tensor.shape())));
    }
    std::memcpy(p->tensor.data().data(), blob.data() + offset, bytes);
    offset += bytes;
  }
}

SegModel load_model(const std::string& dir) {
  const json manifest = read_manifest(dir);
  const ModelConfig config = model_config_from_json(manifest.at("model"));
  const Topology topo = parse_topology(manifest.at("topology").get<std::string>());
  const json& ad = manifest.at("adaptation");
  SegModel m = make_arch(config, topo, topo == Topology::kPemma ? ad.at("rank").get<int>() : 0,
                         ad.at("alpha").get<float>(), ad.at("beta").get<float>(),
                         parse_routing(ad.at("routing").get<std::string>()));
  load_checkpoint(m, dir);
  std::set<ParamGroup> trainable;
  for (const json& r : manifest.at("params")) {
    if (r.at("trainable").get<bool>()) trainable.insert(parse_group(r.at("group").get<std::string>()));
  }
  m.params.set_trainable_groups(trainable);
  return m;
}

SegModel clone_model(const SegModel& model) {
  SegModel m = make_arch(model.config, model.topology, model.has_adapters() ? model.adapters.rank : 0,
                         model.has_adapters() ? model.adapters.alpha : 0.0f, model.beta, model.routing);
  std::set<ParamGroup> trainable;
  for (const Parameter& src : model.params.items()) {
    Parameter* dst = m.params.find(src.name);
    if (dst == nullptr || dst->tensor.shape() != src.tensor.shape()) {
      throw StateError(format_msg("clone mismatch on '", src.name, "'"));
    }
    copy_values(src.tensor, dst->tensor);
    if (src.trainable) trainable.insert(src.group);
  }
  m.params.set_trainable_groups(trainable);
  return m;
}

uint64_t checkpoint_group_hash(const std::string& dir, ParamGroup group) {
  const json manifest = read_manifest(dir);
  const json& records = manifest.at("params");
  size_t total = 0;
  for (const json& r : records) {
    total += static_cast<size_t>(numel(r.at("shape").get<Shape>())) * sizeof(float);
  }
  const std::vector<char> blob = read_blob(dir, total);
  uint64_t h = 0xcbf29ce484222325ull;
  size_t offset = 0;
  for (const json& r : records) {
    const size_t bytes = static_cast<size_t>(numel(r.at("shape").get<Shape>())) * sizeof(float);
    if (parse_group(r.at("group").get<std::string>()) == group) {
      h = fnv1a(blob.data() + offset, bytes, h);
    }
    offset += bytes;
  }
  return h;
}

}  // namespace pemma
