// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/layers.hpp"

#include <cmath>

#include "pemma/lora.hpp"

namespace pemma {

std::string_view to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBase: return "base";
    case ParamGroup::kPetPe: return "pet_pe";
    case ParamGroup::kLora: return "lora";
    case ParamGroup::kPetSk: return "pet_sk";
  }
  return "?";
}

ParamGroup parse_group(std::string_view tag) {
  if (tag == "base") return ParamGroup::kBase;
  if (tag == "pet_pe") return ParamGroup::kPetPe;
  if (tag == "lora") return ParamGroup::kLora;
  if (tag == "pet_sk") return ParamGroup::kPetSk;
  throw ConfigError(format_msg("unknown parameter group '", tag, "'"));
}

Tensor ParamRegistry::add(const std::string& name, Tensor t, ParamGroup group, bool trainable) {
  if (find(name) != nullptr) throw StateError(format_msg("duplicate parameter name '", name, "'"));
  t.set_requires_grad(trainable);
  params_.push_back(Parameter{name, t, trainable, group});
  return t;
}

Parameter* ParamRegistry::find(std::string_view name) {
  for (Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const Parameter* ParamRegistry::find(std::string_view name) const {
  for (const Parameter& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

int64_t ParamRegistry::total_count() const {
  int64_t n = 0;
  for (const Parameter& p : params_) n += p.tensor.size();
  return n;
}

int64_t ParamRegistry::count(ParamGroup g) const {
  int64_t n = 0;
  for (const Parameter& p : params_) {
    if (p.group == g) n += p.tensor.size();
  }
  return n;
}

int64_t ParamRegistry::trainable_count() const {
  int64_t n = 0;
  for (const Parameter& p : params_) {
    if (p.trainable) n += p.tensor.size();
  }
  return n;
}

void ParamRegistry::set_trainable_groups(const std::set<ParamGroup>& groups) {
  for (Parameter& p : params_) {
    p.trainable = groups.count(p.group) > 0;
    p.tensor.set_requires_grad(p.trainable);
  }
}

uint64_t ParamRegistry::group_hash(ParamGroup g) const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const Parameter& p : params_) {
    if (p.group != g) continue;
    const auto d = p.tensor.data();
    h = fnv1a(d.data(), d.size() * sizeof(float), h);
  }
  return h;
}

void ParamRegistry::zero_grads() {
  for (Parameter& p : params_) {
    if (p.trainable) p.tensor.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

Tensor init_uniform(const std::string& name, Shape shape, int64_t fan_in, const Rng& base) {
  Rng rng = base.fork(name);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<float> vals(static_cast<size_t>(numel(shape)));
  for (float& v : vals) v = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(vals));
}

Tensor init_normal(const std::string& name, Shape shape, double stddev, const Rng& base) {
  Rng rng = base.fork(name);
  std::vector<float> vals(static_cast<size_t>(numel(shape)));
  for (float& v : vals) v = static_cast<float>(rng.normal(0.0, stddev));
  return Tensor(std::move(shape), std::move(vals));
}

}  // namespace

PatchEmbed3D make_patch_embed(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                              int patch, int channels, int dim, int grid, bool with_pos, const Rng& base) {
  PatchEmbed3D pe;
  pe.patch = patch;
  pe.channels = channels;
  pe.dim = dim;
  pe.grid = grid;
  const int64_t in = int64_t(patch) * patch * patch * channels;
  pe.weight = reg.add(prefix + ".weight", init_uniform(prefix + ".weight", {in, dim}, in, base), group);
  pe.bias = reg.add(prefix + ".bias", Tensor({dim}, 0.0f), group);
  if (with_pos) {
    pe.pos = reg.add(prefix + ".pos", init_normal(prefix + ".pos", {pe.tokens(), dim}, 0.02, base), group);
  }
  return pe;
}

TransformerBlock make_block(ParamRegistry& reg, const std::string& prefix, int dim, int heads, const Rng& base) {
  if (dim % heads != 0) throw ConfigError(format_msg("dim ", dim, " not divisible by ", heads, " heads"));
  TransformerBlock blk;
  blk.dim = dim;
  blk.heads = heads;
  auto proj = [&](const std::string& tag, Tensor& w, Tensor& b) {
    w = reg.add(prefix + "." + tag + ".weight", init_uniform(prefix + "." + tag + ".weight", {dim, dim}, dim, base),
                ParamGroup::kBase);
    b = reg.add(prefix + "." + tag + ".bias", Tensor({dim}, 0.0f), ParamGroup::kBase);
  };
  blk.ln1_g = reg.add(prefix + ".ln1.gamma", Tensor({dim}, 1.0f), ParamGroup::kBase);
  blk.ln1_b = reg.add(prefix + ".ln1.beta", Tensor({dim}, 0.0f), ParamGroup::kBase);
  proj("attn.q", blk.wq, blk.bq);
  proj("attn.k", blk.wk, blk.bk);
  proj("attn.v", blk.wv, blk.bv);
  proj("attn.out", blk.wo, blk.bo);
  blk.ln2_g = reg.add(prefix + ".ln2.gamma", Tensor({dim}, 1.0f), ParamGroup::kBase);
  blk.ln2_b = reg.add(prefix + ".ln2.beta", Tensor({dim}, 0.0f), ParamGroup::kBase);
  const int hidden = 4 * dim;
  blk.mlp_w1 = reg.add(prefix + ".mlp.w1", init_uniform(prefix + ".mlp.w1", {dim, hidden}, dim, base),
                       ParamGroup::kBase);
  blk.mlp_b1 = reg.add(prefix + ".mlp.b1", Tensor({hidden}, 0.0f), ParamGroup::kBase);
  blk.mlp_w2 = reg.add(prefix + ".mlp.w2", init_uniform(prefix + ".mlp.w2", {hidden, dim}, hidden, base),
                       ParamGroup::kBase);
  blk.mlp_b2 = reg.add(prefix + ".mlp.b2", Tensor({dim}, 0.0f), ParamGroup::kBase);
  return blk;
}

ConvStage make_conv(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                    int in_channels, int out_channels, int kernel, int stride, int padding, const Rng& base) {
  ConvStage c;
  c.stride = stride;
  c.padding = padding;
  const int64_t fan_in = int64_t(in_channels) * kernel * kernel * kernel;
  c.weight = reg.add(prefix + ".weight",
                     init_uniform(prefix + ".weight", {out_channels, in_channels, kernel, kernel, kernel}, fan_in, base),
                     group);
  c.bias = reg.add(prefix + ".bias", Tensor({out_channels}, 0.0f), group);
  return c;
}

DeconvStage make_deconv(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                        int in_channels, int out_channels, int kernel, int stride, const Rng& base) {
  DeconvStage d;
  d.stride = stride;
  const int64_t fan_in = int64_t(in_channels) * kernel * kernel * kernel;
  d.weight = reg.add(prefix + ".weight",
                     init_uniform(prefix + ".weight", {in_channels, out_channels, kernel, kernel, kernel}, fan_in, base),
                     group);
  d.bias = reg.add(prefix + ".bias", Tensor({out_channels}, 0.0f), group);
  return d;
}

SkipConv make_skip_conv(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                        int in_channels, int features, const Rng& base, bool zero_final) {
  SkipConv s;
  s.conv1 = make_conv(reg, prefix + ".conv1", group, in_channels, features, 3, 1, 1, base);
  s.conv2 = make_conv(reg, prefix + ".conv2", group, features, features, 3, 1, 1, base);
  if (zero_final) {
    auto w = s.conv2.weight.data();
    std::fill(w.begin(), w.end(), 0.0f);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Forwards
// ---------------------------------------------------------------------------

Tensor conv_forward(const ConvStage& layer, const Tensor& x) {
  return conv3d(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

Tensor deconv_forward(const DeconvStage& layer, const Tensor& x) {
  return conv_transpose3d(x, layer.weight, layer.bias, layer.stride);
}

namespace {

std::vector<int64_t> patch_indices(int channels, int side, int patch) {
  const int grid = side / patch;
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(grid) * grid * grid * channels * patch * patch * patch);
  for (int pz = 0; pz < grid; ++pz) {
    for (int py = 0; py < grid; ++py) {
      for (int px = 0; px < grid; ++px) {
        for (int c = 0; c < channels; ++c) {
          for (int dz = 0; dz < patch; ++dz) {
            for (int dy = 0; dy < patch; ++dy) {
              for (int dx = 0; dx < patch; ++dx) {
                const int64_t z = int64_t(pz) * patch + dz;
                const int64_t y = int64_t(py) * patch + dy;
                const int64_t x = int64_t(px) * patch + dx;
                idx.push_back(((int64_t(c) * side + z) * side + y) * side + x);
              }
            }
          }
        }
      }
    }
  }
  return idx;
}

}  // namespace

Tensor patch_embed_forward(const PatchEmbed3D& pe, const Tensor& vol) {
  if (!pe.pos.defined()) throw ContractError("patch embed has no positional table; pass positions explicitly");
  return patch_embed_forward(pe, vol, pe.pos);
}

Tensor patch_embed_forward(const PatchEmbed3D& pe, const Tensor& vol, const Tensor& pos) {
  if (vol.rank() != 4 || vol.dim(0) != pe.channels) {
    throw ShapeError(format_msg("patch embed expects [", pe.channels, ",D,D,D], got ", shape_str(vol.shape())));
  }
  const int side = static_cast<int>(vol.dim(1));
  if (vol.dim(2) != side || vol.dim(3) != side) {
    throw ShapeError(format_msg("patch embed expects a cubic volume, got ", shape_str(vol.shape())));
  }
  if (side % pe.patch != 0) {
    throw ShapeError(format_msg("volume side ", side, " not divisible by patch ", pe.patch));
  }
  const int grid = side / pe.patch;
  if (grid != pe.grid) {
    throw ShapeError(format_msg("volume side ", side, " yields ", grid, "^3 tokens; embed expects ", pe.grid, "^3"));
  }
  const int64_t n = pe.tokens();
  const int64_t in = int64_t(pe.patch) * pe.patch * pe.patch * pe.channels;
  Tensor patches = gather_flat(vol, {n, in}, patch_indices(pe.channels, side, pe.patch));
  Tensor tokens = add_bias(matmul(patches, pe.weight), pe.bias);
  return add(tokens, pos);
}

Tensor block_forward(const TransformerBlock& blk, const Tensor& tokens,
                     const LoraAdapter* q_adapter, const LoraAdapter* v_adapter) {
  const int64_t d = blk.dim;
  if (tokens.rank() != 2 || tokens.dim(1) != d) {
    throw ShapeError(format_msg("block expects [M,", d, "], got ", shape_str(tokens.shape())));
  }
  const int64_t dh = d / blk.heads;
  Tensor h = layer_norm(tokens, blk.ln1_g, blk.ln1_b);
  Tensor q = add_bias(matmul(h, blk.wq), blk.bq);
  if (q_adapter != nullptr) q = add(q, lora_delta(*q_adapter, h));
  Tensor k = add_bias(matmul(h, blk.wk), blk.bk);
  Tensor v = add_bias(matmul(h, blk.wv), blk.bv);
  if (v_adapter != nullptr) v = add(v, lora_delta(*v_adapter, h));

  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(blk.heads));
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  for (int i = 0; i < blk.heads; ++i) {
    Tensor qh = slice_cols(q, i * dh, dh);
    Tensor kh = slice_cols(k, i * dh, dh);
    Tensor vh = slice_cols(v, i * dh, dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Tensor attn = softmax(scores, 1);
    heads.push_back(matmul(attn, vh));
  }
  Tensor ctx = blk.heads == 1 ? heads[0] : concat_cols(heads);
  Tensor attn_out = add_bias(matmul(ctx, blk.wo), blk.bo);
  Tensor t1 = add(tokens, attn_out);

  Tensor h2 = layer_norm(t1, blk.ln2_g, blk.ln2_b);
  Tensor m = gelu(add_bias(matmul(h2, blk.mlp_w1), blk.mlp_b1));
  m = add_bias(matmul(m, blk.mlp_w2), blk.mlp_b2);
  return add(t1, m);
}

Tensor skip_forward(const SkipConv& stem, const Tensor& vol) {
  return gelu(conv_forward(stem.conv2, gelu(conv_forward(stem.conv1, vol))));
}

Tensor tokens_to_grid(const Tensor& tokens, int grid) {
  const int64_t n = int64_t(grid) * grid * grid;
  if (tokens.rank() != 2 || tokens.dim(0) != n) {
    throw ShapeError(format_msg("tokens_to_grid: expected [", n, ",d], got ", shape_str(tokens.shape())));
  }
  const int64_t d = tokens.dim(1);
  return reshape(transpose(tokens), {d, grid, grid, grid});
}

}  // namespace pemma
