// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Neural layers shared by every model topology: 3-D patch embedding,
// pre-norm transformer block, conv/deconv stages, skip-connection stem, and
// the grouped parameter registry that drives freezing and checkpointing.

#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "pemma/rng.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

enum class ParamGroup { kBase, kPetPe, kLora, kPetSk };

std::string_view to_string(ParamGroup g);
/// Throws ConfigError on an unknown tag.
ParamGroup parse_group(std::string_view tag);

/// A named, group-tagged trainable tensor — the unit of freezing and
/// checkpointing.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
  ParamGroup group = ParamGroup::kBase;
};

/// Ordered registry of a model's parameters. Registration order is the
/// checkpoint manifest order, so it must be deterministic per topology.
class ParamRegistry {
 public:
  Tensor add(const std::string& name, Tensor t, ParamGroup group, bool trainable = true);
  Parameter* find(std::string_view name);
  const Parameter* find(std::string_view name) const;

  std::vector<Parameter>& items() { return params_; }
  const std::vector<Parameter>& items() const { return params_; }

  int64_t total_count() const;
  int64_t count(ParamGroup g) const;
  int64_t trainable_count() const;

  /// Exactly the parameters whose group is in `groups` become trainable;
  /// everything else is frozen and loses its gradient storage.
  void set_trainable_groups(const std::set<ParamGroup>& groups);

  /// FNV-1a over the raw float bytes of every parameter in `g`, in
  /// registration order. Used for freeze-integrity checks.
  uint64_t group_hash(ParamGroup g) const;

  void zero_grads();

 private:
  std::vector<Parameter> params_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// 3x3x3 (or 1x1x1) convolution stage; weight [f, c, k, k, k].
struct ConvStage {
  Tensor weight;
  Tensor bias;
  int stride = 1;
  int padding = 0;
};

/// Transposed convolution stage; weight [c, f, k, k, k]; side -> (side-1)*stride + k.
struct DeconvStage {
  Tensor weight;
  Tensor bias;
  int stride = 2;
};

Tensor conv_forward(const ConvStage& layer, const Tensor& x);
Tensor deconv_forward(const DeconvStage& layer, const Tensor& x);

/// Cubic-patch embedding: weight [p^3*c, d] (rows grouped per channel, CT
/// rows first), bias [d], optional learned positions [N, d].
struct PatchEmbed3D {
  int patch = 4;
  int channels = 1;
  int dim = 32;
  int grid = 4;  // tokens per spatial axis; N = grid^3
  Tensor weight;
  Tensor bias;
  Tensor pos;  // undefined when the stream reuses another embed's table
  int64_t tokens() const { return int64_t(grid) * grid * grid; }
};

/// vol [c, D, D, D] -> tokens [N, d]; token order is z-major, then y, then x.
/// Adds pe.pos when it is defined; pass positions explicitly otherwise.
Tensor patch_embed_forward(const PatchEmbed3D& pe, const Tensor& vol);
Tensor patch_embed_forward(const PatchEmbed3D& pe, const Tensor& vol, const Tensor& pos);

struct LoraAdapter;  // lora.hpp

/// Pre-norm transformer block. Projection weights are stored input-major
/// ([d_in, d_out]), applied as tokens * W + b.
struct TransformerBlock {
  int dim = 32;
  int heads = 4;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;  // d -> 4d -> d, GELU
};

/// tokens [M, d] -> [M, d] for any M >= 1:
///   t = t + W_O . Attn(norm1(t));  t = t + MLP(norm2(t))
/// Attention scores are Q K^T / sqrt(d_head). Optional LoRA adapters add
/// their delta to the Q and V projections.
Tensor block_forward(const TransformerBlock& blk, const Tensor& tokens,
                     const LoraAdapter* q_adapter = nullptr, const LoraAdapter* v_adapter = nullptr);

/// Direct input-to-decoder stem: two 3x3x3 convs (stride 1, padding 1) with
/// GELU after each; spatial shape is preserved.
struct SkipConv {
  ConvStage conv1;
  ConvStage conv2;
};

Tensor skip_forward(const SkipConv& stem, const Tensor& vol);

// ---------------------------------------------------------------------------
// Builders (all weights registered; init streams derived per parameter name)
// ---------------------------------------------------------------------------

PatchEmbed3D make_patch_embed(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                              int patch, int channels, int dim, int grid, bool with_pos, const Rng& base);

TransformerBlock make_block(ParamRegistry& reg, const std::string& prefix, int dim, int heads, const Rng& base);

SkipConv make_skip_conv(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                        int in_channels, int features, const Rng& base, bool zero_final = false);

ConvStage make_conv(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                    int in_channels, int out_channels, int kernel, int stride, int padding, const Rng& base);

DeconvStage make_deconv(ParamRegistry& reg, const std::string& prefix, ParamGroup group,
                        int in_channels, int out_channels, int kernel, int stride, const Rng& base);

/// Tokens [N, d] -> feature grid [d, g, g, g] (token order is z, y, x).
Tensor tokens_to_grid(const Tensor& tokens, int grid);

}  // namespace pemma
