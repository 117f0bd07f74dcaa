// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Segmentation model topologies: the uni-modal CT (or PET) transformer with a
// UNETR-style decoder, the early-fusion 2-channel variant, and the PEMMA
// adaptation (PET token stream + LoRA on Q/V + parallel PET skip path, base
// frozen). Also owns the on-disk checkpoint format.

#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "pemma/layers.hpp"
#include "pemma/lora.hpp"

namespace pemma {

enum class Topology { kUnimodalCt, kUnimodalPet, kEarlyFusion, kPemma };
enum class Routing { kCtOnly, kPetOnly, kMix };
enum class InitStrategy { kRandom, kZero, kCrossModal };

std::string_view to_string(Topology t);
std::string_view to_string(Routing r);
std::string_view to_string(InitStrategy s);
Topology parse_topology(std::string_view s);
Routing parse_routing(std::string_view s);
InitStrategy parse_init_strategy(std::string_view s);

struct ModelConfig {
  int blocks = 12;       // L
  int dim = 32;          // d
  int heads = 4;
  int patch = 4;         // p (the decoder ladder is built for p = 4)
  int input_size = 16;   // D
  int skip_features = 16;  // f: stem/decoder channel width
  uint64_t seed = 101;

  int grid() const { return input_size / patch; }
  int64_t tokens() const { return int64_t(grid()) * grid() * grid(); }
  void validate() const;
};

/// UNETR-style ladder: the deepest tap is upsampled twice (g -> 2g -> D) and
/// merged with deconv chains from the shallower taps, then with the skip-stem
/// output, ending in a 1x1x1 head producing 3 class logits.
struct Decoder {
  DeconvStage up4, lat3, up_mid, lat2_a, lat2_b, lat1_a, lat1_b;
  ConvStage merge3, merge2, merge1, merge_stem, head;
};

/// Token counts observed during one forward pass, for routing checks.
struct ForwardTrace {
  std::vector<int64_t> block_token_counts;
  std::vector<int64_t> tap_token_counts;
};

class SegModel {
 public:
  SegModel() = default;
  SegModel(const SegModel&) = delete;
  SegModel& operator=(const SegModel&) = delete;
  SegModel(SegModel&&) = default;
  SegModel& operator=(SegModel&&) = default;

  ModelConfig config;
  Topology topology = Topology::kUnimodalCt;

  PatchEmbed3D embed;        // CT stream (2-channel for early fusion); owns positions
  PatchEmbed3D embed_pet;    // PEMMA only; reuses embed's positional table
  std::vector<TransformerBlock> blocks;
  SkipConv skip_main;        // CT stem (2-channel for early fusion)
  SkipConv skip_pet;         // PEMMA only
  Decoder decoder;
  AdapterSet adapters;       // empty until LoRA injection
  Routing routing = Routing::kCtOnly;
  float beta = 1.0f;

  ParamRegistry params;

  bool has_adapters() const { return !adapters.adapters.empty(); }

  /// Full forward to [3, D, D, D] logits. Missing-modality inference goes
  /// through infer_with_missing; here both volumes are required for
  /// multi-modal topologies and must share the spatial shape.
  Tensor forward(const Tensor& ct, const Tensor& pet, ForwardTrace* trace = nullptr) const;

  /// Blocks tapped by the decoder (1-based): ceil(L/4), ceil(L/2), ceil(3L/4), L.
  std::array<int, 4> tap_blocks() const;
};

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

SegModel build_unimodal(const ModelConfig& config, Topology topology);

/// Replaces the patch embedding and skip stem with 2-channel versions. The CT
/// slices are copied from the pretrained model; the PET slices follow `init`
/// (random / zero / bit-copy of the CT slice). Every parameter is trainable.
SegModel build_early_fusion(const SegModel& pretrained_ct, InitStrategy init);

/// Adds a PET patch embedding (group pet_pe), a parallel PET skip stem with a
/// zero final layer (group pet_sk), and LoRA adapters on Q/V (group lora);
/// freezes group base. Trainable set = {pet_pe, lora, pet_sk}.
SegModel build_pemma(const SegModel& pretrained_ct, int rank, float alpha, float beta,
                     Routing routing = Routing::kCtOnly);

/// Registers 2L adapters without touching the base weights; outputs stay
/// bit-identical until B departs from zero. Throws StateError on double
/// injection.
AdapterSet& inject_lora(SegModel& model, int rank, float alpha);

/// Independent CT and PET models whose probability fields are blended per
/// M_CP = w_c * M_C + (1 - w_c) * M_P.
struct LateFusionPair {
  SegModel ct_model;
  SegModel pet_model;
  float w_c = 0.5f;
};

LateFusionPair build_late_fusion(const SegModel& pretrained_ct);

/// Convex per-voxel blend of two probability fields; w_c outside [0,1] is a
/// ConfigError. Endpoint weights return the corresponding branch bit-exactly.
Tensor late_fusion_combine(const Tensor& m_c, const Tensor& m_p, float w_c);

// ---------------------------------------------------------------------------
// Routing / skip combination / missing modalities
// ---------------------------------------------------------------------------

/// [2N, d] -> [N, d]. ct_only takes rows [0, N); pet_only rows [N, 2N); mix
/// alternates: CT token i for even i, PET token i for odd i.
Tensor route_tokens(const Tensor& tokens, Routing strategy);

/// z_c + beta * z_p.
Tensor combine_skips(const Tensor& z_c, const Tensor& z_p, float beta);

/// Zero-fills whichever modality is absent; both absent is a DataError.
Tensor infer_with_missing(const SegModel& model, const std::optional<Tensor>& ct,
                          const std::optional<Tensor>& pet, ForwardTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

struct ParamCounts {
  int64_t base = 0, pet_pe = 0, lora = 0, pet_sk = 0;
  int64_t total = 0, trainable = 0;
};

ParamCounts count_params(const SegModel& model);
int64_t count_trainable(const SegModel& model, const std::set<ParamGroup>& groups);

// ---------------------------------------------------------------------------
// Checkpoints: a directory holding manifest.json (topology, config,
// adaptation hyperparameters, ordered parameter records) and params.bin
// (concatenated little-endian f32 in manifest order).
// ---------------------------------------------------------------------------

void save_checkpoint(const SegModel& model, const std::string& dir,
                     const std::set<ParamGroup>* group_filter = nullptr);

/// Loads the records present in the manifest; parameters the manifest does
/// not mention keep their current values. Shape or length mismatches and
/// unknown versions are FormatErrors.
void load_checkpoint(SegModel& model, const std::string& dir);

/// Rebuilds the model described by a full checkpoint and loads its weights.
SegModel load_model(const std::string& dir);

/// Fresh model with identical architecture and bit-identical parameters.
SegModel clone_model(const SegModel& model);

/// Hash of a checkpoint's stored bytes for one group, in manifest order.
uint64_t checkpoint_group_hash(const std::string& dir, ParamGroup group);

}  // namespace pemma
