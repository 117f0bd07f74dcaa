// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic CT/PET phantoms with tumor and lymph ellipsoids,
// the augmentation pipeline (crop / flip / rot90), the PVOL on-disk volume
// format, and dataset manifests for the pretrain/adapt/task1/task2 splits.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "pemma/rng.hpp"
#include "pemma/tensor.hpp"

namespace pemma {

/// Channel-major scan data; voxels laid out [channel][z][y][x].
struct Volume {
  int channels = 1;
  std::array<int, 3> dims{};  // z, y, x
  std::vector<float> voxels;

  int64_t voxels_per_channel() const { return int64_t(dims[0]) * dims[1] * dims[2]; }
  float& at(int c, int z, int y, int x) {
    return voxels[static_cast<size_t>(((int64_t(c) * dims[0] + z) * dims[1] + y) * dims[2] + x)];
  }
  float at(int c, int z, int y, int x) const {
    return voxels[static_cast<size_t>(((int64_t(c) * dims[0] + z) * dims[1] + y) * dims[2] + x)];
  }
};

/// Integer class mask: 0 background, 1 tumor, 2 lymph.
struct LabelMap {
  std::array<int, 3> dims{};
  std::vector<uint8_t> labels;

  uint8_t& at(int z, int y, int x) {
    return labels[static_cast<size_t>((int64_t(z) * dims[1] + y) * dims[2] + x)];
  }
  uint8_t at(int z, int y, int x) const {
    return labels[static_cast<size_t>((int64_t(z) * dims[1] + y) * dims[2] + x)];
  }
  int64_t count(uint8_t cls) const;
};

constexpr int kNumClasses = 3;

Volume make_volume(int channels, std::array<int, 3> dims, float fill = 0.0f);
Tensor to_tensor(const Volume& v);
Volume volume_from_tensor(const Tensor& t);

struct PhantomSpec {
  uint64_t seed = 1;
  std::array<int, 3> dims{32, 32, 32};
  float tumor_r_min = 3.0f, tumor_r_max = 6.0f;   // ellipsoid radii, voxels
  float lymph_r_min = 3.0f, lymph_r_max = 6.0f;
  float ct_contrast = 0.6f;  // tumor visibility in CT; 0 makes it CT-invisible
  float pet_snr = 5.0f;      // tumor hotspot intensity over the PET background
  float noise_sigma_ct = 0.05f;
  float noise_sigma_pet = 0.05f;

  void validate() const;
};

struct Phantom {
  Volume ct;   // normalized to [-1, 1]
  Volume pet;  // normalized to [0, 1]
  LabelMap labels;
};

/// Deterministic given the spec. The lymph ellipsoid is always CT-visible;
/// the tumor carries ct_contrast in CT and a pet_snr-scaled hotspot in PET.
/// Overlapping ellipsoids are re-sampled up to 100 times, then DataError.
Phantom generate_phantom(const PhantomSpec& spec);

// ---------------------------------------------------------------------------
// Augmentation: crop -> per-axis flips -> rot90 in the x-y plane, with one
// spatial transform shared by CT, PET, and labels.
// ---------------------------------------------------------------------------

struct AugmentConfig {
  float crop_prob = 0.5f;
  int crop_size = 16;
  float flip_prob = 0.2f;  // per axis x, y, z
  float rot_prob = 0.2f;   // rotate by 90 degrees, k in {1,2,3}
};

struct Sample {
  Volume ct;
  Volume pet;
  LabelMap labels;
};

Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng);

// deterministic building blocks (axis: 0 = z, 1 = y, 2 = x)
Volume flip_volume(const Volume& v, int axis);
LabelMap flip_labels(const LabelMap& l, int axis);
Volume rot90_volume(const Volume& v, int quarter_turns);
LabelMap rot90_labels(const LabelMap& l, int quarter_turns);
Sample crop_sample(const Sample& s, std::array<int, 3> offset, int size);

// ---------------------------------------------------------------------------
// PVOL file format:
//   "PVOL" | u32 version=1 | u32 dtype (0 = f32, 1 = u8) | u32 channels |
//   u32 dz | u32 dy | u32 dx | payload (little-endian)
// Header is exactly 28 bytes. Round trips are bit-exact.
// ---------------------------------------------------------------------------

constexpr size_t kPvolHeaderBytes = 28;

void write_volume(const std::string& path, const Volume& v);
Volume read_volume(const std::string& path);
void write_labels(const std::string& path, const LabelMap& l);
LabelMap read_labels(const std::string& path);

// ---------------------------------------------------------------------------
// Dataset generation and manifest
// ---------------------------------------------------------------------------

struct SplitSpec {
  PhantomSpec phantom;  // per-sample seeds are derived from this spec's seed
  int train_count = 4;
  int val_count = 2;
};

struct DataConfig {
  uint64_t seed = 7;
  std::array<int, 3> dims{32, 32, 32};
  std::map<std::string, SplitSpec> splits;  // pretrain / adapt / task1 / task2
};

/// Table-1-like role structure at desk scale: a larger CT-informative
/// pretrain split, a PET-necessary adapt split (tumor invisible in CT), and
/// two small shifted task splits.
DataConfig default_data_config(uint64_t seed);

struct DatasetEntry {
  std::string id;
  std::string ct_path, pet_path, labels_path;  // relative to the dataset dir
  std::string split;
  bool train = true;
};

struct DatasetManifest {
  std::vector<DatasetEntry> entries;
};

void write_dataset_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_dataset_manifest(const std::string& path);

/// Generates every split into out_dir and writes out_dir/manifest.json.
DatasetManifest generate_dataset(const DataConfig& config, const std::string& out_dir);

struct LoadedSample {
  std::string id;
  Sample sample;
};

/// Loads the samples of one split; `train` selects train vs validation.
std::vector<LoadedSample> load_split(const DatasetManifest& manifest, const std::string& dataset_dir,
                                     std::string_view split, bool train);

}  // namespace pemma
