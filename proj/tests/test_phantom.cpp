// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "pemma/phantom.hpp"

using namespace pemma;
namespace fs = std::filesystem;

namespace {

std::string temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("pemma_phantom_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

PhantomSpec small_spec(uint64_t seed) {
  PhantomSpec s;
  s.seed = seed;
  s.dims = {16, 16, 16};
  s.tumor_r_min = 2.0f;
  s.tumor_r_max = 3.5f;
  s.lymph_r_min = 2.0f;
  s.lymph_r_max = 3.5f;
  return s;
}

double region_mean(const Volume& v, const LabelMap& l, uint8_t cls) {
  double total = 0;
  int64_t n = 0;
  for (size_t i = 0; i < l.labels.size(); ++i) {
    if (l.labels[i] == cls) {
      total += v.voxels[i];
      ++n;
    }
  }
  return n == 0 ? 0.0 : total / static_cast<double>(n);
}

}  // namespace

TEST_CASE("generation is deterministic and labeled") {
  const PhantomSpec spec = small_spec(42);
  const Phantom a = generate_phantom(spec);
  const Phantom b = generate_phantom(spec);
  CHECK(a.ct.voxels == b.ct.voxels);
  CHECK(a.pet.voxels == b.pet.voxels);
  CHECK(a.labels.labels == b.labels.labels);

  CHECK(a.labels.count(1) > 0);
  CHECK(a.labels.count(2) > 0);
  for (float v : a.ct.voxels) {
    CHECK(std::isfinite(v));
    CHECK(v >= -1.0f);
    CHECK(v <= 1.0f);
  }
  for (float v : a.pet.voxels) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }

  const Phantom c = generate_phantom(small_spec(43));
  CHECK(a.ct.voxels != c.ct.voxels);
}

TEST_CASE("ct_contrast 0 makes the tumor invisible in CT") {
  PhantomSpec spec = small_spec(7);
  spec.ct_contrast = 0.0f;
  const Phantom ph = generate_phantom(spec);
  const double tumor_mean = region_mean(ph.ct, ph.labels, 1);
  const double bg_mean = region_mean(ph.ct, ph.labels, 0);
  CHECK(std::abs(tumor_mean - bg_mean) < spec.noise_sigma_ct);
}

TEST_CASE("pet hotspot clears the background by ten sigmas at snr 5") {
  PhantomSpec spec = small_spec(8);
  spec.pet_snr = 5.0f;
  spec.noise_sigma_pet = 0.05f;
  const Phantom ph = generate_phantom(spec);
  const double tumor_mean = region_mean(ph.pet, ph.labels, 1);
  const double bg_mean = region_mean(ph.pet, ph.labels, 0);
  CHECK(tumor_mean > bg_mean + 10.0 * spec.noise_sigma_pet);
}

TEST_CASE("pet separability grows with the snr knob") {
  double prev = -1.0;
  for (float snr : {1.0f, 3.0f, 5.0f}) {
    PhantomSpec spec = small_spec(9);
    spec.pet_snr = snr;
    const Phantom ph = generate_phantom(spec);
    const double gap = region_mean(ph.pet, ph.labels, 1) - region_mean(ph.pet, ph.labels, 0);
    CHECK(gap >= prev);
    prev = gap;
  }
}

TEST_CASE("identity pipeline when every probability is zero") {
  const Phantom ph = generate_phantom(small_spec(10));
  Sample s{ph.ct, ph.pet, ph.labels};
  AugmentConfig cfg;
  cfg.crop_prob = 0.0f;
  cfg.flip_prob = 0.0f;
  cfg.rot_prob = 0.0f;
  Rng rng(1);
  const Sample out = augment(s, cfg, rng);
  CHECK(out.ct.voxels == s.ct.voxels);
  CHECK(out.pet.voxels == s.pet.voxels);
  CHECK(out.labels.labels == s.labels.labels);
}

TEST_CASE("flip is an involution and preserves class counts") {
  const Phantom ph = generate_phantom(small_spec(11));
  for (int axis : {0, 1, 2}) {
    const Volume once = flip_volume(ph.ct, axis);
    CHECK(once.voxels != ph.ct.voxels);
    CHECK(flip_volume(once, axis).voxels == ph.ct.voxels);
    const LabelMap flipped = flip_labels(ph.labels, axis);
    CHECK(flipped.count(1) == ph.labels.count(1));
    CHECK(flipped.count(2) == ph.labels.count(2));
  }
}

TEST_CASE("four quarter turns restore the volume; counts preserved") {
  const Phantom ph = generate_phantom(small_spec(12));
  CHECK(rot90_volume(ph.ct, 4).voxels == ph.ct.voxels);
  Volume v = ph.ct;
  for (int i = 0; i < 4; ++i) v = rot90_volume(v, 1);
  CHECK(v.voxels == ph.ct.voxels);
  for (int k : {1, 2, 3}) {
    CHECK(rot90_labels(ph.labels, k).count(1) == ph.labels.count(1));
    CHECK(rot90_labels(ph.labels, k).count(2) == ph.labels.count(2));
  }
}

TEST_CASE("crop validates bounds") {
  const Phantom ph = generate_phantom(small_spec(13));
  Sample s{ph.ct, ph.pet, ph.labels};
  CHECK_THROWS_AS(crop_sample(s, {0, 0, 0}, 20), ConfigError);
  AugmentConfig cfg;
  cfg.crop_prob = 1.0f;
  cfg.crop_size = 20;
  Rng rng(2);
  CHECK_THROWS_AS(augment(s, cfg, rng), ConfigError);
  const Sample c = crop_sample(s, {2, 3, 4}, 8);
  CHECK(c.ct.dims == std::array<int, 3>{8, 8, 8});
  CHECK(c.ct.at(0, 0, 0, 0) == ph.ct.at(0, 2, 3, 4));
  CHECK(c.labels.at(0, 0, 0) == ph.labels.at(2, 3, 4));
}

TEST_CASE("augmentation probabilities hit their targets over 10k draws") {
  // A coordinate-coded cube makes each applied transform decodable. Flip and
  // rot rates are measured in separate batches: composed flips+rotations have
  // group coincidences ((fy,fx,k) == (!fy,!fx,k+2)), so the generator draws
  // are not identifiable from a single output.
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

  // crop fires at 0.5 under the default pipeline
  {
    AugmentConfig cfg;
    cfg.crop_size = 2;
    Rng rng(20260807);
    int crops = 0;
    for (int i = 0; i < draws; ++i) {
      if (augment(s, cfg, rng).ct.dims[0] == cfg.crop_size) ++crops;
    }
    const double rate = static_cast<double>(crops) / draws;
    CHECK(rate > 0.48);
    CHECK(rate < 0.52);
  }

  // per-axis flips fire at 0.2 each (flips alone decode uniquely)
  {
    AugmentConfig cfg;
    cfg.crop_prob = 0.0f;
    cfg.rot_prob = 0.0f;
    Rng rng(20260808);
    int flips[3] = {0, 0, 0};
    for (int i = 0; i < draws; ++i) {
      const Sample out = augment(s, cfg, rng);
      // corner (0,0,0) lands on in(fz?3:0, fy?3:0, fx?3:0): the coordinate
      // code 16z+4y+x decodes all three flags exactly
      const int code = static_cast<int>(out.ct.voxels[0]);
      flips[0] += code / 16 == 3;
      flips[1] += (code / 4) % 4 == 3;
      flips[2] += code % 4 == 3;
      CHECK(out.labels.count(1) == c1);
      CHECK(out.labels.count(2) == c2);
    }
    for (int a = 0; a < 3; ++a) {
      const double rate = static_cast<double>(flips[a]) / draws;
      CHECK(rate > 0.18);
      CHECK(rate < 0.22);
    }
  }

  // rot90 fires at 0.2 with k uniform on {1,2,3}
  {
    AugmentConfig cfg;
    cfg.crop_prob = 0.0f;
    cfg.flip_prob = 0.0f;
    Rng rng(20260809);
    int rots = 0;
    int kc[4] = {0, 0, 0, 0};
    for (int i = 0; i < draws; ++i) {
      const Sample out = augment(s, cfg, rng);
      for (int k = 1; k <= 3; ++k) {
        if (out.ct.voxels == rot90_volume(s.ct, k).voxels) {
          ++rots;
          ++kc[k];
          CHECK(out.labels.count(1) == c1);
          CHECK(out.labels.count(2) == c2);
          break;
        }
      }
    }
    const double rate = static_cast<double>(rots) / draws;
    CHECK(rate > 0.18);
    CHECK(rate < 0.22);
    for (int k = 1; k <= 3; ++k) CHECK(kc[k] > 0);
  }
}

TEST_CASE("pvol round trip is bit exact; header is 28 bytes") {
  const std::string dir = temp_dir("io");
  const Phantom ph = generate_phantom(small_spec(21));
  write_volume(dir + "/ct.pvol", ph.ct);
  const Volume ct = read_volume(dir + "/ct.pvol");
  CHECK(ct.channels == ph.ct.channels);
  CHECK(ct.dims == ph.ct.dims);
  CHECK(std::memcmp(ct.voxels.data(), ph.ct.voxels.data(), ct.voxels.size() * sizeof(float)) == 0);

  write_labels(dir + "/labels.pvol", ph.labels);
  const LabelMap l = read_labels(dir + "/labels.pvol");
  CHECK(l.labels == ph.labels.labels);

  CHECK(fs::file_size(dir + "/ct.pvol") == kPvolHeaderBytes + ph.ct.voxels.size() * sizeof(float));
  CHECK(fs::file_size(dir + "/labels.pvol") == kPvolHeaderBytes + ph.labels.labels.size());
}

TEST_CASE("pvol format violations carry byte offsets") {
  const std::string dir = temp_dir("io_bad");
  const Phantom ph = generate_phantom(small_spec(22));
  write_volume(dir + "/v.pvol", ph.ct);

  // bad magic
  {
    std::fstream f(dir + "/v.pvol", std::ios::in | std::ios::out | std::ios::binary);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_WITH_AS(read_volume(dir + "/v.pvol"), doctest::Contains("bad magic"), FormatError);

  // truncated payload
  write_volume(dir + "/v.pvol", ph.ct);
  fs::resize_file(dir + "/v.pvol", kPvolHeaderBytes + 11);
  CHECK_THROWS_WITH_AS(read_volume(dir + "/v.pvol"), doctest::Contains("offset 28"), FormatError);

  // label reader rejects an f32-sized payload behind a u8 tag
  write_labels(dir + "/l.pvol", ph.labels);
  {
    std::ofstream f(dir + "/l.pvol", std::ios::binary | std::ios::app);
    std::vector<char> extra(ph.labels.labels.size() * 3, 0);
    f.write(extra.data(), static_cast<std::streamsize>(extra.size()));
  }
  CHECK_THROWS_AS(read_labels(dir + "/l.pvol"), FormatError);

  // dtype mismatch both ways
  write_labels(dir + "/l.pvol", ph.labels);
  CHECK_THROWS_AS(read_volume(dir + "/l.pvol"), FormatError);
  write_volume(dir + "/v.pvol", ph.ct);
  CHECK_THROWS_AS(read_labels(dir + "/v.pvol"), FormatError);
}

TEST_CASE("dataset generation writes a loadable manifest with all splits") {
  const std::string dir = temp_dir("dataset");
  DataConfig cfg = default_data_config(77);
  cfg.dims = {16, 16, 16};
  for (auto& [name, split] : cfg.splits) {
    split.train_count = 2;
    split.val_count = 1;
    split.phantom.tumor_r_min = 2.0f;
    split.phantom.tumor_r_max = 3.0f;
    split.phantom.lymph_r_min = 2.0f;
    split.phantom.lymph_r_max = 3.0f;
  }
  const DatasetManifest m = generate_dataset(cfg, dir);
  CHECK(m.entries.size() == 4 * 3);
  const DatasetManifest reread = read_dataset_manifest(dir + "/manifest.json");
  CHECK(reread.entries.size() == m.entries.size());
  for (const std::string split : {"pretrain", "adapt", "task1", "task2"}) {
    const auto train = load_split(reread, dir, split, true);
    const auto val = load_split(reread, dir, split, false);
    CHECK(train.size() == 2);
    CHECK(val.size() == 1);
    for (const LoadedSample& s : train) {
      CHECK(s.sample.ct.dims == cfg.dims);
      CHECK(s.sample.labels.count(1) > 0);
    }
  }

  // regeneration is reproducible bit-for-bit
  const std::string dir2 = temp_dir("dataset2");
  generate_dataset(cfg, dir2);
  const auto a = load_split(m, dir, "adapt", true);
  const auto b = load_split(read_dataset_manifest(dir2 + "/manifest.json"), dir2, "adapt", true);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].sample.ct.voxels == b[i].sample.ct.voxels);
    CHECK(a[i].sample.labels.labels == b[i].sample.labels.labels);
  }
}
