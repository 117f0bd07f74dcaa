// Copyright (c) 2026, the pemma-lab authors
// SPDX-License-Identifier: Apache-2.0

#include "pemma/phantom.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using nlohmann::json;

namespace pemma {

int64_t LabelMap::count(uint8_t cls) const {
  int64_t n = 0;
  for (uint8_t v : labels) n += v == cls ? 1 : 0;
  return n;
}

Volume make_volume(int channels, std::array<int, 3> dims, float fill) {
  Volume v;
  v.channels = channels;
  v.dims = dims;
  v.voxels.assign(static_cast<size_t>(channels) * dims[0] * dims[1] * dims[2], fill);
  return v;
}

Tensor to_tensor(const Volume& v) {
  return Tensor({v.channels, v.dims[0], v.dims[1], v.dims[2]}, v.voxels);
}

Volume volume_from_tensor(const Tensor& t) {
  if (t.rank() != 4) throw ShapeError(format_msg("expected [c,z,y,x] tensor, got ", shape_str(t.shape())));
  Volume v;
  v.channels = static_cast<int>(t.dim(0));
  v.dims = {static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3))};
  v.voxels.assign(t.data().begin(), t.data().end());
  return v;
}

void PhantomSpec::validate() const {
  for (int d : dims) {
    if (d < 8) throw ConfigError("phantom dims must be at least 8 voxels per axis");
  }
  if (ct_contrast < 0.0f) throw ConfigError("ct_contrast must be >= 0");
  if (tumor_r_min < 1.0f || tumor_r_max < tumor_r_min || lymph_r_min < 1.0f || lymph_r_max < lymph_r_min) {
    throw ConfigError("ellipsoid radius ranges must satisfy 1 <= min <= max");
  }
  const float max_r = std::max(tumor_r_max, lymph_r_max);
  for (int d : dims) {
    if (2.0f * max_r + 2.0f >= static_cast<float>(d)) {
      throw ConfigError(format_msg("radius ", max_r, " does not fit inside dims of ", d));
    }
  }
}

namespace {

struct Ellipsoid {
  std::array<float, 3> center;
  std::array<float, 3> radii;

  bool contains(int z, int y, int x) const {
    const float dz = (static_cast<float>(z) - center[0]) / radii[0];
    const float dy = (static_cast<float>(y) - center[1]) / radii[1];
    const float dx = (static_cast<float>(x) - center[2]) / radii[2];
    return dz * dz + dy * dy + dx * dx <= 1.0f;
  }
};

Ellipsoid sample_ellipsoid(Rng& rng, const std::array<int, 3>& dims, float r_min, float r_max) {
  Ellipsoid e;
  for (int i = 0; i < 3; ++i) e.radii[static_cast<size_t>(i)] = static_cast<float>(rng.uniform(r_min, r_max));
  for (int i = 0; i < 3; ++i) {
    const float margin = e.radii[static_cast<size_t>(i)] + 1.0f;
    e.center[static_cast<size_t>(i)] =
        static_cast<float>(rng.uniform(margin, static_cast<float>(dims[static_cast<size_t>(i)]) - margin));
  }
  return e;
}

bool ellipsoids_overlap(const Ellipsoid& a, const Ellipsoid& b, const std::array<int, 3>& dims) {
  // exact voxel-level test
  for (int z = 0; z < dims[0]; ++z) {
    for (int y = 0; y < dims[1]; ++y) {
      for (int x = 0; x < dims[2]; ++x) {
        if (a.contains(z, y, x) && b.contains(z, y, x)) return true;
      }
    }
  }
  return false;
}

constexpr float kLymphCtContrast = 0.6f;
constexpr float kPetBackground = 0.12f;

}  // namespace

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);

  const Ellipsoid lymph = sample_ellipsoid(rng, spec.dims, spec.lymph_r_min, spec.lymph_r_max);
  Ellipsoid tumor;
  bool placed = false;
  for (int attempt = 0; attempt < 100; ++attempt) {
    tumor = sample_ellipsoid(rng, spec.dims, spec.tumor_r_min, spec.tumor_r_max);
    if (!ellipsoids_overlap(tumor, lymph, spec.dims)) {
      placed = true;
      break;
    }
  }
  if (!placed) throw DataError("could not place disjoint tumor and lymph ellipsoids in 100 tries");

  Phantom ph;
  ph.ct = make_volume(1, spec.dims);
  ph.pet = make_volume(1, spec.dims);
  ph.labels.dims = spec.dims;
  ph.labels.labels.assign(static_cast<size_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2], 0);

  // smooth low-frequency CT background, small enough that regional means stay
  // within the noise scale
  struct Mode {
    float fz, fy, fx, phase, amp;
  };
  std::array<Mode, 3> modes;
  for (Mode& m : modes) {
    m.fz = static_cast<float>(rng.uniform_int(1, 2));
    m.fy = static_cast<float>(rng.uniform_int(1, 2));
    m.fx = static_cast<float>(rng.uniform_int(1, 2));
    m.phase = static_cast<float>(rng.uniform(0.0, 6.2831853));
    m.amp = static_cast<float>(rng.uniform(0.005, 0.012));
  }

  const float two_pi = 6.2831853f;
  for (int z = 0; z < spec.dims[0]; ++z) {
    for (int y = 0; y < spec.dims[1]; ++y) {
      for (int x = 0; x < spec.dims[2]; ++x) {
        float bg = -0.1f;
        for (const Mode& m : modes) {
          bg += m.amp * std::cos(two_pi * (m.fz * z / spec.dims[0] + m.fy * y / spec.dims[1] +
                                           m.fx * x / spec.dims[2]) +
                                 m.phase);
        }
        float ct = bg;
        float pet = kPetBackground;
        if (tumor.contains(z, y, x)) {
          ct += spec.ct_contrast;
          pet += kPetBackground * spec.pet_snr;
          ph.labels.at(z, y, x) = 1;
        } else if (lymph.contains(z, y, x)) {
          ct += kLymphCtContrast;
          ph.labels.at(z, y, x) = 2;
        }
        ct += static_cast<float>(rng.normal(0.0, spec.noise_sigma_ct));
        pet += static_cast<float>(rng.normal(0.0, spec.noise_sigma_pet));
        ph.ct.at(0, z, y, x) = std::clamp(ct, -1.0f, 1.0f);
        ph.pet.at(0, z, y, x) = std::clamp(pet, 0.0f, 1.0f);
      }
    }
  }
  return ph;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<T> flip_axis(const std::vector<T>& in, int channels, const std::array<int, 3>& dims, int axis) {
  std::vector<T> out(in.size());
  const int64_t per_ch = int64_t(dims[0]) * dims[1] * dims[2];
  for (int c = 0; c < channels; ++c) {
    for (int z = 0; z < dims[0]; ++z) {
      for (int y = 0; y < dims[1]; ++y) {
        for (int x = 0; x < dims[2]; ++x) {
          const int sz = axis == 0 ? dims[0] - 1 - z : z;
          const int sy = axis == 1 ? dims[1] - 1 - y : y;
          const int sx = axis == 2 ? dims[2] - 1 - x : x;
          out[static_cast<size_t>(c * per_ch + (int64_t(z) * dims[1] + y) * dims[2] + x)] =
              in[static_cast<size_t>(c * per_ch + (int64_t(sz) * dims[1] + sy) * dims[2] + sx)];
        }
      }
    }
  }
  return out;
}

// one quarter turn in the x-y plane: (y, x) -> (x, Y-1-y); y/x extents swap
template <typename T>
std::vector<T> rot90_once(const std::vector<T>& in, int channels, const std::array<int, 3>& dims,
                          std::array<int, 3>& out_dims) {
  out_dims = {dims[0], dims[2], dims[1]};
  std::vector<T> out(in.size());
  const int64_t per_ch = int64_t(dims[0]) * dims[1] * dims[2];
  for (int c = 0; c < channels; ++c) {
    for (int z = 0; z < dims[0]; ++z) {
      for (int y = 0; y < dims[1]; ++y) {
        for (int x = 0; x < dims[2]; ++x) {
          const int ny = x;
          const int nx = dims[1] - 1 - y;
          out[static_cast<size_t>(c * per_ch + (int64_t(z) * out_dims[1] + ny) * out_dims[2] + nx)] =
              in[static_cast<size_t>(c * per_ch + (int64_t(z) * dims[1] + y) * dims[2] + x)];
        }
      }
    }
  }
  return out;
}

}  // namespace

Volume flip_volume(const Volume& v, int axis) {
  Volume out = v;
  out.voxels = flip_axis(v.voxels, v.channels, v.dims, axis);
  return out;
}

LabelMap flip_labels(const LabelMap& l, int axis) {
  LabelMap out = l;
  out.labels = flip_axis(l.labels, 1, l.dims, axis);
  return out;
}

Volume rot90_volume(const Volume& v, int quarter_turns) {
  Volume out = v;
  for (int i = 0; i < ((quarter_turns % 4) + 4) % 4; ++i) {
    std::array<int, 3> nd{};
    out.voxels = rot90_once(out.voxels, out.channels, out.dims, nd);
    out.dims = nd;
  }
  return out;
}

LabelMap rot90_labels(const LabelMap& l, int quarter_turns) {
  LabelMap out = l;
  for (int i = 0; i < ((quarter_turns % 4) + 4) % 4; ++i) {
    std::array<int, 3> nd{};
    out.labels = rot90_once(out.labels, 1, out.dims, nd);
    out.dims = nd;
  }
  return out;
}

Sample crop_sample(const Sample& s, std::array<int, 3> offset, int size) {
  for (int i = 0; i < 3; ++i) {
    if (offset[static_cast<size_t>(i)] < 0 ||
        offset[static_cast<size_t>(i)] + size > s.ct.dims[static_cast<size_t>(i)]) {
      throw ConfigError(format_msg("crop of size ", size, " at offset ", offset[static_cast<size_t>(i)],
                                   " exceeds dim ", s.ct.dims[static_cast<size_t>(i)]));
    }
  }
  Sample out;
  out.ct = make_volume(s.ct.channels, {size, size, size});
  out.pet = make_volume(s.pet.channels, {size, size, size});
  out.labels.dims = {size, size, size};
  out.labels.labels.assign(static_cast<size_t>(size) * size * size, 0);
  for (int z = 0; z < size; ++z) {
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const int sz = z + offset[0], sy = y + offset[1], sx = x + offset[2];
        for (int c = 0; c < s.ct.channels; ++c) out.ct.at(c, z, y, x) = s.ct.at(c, sz, sy, sx);
        for (int c = 0; c < s.pet.channels; ++c) out.pet.at(c, z, y, x) = s.pet.at(c, sz, sy, sx);
        out.labels.at(z, y, x) = s.labels.at(sz, sy, sx);
      }
    }
  }
  return out;
}

Sample augment(const Sample& s, const AugmentConfig& cfg, Rng& rng) {
  Sample out = s;
  // CT and PET travel as one channel-concatenated stack: every draw below
  // applies the identical spatial transform to both volumes and the labels.
  if (cfg.crop_prob > 0.0f && rng.chance(cfg.crop_prob)) {
    for (int d : s.ct.dims) {
      if (cfg.crop_size > d) throw ConfigError(format_msg("crop size ", cfg.crop_size, " exceeds volume dim ", d));
    }
    std::array<int, 3> off{};
    for (int i = 0; i < 3; ++i) {
      off[static_cast<size_t>(i)] = rng.uniform_int(0, s.ct.dims[static_cast<size_t>(i)] - cfg.crop_size);
    }
    out = crop_sample(out, off, cfg.crop_size);
  }
  for (int axis : {2, 1, 0}) {  // x, y, z
    if (rng.chance(cfg.flip_prob)) {
      out.ct = flip_volume(out.ct, axis);
      out.pet = flip_volume(out.pet, axis);
      out.labels = flip_labels(out.labels, axis);
    }
  }
  if (rng.chance(cfg.rot_prob)) {
    const int k = rng.uniform_int(1, 3);
    out.ct = rot90_volume(out.ct, k);
    out.pet = rot90_volume(out.pet, k);
    out.labels = rot90_labels(out.labels, k);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PVOL i/o
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kPvolVersion = 1;
constexpr uint32_t kDtypeF32 = 0;
constexpr uint32_t kDtypeU8 = 1;

void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(const unsigned char* p) {
  return uint32_t(p[0]) | (uint32_t(p[1]) << 8) | (uint32_t(p[2]) << 16) | (uint32_t(p[3]) << 24);
}

struct PvolHeader {
  uint32_t dtype, channels, dz, dy, dx;
};

PvolHeader read_pvol_header(const std::string& path, std::vector<char>& payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(format_msg("cannot open '", path, "'"));
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kPvolHeaderBytes) {
    throw FormatError(format_msg("'", path, "': truncated header, ", bytes.size(), " bytes at offset 0"));
  }
  if (std::memcmp(bytes.data(), "PVOL", 4) != 0) {
    throw FormatError(format_msg("'", path, "': bad magic at byte offset 0"));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint32_t version = get_u32(p + 4);
  if (version != kPvolVersion) {
    throw FormatError(format_msg("'", path, "': unsupported version ", version, " at byte offset 4"));
  }
  PvolHeader h{get_u32(p + 8), get_u32(p + 12), get_u32(p + 16), get_u32(p + 20), get_u32(p + 24)};
  payload.assign(bytes.begin() + kPvolHeaderBytes, bytes.end());
  return h;
}

void check_payload(const std::string& path, size_t actual, size_t expected) {
  if (actual != expected) {
    throw FormatError(format_msg("'", path, "': payload of ", actual, " bytes at byte offset ",
                                 kPvolHeaderBytes, ", expected ", expected));
  }
}

}  // namespace

void write_volume(const std::string& path, const Volume& v) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(format_msg("cannot write '", path, "'"));
  out.write("PVOL", 4);
  put_u32(out, kPvolVersion);
  put_u32(out, kDtypeF32);
  put_u32(out, static_cast<uint32_t>(v.channels));
  put_u32(out, static_cast<uint32_t>(v.dims[0]));
  put_u32(out, static_cast<uint32_t>(v.dims[1]));
  put_u32(out, static_cast<uint32_t>(v.dims[2]));
  out.write(reinterpret_cast<const char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
}

Volume read_volume(const std::string& path) {
  std::vector<char> payload;
  const PvolHeader h = read_pvol_header(path, payload);
  if (h.dtype != kDtypeF32) {
    throw FormatError(format_msg("'", path, "': expected f32 dtype tag, got ", h.dtype, " at byte offset 8"));
  }
  Volume v;
  v.channels = static_cast<int>(h.channels);
  v.dims = {static_cast<int>(h.dz), static_cast<int>(h.dy), static_cast<int>(h.dx)};
  const size_t n = static_cast<size_t>(h.channels) * h.dz * h.dy * h.dx;
  check_payload(path, payload.size(), n * sizeof(float));
  v.voxels.resize(n);
  std::memcpy(v.voxels.data(), payload.data(), payload.size());
  return v;
}

void write_labels(const std::string& path, const LabelMap& l) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(format_msg("cannot write '", path, "'"));
  out.write("PVOL", 4);
  put_u32(out, kPvolVersion);
  put_u32(out, kDtypeU8);
  put_u32(out, 1);
  put_u32(out, static_cast<uint32_t>(l.dims[0]));
  put_u32(out, static_cast<uint32_t>(l.dims[1]));
  put_u32(out, static_cast<uint32_t>(l.dims[2]));
  out.write(reinterpret_cast<const char*>(l.labels.data()), static_cast<std::streamsize>(l.labels.size()));
}

LabelMap read_labels(const std::string& path) {
  std::vector<char> payload;
  const PvolHeader h = read_pvol_header(path, payload);
  if (h.dtype != kDtypeU8) {
    throw FormatError(format_msg("'", path, "': expected u8 dtype tag, got ", h.dtype, " at byte offset 8"));
  }
  if (h.channels != 1) {
    throw FormatError(format_msg("'", path, "': label maps are single-channel, got ", h.channels));
  }
  LabelMap l;
  l.dims = {static_cast<int>(h.dz), static_cast<int>(h.dy), static_cast<int>(h.dx)};
  const size_t n = static_cast<size_t>(h.dz) * h.dy * h.dx;
  check_payload(path, payload.size(), n);
  l.labels.resize(n);
  std::memcpy(l.labels.data(), payload.data(), payload.size());
  for (uint8_t v : l.labels) {
    if (v >= kNumClasses) throw DataError(format_msg("'", path, "': label ", int(v), " outside {0,1,2}"));
  }
  return l;
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

DataConfig default_data_config(uint64_t seed) {
  DataConfig cfg;
  cfg.seed = seed;
  auto split = [&](float ct_contrast, float pet_snr, float noise, float r_min, float r_max, int train,
                   int val) {
    SplitSpec s;
    s.phantom.dims = cfg.dims;
    s.phantom.ct_contrast = ct_contrast;
    s.phantom.pet_snr = pet_snr;
    s.phantom.noise_sigma_ct = noise;
    s.phantom.noise_sigma_pet = noise;
    s.phantom.tumor_r_min = r_min;
    s.phantom.tumor_r_max = r_max;
    s.phantom.lymph_r_min = r_min;
    s.phantom.lymph_r_max = r_max;
    s.train_count = train;
    s.val_count = val;
    return s;
  };
  // roles mirror the pre-training / adaptation / CL task structure
  cfg.splits["pretrain"] = split(0.7f, 3.0f, 0.05f, 3.0f, 6.0f, 12, 4);
  cfg.splits["adapt"] = split(0.0f, 5.0f, 0.05f, 3.0f, 6.0f, 10, 4);
  cfg.splits["task1"] = split(0.3f, 4.0f, 0.08f, 2.0f, 4.0f, 6, 3);
  cfg.splits["task2"] = split(0.3f, 6.0f, 0.03f, 4.0f, 7.0f, 4, 2);
  return cfg;
}

void write_dataset_manifest(const std::string& path, const DatasetManifest& m) {
  json j;
  j["samples"] = json::array();
  for (const DatasetEntry& e : m.entries) {
    j["samples"].push_back(json{{"id", e.id},
                                {"ct", e.ct_path},
                                {"pet", e.pet_path},
                                {"labels", e.labels_path},
                                {"split", e.split},
                                {"train", e.train}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(format_msg("cannot write '", path, "'"));
  out << j.dump(2) << "\n";
}

DatasetManifest read_dataset_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(format_msg("cannot open '", path, "'"));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw FormatError(format_msg("malformed dataset manifest '", path, "': ", e.what()));
  }
  DatasetManifest m;
  for (const json& s : j.at("samples")) {
    m.entries.push_back(DatasetEntry{s.at("id").get<std::string>(), s.at("ct").get<std::string>(),
                                     s.at("pet").get<std::string>(), s.at("labels").get<std::string>(),
                                     s.at("split").get<std::string>(), s.at("train").get<bool>()});
  }
  return m;
}

DatasetManifest generate_dataset(const DataConfig& config, const std::string& out_dir) {
  fs::create_directories(out_dir);
  DatasetManifest manifest;
  for (const auto& [split_name, split] : config.splits) {
    // per-sample seeds: fork the top seed by split tag, then add the index
    const uint64_t split_seed = Rng(config.seed).fork(split_name).seed();
    const int total = split.train_count + split.val_count;
    for (int i = 0; i < total; ++i) {
      PhantomSpec spec = split.phantom;
      spec.dims = config.dims;
      spec.seed = split_seed + static_cast<uint64_t>(i);
      const Phantom ph = generate_phantom(spec);
      DatasetEntry e;
      e.id = format_msg(split_name, "_", i < 10 ? "0" : "", i);
      e.split = split_name;
      e.train = i < split.train_count;
      e.ct_path = e.id + "_ct.pvol";
      e.pet_path = e.id + "_pet.pvol";
      e.labels_path = e.id + "_labels.pvol";
      write_volume((fs::path(out_dir) / e.ct_path).string(), ph.ct);
      write_volume((fs::path(out_dir) / e.pet_path).string(), ph.pet);
      write_labels((fs::path(out_dir) / e.labels_path).string(), ph.labels);
      manifest.entries.push_back(std::move(e));
    }
  }
  write_dataset_manifest((fs::path(out_dir) / "manifest.json").string(), manifest);
  return manifest;
}

std::vector<LoadedSample> load_split(const DatasetManifest& manifest, const std::string& dataset_dir,
                                     std::string_view split, bool train) {
  std::vector<LoadedSample> out;
  for (const DatasetEntry& e : manifest.entries) {
    if (e.split != split || e.train != train) continue;
    LoadedSample s;
    s.id = e.id;
    s.sample.ct = read_volume((fs::path(dataset_dir) / e.ct_path).string());
    s.sample.pet = read_volume((fs::path(dataset_dir) / e.pet_path).string());
    s.sample.labels = read_labels((fs::path(dataset_dir) / e.labels_path).string());
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace pemma
