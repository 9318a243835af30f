#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace voxmae {

enum class Unit : std::uint8_t { Hounsfield, Normalized };

std::string to_string(Unit u);

using Extents = std::array<int, 3>;

// Dense scalar field with physical voxel spacing (mm). Voxels are stored
// x-fastest: index = x + dims.x * (y + dims.y * z).
struct Volume {
  Extents dims{0, 0, 0};
  std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
  std::vector<float> voxels;
  Unit unit = Unit::Normalized;

  Volume() = default;
  Volume(Extents dims, std::array<float, 3> spacing, Unit unit, float fill = 0.0f);

  std::size_t voxel_count() const;
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
  }
  float& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
  float at(int x, int y, int z) const { return voxels[index(x, y, z)]; }

  // Throws InvalidArgument when an invariant does not hold.
  void validate() const;

  bool operator==(const Volume&) const = default;
};

// Trilinear sample at continuous voxel coordinates; coordinates are clamped
// to the volume so samples beyond the boundary take the edge value.
float sample_trilinear(const Volume& v, double x, double y, double z);

// Per-axis new_spacing = original_size * original_spacing / new_size, voxel
// centers aligned so that resampling to the same size is the identity.
Volume resample_volume(const Volume& v, Extents new_size);

inline constexpr double kDefaultHuLow = -1200.0;
inline constexpr double kDefaultHuHigh = 800.0;

Volume clip_normalize(const Volume& v, double lo = kDefaultHuLow, double hi = kDefaultHuHigh);

struct FlipAxes {
  bool x = false;
  bool y = false;
  bool z = false;
};

Volume flip(const Volume& v, FlipAxes axes);

// ---------------------------------------------------------------- augmentation

struct AugmentationSpec {
  std::array<double, 3> flip_probability{0.0, 0.0, 0.0};
  double rotation_max_deg = 0.0;
  double scale_lo = 1.0;
  double scale_hi = 1.0;
  double noise_sigma = 0.0;
  double smooth_sigma_lo = 0.0;
  double smooth_sigma_hi = 0.0;
  double gamma_lo = 1.0;
  double gamma_hi = 1.0;
  int translation_max_voxels = 0;

  void validate() const;

  // Leaves the input untouched.
  static AugmentationSpec identity();
  // Rotation, scaling, translation, light noise, smoothing and contrast.
  static AugmentationSpec finetune_default();
  // finetune_default without the contrast (gamma) transform.
  static AugmentationSpec desk_finetune();
  // Test-time preset: doubled rotation and noise, flips on every axis.
  static AugmentationSpec aggressive();
  // Sagittal (x) and axial (z) mirror flips with probability 0.5 each.
  static AugmentationSpec pretrain_flips();
};

// Fixed order: flip -> affine (rotation/scale/translation) -> smoothing ->
// noise -> contrast, then clamp to [0,1]. Pure function of (v, spec, seed).
Volume augment(const Volume& v, const AugmentationSpec& spec, std::uint64_t seed);

// Separable Gaussian blur with the given sigma in voxels (edge-clamped).
Volume gaussian_smooth(const Volume& v, double sigma);

// ---------------------------------------------------------------- datasets

struct ManifestRecord {
  std::string path;
  std::vector<std::uint8_t> labels;
  std::optional<std::string> subject;

  bool operator==(const ManifestRecord&) const = default;
};

struct DatasetManifest {
  std::vector<std::string> class_names;
  std::vector<ManifestRecord> records;

  std::size_t class_count() const { return class_names.size(); }
  std::size_t size() const { return records.size(); }
  void validate() const;
  DatasetManifest subset(const std::vector<int>& indices) const;
  // Number of positives per class.
  std::vector<int> positive_counts() const;

  bool operator==(const DatasetManifest&) const = default;
};

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

struct SplitSpec {
  std::array<double, 3> ratios{0.5, 0.1, 0.4};
  std::uint64_t seed = 0;
  bool stratify = true;
  std::vector<Split> assignment;

  std::vector<int> indices(Split s) const;
};

SplitSpec split_dataset(const DatasetManifest& m, SplitSpec s);

// Largest-remainder allocation of `total` items proportionally to `weights`.
std::vector<int> largest_remainder(int total, const std::vector<double>& weights);

// ---------------------------------------------------------------- synthetic corpus

struct SyntheticSpec {
  Extents dims{32, 32, 32};
  int n_volumes = 64;
  int class_count = 1;
  double lesion_radius_lo = 3.0;
  double lesion_radius_hi = 5.0;
  double lesion_intensity_delta = 0.3;
  double background_texture_scale = 0.05;
  std::vector<double> prevalence{0.5};
  std::uint64_t seed = 0;
  // Vessel-like confounders: each volume gets 0..decoy_max straight tubes
  // of lesion intensity spanning one axis, independent of its labels.
  int decoy_max = 0;
  double decoy_radius = 1.5;
  // Emit Hounsfield units (inverse of the default clip window) instead of [0,1].
  bool hounsfield = false;

  void validate() const;
};

// Ground truth for one injected lesion.
struct Lesion {
  int record = 0;
  int class_index = 0;
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  bool contains(int x, int y, int z) const;
};

struct SyntheticCorpus {
  std::vector<Volume> volumes;
  DatasetManifest manifest;
  std::vector<Lesion> lesions;

  // Voxel mask (1 inside any lesion of the record, optionally one class).
  std::vector<std::uint8_t> lesion_mask(int record, std::optional<int> class_index = std::nullopt) const;
};

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

// In-memory dataset: a manifest plus its decoded volumes, index-aligned.
struct Dataset {
  DatasetManifest manifest;
  std::vector<std::shared_ptr<const Volume>> volumes;

  std::size_t size() const { return volumes.size(); }
  Dataset subset(const std::vector<int>& indices) const;
  static Dataset from_corpus(const SyntheticCorpus& corpus);
};

// ---------------------------------------------------------------- file formats

// TVOL: "TVL1", dims (3 x u32), spacing (3 x f32), dtype byte (0 = f32),
// raw payload; all little-endian.
inline constexpr std::size_t kTvolHeaderBytes = 4 + 12 + 12 + 1;

void write_volume(const Volume& v, const std::filesystem::path& path);

// The format carries no unit. Without a hint the unit is Normalized when every
// voxel lies in [0,1] and Hounsfield otherwise.
Volume read_volume(const std::filesystem::path& path, std::optional<Unit> unit_hint = std::nullopt);

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Reads every record's volume; relative paths resolve against the manifest's directory.
Dataset load_dataset(const std::filesystem::path& manifest_path);

}  // namespace voxmae
