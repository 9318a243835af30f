#pragma once

// Grad-CAM saliency, test-time-augmentation entropy and slice images.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "voxmae/finetune.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

struct SaliencyVolume {
  Volume values;  // input extents, max-normalized to [0,1]
  int target_class = 0;
};

// Relevance per patch token is ReLU(sum_d w_d A_td) where A is the final
// block output (before the last norm) and w_d the token-mean gradient of the
// target logit. The token grid is upsampled trilinearly to the input extents.
SaliencyVolume gradcam(const Classifier& c, const Volume& v, int target_class);

// Token-grid relevance before upsampling and normalization.
std::vector<double> gradcam_tokens(const Classifier& c, const Volume& v, int target_class);

// Natural-log binary entropy, 0 at p in {0,1}.
double binary_entropy(double p);

enum class EntropyMode { MeanOfEntropies, EntropyOfMean };

std::string to_string(EntropyMode m);
EntropyMode parse_entropy_mode(const std::string& s);

struct TtaEntropy {
  double entropy = 0.0;
  std::vector<double> per_draw;  // mean over classes, one per draw
};

// n seeded draws of `preset`; draw i uses mix_seed(seed, i).
TtaEntropy tta_entropy(const Classifier& c, const Volume& v, int n = 50, const AugmentationSpec& preset = AugmentationSpec::aggressive(),
                       std::uint64_t seed = 0, EntropyMode mode = EntropyMode::MeanOfEntropies);

struct EntropyReport {
  std::vector<std::string> case_ids;
  std::vector<double> per_case;
  double mean = 0.0;
  int n_augmentations = 50;
  std::string preset = "aggressive";
  EntropyMode mode = EntropyMode::MeanOfEntropies;
};

// Case k uses seed mix_seed(seed, k).
EntropyReport dataset_entropy(const Classifier& c, const Dataset& d, int n = 50, std::uint64_t seed = 0,
                              const AugmentationSpec& preset = AugmentationSpec::aggressive(), const std::string& preset_name = "aggressive",
                              EntropyMode mode = EntropyMode::MeanOfEntropies);

// case_id,mean_entropy rows then a final "mean,<value>" summary row.
void write_entropy_csv(const EntropyReport& r, const std::filesystem::path& path);

enum class Plane { Axial, Coronal, Sagittal };

std::string to_string(Plane p);
Plane parse_plane(const std::string& s);

struct SliceImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
};

// Axial fixes z (width x, height y); coronal fixes y (width x, height z);
// sagittal fixes x (width y, height z). Gray = floor(255 v + 0.5). With an
// overlay s: R = g + s (255 - g), G = B = g (1 - s).
SliceImage slice_image(const Volume& v, Plane plane, int index, const SaliencyVolume* overlay = nullptr);

// P5 without overlay, P6 with one.
void render_slices(const Volume& v, Plane plane, int index, const SaliencyVolume* overlay, const std::filesystem::path& path);

}  // namespace voxmae
