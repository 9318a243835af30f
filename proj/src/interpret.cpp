#include "voxmae/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "voxmae/errors.hpp"
#include "voxmae/parallel.hpp"
#include "voxmae/rng.hpp"

namespace voxmae {

std::vector<double> gradcam_tokens(const Classifier& c, const Volume& v, int target_class) {
  if (target_class < 0 || target_class >= c.head.class_count)
    throw InvalidArgument("gradcam: class index " + std::to_string(target_class) + " outside [0, " + std::to_string(c.head.class_count) + ")");
  ad::Tape<float> tape;
  const auto bound = bind_parameters(tape, c.params, true);
  const auto g = classifier_forward(tape, bound, c.model, c.head, c.buffers, {&v}, false);
  tape.backward(ad::select(tape, g.logits, 0, target_class));

  const auto& a = tape.value(g.encoder.last_block);
  const auto& grad = tape.grad(g.encoder.last_block);
  const int n = a.rows() - 1, d = a.cols();
  std::vector<double> relevance(static_cast<std::size_t>(n), 0.0);
  if (grad.empty()) return relevance;
  std::vector<double> w(static_cast<std::size_t>(d), 0.0);
  for (int t = 1; t <= n; ++t)
    for (int j = 0; j < d; ++j) w[static_cast<std::size_t>(j)] += grad(t, j);
  for (auto& x : w) x /= n;
  for (int t = 1; t <= n; ++t) {
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += w[static_cast<std::size_t>(j)] * a(t, j);
    relevance[static_cast<std::size_t>(t - 1)] = std::max(0.0, s);
  }
  return relevance;
}

SaliencyVolume gradcam(const Classifier& c, const Volume& v, int target_class) {
  const auto relevance = gradcam_tokens(c, v, target_class);
  const Extents grid = c.model.grid();
  Volume coarse(grid, {1.0f, 1.0f, 1.0f}, Unit::Normalized);
  for (std::size_t i = 0; i < relevance.size(); ++i) coarse.voxels[i] = static_cast<float>(relevance[i]);
  SaliencyVolume s;
  s.target_class = target_class;
  s.values = resample_volume(coarse, v.dims);
  s.values.spacing = v.spacing;
  s.values.unit = Unit::Normalized;
  const float peak = *std::max_element(s.values.voxels.begin(), s.values.voxels.end());
  for (auto& x : s.values.voxels) x = peak > 0.0f ? std::clamp(x / peak, 0.0f, 1.0f) : 0.0f;
  return s;
}

// ---------------------------------------------------------------- entropy

double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("binary_entropy: p outside [0,1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

std::string to_string(EntropyMode m) { return m == EntropyMode::MeanOfEntropies ? "mean_of_entropies" : "entropy_of_mean"; }

EntropyMode parse_entropy_mode(const std::string& s) {
  if (s == "mean_of_entropies") return EntropyMode::MeanOfEntropies;
  if (s == "entropy_of_mean") return EntropyMode::EntropyOfMean;
  throw InvalidArgument("unknown entropy mode '" + s + "'");
}

TtaEntropy tta_entropy(const Classifier& c, const Volume& v, int n, const AugmentationSpec& preset, std::uint64_t seed, EntropyMode mode) {
  if (n < 1) throw InvalidArgument("tta_entropy: n must be at least 1");
  const int k = c.head.class_count;
  TtaEntropy out;
  std::vector<double> mean_p(static_cast<std::size_t>(k), 0.0);
  for (int i = 0; i < n; ++i) {
    const auto p = predict(c, augment(v, preset, mix_seed(seed, static_cast<std::uint64_t>(i))));
    double h = 0.0;
    for (int j = 0; j < k; ++j) {
      h += binary_entropy(p[static_cast<std::size_t>(j)]);
      mean_p[static_cast<std::size_t>(j)] += p[static_cast<std::size_t>(j)] / n;
    }
    out.per_draw.push_back(h / k);
  }
  if (mode == EntropyMode::MeanOfEntropies) {
    for (double h : out.per_draw) out.entropy += h;
    out.entropy /= n;
  } else {
    for (double p : mean_p) out.entropy += binary_entropy(std::clamp(p, 0.0, 1.0));
    out.entropy /= k;
  }
  return out;
}

EntropyReport dataset_entropy(const Classifier& c, const Dataset& d, int n, std::uint64_t seed, const AugmentationSpec& preset,
                              const std::string& preset_name, EntropyMode mode) {
  if (d.size() == 0) throw InvalidArgument("dataset_entropy: empty split");
  EntropyReport r;
  r.n_augmentations = n;
  r.preset = preset_name;
  r.mode = mode;
  r.per_case.assign(d.size(), 0.0);
  parallel_for(d.size(), [&](std::size_t i) {
    r.per_case[i] = tta_entropy(c, *d.volumes[i], n, preset, mix_seed(seed, static_cast<std::uint64_t>(i)), mode).entropy;
  });
  for (std::size_t i = 0; i < d.size(); ++i) {
    r.case_ids.push_back(i < d.manifest.records.size() ? d.manifest.records[i].path : std::to_string(i));
    r.mean += r.per_case[i];
  }
  r.mean /= static_cast<double>(d.size());
  return r;
}

void write_entropy_csv(const EntropyReport& r, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os.precision(10);
  os << "case_id,mean_entropy\n";
  for (std::size_t i = 0; i < r.per_case.size(); ++i) os << r.case_ids[i] << ',' << r.per_case[i] << '\n';
  os << "mean," << r.mean << '\n';
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

// ---------------------------------------------------------------- images

std::string to_string(Plane p) {
  switch (p) {
    case Plane::Axial: return "axial";
    case Plane::Coronal: return "coronal";
    case Plane::Sagittal: return "sagittal";
  }
  return "axial";
}

Plane parse_plane(const std::string& s) {
  if (s == "axial") return Plane::Axial;
  if (s == "coronal") return Plane::Coronal;
  if (s == "sagittal") return Plane::Sagittal;
  throw InvalidArgument("unknown plane '" + s + "' (expected axial, coronal or sagittal)");
}

namespace {

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::clamp(std::floor(v * 255.0 + 0.5), 0.0, 255.0)); }

}  // namespace

SliceImage slice_image(const Volume& v, Plane plane, int index, const SaliencyVolume* overlay) {
  const int axis = plane == Plane::Axial ? 2 : plane == Plane::Coronal ? 1 : 0;
  if (index < 0 || index >= v.dims[static_cast<std::size_t>(axis)])
    throw InvalidArgument("render_slices: " + to_string(plane) + " index " + std::to_string(index) + " outside [0, " +
                          std::to_string(v.dims[static_cast<std::size_t>(axis)]) + ")");
  if (overlay && overlay->values.dims != v.dims) throw InvalidArgument("render_slices: overlay extents differ from the volume");
  SliceImage img;
  img.width = plane == Plane::Sagittal ? v.dims[1] : v.dims[0];
  img.height = plane == Plane::Axial ? v.dims[1] : v.dims[2];
  img.channels = overlay ? 3 : 1;
  img.pixels.reserve(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int r = 0; r < img.height; ++r)
    for (int col = 0; col < img.width; ++col) {
      int x = 0, y = 0, z = 0;
      switch (plane) {
        case Plane::Axial: x = col, y = r, z = index; break;
        case Plane::Coronal: x = col, y = index, z = r; break;
        case Plane::Sagittal: x = index, y = col, z = r; break;
      }
      const double value = v.at(x, y, z);
      const std::uint8_t g = quantize(value);
      if (!overlay) {
        img.pixels.push_back(g);
        continue;
      }
      const double s = std::clamp(static_cast<double>(overlay->values.at(x, y, z)), 0.0, 1.0);
      const std::uint8_t red = static_cast<std::uint8_t>(std::clamp(std::floor(g + s * (255.0 - g) + 0.5), 0.0, 255.0));
      const std::uint8_t other = static_cast<std::uint8_t>(std::clamp(std::floor(g * (1.0 - s) + 0.5), 0.0, 255.0));
      img.pixels.insert(img.pixels.end(), {red, other, other});
    }
  return img;
}

void render_slices(const Volume& v, Plane plane, int index, const SaliencyVolume* overlay, const std::filesystem::path& path) {
  const SliceImage img = slice_image(v, plane, index, overlay);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace voxmae
