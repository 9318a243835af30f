#include <algorithm>
#include <cmath>
#include <numbers>

#include "voxmae/errors.hpp"
#include "voxmae/rng.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

std::string to_string(Unit u) { return u == Unit::Hounsfield ? "HU" : "normalized"; }

Volume::Volume(Extents d, std::array<float, 3> s, Unit u, float fill) : dims(d), spacing(s), unit(u) {
  for (int e : dims)
    if (e <= 0) throw InvalidArgument("Volume: extents must be positive");
  voxels.assign(voxel_count(), fill);
}

std::size_t Volume::voxel_count() const {
  return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(dims[2]);
}

void Volume::validate() const {
  for (int e : dims)
    if (e <= 0) throw InvalidArgument("Volume: extents must be positive");
  for (float s : spacing)
    if (!(s > 0.0f)) throw InvalidArgument("Volume: spacing must be positive");
  if (voxels.size() != voxel_count())
    throw InvalidArgument("Volume: voxel count " + std::to_string(voxels.size()) + " does not match extents (" +
                          std::to_string(voxel_count()) + ")");
  if (unit == Unit::Normalized) {
    for (float x : voxels)
      if (!(x >= 0.0f && x <= 1.0f)) throw InvalidArgument("Volume: normalized voxel outside [0,1]");
  }
}

float sample_trilinear(const Volume& v, double x, double y, double z) {
  const double c[3] = {std::clamp(x, 0.0, double(v.dims[0] - 1)), std::clamp(y, 0.0, double(v.dims[1] - 1)),
                       std::clamp(z, 0.0, double(v.dims[2] - 1))};
  int i0[3], i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    i0[a] = static_cast<int>(std::floor(c[a]));
    i1[a] = std::min(i0[a] + 1, v.dims[a] - 1);
    f[a] = c[a] - i0[a];
  }
  // Lerp in the a + t(b - a) form keeps constant regions exact.
  auto lerp = [](double a, double b, double t) { return a + t * (b - a); };
  const double c00 = lerp(v.at(i0[0], i0[1], i0[2]), v.at(i1[0], i0[1], i0[2]), f[0]);
  const double c10 = lerp(v.at(i0[0], i1[1], i0[2]), v.at(i1[0], i1[1], i0[2]), f[0]);
  const double c01 = lerp(v.at(i0[0], i0[1], i1[2]), v.at(i1[0], i0[1], i1[2]), f[0]);
  const double c11 = lerp(v.at(i0[0], i1[1], i1[2]), v.at(i1[0], i1[1], i1[2]), f[0]);
  return static_cast<float>(lerp(lerp(c00, c10, f[1]), lerp(c01, c11, f[1]), f[2]));
}

Volume resample_volume(const Volume& v, Extents new_size) {
  for (int e : new_size)
    if (e <= 0) throw InvalidArgument("resample_volume: new size must be positive");
  v.validate();
  std::array<float, 3> spacing{};
  for (int a = 0; a < 3; ++a)
    spacing[static_cast<std::size_t>(a)] =
        static_cast<float>(double(v.dims[static_cast<std::size_t>(a)]) * double(v.spacing[static_cast<std::size_t>(a)]) /
                           double(new_size[static_cast<std::size_t>(a)]));
  Volume out(new_size, spacing, v.unit);
  double step[3];
  for (int a = 0; a < 3; ++a) step[a] = double(v.dims[static_cast<std::size_t>(a)]) / double(new_size[static_cast<std::size_t>(a)]);
  for (int z = 0; z < new_size[2]; ++z) {
    const double sz = (z + 0.5) * step[2] - 0.5;
    for (int y = 0; y < new_size[1]; ++y) {
      const double sy = (y + 0.5) * step[1] - 0.5;
      for (int x = 0; x < new_size[0]; ++x) out.at(x, y, z) = sample_trilinear(v, (x + 0.5) * step[0] - 0.5, sy, sz);
    }
  }
  return out;
}

Volume clip_normalize(const Volume& v, double lo, double hi) {
  if (!(lo < hi)) throw InvalidArgument("clip_normalize: lower bound must be below upper bound");
  if (v.unit != Unit::Hounsfield) throw InvalidArgument("clip_normalize: input must be in HU, got " + to_string(v.unit));
  Volume out = v;
  out.unit = Unit::Normalized;
  const double range = hi - lo;
  for (float& x : out.voxels) x = static_cast<float>((std::clamp(double(x), lo, hi) - lo) / range);
  return out;
}

Volume flip(const Volume& v, FlipAxes axes) {
  Volume out = v;
  const auto [nx, ny, nz] = v.dims;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x)
        out.at(x, y, z) = v.at(axes.x ? nx - 1 - x : x, axes.y ? ny - 1 - y : y, axes.z ? nz - 1 - z : z);
  return out;
}

// ---------------------------------------------------------------- augmentation

void AugmentationSpec::validate() const {
  for (double p : flip_probability)
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("AugmentationSpec: flip probability outside [0,1]");
  if (rotation_max_deg < 0.0) throw InvalidArgument("AugmentationSpec: negative rotation");
  if (!(scale_lo > 0.0 && scale_lo <= scale_hi)) throw InvalidArgument("AugmentationSpec: scale range");
  if (noise_sigma < 0.0) throw InvalidArgument("AugmentationSpec: negative noise sigma");
  if (!(smooth_sigma_lo >= 0.0 && smooth_sigma_lo <= smooth_sigma_hi)) throw InvalidArgument("AugmentationSpec: smoothing range");
  if (!(gamma_lo > 0.0 && gamma_lo <= gamma_hi)) throw InvalidArgument("AugmentationSpec: gamma range");
  if (translation_max_voxels < 0) throw InvalidArgument("AugmentationSpec: negative translation");
}

AugmentationSpec AugmentationSpec::identity() { return {}; }

AugmentationSpec AugmentationSpec::finetune_default() {
  AugmentationSpec s;
  s.rotation_max_deg = 10.0;
  s.scale_lo = 0.9;
  s.scale_hi = 1.1;
  s.noise_sigma = 0.01;
  s.smooth_sigma_lo = 0.0;
  s.smooth_sigma_hi = 1.0;
  s.gamma_lo = 0.8;
  s.gamma_hi = 1.25;
  s.translation_max_voxels = 4;
  return s;
}

AugmentationSpec AugmentationSpec::desk_finetune() {
  AugmentationSpec s = finetune_default();
  s.gamma_lo = 1.0;
  s.gamma_hi = 1.0;
  return s;
}

AugmentationSpec AugmentationSpec::aggressive() {
  AugmentationSpec s = finetune_default();
  s.rotation_max_deg *= 2.0;
  s.noise_sigma *= 2.0;
  s.flip_probability = {0.5, 0.5, 0.5};
  return s;
}

AugmentationSpec AugmentationSpec::pretrain_flips() {
  AugmentationSpec s;
  s.flip_probability = {0.5, 0.0, 0.5};
  return s;
}

Volume gaussian_smooth(const Volume& v, double sigma) {
  if (sigma <= 0.0) return v;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * i * i / (sigma * sigma));
    kernel[static_cast<std::size_t>(i + radius)] = w;
    total += w;
  }
  for (double& w : kernel) w /= total;

  Volume cur = v;
  Volume next = v;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = v.dims[static_cast<std::size_t>(axis)];
    for (int z = 0; z < v.dims[2]; ++z)
      for (int y = 0; y < v.dims[1]; ++y)
        for (int x = 0; x < v.dims[0]; ++x) {
          int p[3] = {x, y, z};
          const int centre = p[axis];
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            p[axis] = std::clamp(centre + k, 0, n - 1);
            acc += kernel[static_cast<std::size_t>(k + radius)] * cur.at(p[0], p[1], p[2]);
          }
          next.at(x, y, z) = static_cast<float>(acc);
        }
    std::swap(cur, next);
  }
  return cur;
}

namespace {

Volume affine_resample(const Volume& v, const std::array<double, 3>& angles_rad, double scale_factor,
                       const std::array<int, 3>& shift) {
  // Rotation R = Rz * Ry * Rx; output voxel p samples the source at
  // R^T ((p - c - t) / s) + c, the inverse of  p = s R (q - c) + c + t.
  const double cx = std::cos(angles_rad[0]), sx = std::sin(angles_rad[0]);
  const double cy = std::cos(angles_rad[1]), sy = std::sin(angles_rad[1]);
  const double cz = std::cos(angles_rad[2]), sz = std::sin(angles_rad[2]);
  const double r[3][3] = {{cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx},
                          {sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx},
                          {-sy, cy * sx, cy * cx}};
  const double c[3] = {(v.dims[0] - 1) / 2.0, (v.dims[1] - 1) / 2.0, (v.dims[2] - 1) / 2.0};
  Volume out = v;
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[0]; ++x) {
        const double d[3] = {(x - c[0] - shift[0]) / scale_factor, (y - c[1] - shift[1]) / scale_factor,
                             (z - c[2] - shift[2]) / scale_factor};
        double q[3];
        for (int a = 0; a < 3; ++a) q[a] = r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2] + c[a];
        out.at(x, y, z) = sample_trilinear(v, q[0], q[1], q[2]);
      }
  return out;
}

}  // namespace

Volume augment(const Volume& v, const AugmentationSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (v.unit != Unit::Normalized) throw InvalidArgument("augment: input must be normalized");
  Rng rng(seed);

  // Every parameter is drawn unconditionally so the stream layout is fixed.
  FlipAxes axes;
  axes.x = rng.uniform() < spec.flip_probability[0];
  axes.y = rng.uniform() < spec.flip_probability[1];
  axes.z = rng.uniform() < spec.flip_probability[2];
  const double deg = std::numbers::pi / 180.0;
  std::array<double, 3> angles{};
  for (double& a : angles) a = rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg) * deg;
  const double scale_factor = rng.uniform(spec.scale_lo, spec.scale_hi);
  std::array<int, 3> shift{};
  for (int& s : shift)
    s = static_cast<int>(rng.between(-spec.translation_max_voxels, spec.translation_max_voxels));
  const double smooth_sigma = rng.uniform(spec.smooth_sigma_lo, spec.smooth_sigma_hi);
  const double gamma = std::exp(rng.uniform(std::log(spec.gamma_lo), std::log(spec.gamma_hi)));
  const std::uint64_t noise_seed = rng.next_u64();

  Volume out = (axes.x || axes.y || axes.z) ? flip(v, axes) : v;
  const bool affine_identity =
      angles[0] == 0.0 && angles[1] == 0.0 && angles[2] == 0.0 && scale_factor == 1.0 && shift == std::array<int, 3>{0, 0, 0};
  if (!affine_identity) out = affine_resample(out, angles, scale_factor, shift);
  if (smooth_sigma > 1e-3) out = gaussian_smooth(out, smooth_sigma);
  if (spec.noise_sigma > 0.0) {
    Rng noise(noise_seed);
    for (float& x : out.voxels) x = static_cast<float>(x + spec.noise_sigma * noise.normal());
  }
  if (gamma != 1.0) {
    for (float& x : out.voxels) x = static_cast<float>(std::pow(std::max(0.0, double(x)), gamma));
  }
  for (float& x : out.voxels) x = std::clamp(x, 0.0f, 1.0f);
  return out;
}

}  // namespace voxmae
