#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "voxmae/errors.hpp"
#include "voxmae/rng.hpp"
#include "voxmae/volume.hpp"

using namespace voxmae;
namespace fs = std::filesystem;

namespace {

Volume random_volume(Extents dims, std::uint64_t seed, Unit unit = Unit::Normalized) {
  Volume v(dims, {0.7f, 0.8f, 1.25f}, unit);
  Rng rng(seed);
  for (auto& x : v.voxels) x = static_cast<float>(unit == Unit::Normalized ? rng.uniform() : rng.uniform(-1500.0, 1000.0));
  return v;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("voxmae_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST(Resample, SpacingFormula) {
  Volume v({512, 2, 2}, {0.703125f, 1.0f, 1.0f}, Unit::Normalized, 0.25f);
  const auto r = resample_volume(v, {256, 2, 2});
  EXPECT_EQ(r.dims, (Extents{256, 2, 2}));
  EXPECT_FLOAT_EQ(r.spacing[0], 1.40625f);
  EXPECT_FLOAT_EQ(r.spacing[1], 1.0f);
}

TEST(Resample, IdentityIsBitExact) {
  const auto v = random_volume({5, 6, 7}, 1);
  EXPECT_EQ(resample_volume(v, v.dims), v);
}

TEST(Resample, ConstantStaysConstant) {
  Volume v({9, 4, 5}, {1.0f, 2.0f, 3.0f}, Unit::Normalized, 0.375f);
  const auto r = resample_volume(v, {4, 11, 3});
  for (float x : r.voxels) ASSERT_FLOAT_EQ(x, 0.375f);
}

TEST(Resample, PreservesPhysicalExtent) {
  const auto v = random_volume({13, 8, 5}, 2);
  for (const Extents target : {Extents{7, 16, 3}, Extents{26, 4, 10}, Extents{1, 1, 1}}) {
    const auto r = resample_volume(v, target);
    for (int a = 0; a < 3; ++a)
      EXPECT_NEAR(r.dims[a] * static_cast<double>(r.spacing[a]) / (v.dims[a] * static_cast<double>(v.spacing[a])), 1.0, 1e-6);
  }
}

TEST(Resample, RejectsNonPositiveSize) {
  const auto v = random_volume({4, 4, 4}, 3);
  EXPECT_THROW(resample_volume(v, {0, 4, 4}), InvalidArgument);
}

TEST(ClipNormalize, Endpoints) {
  Volume v({3, 1, 1}, {1.0f, 1.0f, 1.0f}, Unit::Hounsfield);
  v.voxels = {-1500.0f, 800.0f, -200.0f};
  const auto n = clip_normalize(v);
  EXPECT_EQ(n.unit, Unit::Normalized);
  EXPECT_EQ(n.voxels[0], 0.0f);
  EXPECT_EQ(n.voxels[1], 1.0f);
  EXPECT_FLOAT_EQ(n.voxels[2], 0.5f);
}

TEST(ClipNormalize, RejectsNormalizedInputAndBadWindow) {
  Volume v({2, 2, 2}, {1.0f, 1.0f, 1.0f}, Unit::Normalized, 0.5f);
  EXPECT_THROW(clip_normalize(v), InvalidArgument);
  Volume hu({2, 2, 2}, {1.0f, 1.0f, 1.0f}, Unit::Hounsfield, 0.0f);
  EXPECT_THROW(clip_normalize(hu, 100.0, 100.0), InvalidArgument);
}

TEST(ClipNormalize, MonotoneInHu) {
  Volume v({64, 1, 1}, {1.0f, 1.0f, 1.0f}, Unit::Hounsfield);
  for (int i = 0; i < 64; ++i) v.voxels[static_cast<std::size_t>(i)] = -2000.0f + 50.0f * static_cast<float>(i);
  const auto n = clip_normalize(v);
  for (int i = 1; i < 64; ++i) ASSERT_LE(n.voxels[static_cast<std::size_t>(i - 1)], n.voxels[static_cast<std::size_t>(i)]);
}

TEST(Flip, TwoVoxelEnumeration) {
  Volume v({2, 1, 1}, {1.0f, 1.0f, 1.0f}, Unit::Normalized);
  v.voxels = {0.25f, 0.75f};
  EXPECT_EQ(flip(v, {.x = true}).voxels, (std::vector<float>{0.75f, 0.25f}));
}

TEST(Flip, InvolutionAndIdentity) {
  const auto v = random_volume({4, 5, 6}, 4);
  EXPECT_EQ(flip(v, {}), v);
  for (const FlipAxes a : {FlipAxes{true, false, false}, FlipAxes{false, true, true}, FlipAxes{true, true, true}}) {
    EXPECT_EQ(flip(flip(v, a), a), v);
    EXPECT_NE(flip(v, a), v);
  }
}

TEST(Augment, IdentitySpecLeavesInputUnchanged) {
  const auto v = random_volume({8, 8, 8}, 5);
  EXPECT_EQ(augment(v, AugmentationSpec::identity(), 99), v);
}

TEST(Augment, DeterministicPerSeedAndClamped) {
  const auto v = random_volume({12, 12, 12}, 6);
  const auto spec = AugmentationSpec::aggressive();
  const auto a = augment(v, spec, 7), b = augment(v, spec, 7), c = augment(v, spec, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  for (float x : a.voxels) ASSERT_TRUE(x >= 0.0f && x <= 1.0f);
}

TEST(Augment, NoiseMeanSquaredDeviation) {
  // Mid-gray input keeps clamping out of play for sigma 0.05 (10 sigma away).
  Volume v({100, 100, 100}, {1.0f, 1.0f, 1.0f}, Unit::Normalized, 0.5f);
  auto spec = AugmentationSpec::identity();
  const double s = 0.05;
  spec.noise_sigma = s;
  const auto out = augment(v, spec, 11);
  double msd = 0.0;
  for (std::size_t i = 0; i < out.voxels.size(); ++i) {
    const double d = static_cast<double>(out.voxels[i]) - 0.5;
    msd += d * d;
  }
  msd /= static_cast<double>(out.voxels.size());
  EXPECT_NEAR(msd / (s * s), 1.0, 0.05);
}

TEST(Augment, RejectsInvalidSpec) {
  auto spec = AugmentationSpec::identity();
  spec.scale_lo = 1.2;
  spec.scale_hi = 0.9;
  EXPECT_THROW(spec.validate(), InvalidArgument);
  spec = AugmentationSpec::identity();
  spec.flip_probability[1] = 1.5;
  EXPECT_THROW(spec.validate(), InvalidArgument);
}

TEST(Smooth, ConstantFixedPoint) {
  Volume v({6, 7, 8}, {1.0f, 1.0f, 1.0f}, Unit::Normalized, 0.6f);
  for (float x : gaussian_smooth(v, 1.3).voxels) ASSERT_NEAR(x, 0.6f, 1e-6f);
}

TEST(Synthetic, ZeroPrevalenceGivesNegatives) {
  SyntheticSpec s;
  s.dims = {16, 16, 16};
  s.n_volumes = 12;
  s.prevalence = {0.0};
  const auto c = generate_synthetic(s);
  for (const auto& r : c.manifest.records) EXPECT_EQ(r.labels[0], 0);
  EXPECT_TRUE(c.lesions.empty());
}

TEST(Synthetic, Deterministic) {
  SyntheticSpec s;
  s.dims = {16, 16, 16};
  s.n_volumes = 6;
  s.seed = 3;
  const auto a = generate_synthetic(s), b = generate_synthetic(s);
  EXPECT_EQ(a.volumes, b.volumes);
  EXPECT_EQ(a.manifest, b.manifest);
  s.seed = 4;
  EXPECT_NE(generate_synthetic(s).volumes, a.volumes);
}

TEST(Synthetic, LesionContrastMatchesDelta) {
  SyntheticSpec s;
  s.dims = {32, 32, 32};
  s.n_volumes = 16;
  s.prevalence = {1.0};
  s.lesion_intensity_delta = 0.3;
  s.seed = 9;
  const auto c = generate_synthetic(s);
  ASSERT_EQ(c.lesions.size(), 16u);
  double diff = 0.0;
  for (int r = 0; r < 16; ++r) {
    const auto mask = c.lesion_mask(r);
    const auto& v = c.volumes[static_cast<std::size_t>(r)].voxels;
    double in = 0, out = 0;
    int nin = 0, nout = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (mask[i]) {
        in += v[i];
        ++nin;
      } else {
        out += v[i];
        ++nout;
      }
    }
    ASSERT_GT(nin, 0);
    diff += in / nin - out / nout;
  }
  EXPECT_NEAR(diff / 16.0, 0.3, 0.03);
}

TEST(Synthetic, RejectsOversizedLesion) {
  SyntheticSpec s;
  s.dims = {8, 8, 8};
  s.lesion_radius_lo = 5;
  s.lesion_radius_hi = 6;
  EXPECT_THROW(generate_synthetic(s), InvalidArgument);
}

namespace {

DatasetManifest labelled_manifest(int n, int positives, bool subjects) {
  DatasetManifest m;
  m.class_names = {"lesion"};
  for (int i = 0; i < n; ++i) {
    ManifestRecord r;
    r.path = "v" + std::to_string(i) + ".tvol";
    r.labels = {static_cast<std::uint8_t>(i < positives ? 1 : 0)};
    if (subjects) r.subject = "S" + std::to_string(i / 2);
    m.records.push_back(r);
  }
  return m;
}

}  // namespace

TEST(Split, ExactRatios) {
  const auto m = labelled_manifest(100, 10, false);
  const auto s = split_dataset(m, SplitSpec{{0.5, 0.1, 0.4}, 1, true, {}});
  const int expect_size[3] = {50, 10, 40}, expect_pos[3] = {5, 1, 4};
  for (const Split part : {Split::Train, Split::Val, Split::Test}) {
    const auto idx = s.indices(part);
    EXPECT_EQ(static_cast<int>(idx.size()), expect_size[static_cast<int>(part)]);
    EXPECT_EQ(m.subset(idx).positive_counts()[0], expect_pos[static_cast<int>(part)]);
  }
}

TEST(Split, PartitionAndSubjectGrouping) {
  const auto m = labelled_manifest(60, 14, true);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = split_dataset(m, SplitSpec{{0.5, 0.1, 0.4}, seed, true, {}});
    std::multiset<int> all;
    for (const Split part : {Split::Train, Split::Val, Split::Test})
      for (int i : s.indices(part)) all.insert(i);
    ASSERT_EQ(all.size(), 60u);
    ASSERT_EQ(std::set<int>(all.begin(), all.end()).size(), 60u);
    for (int i = 0; i < 60; i += 2) ASSERT_EQ(s.assignment[static_cast<std::size_t>(i)], s.assignment[static_cast<std::size_t>(i + 1)]);
  }
}

TEST(Split, DeterministicAndValidated) {
  const auto m = labelled_manifest(40, 8, false);
  EXPECT_EQ(split_dataset(m, SplitSpec{{0.5, 0.1, 0.4}, 5, true, {}}).assignment,
            split_dataset(m, SplitSpec{{0.5, 0.1, 0.4}, 5, true, {}}).assignment);
  EXPECT_THROW(split_dataset(DatasetManifest{{"a"}, {}}, SplitSpec{}), InvalidArgument);
  EXPECT_THROW(split_dataset(m, SplitSpec{{0.5, 0.2, 0.4}, 0, true, {}}), InvalidArgument);
}

TEST(LargestRemainder, SumsToTotal) {
  EXPECT_EQ(largest_remainder(10, {0.5, 0.1, 0.4}), (std::vector<int>{5, 1, 4}));
  const auto q = largest_remainder(7, {1, 1, 1});
  EXPECT_EQ(q[0] + q[1] + q[2], 7);
}

TEST(Tvol, SizeAndPayloadLayout) {
  const auto dir = scratch_dir("tvol_layout");
  Volume v({2, 2, 2}, {1.0f, 1.0f, 1.0f}, Unit::Normalized, 0.5f);
  write_volume(v, dir / "c.tvol");
  const auto bytes = slurp(dir / "c.tvol");
  ASSERT_EQ(bytes.size(), kTvolHeaderBytes + 4 * 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TVL1");
  for (int i = 0; i < 8; ++i) {
    float f;
    std::memcpy(&f, bytes.data() + kTvolHeaderBytes + 4 * i, 4);
    EXPECT_EQ(f, 0.5f);
  }
}

TEST(Tvol, RoundTripsAreBitExact) {
  const auto dir = scratch_dir("tvol_round");
  Rng rng(12);
  for (int i = 0; i < 25; ++i) {
    const Extents d{1 + static_cast<int>(rng.below(9)), 1 + static_cast<int>(rng.below(9)), 1 + static_cast<int>(rng.below(9))};
    const auto v = random_volume(d, 100 + i, i % 2 ? Unit::Hounsfield : Unit::Normalized);
    write_volume(v, dir / "v.tvol");
    EXPECT_EQ(read_volume(dir / "v.tvol", v.unit), v);
  }
}

TEST(Tvol, MalformedFilesAreFormatErrors) {
  const auto dir = scratch_dir("tvol_bad");
  Volume v({3, 3, 3}, {1.0f, 1.0f, 1.0f}, Unit::Normalized, 0.1f);
  write_volume(v, dir / "good.tvol");
  auto bytes = slurp(dir / "good.tvol");

  auto truncated = bytes;
  truncated.resize(truncated.size() - 5);
  std::ofstream(dir / "trunc.tvol", std::ios::binary).write(truncated.data(), static_cast<std::streamsize>(truncated.size()));
  try {
    read_volume(dir / "trunc.tvol");
    FAIL() << "truncated payload accepted";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("108"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("103"), std::string::npos) << e.what();
  }

  auto magic = bytes;
  std::memcpy(magic.data(), "XXXX", 4);
  std::ofstream(dir / "magic.tvol", std::ios::binary).write(magic.data(), static_cast<std::streamsize>(magic.size()));
  EXPECT_THROW(read_volume(dir / "magic.tvol"), FormatError);

  auto dtype = bytes;
  dtype[kTvolHeaderBytes - 1] = 7;
  std::ofstream(dir / "dtype.tvol", std::ios::binary).write(dtype.data(), static_cast<std::streamsize>(dtype.size()));
  EXPECT_THROW(read_volume(dir / "dtype.tvol"), FormatError);

  EXPECT_THROW(read_volume(dir / "missing.tvol"), IoError);
}

TEST(Tvol, UnitInference) {
  const auto dir = scratch_dir("tvol_unit");
  write_volume(Volume({2, 2, 2}, {1.0f, 1.0f, 1.0f}, Unit::Hounsfield, -300.0f), dir / "hu.tvol");
  write_volume(Volume({2, 2, 2}, {1.0f, 1.0f, 1.0f}, Unit::Normalized, 0.3f), dir / "n.tvol");
  EXPECT_EQ(read_volume(dir / "hu.tvol").unit, Unit::Hounsfield);
  EXPECT_EQ(read_volume(dir / "n.tvol").unit, Unit::Normalized);
}

TEST(Manifest, RoundTripAndRelativeLoading) {
  const auto dir = scratch_dir("manifest");
  SyntheticSpec s;
  s.dims = {8, 8, 8};
  s.n_volumes = 4;
  s.lesion_radius_lo = 1.5;
  s.lesion_radius_hi = 2.5;
  const auto c = generate_synthetic(s);
  for (std::size_t i = 0; i < c.volumes.size(); ++i) write_volume(c.volumes[i], dir / c.manifest.records[i].path);
  write_manifest(c.manifest, dir / "m.tsv");
  EXPECT_EQ(read_manifest(dir / "m.tsv"), c.manifest);
  const auto d = load_dataset(dir / "m.tsv");
  ASSERT_EQ(d.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(*d.volumes[i], c.volumes[i]);
}

TEST(Manifest, RejectsInconsistentLabels) {
  const auto dir = scratch_dir("manifest_bad");
  std::ofstream(dir / "m.tsv") << "#classes:a,b\nx.tvol\t1\n";
  EXPECT_THROW(read_manifest(dir / "m.tsv"), FormatError);
}
