#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include "voxmae/errors.hpp"
#include "voxmae/rng.hpp"
#include "voxmae/volume.hpp"

namespace voxmae {

void DatasetManifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.labels.size() != class_names.size())
      throw InvalidArgument("manifest: record '" + r.path + "' has " + std::to_string(r.labels.size()) + " labels, expected " +
                            std::to_string(class_names.size()));
    for (auto l : r.labels)
      if (l > 1) throw InvalidArgument("manifest: label values must be 0 or 1 ('" + r.path + "')");
    if (!seen.insert(r.path).second) throw InvalidArgument("manifest: duplicate path '" + r.path + "'");
  }
}

DatasetManifest DatasetManifest::subset(const std::vector<int>& indices) const {
  DatasetManifest out;
  out.class_names = class_names;
  out.records.reserve(indices.size());
  for (int i : indices) out.records.push_back(records.at(static_cast<std::size_t>(i)));
  return out;
}

std::vector<int> DatasetManifest::positive_counts() const {
  std::vector<int> counts(class_count(), 0);
  for (const auto& r : records)
    for (std::size_t c = 0; c < r.labels.size(); ++c) counts[c] += r.labels[c];
  return counts;
}

std::vector<int> SplitSpec::indices(Split s) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == s) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> largest_remainder(int total, const std::vector<double>& weights) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<int> out(weights.size(), 0);
  if (total <= 0 || sum <= 0.0) return out;
  std::vector<std::pair<double, std::size_t>> remainders;
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = total * weights[i] / sum;
    out[i] = static_cast<int>(std::floor(exact + 1e-9));
    assigned += out[i];
    remainders.emplace_back(exact - out[i], i);
  }
  // Largest remainder first; lower index wins ties.
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned) ++out[remainders[k % remainders.size()].second];
  return out;
}

SplitSpec split_dataset(const DatasetManifest& m, SplitSpec s) {
  if (m.records.empty()) throw InvalidArgument("split_dataset: empty manifest");
  m.validate();
  double sum = 0.0;
  for (double r : s.ratios) {
    if (r < 0.0) throw InvalidArgument("split_dataset: negative ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("split_dataset: ratios must sum to 1");

  const int n = static_cast<int>(m.records.size());
  const std::size_t n_classes = m.class_count();
  const std::vector<double> ratios(s.ratios.begin(), s.ratios.end());

  // Records sharing a subject id form one indivisible group.
  std::vector<std::vector<int>> groups;
  std::map<std::string, std::size_t> by_subject;
  for (int i = 0; i < n; ++i) {
    const auto& subj = m.records[static_cast<std::size_t>(i)].subject;
    if (subj) {
      auto [it, inserted] = by_subject.emplace(*subj, groups.size());
      if (inserted) groups.emplace_back();
      groups[it->second].push_back(i);
    } else {
      groups.push_back({i});
    }
  }

  Rng rng(s.seed);
  shuffle_in_place(groups, rng);

  const std::vector<int> size_target = largest_remainder(n, ratios);
  const std::vector<int> totals = m.positive_counts();
  std::vector<std::vector<int>> pos_target(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) pos_target[c] = largest_remainder(totals[c], ratios);

  auto group_positives = [&](const std::vector<int>& g) {
    std::vector<int> p(n_classes, 0);
    for (int i : g)
      for (std::size_t c = 0; c < n_classes; ++c) p[c] += m.records[static_cast<std::size_t>(i)].labels[c];
    return p;
  };

  // Groups with rare-class positives are placed first.
  auto rarity = [&](const std::vector<int>& g) {
    const auto p = group_positives(g);
    int best = n + 1;
    for (std::size_t c = 0; c < n_classes; ++c)
      if (p[c] > 0) best = std::min(best, totals[c]);
    return best;
  };
  if (s.stratify) {
    std::stable_sort(groups.begin(), groups.end(), [&](const auto& a, const auto& b) { return rarity(a) < rarity(b); });
  }

  std::vector<int> size_have(3, 0);
  std::vector<std::vector<int>> pos_have(n_classes, std::vector<int>(3, 0));
  s.assignment.assign(static_cast<std::size_t>(n), Split::Train);
  for (const auto& g : groups) {
    const auto p = group_positives(g);
    const bool has_pos = s.stratify && std::any_of(p.begin(), p.end(), [](int v) { return v > 0; });
    int best = 0;
    double best_primary = -1e300, best_secondary = -1e300;
    for (int k = 0; k < 3; ++k) {
      if (ratios[static_cast<std::size_t>(k)] <= 0.0) continue;
      double primary = 0.0;
      if (has_pos) {
        for (std::size_t c = 0; c < n_classes; ++c)
          if (p[c] > 0) primary += pos_target[c][static_cast<std::size_t>(k)] - pos_have[c][static_cast<std::size_t>(k)];
      }
      const double secondary = size_target[static_cast<std::size_t>(k)] - size_have[static_cast<std::size_t>(k)];
      if (primary > best_primary || (primary == best_primary && secondary > best_secondary)) {
        best = k;
        best_primary = primary;
        best_secondary = secondary;
      }
    }
    for (int i : g) s.assignment[static_cast<std::size_t>(i)] = static_cast<Split>(best);
    size_have[static_cast<std::size_t>(best)] += static_cast<int>(g.size());
    for (std::size_t c = 0; c < n_classes; ++c) pos_have[c][static_cast<std::size_t>(best)] += p[c];
  }
  return s;
}

// ---------------------------------------------------------------- synthetic corpus

void SyntheticSpec::validate() const {
  for (int e : dims)
    if (e <= 0) throw InvalidArgument("SyntheticSpec: extents must be positive");
  if (n_volumes < 1) throw InvalidArgument("SyntheticSpec: n_volumes must be positive");
  if (class_count < 1) throw InvalidArgument("SyntheticSpec: class_count must be positive");
  if (static_cast<int>(prevalence.size()) != class_count)
    throw InvalidArgument("SyntheticSpec: prevalence must have one entry per class");
  for (double p : prevalence)
    if (!(p >= 0.0 && p <= 1.0)) throw InvalidArgument("SyntheticSpec: prevalence outside [0,1]");
  if (!(lesion_radius_lo > 0.0 && lesion_radius_lo <= lesion_radius_hi))
    throw InvalidArgument("SyntheticSpec: lesion radius range");
  const int smallest = *std::min_element(dims.begin(), dims.end());
  if (2.0 * lesion_radius_hi + 3.0 > smallest)
    throw InvalidArgument("SyntheticSpec: lesion radius " + std::to_string(lesion_radius_hi) + " does not fit extents");
  if (decoy_max < 0) throw InvalidArgument("SyntheticSpec: decoy_max must be non-negative");
  if (decoy_max > 0 && !(decoy_radius > 0.0 && 2.0 * decoy_radius + 3.0 <= smallest))
    throw InvalidArgument("SyntheticSpec: decoy radius does not fit extents");
}

bool Lesion::contains(int x, int y, int z) const {
  const double dx = (x - center[0]) / radii[0], dy = (y - center[1]) / radii[1], dz = (z - center[2]) / radii[2];
  return dx * dx + dy * dy + dz * dz <= 1.0;
}

std::vector<std::uint8_t> SyntheticCorpus::lesion_mask(int record, std::optional<int> class_index) const {
  const Volume& v = volumes.at(static_cast<std::size_t>(record));
  std::vector<std::uint8_t> mask(v.voxel_count(), 0);
  for (const auto& l : lesions) {
    if (l.record != record || (class_index && l.class_index != *class_index)) continue;
    for (int z = 0; z < v.dims[2]; ++z)
      for (int y = 0; y < v.dims[1]; ++y)
        for (int x = 0; x < v.dims[0]; ++x)
          if (l.contains(x, y, z)) mask[v.index(x, y, z)] = 1;
  }
  return mask;
}

namespace {

constexpr double kBackgroundLevel = 0.35;
constexpr int kTextureWaves = 4;

void paint_background(Volume& v, double texture_scale, Rng& rng) {
  struct Wave {
    double k[3];
    double phase;
  };
  std::vector<Wave> waves(kTextureWaves);
  for (auto& w : waves) {
    for (int a = 0; a < 3; ++a) {
      const double wavelength = rng.uniform(0.25, 1.0) * v.dims[static_cast<std::size_t>(a)];
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      w.k[a] = sign * 2.0 * std::numbers::pi / wavelength;
    }
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  // Each cosine has variance 1/2, so the sum is rescaled to unit variance.
  const double norm = texture_scale / std::sqrt(kTextureWaves / 2.0);
  const double grain = 0.2 * texture_scale;
  for (int z = 0; z < v.dims[2]; ++z)
    for (int y = 0; y < v.dims[1]; ++y)
      for (int x = 0; x < v.dims[0]; ++x) {
        double t = 0.0;
        for (const auto& w : waves) t += std::cos(w.k[0] * x + w.k[1] * y + w.k[2] * z + w.phase);
        v.at(x, y, z) = static_cast<float>(kBackgroundLevel + norm * t + grain * rng.normal());
      }
}

void paint_decoys(Volume& v, const SyntheticSpec& spec, Rng& rng) {
  const int count = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.decoy_max) + 1));
  const double r = spec.decoy_radius;
  for (int k = 0; k < count; ++k) {
    const int axis = static_cast<int>(rng.below(3));
    const int u = (axis + 1) % 3, w = (axis + 2) % 3;
    const double cu = rng.uniform(r + 1.0, v.dims[static_cast<std::size_t>(u)] - 2.0 - r);
    const double cw = rng.uniform(r + 1.0, v.dims[static_cast<std::size_t>(w)] - 2.0 - r);
    for (int z = 0; z < v.dims[2]; ++z)
      for (int y = 0; y < v.dims[1]; ++y)
        for (int x = 0; x < v.dims[0]; ++x) {
          const int p[3] = {x, y, z};
          const double du = p[u] - cu, dw = p[w] - cw;
          if (du * du + dw * dw <= r * r) v.at(x, y, z) = static_cast<float>(v.at(x, y, z) + spec.lesion_intensity_delta);
        }
  }
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticCorpus corpus;
  for (int c = 0; c < spec.class_count; ++c) corpus.manifest.class_names.push_back("lesion" + std::to_string(c));

  Rng label_rng(mix_seed(spec.seed, 0x6c6162656c73ULL));
  std::vector<std::vector<std::uint8_t>> labels(static_cast<std::size_t>(spec.n_volumes),
                                                std::vector<std::uint8_t>(static_cast<std::size_t>(spec.class_count), 0));
  for (int c = 0; c < spec.class_count; ++c) {
    const int positives = static_cast<int>(std::llround(spec.prevalence[static_cast<std::size_t>(c)] * spec.n_volumes));
    const auto order = random_permutation(spec.n_volumes, label_rng);
    for (int k = 0; k < positives; ++k) labels[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])][static_cast<std::size_t>(c)] = 1;
  }

  for (int i = 0; i < spec.n_volumes; ++i) {
    Rng rng(mix_seed(spec.seed, 0x766f6c756d65ULL, static_cast<std::uint64_t>(i)));
    Volume v(spec.dims, {1.0f, 1.0f, 1.0f}, Unit::Normalized);
    paint_background(v, spec.background_texture_scale, rng);
    if (spec.decoy_max > 0) {
      Rng decoy_rng(mix_seed(spec.seed, 0x6465636f79ULL, static_cast<std::uint64_t>(i)));
      paint_decoys(v, spec, decoy_rng);
    }
    for (int c = 0; c < spec.class_count; ++c) {
      if (!labels[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]) continue;
      Lesion l;
      l.record = i;
      l.class_index = c;
      for (int a = 0; a < 3; ++a) {
        const auto aa = static_cast<std::size_t>(a);
        l.radii[aa] = rng.uniform(spec.lesion_radius_lo, spec.lesion_radius_hi);
        l.center[aa] = rng.uniform(l.radii[aa] + 1.0, spec.dims[aa] - 2.0 - l.radii[aa]);
      }
      // Even classes brighten, odd classes darken.
      const double delta = (c % 2 == 0 ? 1.0 : -1.0) * spec.lesion_intensity_delta;
      for (int z = 0; z < v.dims[2]; ++z)
        for (int y = 0; y < v.dims[1]; ++y)
          for (int x = 0; x < v.dims[0]; ++x)
            if (l.contains(x, y, z)) v.at(x, y, z) = static_cast<float>(v.at(x, y, z) + delta);
      corpus.lesions.push_back(l);
    }
    for (float& x : v.voxels) x = std::clamp(x, 0.0f, 1.0f);
    if (spec.hounsfield) {
      v.unit = Unit::Hounsfield;
      for (float& x : v.voxels) x = static_cast<float>(kDefaultHuLow + x * (kDefaultHuHigh - kDefaultHuLow));
    }
    corpus.volumes.push_back(std::move(v));

    char name[32];
    std::snprintf(name, sizeof(name), "synth_%05d.tvol", i);
    char subject[32];
    std::snprintf(subject, sizeof(subject), "S%05d", i);
    corpus.manifest.records.push_back(ManifestRecord{name, labels[static_cast<std::size_t>(i)], std::string(subject)});
  }
  return corpus;
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
  Dataset out;
  out.manifest = manifest.subset(indices);
  for (int i : indices) out.volumes.push_back(volumes.at(static_cast<std::size_t>(i)));
  return out;
}

Dataset Dataset::from_corpus(const SyntheticCorpus& corpus) {
  Dataset d;
  d.manifest = corpus.manifest;
  for (const auto& v : corpus.volumes) d.volumes.push_back(std::make_shared<const Volume>(v));
  return d;
}

}  // namespace voxmae
