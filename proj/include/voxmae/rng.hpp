#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace voxmae {

// Seeded generator with portable sampling routines. std::mt19937_64 is fully
// specified by the standard; the distributions below are written out so the
// same seed yields the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), rejection-sampled to avoid modulo bias.
  std::uint64_t below(std::uint64_t n);

  // Uniform integer in [lo, hi].
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  // Standard normal via Box-Muller (one value per call, no cached spare).
  double normal();

  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

// SplitMix64-style mixing used to derive independent streams, e.g. per
// (epoch, record) so results do not depend on iteration interleaving.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

// Fisher-Yates permutation of [0, n).
std::vector<int> random_permutation(int n, Rng& rng);

template <typename T>
void shuffle_in_place(std::vector<T>& values, Rng& rng) {
  for (std::size_t i = values.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(values[i - 1], values[j]);
  }
}

}  // namespace voxmae
