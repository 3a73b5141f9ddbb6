#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>

namespace peopl {

// Portable pseudo-random source. The engine is std::mt19937_64, whose output
// sequence is fixed by the standard. Distributions are implemented here rather
// than taken from <random> so that draws are bit-identical across standard
// library implementations:
//   uniform()  = (engine() >> 11) * 2^-53
//   normal()   = Box-Muller on two uniform() draws (second value cached)
//   below(n)   = rejection sampling on the top bits, no modulo bias
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64() { return engine_(); }
  double uniform();
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);

// Stage-keyed seed derivation: derive_seed(master, "attack.mmd") is stable
// regardless of which other stages exist.
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage);
std::uint64_t derive_seed(std::uint64_t master, std::string_view stage,
                          std::uint64_t index);

}  // namespace peopl
