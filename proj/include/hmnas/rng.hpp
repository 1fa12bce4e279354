#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace hmnas {

std::uint64_t splitmix64(std::uint64_t x);
// Derives an independent seed for a named stage from a global seed.
std::uint64_t derive_seed(std::uint64_t global, std::string_view stage);

/// Seeded generator with portable conversions. The engine is mt19937_64,
/// whose sequence the standard fixes; the uniform/normal/integer mappings are
/// spelled out here because the <random> distributions are not portable.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  double normal();                        // standard normal, Box-Muller
  std::uint64_t below(std::uint64_t n);   // uniform in [0, n), rejection sampled
  bool bernoulli(double p) { return uniform() < p; }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      std::uint64_t j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace hmnas
