#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace sgdph {

// xoshiro256** seeded through splitmix64. Every derived sample (uniform,
// normal, bounded integer, shuffle) is computed here with plain integer and
// IEEE arithmetic, so a seed fixes the same sequence on every platform.
//
//   uniform()  = (next() >> 11) * 2^-53
//   normal()   = Box-Muller on two uniforms, both outputs used in turn
//   below(n)   = Lemire multiply-shift with rejection
//   shuffle()  = Fisher-Yates from the back, j = below(i + 1)
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::uint64_t below(std::uint64_t n);

  template <class U>
  void shuffle(std::span<U> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace sgdph
