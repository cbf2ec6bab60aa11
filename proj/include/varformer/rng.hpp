#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace varformer {

/// Seeded 64-bit Mersenne Twister plus a standard normal sampler. The full
/// state (including the normal sampler's cached value) round-trips through
/// save()/load(), which checkpoint resume relies on.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}
  /// Independent stream derived from a base seed and a stream index.
  static Rng derived(std::uint64_t seed, std::uint64_t stream);

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  void fill_normal(std::span<double> out);

  std::mt19937_64& engine() { return engine_; }

  std::string save() const;
  void load(const std::string& state);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace varformer
