#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace ghostv2 {

// Seeded generator with platform-independent real conversions. The standard
// distributions are implementation-defined, so they are avoided here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }

  double normal() {
    // Box-Muller, one value per call.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Independent child stream.
  Rng fork(std::uint64_t stream) {
    return Rng(engine_() ^ (0x9E3779B97F4A7C15ULL * (stream + 1)));
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace ghostv2
