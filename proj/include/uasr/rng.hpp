#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace uasr {

// Deterministic random stream. All sampling goes through explicit helpers
// (not std:: distributions) so that a given seed yields the same values on
// every build of this project.
class RngStream {
 public:
  explicit RngStream(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Multiply-shift; bias is < 2^-64 per draw.
  uint64_t uniform_index(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<__uint128_t>(engine_()) * n) >> 64);
  }

  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(uniform_index(
                    static_cast<uint64_t>(hi - lo + 1)));
  }

  // Standard normal via Box-Muller; caches the second value.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stdev) { return mean + stdev * normal(); }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace uasr
