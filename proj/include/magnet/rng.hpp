#pragma once

#include <cstdint>
#include <cmath>

namespace magnet {

// Splittable counter-based generator (splitmix64 core). All randomness in the
// project flows through explicitly threaded Rng values; there is no global
// state, so runs are reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(mix(seed ^ 0x5851F42D4C957F2DULL)) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix(state_);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the sine branch is discarded so the
  // generator stays a pure function of its counter.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Uniform integer in [0, n) via multiply-shift.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
  }

  // Deterministic child stream; forking does not advance this generator.
  Rng fork(uint64_t stream) const {
    Rng child(0);
    child.state_ = mix(state_ ^ mix(stream + 0xD6E8FEB86659FD93ULL));
    return child;
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t state_;
};

// Stream labels used when deriving per-purpose generators from the run seed.
enum RngStream : uint64_t {
  kStreamInit = 1,
  kStreamShuffle = 2,
  kStreamDropout = 3,
  kStreamAugment = 4,
  kStreamSynth = 5,
  kStreamSampling = 6,
};

}  // namespace magnet
