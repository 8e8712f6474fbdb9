#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "handwave/errors.hpp"

namespace handwave {

// Deterministic random stream. Uniform and normal draws are derived from the
// raw mt19937_64 output directly (not through std::*_distribution, whose
// value sequences are implementation-defined), so a (seed, call sequence)
// pair always maps to the same values and the full stream state round-trips
// through serialize()/deserialize() for exact training resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller. Uses two fresh uniforms per draw and
  // keeps no cached spare, so the stream state is exactly the engine state.
  double normal() {
    double u1 = static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;        // [0, 1)
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ContractError("Rng::uniform_int: n must be positive");
    std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  std::uint64_t raw() { return eng_(); }

  std::string serialize() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void deserialize(const std::string& state) {
    std::istringstream is(state);
    is >> eng_;
    if (is.fail()) throw FormatError("Rng::deserialize: malformed engine state");
  }

  bool operator==(const Rng& other) const { return eng_ == other.eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace handwave
