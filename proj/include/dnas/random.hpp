#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "dnas/errors.hpp"

namespace dnas {

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the top 53 bits of one draw, so the
/// value sequence is identical across standard library implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard Gumbel(0, 1) sample: -ln(-ln(u)), u clamped to (1e-20, 1 - 1e-7).
inline double gumbel_sample(Rng& rng) {
  double u = uniform01(rng);
  u = std::clamp(u, 1e-20, 1.0 - 1e-7);
  return -std::log(-std::log(u));
}

/// Standard normal via Box-Muller on uniform01 draws (portable sequence).
inline double normal01(Rng& rng) {
  const double u1 = std::max(uniform01(rng), 1e-300);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline Rng rng_from_state(const std::string& state) {
  Rng rng;
  std::istringstream is(state);
  is >> rng;
  if (is.fail()) throw ParseError("malformed rng state");
  return rng;
}

/// Derives an independent stream from a base seed and a purpose tag.
inline Rng derive_rng(uint64_t seed, uint64_t stream) {
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32),
                    static_cast<uint32_t>(stream), static_cast<uint32_t>(stream >> 32)};
  return Rng(seq);
}

}  // namespace dnas
