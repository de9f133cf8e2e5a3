#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>

#include "lcat/error.hpp"

namespace lcat {

// xoshiro256** 1.0 (Blackman & Vigna), seeded through splitmix64.
// Chosen over std::mt19937 because the full draw pipeline (including the
// uniform/normal mappings below) is pinned by this header, so streams are
// identical across compilers and standard libraries.
class Rng {
 public:
  Rng() : Rng(0) {}

  explicit Rng(uint64_t seed) {
    uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  static uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform [0,1) with 53 random mantissa bits.
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n) via 128-bit multiply-shift (Lemire's method
  // without the rejection step; bias is < n / 2^64).
  uint64_t bounded(uint64_t n) {
    if (n == 0) fail(Err::Config, "Rng::bounded: n must be positive");
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via the basic Box-Muller transform. Stateless (no cached
  // spare) so serialized streams resume exactly.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    // Guard against log(0).
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Derive an independent child stream. Consumes one draw from this stream.
  Rng fork(uint64_t tag) {
    uint64_t x = next_u64() ^ (0xA3C59AC2B7EDF00DULL + tag);
    Rng child(0);
    for (auto& word : child.state_) word = splitmix64(x);
    return child;
  }

  std::array<uint64_t, 4> state() const { return state_; }
  void set_state(const std::array<uint64_t, 4>& s) { state_ = s; }

  std::string state_hex() const {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(64);
    for (uint64_t word : state_)
      for (int shift = 60; shift >= 0; shift -= 4)
        out.push_back(digits[(word >> shift) & 0xF]);
    return out;
  }

  static Rng from_state_hex(const std::string& hex) {
    if (hex.size() != 64) fail(Err::Format, "rng state: expected 64 hex chars");
    Rng rng(0);
    for (int w = 0; w < 4; ++w) {
      uint64_t word = 0;
      for (int i = 0; i < 16; ++i) {
        char c = hex[static_cast<size_t>(w * 16 + i)];
        uint64_t nibble;
        if (c >= '0' && c <= '9') nibble = static_cast<uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') nibble = static_cast<uint64_t>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F') nibble = static_cast<uint64_t>(c - 'A' + 10);
        else fail(Err::Format, "rng state: invalid hex character");
        word = (word << 4) | nibble;
      }
      rng.state_[static_cast<size_t>(w)] = word;
    }
    return rng;
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  std::array<uint64_t, 4> state_{};
};

}  // namespace lcat
