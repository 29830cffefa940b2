#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace aspectrec {

// Every random draw in this project comes from SplitMix64 streams so that any
// consumer (tests, external re-implementations) can reproduce a stream from
// the documented recipe alone.
//
//   state' = state + 0x9E3779B97F4A7C15
//   x = state'; x ^= x >> 30; x *= 0xBF58476D1CE4E5B9
//   x ^= x >> 27; x *= 0x94D049BB133111EB; x ^= x >> 31
//
// Derived draws:
//   uniform01()    = (next() >> 11) * 2^-53                  in [0, 1)
//   uniform_pos()  = ((next() >> 11) + 1) * 2^-53            in (0, 1]
//   next_below(n)  = next() % n
//   gaussian()     = sqrt(-2 ln u1) * cos(2 pi u2),  u1 = uniform_pos(),
//                    u2 = uniform01(); consumes exactly two next() calls.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t x = state_;
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
  }

  double uniform01() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform_pos() {
    return static_cast<double>((next() >> 11) + 1) * 0x1.0p-53;
  }

  // Uniform over [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  std::uint64_t next_below(std::uint64_t n) { return next() % n; }

  double gaussian() {
    const double u1 = uniform_pos();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

// SplitMix64 output function applied to a single value.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

// Per-purpose stream derivation:
//   stream_seed(seed, purpose, index) = mix64(mix64(seed ^ fnv1a64(purpose)) ^ index)
// Purposes in use: "split", "user", "item", "record", "epoch", "init.user",
// "init.item", "init.rec", "init.lm", "init.idtok", "pretrain.epoch",
// "finetune.epoch". Keeping streams disjoint by name makes each stage
// reproducible in isolation.
inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view purpose,
                                 std::uint64_t index = 0) {
  return mix64(mix64(seed ^ fnv1a64(purpose)) ^ index);
}

inline SplitMix64 make_stream(std::uint64_t seed, std::string_view purpose,
                              std::uint64_t index = 0) {
  return SplitMix64(stream_seed(seed, purpose, index));
}

}  // namespace aspectrec
