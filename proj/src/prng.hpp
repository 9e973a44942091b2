#pragma once

#include <cstdint>

namespace forge::detail {

// splitmix64: tiny, platform-independent, good enough for schedule fuzzing.
class Prng {
 public:
  explicit Prng(uint64_t seed) : state_(seed + 0x9e3779b97f4a7c15ULL) {}

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, n); n > 0. Multiply-shift keeps results identical across
  // platforms, unlike std::uniform_int_distribution.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>((static_cast<__uint128_t>(next()) * n) >> 64);
  }

  // True with probability 1/n; n == 0 means never.
  bool one_in(uint32_t n) { return n != 0 && below(n) == 0; }

 private:
  uint64_t state_;
};

}  // namespace forge::detail
