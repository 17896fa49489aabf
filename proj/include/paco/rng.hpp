#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>

namespace paco {

// splitmix64 step; used for seeding and for mixing substream tags.
inline uint64_t splitmix64(uint64_t &state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256++ (Blackman & Vigna, public domain). Chosen over mt19937_64
// because constructing a fresh engine is a handful of multiplies, which
// makes per-entity substreams cheap enough to derive on every Gibbs phase.
class Xoshiro256pp {
 public:
  using result_type = uint64_t;

  explicit Xoshiro256pp(uint64_t seed = 0) {
    uint64_t sm = seed;
    for (auto &w : s_) w = splitmix64(sm);
  }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<uint64_t>::max(); }

  result_type operator()() {
    const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
    const uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

 private:
  static constexpr uint64_t rotl(uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  uint64_t s_[4];
};

using Rng = Xoshiro256pp;

// Deterministic stream id from a master seed and a list of tags
// (phase, iteration, entity index, ...). Streams derived this way are
// independent of scheduling, which is what makes the parallel sampler
// reproduce single-threaded output exactly.
inline uint64_t mix_tags(uint64_t seed, std::initializer_list<uint64_t> tags) {
  uint64_t h = seed ^ 0x61c8864680b583ebULL;
  for (uint64_t t : tags) {
    uint64_t s = h + 0x9e3779b97f4a7c15ULL * (t + 1);
    h = splitmix64(s);
  }
  return h;
}

inline Rng substream(uint64_t seed, std::initializer_list<uint64_t> tags) {
  return Rng(mix_tags(seed, tags));
}

}  // namespace paco
