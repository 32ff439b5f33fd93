#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace sami {

// Deterministic random source. The engine (mt19937_64) has standardized
// output, and all value mappings below are hand-rolled, so sequences are
// reproducible across platforms and standard-library implementations.
// std::*_distribution is deliberately not used anywhere.
class Rng {
 public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double next_double();

  // Uniform integer in [0, n), unbiased via rejection. n must be > 0.
  uint64_t below(uint64_t n);

  bool next_bool() { return (next_u64() >> 63) != 0; }

  // Standard normal via Box-Muller (no cached spare; one value per call).
  double normal();

  // Fisher-Yates using this stream.
  template <class T>
  void shuffle(std::span<T> items) {
    for (size_t i = items.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  // Independent child stream; deterministic function of (seed, stream_id).
  Rng fork(uint64_t stream_id) const;

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
};

// SplitMix64 step, used for seed derivation.
uint64_t splitmix64(uint64_t x);

}  // namespace sami
