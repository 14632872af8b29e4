#pragma once

#include <cstdint>

namespace c3s {

// Small deterministic PRNG (splitmix64). Self-contained so that shuffles,
// parameter init and dropout masks reproduce bit-identically across builds,
// independent of the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is irrelevant at the sizes used here.
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Derive an independent stream; used to give each (epoch, batch) its own
  // dropout/shuffle stream without consuming from the parent.
  Rng fork(uint64_t stream) const {
    Rng r(state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 0x632be59bd9b4e019ULL)));
    r.next_u64();
    return r;
  }

 private:
  uint64_t state_;
};

template <typename T>
void shuffle(T* data, size_t n, Rng& rng) {
  if (n < 2) return;
  for (size_t i = n - 1; i > 0; --i) {
    size_t j = static_cast<size_t>(rng.below(i + 1));
    T tmp = data[i];
    data[i] = data[j];
    data[j] = tmp;
  }
}

}  // namespace c3s
