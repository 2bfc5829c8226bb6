#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace dtn {

// Deterministic random source.  All sampling goes through hand-rolled
// mappings on top of a fixed 64-bit generator so that runs reproduce
// bit-exactly regardless of the standard library's distribution
// implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed == 0 ? 0x9e3779b97f4a7c15ULL : seed) {
    // splitmix warm-up so nearby seeds diverge immediately
    for (int i = 0; i < 4; ++i) next();
  }

  uint64_t next() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n); n > 0
  size_t index(size_t n) {
    return static_cast<size_t>((static_cast<__uint128_t>(next()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

inline uint64_t hash_str(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Derive an independent stream seed from a base seed and a label.
inline uint64_t derive_seed(uint64_t base, std::string_view label) {
  Rng r(base ^ hash_str(label));
  return r.next();
}

inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
  Rng r(base ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
  return r.next();
}

}  // namespace dtn
