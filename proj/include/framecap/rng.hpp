#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "framecap/digest.hpp"

namespace framecap {

// Seed derivation. Every random decision in a run is drawn from an
// mt19937_64 seeded with
//
//   derive_seed(base, label) = first 8 bytes (big endian) of
//                              SHA-256("<base>/<label>")
//
// where `label` names the consumer, e.g. "match/v012/round3". One base seed
// therefore reproduces a whole run, and adding a consumer never perturbs the
// streams of the others.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  auto d = Sha256().update(std::to_string(base)).update("/").update(label).finish();
  std::uint64_t s = 0;
  for (int i = 0; i < 8; ++i) s = (s << 8) | d[static_cast<std::size_t>(i)];
  return s;
}

using Rng = std::mt19937_64;

// Uniform integer in [0, n). std::uniform_int_distribution is not specified
// bit-for-bit across standard libraries, so outputs would differ between
// toolchains; plain rejection sampling on the engine output is.
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  if (n <= 1) return 0;
  const std::uint64_t limit = Rng::max() - (Rng::max() % n + 1) % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x > limit);
  return x % n;
}

// Fisher-Yates; portable for the same reason as uniform_below.
template <typename T>
void portable_shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(uniform_below(rng, i));
    using std::swap;
    swap(v[i - 1], v[j]);
  }
}

inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  Rng rng(seed);
  portable_shuffle(p, rng);
  return p;
}

}  // namespace framecap
