#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gran {

// Error taxonomy; the CLI maps these onto exit codes 2 / 3 / 4.
struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// FNV-1a. Used for filter-index keys and manifest hashes.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

// Derives an independent stream seed from one master seed. Every consumer of
// randomness (init, per-epoch shuffle, per-step dropout) gets its own stream,
// so a run can be resumed mid-training without serializing generator state.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view purpose,
                              std::uint64_t counter = 0) {
  std::uint64_t h = fnv1a(purpose);
  h = fnv1a(&seed, sizeof seed, h);
  h = fnv1a(&counter, sizeof counter, h);
  return h ? h : 0x9e3779b97f4a7c15ull;
}

// Seeded generator, threaded explicitly through dropout, init and shuffles.
// Normal deviates use Box-Muller on raw uniforms (no cached spare), so the
// draw sequence is a pure function of the seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(eng_() % n); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace gran
