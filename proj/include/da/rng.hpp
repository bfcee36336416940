#pragma once

#include <da/core.hpp>

#include <cmath>
#include <cstdint>
#include <random>

namespace da {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace detail

// Deterministic random stream. The generator is mt19937_64 (fully specified
// by the standard) seeded through splitmix64 from (seed, stream_id), and the
// uniform/normal transforms are implemented here rather than through
// std:: distributions, whose output is implementation-defined. Identical
// (seed, stream_id) therefore reproduce identical draw sequences.
//
// Mutable, not thread-safe: confine one stream to one chain/thread and give
// concurrent chains distinct stream ids.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0)
      : seed_(seed), stream_id_(stream_id) {
    std::uint64_t s = seed ^ (0x632be59bd9b4e019ull * (stream_id + 1));
    std::uint64_t mixed = detail::splitmix64(s);
    gen_.seed(mixed);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
  }

  // Standard normal via the Box-Muller pair; the second member of each pair
  // is cached so the uniform consumption per draw is fixed.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform01();  // (0, 1], keeps the log finite
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * kPi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  Vector normal_vector(Index n) {
    Vector z(n);
    for (Index i = 0; i < n; ++i) z[i] = normal();
    return z;
  }

  // Integer in [0, bound) by rejection-free 64-bit reduction; used for
  // shuffles and index picks in tooling.
  std::uint64_t uniform_index(std::uint64_t bound) {
    return gen_() % bound;
  }

 private:
  static constexpr double kPi = 3.14159265358979323846;
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace da
