#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <utility>

namespace da {

inline constexpr const char* kToolVersion = "0.1.0";

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

// Failure taxonomy. The CLI maps these categories onto process exit codes,
// so everything the library raises derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated pre/postcondition (dimension mismatch and friends).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Factorization of a matrix that was required to be SPD failed.
class NotPositiveDefiniteError : public Error {
 public:
  using Error::Error;
};

// Non-finite values produced by a numeric computation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Sampler could not make progress (e.g. zero acceptances over a burn-in).
class SamplerAbortError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void require_dim(Index got, Index want, const std::string& what) {
  if (got != want) {
    throw DimensionError(what + ": dimension mismatch, got " +
                         std::to_string(got) + ", expected " +
                         std::to_string(want));
  }
}

inline void require_finite(const Vector& v, const std::string& what) {
  if (!v.allFinite()) throw DivergenceError(what + ": non-finite entries");
}

enum class Space { full, reduced };

inline const char* to_string(Space s) {
  return s == Space::full ? "full" : "reduced";
}

// A point in model state space, tagged with the space it lives in so that
// full-space and reduced-space vectors cannot be mixed up silently.
// Entries are validated finite on construction.
class StateVector {
 public:
  StateVector() = default;
  StateVector(Vector values, Space space)
      : values_(std::move(values)), space_(space) {
    if (values_.size() <= 0)
      throw DimensionError("StateVector: dimension must be positive");
    require_finite(values_, "StateVector");
  }

  static StateVector full(Vector v) { return {std::move(v), Space::full}; }
  static StateVector reduced(Vector v) {
    return {std::move(v), Space::reduced};
  }

  const Vector& vec() const { return values_; }
  Vector& vec() { return values_; }
  Space space() const { return space_; }
  Index dim() const { return values_.size(); }

 private:
  Vector values_;
  Space space_ = Space::full;
};

// FNV-1a, 64-bit. Used for content checksums in manifests and as the hash
// for Jacobian-cache keys.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t hash_vector(const Vector& v) {
  return fnv1a64(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
}

}  // namespace da
