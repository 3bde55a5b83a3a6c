#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace baaf {

/// Base class for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor/array shape or dimension mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Index out of range (neighbor indices, gather rows, class ids).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Invalid value: bad sizes, out-of-range labels, undefined results.
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file; message carries the offending line number.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Filesystem/stream failure or unrecognized file content.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Per-point neighborhoods: row i holds the indices of the k reference
/// points closest to query i, sorted by nondecreasing distance (ties by
/// lower index).
struct NeighborIndex {
  std::int64_t n = 0;
  std::int64_t k = 0;
  std::vector<std::int32_t> indices;  // n*k, row-major

  std::int32_t at(std::int64_t i, std::int64_t j) const {
    return indices[static_cast<std::size_t>(i * k + j)];
  }
};

/// Deterministic pseudo-random generator (splitmix64 core).
///
/// Self-contained so that seeded runs reproduce bit-identically across
/// standard library implementations. Not suitable for cryptography.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  float uniform_f() { return static_cast<float>(uniform()); }

  /// Uniform integer in [0, n). n must be positive.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  float normal_f() { return static_cast<float>(normal()); }

  /// Derives an independent generator for a named stream.
  Rng fork(std::uint64_t stream) const {
    Rng child(state_ ^ (0xa0761d6478bd642full * (stream + 1)));
    child.next_u64();
    return child;
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace baaf
