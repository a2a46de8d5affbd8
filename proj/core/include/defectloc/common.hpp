#pragma once

// Shared value types, error hierarchy and seeded randomness used by every
// stage of the pipeline.

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>

namespace defectloc {

/// Grayscale raster, row-major, intensities in [0,1].
using Image = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Per-pixel boolean raster (anomaly masks, thresholded maps, segment masks).
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using LabelMap = Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Height/width pair. Used for image dims, windows and strides alike.
struct Extent {
  int h = 0;
  int w = 0;
  friend bool operator==(const Extent&, const Extent&) = default;
};

struct Position {
  int y = 0;
  int x = 0;
  friend bool operator==(const Position&, const Position&) = default;
};

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file could not be read or decoded.
class LoadError : public Error {
 public:
  LoadError(std::string path, const std::string& what)
      : Error("cannot load '" + path + "': " + what), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Data violates a type invariant (zero-area image, dim mismatch, NaN ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied parameters are out of their admissible range.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Network configuration is dimensionally inconsistent.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A checkpoint does not belong to the requested architecture.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

/// A required external resource (e.g. extractor weights) is unavailable.
class InitializationError : public Error {
 public:
  using Error::Error;
};

/// Optimisation diverged or otherwise failed at runtime.
class TrainingError : public Error {
 public:
  using Error::Error;
};

/// splitmix64 finaliser; good avalanche for seed derivation.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives a child seed from a parent seed and an ordered list of indices,
/// e.g. derive_seed(global, {epoch, sample}). Independent of worker count.
constexpr std::uint64_t derive_seed(std::uint64_t seed,
                                    std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = mix64(seed);
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

/// Seeded generator with platform-stable distributions. The standard
/// distribution objects are implementation-defined, so the few draws the
/// pipeline needs are derived here straight from the engine's bits.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0,1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t index(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace defectloc
