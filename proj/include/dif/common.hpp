#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <cstdint>
#include <exception>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dif {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr const char* kVersion = "0.3.1";

// Error taxonomy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or dimension mismatch, missing data, bad enum value.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values encountered during a numeric computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid or unreadable input files and configuration.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Wraps a failure with the name of the pipeline stage that raised it. When
/// built inside a handler it keeps the original exception for classification.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::exception& cause)
      : Error(stage + ": " + cause.what()), stage_(std::move(stage)), cause_(std::current_exception()) {}
  const std::string& stage() const { return stage_; }
  std::exception_ptr cause() const { return cause_; }

 private:
  std::string stage_;
  std::exception_ptr cause_;
};

inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Named random sub-stream. Every stage derives its generator from the run
/// seed, a stream name and optional indices, so stages reproduce independently.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream,
                                std::uint64_t i = 0, std::uint64_t j = 0) {
  const std::uint64_t name = fnv1a(stream);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(name), static_cast<std::uint32_t>(name >> 32),
                    static_cast<std::uint32_t>(i),    static_cast<std::uint32_t>(i >> 32),
                    static_cast<std::uint32_t>(j),    static_cast<std::uint32_t>(j >> 32)};
  return std::mt19937_64(seq);
}

// Portable sampling helpers; std:: distributions are implementation-defined.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline double gaussian(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

inline Vec3 uniform_in_cube(std::mt19937_64& rng, double half = 1.0) {
  return {uniform(rng, -half, half), uniform(rng, -half, half), uniform(rng, -half, half)};
}

inline Vec3 random_unit_vector(std::mt19937_64& rng) {
  Vec3 v;
  do {
    v = {gaussian(rng), gaussian(rng), gaussian(rng)};
  } while (v.norm() < 1e-12);
  return v.normalized();
}

template <class Vec>
void shuffle(Vec& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

inline bool all_finite(const Eigen::Ref<const Eigen::MatrixXd>& m) { return m.allFinite(); }

}  // namespace dif
