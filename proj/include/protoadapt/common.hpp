#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace protoadapt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// Error hierarchy. Every failure surfaced by the library derives from Error.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Data from a retrieval partition reached a pretraining-only code path.
class LeakageError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf or a numerically degenerate quantity.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Mutation of an object after it was frozen.
class FrozenError : public Error {
 public:
  using Error::Error;
};

/// An iterative procedure did not converge within its retry cap.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// SplitMix64 finalizer; derives an independent stream seed from (base, stream).
/// Replicate b of any resampling kernel uses derive_seed(seed, b), so results
/// do not depend on thread count or scheduling.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t base, std::uint64_t stream) {
  return Rng(derive_seed(base, stream));
}

/// Uniform integer in [0, n) from the raw engine output. Avoids
/// std::uniform_int_distribution so draws are identical across standard libraries.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  // Lemire's nearly-divisionless method without rejection is biased by at most
  // n / 2^64, which is immaterial for the resample sizes used here.
  const unsigned __int128 m = static_cast<unsigned __int128>(rng()) * n;
  return static_cast<std::size_t>(m >> 64);
}

/// Uniform double in [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Standard normal via Box-Muller (portable across standard libraries).
inline double standard_normal(Rng& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
}

inline Vec normal_vector(Rng& rng, Eigen::Index n, double scale = 1.0) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * standard_normal(rng);
  return v;
}

inline Mat normal_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = scale * standard_normal(rng);
  return m;
}

/// Fisher-Yates shuffle driven by uniform_index.
template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

inline bool all_finite(const Vec& v) { return v.allFinite(); }

inline std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }
inline Vec to_vec(std::span<const double> v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace protoadapt
