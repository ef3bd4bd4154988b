#pragma once

#include <cstdint>
#include <random>

#include "parec/matrix.hpp"

namespace parec {

/// splitmix64 finalizer; used to derive independent stream seeds from
/// (base seed, epoch, batch) style tuples.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  return mix_seed(a ^ mix_seed(b));
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b) ^ mix_seed(c));
}

/// N(0, stddev) sample rejected outside 2 standard deviations.
inline double truncated_normal(std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (;;) {
    double x = dist(rng);
    if (std::abs(x) <= 2.0 * stddev) return x;
  }
}

inline void fill_truncated_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = truncated_normal(rng, stddev);
}

inline void fill_normal(Matrix& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = dist(rng);
}

}  // namespace parec
