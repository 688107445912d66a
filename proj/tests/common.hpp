#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>

#include "mde/tensor.hpp"

namespace mde::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  Matrix m(rows, cols);
  for (double& v : m.data()) v = n01(rng);
  return m;
}

inline Tensor4 random_tensor(std::size_t b, std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng,
                             double mean = 0.0, double sd = 1.0) {
  std::normal_distribution<double> dist(mean, sd);
  Tensor4 t(b, c, h, w);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

// max |A^T A - I| over the columns of a.
inline double column_orthonormality_error(const Matrix& a) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = 0; r < a.rows(); ++r) s += a(r, i) * a(r, j);
      worst = std::max(worst, std::abs(s - (i == j ? 1.0 : 0.0)));
    }
  return worst;
}

inline double row_orthonormality_error(const Matrix& a) { return column_orthonormality_error(a.transposed()); }

}  // namespace mde::testing
