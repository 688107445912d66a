#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "mde/tensor.hpp"

namespace mde {

// Thin SVD: m = u * diag(singular_values) * vt, with k = min(rows, cols).
struct SvdResult {
  Matrix u;                             // rows x k
  std::vector<double> singular_values;  // non-increasing, length k
  Matrix vt;                            // k x cols
};

namespace detail {

// One-sided (Hestenes) Jacobi on a tall matrix stored column-major.
// On return `cols` holds A*V and `v` holds V, both column-major.
inline void hestenes_jacobi(std::vector<std::vector<double>>& cols,
                            std::vector<std::vector<double>>& v, double tol) {
  const std::size_t n = cols.size();
  const std::size_t m = n ? cols[0].size() : 0;
  constexpr int kMaxSweeps = 100;
  constexpr double kTiny = std::numeric_limits<double>::min();

  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        auto& wp = cols[p];
        auto& wq = cols[q];
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += wp[i] * wp[i];
          beta += wq[i] * wq[i];
          gamma += wp[i] * wq[i];
        }
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta) || std::abs(gamma) < kTiny)
          continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double a = wp[i], b = wq[i];
          wp[i] = c * a - s * b;
          wq[i] = s * a + c * b;
        }
        auto& vp = v[p];
        auto& vq = v[q];
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i], b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
      }
    }
    if (!rotated) return;
  }
}

// Fills columns flagged in `missing` with unit vectors orthogonal to every
// other column. Used for the left vectors of (numerically) zero singular values.
inline void complete_orthonormal(std::vector<std::vector<double>>& basis,
                                 const std::vector<bool>& missing) {
  const std::size_t m = basis.empty() ? 0 : basis[0].size();
  std::vector<bool> valid(basis.size());
  for (std::size_t j = 0; j < basis.size(); ++j) valid[j] = !missing[j];

  std::size_t next_candidate = 0;
  for (std::size_t j = 0; j < basis.size(); ++j) {
    if (valid[j]) continue;
    std::vector<double> cand(m);
    for (; next_candidate < m; ++next_candidate) {
      std::fill(cand.begin(), cand.end(), 0.0);
      cand[next_candidate] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < basis.size(); ++k) {
          if (!valid[k]) continue;
          double dot = 0.0;
          for (std::size_t i = 0; i < m; ++i) dot += cand[i] * basis[k][i];
          for (std::size_t i = 0; i < m; ++i) cand[i] -= dot * basis[k][i];
        }
      }
      double norm = 0.0;
      for (double x : cand) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.5) {
        for (double& x : cand) x /= norm;
        ++next_candidate;
        break;
      }
    }
    basis[j] = std::move(cand);
    valid[j] = true;
  }
}

inline SvdResult svd_tall(const Matrix& a, double tol) {
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<std::vector<double>> cols(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cols[j][i] = a(i, j);
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

  hestenes_jacobi(cols, v, tol);

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (double x : cols[j]) s += x * x;
    sigma[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t l, std::size_t r) { return sigma[l] > sigma[r]; });

  const double sigma_max = n ? sigma[order[0]] : 0.0;
  const double cutoff =
      sigma_max * static_cast<double>(std::max(m, n)) * std::numeric_limits<double>::epsilon();

  std::vector<std::vector<double>> ucols(n);
  std::vector<bool> missing(n, false);
  SvdResult out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.singular_values[k] = sigma[j];
    if (sigma[j] > cutoff && sigma[j] > 0.0) {
      ucols[k] = cols[j];
      for (double& x : ucols[k]) x /= sigma[j];
    } else {
      ucols[k].assign(m, 0.0);
      missing[k] = true;
    }
    for (std::size_t i = 0; i < n; ++i) out.vt(k, i) = v[j][i];
  }
  complete_orthonormal(ucols, missing);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < m; ++i) out.u(i, k) = ucols[k][i];
  return out;
}

}  // namespace detail

// Thin SVD via one-sided Jacobi rotations. `tol` bounds the relative
// off-diagonal mass |a_p . a_q| / (|a_p| |a_q|) left between columns.
inline SvdResult svd(const Matrix& m, double tol = 1e-10) {
  if (m.rows() == 0 || m.cols() == 0) throw std::invalid_argument("svd: empty matrix");
  if (!(tol > 0.0)) throw std::invalid_argument("svd: tolerance must be positive");
  for (double x : m.data())
    if (!std::isfinite(x)) throw std::invalid_argument("svd: non-finite input");

  if (m.rows() >= m.cols()) return detail::svd_tall(m, tol);

  // Wide input: decompose the transpose and swap the factors.
  SvdResult t = detail::svd_tall(m.transposed(), tol);
  return SvdResult{t.vt.transposed(), std::move(t.singular_values), t.u.transposed()};
}

// Number of leading singular values kept for a truncation ratio in (0, 1].
// Rounds up so at least one component survives; the 1e-9 slack keeps
// products such as 0.3 * 10 from rounding up past the exact integer.
inline std::size_t truncation_rank(double ratio, std::size_t full_rank) {
  if (!(ratio > 0.0 && ratio <= 1.0))
    throw std::invalid_argument("truncation ratio must lie in (0, 1], got " +
                                std::to_string(ratio));
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(full_rank) - 1e-9));
  return std::clamp<std::size_t>(k, 1, full_rank);
}

// u[:, :k] * diag(s[:k]) * vt[:k, :]
inline Matrix reconstruct(const SvdResult& f, std::size_t k) {
  const std::size_t rows = f.u.rows(), cols = f.vt.cols();
  k = std::min(k, f.singular_values.size());
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < k; ++r) {
    const double s = f.singular_values[r];
    for (std::size_t i = 0; i < rows; ++i) {
      const double us = f.u(i, r) * s;
      if (us == 0.0) continue;
      auto dst = out.row(i);
      auto src = f.vt.row(r);
      for (std::size_t j = 0; j < cols; ++j) dst[j] += us * src[j];
    }
  }
  return out;
}

// Best rank-k approximation of m with k = ceil(r_tr * min(rows, cols)).
inline Matrix truncate_reconstruct(const Matrix& m, double r_tr) {
  const std::size_t k = truncation_rank(r_tr, std::min(m.rows(), m.cols()));
  return reconstruct(svd(m), k);
}

}  // namespace mde
