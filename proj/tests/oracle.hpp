#pragma once

// Reference implementations written with plain loops, sharing no code with
// the library beyond the Tensor4 container.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "mde/drift.hpp"
#include "mde/tensor.hpp"

namespace mde::oracle {

using Dense = std::vector<std::vector<double>>;

// Classical cyclic Jacobi on a symmetric matrix. Returns eigenvalues
// (descending) and the matching eigenvectors as columns of `vecs`.
inline std::vector<double> symmetric_eigen(Dense a, Dense& vecs) {
  const std::size_t n = a.size();
  vecs.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vecs[i][i] = 1.0;
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += a[i][j] * a[i][j];
        if (i != j) off += a[i][j] * a[i][j];
      }
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a[p][q] == 0.0) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vecs[k][p], vkq = vecs[k][q];
          vecs[k][p] = c * vkp - s * vkq;
          vecs[k][q] = s * vkp + c * vkq;
        }
      }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a[i][i] > a[j][j]; });
  std::vector<double> vals(n);
  Dense sorted(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    vals[j] = a[order[j]][order[j]];
    for (std::size_t i = 0; i < n; ++i) sorted[i][j] = vecs[i][order[j]];
  }
  vecs = sorted;
  return vals;
}

// Best rank-k approximation of the rows x cols matrix m (row-major) by
// projecting onto the top-k eigenvectors of the smaller Gram matrix.
inline std::vector<double> rank_k(const std::vector<double>& m, std::size_t rows, std::size_t cols, std::size_t k) {
  const bool left = rows <= cols;
  const std::size_t n = left ? rows : cols;
  Dense g(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      if (left)
        for (std::size_t t = 0; t < cols; ++t) s += m[i * cols + t] * m[j * cols + t];
      else
        for (std::size_t t = 0; t < rows; ++t) s += m[t * cols + i] * m[t * cols + j];
      g[i][j] = s;
    }
  Dense v;
  symmetric_eigen(g, v);
  // projector P = V_k V_k^T (n x n)
  Dense p(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t t = 0; t < k; ++t) p[i][j] += v[i][t] * v[j][t];
  std::vector<double> out(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0.0;
      if (left)
        for (std::size_t t = 0; t < rows; ++t) s += p[r][t] * m[t * cols + c];
      else
        for (std::size_t t = 0; t < cols; ++t) s += m[r * cols + t] * p[t][c];
      out[r * cols + c] = s;
    }
  return out;
}

struct Layer {
  std::vector<double> gamma, beta, mean, var;
  double eps;
};

// Layer drift written out term by term. x is indexed [n][c][i] through Tensor4's accessor.
inline double layer_drift(const Tensor4& x, const Layer& s, DriftMetric metric, double cfg_eps,
                          double ratio /* 0 = no refinement */) {
  const std::size_t B = x.batch(), C = x.channels(), H = x.height(), W = x.width(), S = H * W;
  std::vector<double> xt(x.data().begin(), x.data().end());
  if (ratio > 0.0) {
    const std::size_t full = std::min(C, S);
    std::size_t k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(full) - 1e-9));
    k = std::clamp<std::size_t>(k, 1, full);
    for (std::size_t n = 0; n < B; ++n) {
      std::vector<double> m(xt.begin() + static_cast<std::ptrdiff_t>(n * C * S),
                            xt.begin() + static_cast<std::ptrdiff_t>((n + 1) * C * S));
      const auto r = rank_k(m, C, S, k);
      std::copy(r.begin(), r.end(), xt.begin() + static_cast<std::ptrdiff_t>(n * C * S));
    }
  }
  auto at = [&](const std::vector<double>& v, std::size_t n, std::size_t c, std::size_t i) {
    return v[(n * C + c) * S + i];
  };
  std::vector<double> mu_bar(C, 0.0), var_bar(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t i = 0; i < S; ++i) mu_bar[c] += at(xt, n, c, i);
    mu_bar[c] /= static_cast<double>(B * S);
    for (std::size_t n = 0; n < B; ++n)
      for (std::size_t i = 0; i < S; ++i) var_bar[c] += std::pow(at(xt, n, c, i) - mu_bar[c], 2);
    var_bar[c] /= static_cast<double>(B * S);
  }

  double sum = 0.0;
  std::size_t count = 0;
  if (metric != DriftMetric::Cosine) {
    for (std::size_t c = 0; c < C; ++c) {
      const double sd = std::sqrt(s.var[c] + s.eps), sd_bar = std::sqrt(var_bar[c] + cfg_eps);
      if (metric == DriftMetric::Wasserstein) {
        sum += (std::pow(mu_bar[c] - s.mean[c], 2) + std::pow(sd_bar - sd, 2)) / (sd * sd);
      } else {
        const double m = (mu_bar[c] - s.mean[c]) / sd, v = (sd_bar / sd) * (sd_bar / sd);
        sum += (v + m * m - 1.0 - std::log(v)) / 2.0;
      }
      ++count;
    }
    return sum / static_cast<double>(count);
  }

  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double sd = std::sqrt(s.var[c] + s.eps), sd_bar = std::sqrt(var_bar[c] + cfg_eps);
      const double g = std::abs(s.gamma[c]) < 1e-6 ? (s.gamma[c] < 0 ? -1e-6 : 1e-6) : s.gamma[c];
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t i = 0; i < S; ++i) {
        const double a = sd_bar == 0.0 ? 0.0 : (at(xt, n, c, i) - mu_bar[c]) / sd_bar;
        const double y = s.gamma[c] * (sd == 0.0 ? 0.0 : (x(n, c, i / W, i % W) - s.mean[c]) / sd) + s.beta[c];
        const double b = (y - s.beta[c]) / g;
        dot += a * b;
        na += a * a;
        nb += b * b;
      }
      if (std::sqrt(na) < 1e-12 || std::sqrt(nb) < 1e-12) continue;
      sum += std::clamp((1.0 - dot / (std::sqrt(na) * std::sqrt(nb))) / 2.0, 0.0, 1.0);
      ++count;
    }
  return count ? sum / static_cast<double>(count) : 0.0;
}

}  // namespace mde::oracle
