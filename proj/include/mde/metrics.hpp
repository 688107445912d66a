#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "mde/tensor.hpp"

namespace mde {

struct CandidateScore {
  std::string model_id;
  double drift = 0.0;
  std::optional<double> true_accuracy;
};

struct SelectionOutcome {
  std::vector<std::string> ranking;  // ascending drift
  std::string chosen;
  std::map<std::size_t, bool> topk_hit;
  std::optional<double> regret;  // best accuracy - chosen accuracy
};

// Picks the lowest-drift candidate (ties: smallest model_id). topk_hit[k]
// holds when fewer than k candidates are strictly more accurate than the pick.
inline SelectionOutcome select_model(std::span<const CandidateScore> candidates,
                                     std::span<const std::size_t> ks = std::array<std::size_t, 3>{1, 3, 5}) {
  if (candidates.empty()) throw std::invalid_argument("select_model: no candidates");
  for (const auto& c : candidates)
    if (!std::isfinite(c.drift)) throw std::invalid_argument("select_model: non-finite drift for " + c.model_id);

  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (candidates[a].drift != candidates[b].drift) return candidates[a].drift < candidates[b].drift;
    return candidates[a].model_id < candidates[b].model_id;
  });

  SelectionOutcome out;
  for (std::size_t i : order) out.ranking.push_back(candidates[i].model_id);
  const CandidateScore& pick = candidates[order.front()];
  out.chosen = pick.model_id;

  const bool have_acc = std::all_of(candidates.begin(), candidates.end(),
                                    [](const CandidateScore& c) { return c.true_accuracy.has_value(); });
  if (have_acc) {
    double best = *candidates.front().true_accuracy;
    std::size_t better = 0;
    for (const auto& c : candidates) {
      best = std::max(best, *c.true_accuracy);
      if (*c.true_accuracy > *pick.true_accuracy) ++better;
    }
    out.regret = best - *pick.true_accuracy;
    for (std::size_t k : ks) out.topk_hit[k] = better < k;
  }
  return out;
}

namespace detail {
// 1-based ranks, ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw std::invalid_argument("correlation undefined for constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}
}  // namespace detail

// Spearman's rho: Pearson correlation of average ranks.
inline double spearman_rank_corr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman_rank_corr: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("spearman_rank_corr: need at least 2 points");
  const auto ra = detail::average_ranks(a), rb = detail::average_ranks(b);
  return detail::pearson(ra, rb);
}

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
  std::vector<double> x;
  std::vector<double> confidence_band;  // 95% half-width of the mean prediction at each x
  // Quantities for band_half_width at arbitrary x.
  double residual_sd = 0.0, x_mean = 0.0, sxx = 0.0, t_quantile = 0.0;
  std::size_t n = 0;

  double predict(double at) const { return intercept + slope * at; }
  double band_half_width(double at) const {
    const double d = at - x_mean;
    return t_quantile * residual_sd * std::sqrt(1.0 / static_cast<double>(n) + d * d / sxx);
  }
};

// Ordinary least squares of y on x with a 95% band for the fitted mean,
// using the Student t quantile with n - 2 degrees of freedom.
inline LinearFit linear_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("linear_fit: length mismatch");
  if (x.size() < 3) throw std::invalid_argument("linear_fit: need at least 3 points");
  const std::size_t n = x.size();
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (!(sxx > 0.0)) throw std::invalid_argument("linear_fit: x is constant");

  LinearFit f;
  f.n = n;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - f.predict(x[i]);
    sse += r * r;
  }
  f.r_squared = syy > 0.0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  f.residual_sd = std::sqrt(sse / static_cast<double>(n - 2));
  f.x_mean = mx;
  f.sxx = sxx;
  f.t_quantile = boost::math::quantile(boost::math::students_t(static_cast<double>(n - 2)), 0.975);
  f.x.assign(x.begin(), x.end());
  for (double xi : x) f.confidence_band.push_back(f.band_half_width(xi));
  return f;
}

namespace detail {
inline void check_probabilities(const Matrix& p, std::span<const int> labels) {
  if (p.rows() == 0) throw std::invalid_argument("probabilities: no samples");
  if (labels.size() != p.rows()) throw std::invalid_argument("probabilities: label count mismatch");
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      if (!(v >= 0.0)) throw std::invalid_argument("probabilities: negative or NaN entry in row " + std::to_string(r));
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw std::invalid_argument("probabilities: row " + std::to_string(r) + " sums to " + std::to_string(s));
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= p.cols())
      throw std::invalid_argument("probabilities: label out of range in row " + std::to_string(r));
  }
}
}  // namespace detail

inline double nll(const Matrix& probabilities, std::span<const int> labels) {
  detail::check_probabilities(probabilities, labels);
  double s = 0.0;
  for (std::size_t r = 0; r < probabilities.rows(); ++r)
    s -= std::log(std::max(probabilities(r, static_cast<std::size_t>(labels[r])), 1e-12));
  return s / static_cast<double>(probabilities.rows());
}

inline double brier(const Matrix& probabilities, std::span<const int> labels) {
  detail::check_probabilities(probabilities, labels);
  double s = 0.0;
  for (std::size_t r = 0; r < probabilities.rows(); ++r)
    for (std::size_t c = 0; c < probabilities.cols(); ++c) {
      const double d = probabilities(r, c) - (static_cast<std::size_t>(labels[r]) == c ? 1.0 : 0.0);
      s += d * d;
    }
  return s / static_cast<double>(probabilities.rows());
}

// Expected calibration error over equal-width bins of the top-class
// confidence. Bin b covers (b/B, (b+1)/B]; confidence 0 falls in bin 0.
inline double ece(const Matrix& probabilities, std::span<const int> labels, std::size_t bins = 15) {
  detail::check_probabilities(probabilities, labels);
  if (bins < 1) throw std::invalid_argument("ece: need at least one bin");
  std::vector<double> conf_sum(bins, 0.0), correct(bins, 0.0), count(bins, 0.0);
  for (std::size_t r = 0; r < probabilities.rows(); ++r) {
    auto row = probabilities.row(r);
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    const double conf = row[best];
    auto b = static_cast<std::size_t>(std::ceil(conf * static_cast<double>(bins)));
    b = b == 0 ? 0 : std::min(b - 1, bins - 1);
    conf_sum[b] += conf;
    correct[b] += best == static_cast<std::size_t>(labels[r]) ? 1.0 : 0.0;
    count[b] += 1.0;
  }
  const double n = static_cast<double>(probabilities.rows());
  double e = 0.0;
  for (std::size_t b = 0; b < bins; ++b)
    if (count[b] > 0.0) e += (count[b] / n) * std::abs(correct[b] / count[b] - conf_sum[b] / count[b]);
  return e;
}

}  // namespace mde
