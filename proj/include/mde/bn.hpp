#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "mde/tensor.hpp"

namespace mde {

inline constexpr double kDefaultEps = 1e-5;
inline constexpr double kGammaFloor = 1e-6;

// Per-channel state of one batch-normalization layer. running_var holds the
// variance; the normalizing std is sqrt(running_var + eps).
struct BnLayerState {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double retain_alpha = 0.9;  // running <- alpha * running + (1 - alpha) * batch
  double eps = kDefaultEps;

  static BnLayerState identity(std::size_t channels, double retain_alpha = 0.9,
                               double eps = kDefaultEps) {
    return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
            std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0),
            retain_alpha, eps};
  }

  std::size_t channels() const { return gamma.size(); }

  double sigma(std::size_t c) const { return std::sqrt(running_var[c] + eps); }

  // Throws std::invalid_argument when a structural invariant is broken.
  void validate() const {
    const std::size_t c = gamma.size();
    if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
      throw std::invalid_argument("BnLayerState: per-channel vectors differ in length");
    if (!(eps >= 0.0)) throw std::invalid_argument("BnLayerState: eps must be non-negative");
    if (!(retain_alpha >= 0.0 && retain_alpha <= 1.0))
      throw std::invalid_argument("BnLayerState: retain_alpha must lie in [0,1]");
    for (double v : running_var)
      if (!(v >= 0.0)) throw std::invalid_argument("BnLayerState: negative running variance");
  }

  friend bool operator==(const BnLayerState&, const BnLayerState&) = default;
};

// Per-channel mean and biased (population) variance of one mini-batch.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;

  std::size_t channels() const { return mean.size(); }
  friend bool operator==(const BatchStats&, const BatchStats&) = default;
};

namespace detail {

inline void require_channels(const Tensor4& x, std::size_t channels, const char* who) {
  if (x.channels() != channels)
    throw std::invalid_argument(std::string(who) + ": tensor has " +
                                std::to_string(x.channels()) + " channels, state has " +
                                std::to_string(channels));
}

// x / d, except that an exactly-zero denominator maps to 0 (the numerator is
// then zero as well whenever the statistics are self-consistent).
inline double safe_div(double x, double d) { return d == 0.0 ? 0.0 : x / d; }

}  // namespace detail

// Statistics over all B*H*W elements of each channel. Two-pass for accuracy.
inline BatchStats batch_stats(const Tensor4& x) {
  const std::size_t count = x.batch() * x.spatial();
  if (count == 0 || x.channels() == 0) throw std::invalid_argument("batch_stats: empty tensor");
  BatchStats s{std::vector<double>(x.channels(), 0.0), std::vector<double>(x.channels(), 0.0)};
  for (std::size_t c = 0; c < x.channels(); ++c) {
    double sum = 0.0;
    for (std::size_t b = 0; b < x.batch(); ++b)
      for (double v : x.plane(b, c)) sum += v;
    const double mean = sum / static_cast<double>(count);
    double sq = 0.0;
    for (std::size_t b = 0; b < x.batch(); ++b)
      for (double v : x.plane(b, c)) sq += (v - mean) * (v - mean);
    s.mean[c] = mean;
    s.var[c] = sq / static_cast<double>(count);
  }
  return s;
}

// Inference-mode normalization by the stored running estimates.
inline Tensor4 bn_forward(const Tensor4& x, const BnLayerState& s) {
  detail::require_channels(x, s.channels(), "bn_forward");
  Tensor4 y = x;
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const double sigma = s.sigma(c);
    for (std::size_t b = 0; b < x.batch(); ++b)
      for (double& v : y.plane(b, c))
        v = s.gamma[c] * detail::safe_div(v - s.running_mean[c], sigma) + s.beta[c];
  }
  return y;
}

inline BnLayerState ema_update(const BnLayerState& s, const BatchStats& b) {
  if (b.channels() != s.channels() || b.var.size() != s.channels())
    throw std::invalid_argument("ema_update: channel count mismatch");
  BnLayerState out = s;
  const double a = s.retain_alpha;
  for (std::size_t c = 0; c < s.channels(); ++c) {
    out.running_mean[c] = a * s.running_mean[c] + (1.0 - a) * b.mean[c];
    out.running_var[c] = a * s.running_var[c] + (1.0 - a) * b.var[c];
  }
  return out;
}

// Sign-preserving clamp of |gamma| away from zero.
inline double guarded_gamma(double gamma) {
  return std::copysign(std::max(std::abs(gamma), kGammaFloor), gamma);
}

// Undoes the affine part of BN: (y - beta) / gamma, channel-wise.
inline Tensor4 source_normalize(const Tensor4& y, const BnLayerState& s) {
  detail::require_channels(y, s.channels(), "source_normalize");
  Tensor4 out = y;
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const double g = guarded_gamma(s.gamma[c]);
    for (std::size_t b = 0; b < y.batch(); ++b)
      for (double& v : out.plane(b, c)) v = (v - s.beta[c]) / g;
  }
  return out;
}

// Normalization by the batch's own statistics.
inline Tensor4 target_normalize(const Tensor4& x, const BatchStats& st, double eps) {
  detail::require_channels(x, st.channels(), "target_normalize");
  Tensor4 out = x;
  for (std::size_t c = 0; c < st.channels(); ++c) {
    const double sd = std::sqrt(st.var[c] + eps);
    for (std::size_t b = 0; b < x.batch(); ++b)
      for (double& v : out.plane(b, c)) v = detail::safe_div(v - st.mean[c], sd);
  }
  return out;
}

}  // namespace mde
