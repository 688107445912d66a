#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mde/bn.hpp"
#include "mde/svd.hpp"
#include "mde/tensor.hpp"

namespace mde {

enum class DriftMetric { Cosine, Wasserstein, GaussianKL };

inline std::string_view to_string(DriftMetric m) {
  switch (m) {
    case DriftMetric::Cosine: return "cosine";
    case DriftMetric::Wasserstein: return "wasserstein";
    case DriftMetric::GaussianKL: return "kl";
  }
  return "?";
}

inline DriftMetric parse_metric(std::string_view name) {
  if (name == "cosine") return DriftMetric::Cosine;
  if (name == "wasserstein") return DriftMetric::Wasserstein;
  if (name == "kl") return DriftMetric::GaussianKL;
  throw std::invalid_argument("unknown drift metric '" + std::string(name) + "'");
}

struct DriftConfig {
  DriftMetric metric = DriftMetric::Cosine;
  std::optional<double> truncation_ratio;  // unset: no low-rank refinement
  std::size_t batch_size = 64;
  std::size_t iterations = 8;
  std::optional<std::vector<double>> layer_weights;  // unset: every layer weighs 1
  double eps = kDefaultEps;

  void validate() const {
    if (truncation_ratio && !(*truncation_ratio > 0.0 && *truncation_ratio <= 1.0))
      throw std::invalid_argument("DriftConfig: truncation ratio must lie in (0,1]");
    if (batch_size < 2) throw std::invalid_argument("DriftConfig: batch size must be >= 2");
    if (iterations < 1) throw std::invalid_argument("DriftConfig: iterations must be >= 1");
    if (!(eps >= 0.0)) throw std::invalid_argument("DriftConfig: eps must be non-negative");
    if (layer_weights)
      for (double w : *layer_weights)
        if (!(w >= 0.0 && w <= 1.0))
          throw std::invalid_argument("DriftConfig: layer weights must lie in [0,1]");
  }
};

struct DriftReport {
  std::vector<double> per_layer;
  double aggregate = 0.0;
  DriftConfig config;
  std::string model_id;
  std::string dataset_id;
  std::size_t channels_skipped = 0;
};

inline constexpr double kMinCosineNorm = 1e-12;

// (1 - cos(a, b)) / 2, clamped to [0, 1]. Empty optional when either vector
// is numerically zero and the angle is undefined.
inline std::optional<double> cosine_distance(std::span<const double> a,
                                             std::span<const double> b) {
  if (a.size() != b.size())
    throw std::invalid_argument("cosine_distance: length mismatch (" +
                                std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  if (a.empty()) throw std::invalid_argument("cosine_distance: empty vectors");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  if (na < kMinCosineNorm || nb < kMinCosineNorm) return std::nullopt;
  const double d = 0.5 * (1.0 - dot / (na * nb));
  return std::clamp(d, 0.0, 1.0);
}

// Gaussian closed forms comparing target N(mu_bar, sd_bar^2) with source
// N(mu, sd^2) after normalization by the source std.
inline double wasserstein_term(double mu_bar, double sd_bar, double mu, double sd) {
  if (!(sd > 0.0)) throw std::domain_error("wasserstein_term: source std must be positive");
  const double dm = mu_bar - mu, ds = sd_bar - sd;
  return (dm * dm + ds * ds) / (sd * sd);
}

inline double gaussian_kl_term(double mu_bar, double sd_bar, double mu, double sd) {
  if (!(sd > 0.0)) throw std::domain_error("gaussian_kl_term: source std must be positive");
  if (!(sd_bar > 0.0)) throw std::domain_error("gaussian_kl_term: target std must be positive");
  const double m = (mu_bar - mu) / sd;
  const double r = sd_bar / sd;
  const double v = r * r;
  return 0.5 * (v + m * m - 1.0 - 2.0 * std::log(r));
}

// Sum and count of the per-term distances for one layer. Pooling several of
// these and dividing once gives the multi-batch score.
struct DriftTerms {
  double sum = 0.0;
  std::size_t count = 0;
  std::size_t skipped = 0;

  DriftTerms& operator+=(const DriftTerms& o) {
    sum += o.sum;
    count += o.count;
    skipped += o.skipped;
    return *this;
  }
  double mean() const { return count ? sum / static_cast<double>(count) : 0.0; }
};

namespace detail {

inline void require_bn_channels(std::size_t got, const BnLayerState& s, const char* who) {
  if (got != s.channels())
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(got) +
                                " channels given, layer has " + std::to_string(s.channels()));
}

inline DriftTerms closed_form_terms(const BatchStats& b, const BnLayerState& s,
                                    double target_eps, DriftMetric metric) {
  require_bn_channels(b.channels(), s, "closed_form_terms");
  DriftTerms t;
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const double sd = s.sigma(c);
    const double sd_bar = std::sqrt(b.var[c] + target_eps);
    t.sum += metric == DriftMetric::Wasserstein
                 ? wasserstein_term(b.mean[c], sd_bar, s.running_mean[c], sd)
                 : gaussian_kl_term(b.mean[c], sd_bar, s.running_mean[c], sd);
    ++t.count;
  }
  return t;
}

}  // namespace detail

// Replaces every sample's C x HW matrix by its truncated-SVD reconstruction.
inline Tensor4 low_rank_refine(const Tensor4& x, double r_tr) {
  Tensor4 out(x.batch(), x.channels(), x.height(), x.width());
  for (std::size_t n = 0; n < x.batch(); ++n)
    write_channels(out, n, truncate_reconstruct(reshape_channels(x, n), r_tr));
  return out;
}

// Per-layer drift terms for one batch of pre-normalization inputs.
//
// Cosine: one term per (sample, channel), comparing the H*W plane normalized
// by batch statistics against the same plane pushed through the stored BN
// transform and mapped back by (y - beta) / gamma. When truncation is set only
// the batch-statistics side sees the low-rank refined input.
//
// Wasserstein / GaussianKL: one closed-form term per channel from the batch
// statistics alone.
inline DriftTerms layer_drift_terms(const Tensor4& x, const BnLayerState& s,
                                    const DriftConfig& cfg) {
  if (x.batch() == 0 || x.spatial() == 0) throw std::invalid_argument("layer_drift: empty batch");
  detail::require_bn_channels(x.channels(), s, "layer_drift");

  const Tensor4 refined = cfg.truncation_ratio ? low_rank_refine(x, *cfg.truncation_ratio) : Tensor4{};
  const Tensor4& target_in = cfg.truncation_ratio ? refined : x;
  const BatchStats stats = batch_stats(target_in);

  if (cfg.metric != DriftMetric::Cosine)
    return detail::closed_form_terms(stats, s, cfg.eps, cfg.metric);

  const Tensor4 a = target_normalize(target_in, stats, cfg.eps);
  const Tensor4 b = source_normalize(bn_forward(x, s), s);
  DriftTerms t;
  for (std::size_t n = 0; n < x.batch(); ++n)
    for (std::size_t c = 0; c < x.channels(); ++c) {
      if (auto d = cosine_distance(a.plane(n, c), b.plane(n, c))) {
        t.sum += *d;
        ++t.count;
      } else {
        ++t.skipped;
      }
    }
  return t;
}

inline double layer_drift(const Tensor4& x, const BnLayerState& s, const DriftConfig& cfg) {
  return layer_drift_terms(x, s, cfg).mean();
}

// Closed-form Gaussian drift averaged over batches and channels; both stds
// use the layer's eps.
inline double wasserstein_layer_drift(std::span<const BatchStats> batches, const BnLayerState& s) {
  if (batches.empty()) throw std::invalid_argument("wasserstein_layer_drift: no batches");
  DriftTerms t;
  for (const auto& b : batches) t += detail::closed_form_terms(b, s, s.eps, DriftMetric::Wasserstein);
  return t.mean();
}

inline double gaussian_kl_drift(std::span<const BatchStats> batches, const BnLayerState& s) {
  if (batches.empty()) throw std::invalid_argument("gaussian_kl_drift: no batches");
  DriftTerms t;
  for (const auto& b : batches) t += detail::closed_form_terms(b, s, s.eps, DriftMetric::GaussianKL);
  return t.mean();
}

// (1/L) * sum_l w_l * d_l
inline double aggregate(std::span<const double> per_layer, std::span<const double> weights) {
  if (per_layer.size() != weights.size())
    throw std::invalid_argument("aggregate: " + std::to_string(per_layer.size()) +
                                " layer scores but " + std::to_string(weights.size()) + " weights");
  if (per_layer.empty()) throw std::invalid_argument("aggregate: no layers");
  double s = 0.0;
  for (std::size_t l = 0; l < per_layer.size(); ++l) s += weights[l] * per_layer[l];
  return s / static_cast<double>(per_layer.size());
}

// Pools per-layer terms over T batches, then reduces to a DriftReport.
class DriftAccumulator {
 public:
  DriftAccumulator(std::span<const BnLayerState> layers, DriftConfig cfg)
      : layers_(layers.begin(), layers.end()), cfg_(std::move(cfg)), terms_(layers_.size()) {
    if (layers_.empty()) throw std::invalid_argument("drift: model has no batch-normalization layers");
    cfg_.validate();
    if (cfg_.layer_weights && cfg_.layer_weights->size() != layers_.size())
      throw std::invalid_argument("drift: layer weight count does not match BN layer count");
  }

  // One captured input tensor per BN layer, in layer order.
  void add_batch(std::span<const Tensor4> layer_inputs) {
    if (layer_inputs.size() != layers_.size())
      throw std::invalid_argument("drift: expected " + std::to_string(layers_.size()) +
                                  " layer inputs, got " + std::to_string(layer_inputs.size()));
    for (std::size_t l = 0; l < layers_.size(); ++l)
      terms_[l] += layer_drift_terms(layer_inputs[l], layers_[l], cfg_);
    ++batches_;
  }

  // Terms computed elsewhere (e.g. on worker threads), one per layer.
  void add_terms(std::span<const DriftTerms> layer_terms) {
    if (layer_terms.size() != layers_.size())
      throw std::invalid_argument("drift: expected " + std::to_string(layers_.size()) +
                                  " layer terms, got " + std::to_string(layer_terms.size()));
    for (std::size_t l = 0; l < layers_.size(); ++l) terms_[l] += layer_terms[l];
    ++batches_;
  }

  const std::vector<BnLayerState>& layers() const { return layers_; }
  const DriftConfig& config() const { return cfg_; }

  // Statistics-only path; valid for the closed-form metrics.
  void add_batch_stats(std::span<const BatchStats> layer_stats) {
    if (cfg_.metric == DriftMetric::Cosine)
      throw std::invalid_argument("drift: cosine metric needs full activations, not statistics");
    if (layer_stats.size() != layers_.size())
      throw std::invalid_argument("drift: expected " + std::to_string(layers_.size()) +
                                  " layer statistics, got " + std::to_string(layer_stats.size()));
    for (std::size_t l = 0; l < layers_.size(); ++l)
      terms_[l] += detail::closed_form_terms(layer_stats[l], layers_[l], cfg_.eps, cfg_.metric);
    ++batches_;
  }

  std::size_t batches() const { return batches_; }

  DriftReport report() const {
    DriftReport r;
    r.config = cfg_;
    for (const auto& t : terms_) {
      r.per_layer.push_back(t.mean());
      r.channels_skipped += t.skipped;
    }
    const std::vector<double> ones(layers_.size(), 1.0);
    r.aggregate = aggregate(r.per_layer, cfg_.layer_weights ? *cfg_.layer_weights : ones);
    return r;
  }

 private:
  std::vector<BnLayerState> layers_;
  DriftConfig cfg_;
  std::vector<DriftTerms> terms_;
  std::size_t batches_ = 0;
};

inline double normalize_by_fakedata(const DriftReport& report, const DriftReport& fake_report) {
  if (!(fake_report.aggregate > 0.0))
    throw std::invalid_argument("normalize_by_fakedata: FakeData drift must be positive");
  return report.aggregate / fake_report.aggregate;
}

}  // namespace mde
