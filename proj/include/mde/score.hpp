#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mde/bn.hpp"
#include "mde/drift.hpp"
#include "mde/parallel.hpp"
#include "mde/shift.hpp"
#include "mde/tensor.hpp"
#include "mde/toy_net.hpp"

namespace mde {

// The model cannot be scored at all: no BN layers, or inputs of the wrong shape.
class ModelIncompatible : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr std::uint64_t kFakeDataSeed = 0xFA4EDA7A;

// Finite stream of fixed-size batches. Each of `passes` passes walks a fresh
// seeded permutation of the images; a partial batch at the end of a pass is
// dropped.
class BatchStream {
 public:
  BatchStream(Tensor4 images, std::size_t batch_size, std::uint64_t seed, std::size_t passes = 1)
      : images_(std::move(images)), batch_size_(batch_size) {
    if (batch_size_ == 0) throw std::invalid_argument("BatchStream: batch size must be positive");
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> perm(images_.batch());
    const std::size_t usable = perm.size() / batch_size_ * batch_size_;
    for (std::size_t p = 0; p < passes; ++p) {
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      order_.insert(order_.end(), perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(usable));
    }
  }

  std::size_t batch_size() const { return batch_size_; }
  std::size_t remaining() const { return (order_.size() - pos_) / batch_size_; }
  const Tensor4& images() const { return images_; }

  std::optional<Tensor4> next() {
    if (pos_ + batch_size_ > order_.size()) return std::nullopt;
    std::span<const std::size_t> idx(order_.data() + pos_, batch_size_);
    pos_ += batch_size_;
    return gather_samples(images_, idx);
  }

 private:
  Tensor4 images_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

namespace detail {

inline void check_scorable(const ToyModel& model, const Tensor4& batch) {
  if (model.bn_states().empty()) throw ModelIncompatible("model has no batch-normalization layers");
  const Shape3 in = model.input_shape();
  if (batch.channels() != in.channels || batch.height() != in.height || batch.width() != in.width)
    throw ModelIncompatible("data samples are " + std::to_string(batch.channels()) + "x" +
                            std::to_string(batch.height()) + "x" + std::to_string(batch.width()) +
                            " but the model expects " + std::to_string(in.channels) + "x" +
                            std::to_string(in.height) + "x" + std::to_string(in.width));
}

inline std::vector<Tensor4> take_batches(BatchStream& stream, std::size_t count) {
  std::vector<Tensor4> out;
  for (std::size_t t = 0; t < count; ++t) {
    auto b = stream.next();
    if (!b)
      throw std::runtime_error("batch stream exhausted after " + std::to_string(t) + " of " +
                               std::to_string(count) + " batches");
    out.push_back(std::move(*b));
  }
  return out;
}

// Drift over pre-captured BN inputs: batches[b][l].
inline DriftReport score_layer_inputs(std::span<const BnLayerState> states,
                                      const std::vector<std::vector<Tensor4>>& batches, const DriftConfig& cfg) {
  DriftAccumulator acc(states, cfg);
  std::vector<std::vector<DriftTerms>> terms(batches.size());
  parallel_for(batches.size(), [&](std::size_t b) {
    if (batches[b].size() != states.size())
      throw std::invalid_argument("drift: batch " + std::to_string(b) + " has " + std::to_string(batches[b].size()) +
                                  " layer inputs for " + std::to_string(states.size()) + " BN layers");
    for (std::size_t l = 0; l < states.size(); ++l) terms[b].push_back(layer_drift_terms(batches[b][l], states[l], cfg));
  });
  for (const auto& t : terms) acc.add_terms(t);
  return acc.report();
}

}  // namespace detail

// BN inputs of `count` stream batches through the model in Eval mode.
inline std::vector<std::vector<Tensor4>> capture_bn_inputs(const ToyModel& model, BatchStream& stream,
                                                           std::size_t count) {
  const auto batches = detail::take_batches(stream, count);
  if (!batches.empty()) detail::check_scorable(model, batches.front());
  std::vector<std::vector<Tensor4>> out(batches.size());
  parallel_for(batches.size(), [&](std::size_t b) { out[b] = forward(model, batches[b], true).bn_inputs; });
  return out;
}

// Drift score: T = cfg.iterations batches from the stream, each pushed
// through the model with its BN inputs captured, terms pooled per layer.
inline DriftReport mde_score(const ToyModel& model, BatchStream& stream, const DriftConfig& cfg) {
  cfg.validate();
  if (model.bn_states().empty()) throw ModelIncompatible("model has no batch-normalization layers");
  if (stream.batch_size() != cfg.batch_size)
    throw std::invalid_argument("mde_score: stream batch size " + std::to_string(stream.batch_size()) +
                                " differs from config batch size " + std::to_string(cfg.batch_size));
  const auto inputs = capture_bn_inputs(model, stream, cfg.iterations);
  return detail::score_layer_inputs(model.bn_states(), inputs, cfg);
}

inline DriftReport mde_score(const ToyModel& model, const Tensor4& images, const DriftConfig& cfg,
                             std::uint64_t seed, std::size_t passes = 1) {
  BatchStream stream(images, cfg.batch_size, seed, passes);
  return mde_score(model, stream, cfg);
}

// Scores an imported trace against BN states; uses its first cfg.iterations
// batches. The batch size is whatever the trace holds.
inline DriftReport mde_score_trace(std::span<const BnLayerState> states,
                                   const std::vector<std::vector<Tensor4>>& batches, const DriftConfig& cfg) {
  cfg.validate();
  if (states.empty()) throw ModelIncompatible("model has no batch-normalization layers");
  if (batches.size() < cfg.iterations)
    throw std::runtime_error("trace holds " + std::to_string(batches.size()) + " batches, " +
                             std::to_string(cfg.iterations) + " requested");
  for (const auto& b : batches)
    for (std::size_t l = 0; l < std::min(b.size(), states.size()); ++l)
      if (b[l].channels() != states[l].channels())
        throw ModelIncompatible("trace layer " + std::to_string(l) + " has " + std::to_string(b[l].channels()) +
                                " channels, model BN layer has " + std::to_string(states[l].channels()));
  const std::vector<std::vector<Tensor4>> used(batches.begin(), batches.begin() + static_cast<std::ptrdiff_t>(cfg.iterations));
  return detail::score_layer_inputs(states, used, cfg);
}

// Statistics-only scoring for the closed-form metrics.
inline DriftReport mde_score_stats(std::span<const BnLayerState> states,
                                   const std::vector<std::vector<BatchStats>>& batches, const DriftConfig& cfg) {
  cfg.validate();
  if (states.empty()) throw ModelIncompatible("model has no batch-normalization layers");
  if (batches.size() < cfg.iterations)
    throw std::runtime_error("trace holds " + std::to_string(batches.size()) + " batches, " +
                             std::to_string(cfg.iterations) + " requested");
  DriftAccumulator acc(states, cfg);
  for (std::size_t b = 0; b < cfg.iterations; ++b) acc.add_batch_stats(batches[b]);
  return acc.report();
}

// Drift on standard-normal inputs of the model's input shape: enough samples
// for exactly cfg.iterations batches.
inline DriftReport fakedata_score(const ToyModel& model, const DriftConfig& cfg,
                                  std::uint64_t seed = kFakeDataSeed) {
  const Shape3 in = model.input_shape();
  const Tensor4 fake = make_fake_data(cfg.batch_size * cfg.iterations, in.channels, in.height, in.width, seed);
  DriftReport r = mde_score(model, fake, cfg, seed);
  r.dataset_id = "fakedata";
  return r;
}

}  // namespace mde
