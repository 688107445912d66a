#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mde/bn.hpp"
#include "mde/tensor.hpp"

namespace mde {

struct Conv2d {
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool bias = true;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};
struct BatchNorm {
  friend bool operator==(const BatchNorm&, const BatchNorm&) = default;
};
struct Relu {
  friend bool operator==(const Relu&, const Relu&) = default;
};
struct AvgPool {
  std::size_t kernel = 2;
  friend bool operator==(const AvgPool&, const AvgPool&) = default;
};
struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};
struct Linear {
  std::size_t out_features = 1;
  friend bool operator==(const Linear&, const Linear&) = default;
};

using LayerSpec = std::variant<Conv2d, BatchNorm, Relu, AvgPool, Flatten, Linear>;

struct Shape3 {
  std::size_t channels = 0, height = 0, width = 0;
  std::size_t size() const { return channels * height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline constexpr std::size_t kNoBn = std::numeric_limits<std::size_t>::max();

struct Layer {
  LayerSpec spec;
  Shape3 in, out;
  std::vector<double> weight;  // conv: [out][in][k][k], linear: [out][in]
  std::vector<double> bias;
  std::size_t bn_index = kNoBn;
};

// Conv(8,3x3)-BN-ReLU-AvgPool(2)-Conv(16,3x3)-BN-ReLU-AvgPool(2)-Flatten-Linear
inline std::vector<LayerSpec> default_architecture(std::size_t class_count) {
  return {Conv2d{8, 3, 1, 1, false}, BatchNorm{}, Relu{}, AvgPool{2},
          Conv2d{16, 3, 1, 1, false}, BatchNorm{}, Relu{}, AvgPool{2},
          Flatten{}, Linear{class_count}};
}

inline constexpr Shape3 kDefaultInput{1, 16, 16};

class ToyModel {
 public:
  ToyModel() = default;

  // Validates the shape chain and draws He-scaled weights from `seed`.
  ToyModel(Shape3 input, std::vector<LayerSpec> specs, std::size_t class_count,
           std::uint64_t seed, double retain_alpha = 0.9, double eps = kDefaultEps)
      : input_(input), class_count_(class_count), seed_(seed) {
    if (input.size() == 0) throw std::invalid_argument("ToyModel: empty input shape");
    if (class_count < 1) throw std::invalid_argument("ToyModel: class count must be >= 1");
    std::mt19937_64 rng(seed);
    Shape3 cur = input;
    for (auto& spec : specs) {
      Layer layer{spec, cur, cur, {}, {}, kNoBn};
      std::visit([&](const auto& s) { init_layer(layer, s, rng, retain_alpha, eps); }, spec);
      cur = layer.out;
      layers_.push_back(std::move(layer));
    }
    if (cur != Shape3{class_count, 1, 1})
      throw std::invalid_argument("ToyModel: network output is not class_count x 1 x 1");
  }

  const Shape3& input_shape() const { return input_; }
  std::size_t class_count() const { return class_count_; }
  std::uint64_t seed() const { return seed_; }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<BnLayerState>& bn_states() { return bn_states_; }
  const std::vector<BnLayerState>& bn_states() const { return bn_states_; }

  std::vector<LayerSpec> specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers_) out.push_back(l.spec);
    return out;
  }

  // Every trainable parameter block in a fixed order; BN layers expose
  // gamma and beta from their state.
  std::vector<std::span<double>> parameter_blocks() {
    std::vector<std::span<double>> out;
    for (auto& l : layers_) {
      if (l.bn_index != kNoBn) {
        out.emplace_back(bn_states_[l.bn_index].gamma);
        out.emplace_back(bn_states_[l.bn_index].beta);
      } else {
        out.emplace_back(l.weight);
        out.emplace_back(l.bias);
      }
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_)
      n += l.bn_index != kNoBn ? 2 * bn_states_[l.bn_index].channels() : l.weight.size() + l.bias.size();
    return n;
  }

  friend bool operator==(const ToyModel& a, const ToyModel& b) {
    if (a.input_ != b.input_ || a.class_count_ != b.class_count_ || a.seed_ != b.seed_ ||
        a.layers_.size() != b.layers_.size() || a.bn_states_ != b.bn_states_)
      return false;
    for (std::size_t i = 0; i < a.layers_.size(); ++i) {
      const auto &x = a.layers_[i], &y = b.layers_[i];
      if (x.spec != y.spec || x.in != y.in || x.out != y.out || x.weight != y.weight ||
          x.bias != y.bias || x.bn_index != y.bn_index)
        return false;
    }
    return true;
  }

 private:
  static void he_fill(std::vector<double>& w, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : w) v = dist(rng);
  }

  void init_layer(Layer& l, const Conv2d& s, std::mt19937_64& rng, double, double) {
    if (s.kernel == 0 || s.stride == 0 || s.out_channels == 0)
      throw std::invalid_argument("Conv2d: kernel, stride and out_channels must be positive");
    if (l.in.height + 2 * s.pad < s.kernel || l.in.width + 2 * s.pad < s.kernel)
      throw std::invalid_argument("Conv2d: kernel larger than padded input");
    l.out = {s.out_channels, (l.in.height + 2 * s.pad - s.kernel) / s.stride + 1,
             (l.in.width + 2 * s.pad - s.kernel) / s.stride + 1};
    const std::size_t fan_in = l.in.channels * s.kernel * s.kernel;
    l.weight.resize(s.out_channels * fan_in);
    he_fill(l.weight, fan_in, rng);
    l.bias.assign(s.bias ? s.out_channels : 0, 0.0);
  }
  void init_layer(Layer& l, const BatchNorm&, std::mt19937_64&, double alpha, double eps) {
    l.bn_index = bn_states_.size();
    bn_states_.push_back(BnLayerState::identity(l.in.channels, alpha, eps));
  }
  void init_layer(Layer&, const Relu&, std::mt19937_64&, double, double) {}
  void init_layer(Layer& l, const AvgPool& s, std::mt19937_64&, double, double) {
    if (s.kernel == 0 || l.in.height < s.kernel || l.in.width < s.kernel)
      throw std::invalid_argument("AvgPool: kernel does not fit the input");
    l.out = {l.in.channels, l.in.height / s.kernel, l.in.width / s.kernel};
  }
  void init_layer(Layer& l, const Flatten&, std::mt19937_64&, double, double) {
    l.out = {l.in.size(), 1, 1};
  }
  void init_layer(Layer& l, const Linear& s, std::mt19937_64& rng, double, double) {
    if (s.out_features == 0) throw std::invalid_argument("Linear: out_features must be positive");
    l.out = {s.out_features, 1, 1};
    l.weight.resize(s.out_features * l.in.size());
    he_fill(l.weight, l.in.size(), rng);
    l.bias.assign(s.out_features, 0.0);
  }

  Shape3 input_;
  std::size_t class_count_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<Layer> layers_;
  std::vector<BnLayerState> bn_states_;
};

enum class Mode { Train, Eval };

// Activations of one pass: acts[i] is the input of layer i, acts.back() the
// logits. Train-mode BN layers also record their batch statistics.
struct ForwardCache {
  std::vector<Tensor4> acts;
  std::vector<BatchStats> bn_batch_stats;  // one per BN layer, Train mode only
};

namespace nn {

inline Tensor4 conv_forward(const Layer& l, const Conv2d& s, const Tensor4& x) {
  const std::size_t B = x.batch(), Ci = l.in.channels, H = l.in.height, W = l.in.width;
  const std::size_t Co = l.out.channels, Ho = l.out.height, Wo = l.out.width, K = s.kernel;
  Tensor4 y(B, Co, Ho, Wo);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      double* out = y.plane(b, co).data();
      if (!l.bias.empty()) std::fill(out, out + Ho * Wo, l.bias[co]);
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = x.plane(b, ci).data();
        const double* wk = l.weight.data() + (co * Ci + ci) * K * K;
        for (std::size_t kh = 0; kh < K; ++kh)
          for (std::size_t kw = 0; kw < K; ++kw) {
            const double wv = wk[kh * K + kw];
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s.stride + kh) -
                                        static_cast<std::ptrdiff_t>(s.pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* row = in + ih * W;
              double* orow = out + oh * Wo;
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s.stride + kw) -
                                          static_cast<std::ptrdiff_t>(s.pad);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                orow[ow] += wv * row[iw];
              }
            }
          }
      }
    }
  return y;
}

inline Tensor4 conv_backward(const Layer& l, const Conv2d& s, const Tensor4& x, const Tensor4& dy,
                             std::vector<double>& dw, std::vector<double>& db) {
  const std::size_t B = x.batch(), Ci = l.in.channels, H = l.in.height, W = l.in.width;
  const std::size_t Co = l.out.channels, Ho = l.out.height, Wo = l.out.width, K = s.kernel;
  Tensor4 dx(B, Ci, H, W);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Co; ++co) {
      const double* g = dy.plane(b, co).data();
      if (!db.empty())
        for (std::size_t i = 0; i < Ho * Wo; ++i) db[co] += g[i];
      for (std::size_t ci = 0; ci < Ci; ++ci) {
        const double* in = x.plane(b, ci).data();
        double* din = dx.plane(b, ci).data();
        const double* wk = l.weight.data() + (co * Ci + ci) * K * K;
        double* dwk = dw.data() + (co * Ci + ci) * K * K;
        for (std::size_t kh = 0; kh < K; ++kh)
          for (std::size_t kw = 0; kw < K; ++kw) {
            const double wv = wk[kh * K + kw];
            double acc = 0.0;
            for (std::size_t oh = 0; oh < Ho; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * s.stride + kh) -
                                        static_cast<std::ptrdiff_t>(s.pad);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
              const double* row = in + ih * W;
              double* drow = din + ih * W;
              const double* grow = g + oh * Wo;
              for (std::size_t ow = 0; ow < Wo; ++ow) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * s.stride + kw) -
                                          static_cast<std::ptrdiff_t>(s.pad);
                if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                acc += grow[ow] * row[iw];
                drow[iw] += grow[ow] * wv;
              }
            }
            dwk[kh * K + kw] += acc;
          }
      }
    }
  return dx;
}

inline Tensor4 bn_train_forward(const Tensor4& x, const BnLayerState& s, BatchStats& stats) {
  stats = batch_stats(x);
  Tensor4 y = x;
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const double sd = std::sqrt(stats.var[c] + s.eps);
    for (std::size_t b = 0; b < x.batch(); ++b)
      for (double& v : y.plane(b, c))
        v = s.gamma[c] * detail::safe_div(v - stats.mean[c], sd) + s.beta[c];
  }
  return y;
}

// Backward of train-mode BN, where mean and variance depend on the batch.
inline Tensor4 bn_train_backward(const Tensor4& x, const BnLayerState& s, const BatchStats& stats,
                                 const Tensor4& dy, std::vector<double>& dgamma,
                                 std::vector<double>& dbeta) {
  Tensor4 dx(x.batch(), x.channels(), x.height(), x.width());
  const double n = static_cast<double>(x.batch() * x.spatial());
  for (std::size_t c = 0; c < s.channels(); ++c) {
    const double sd = std::sqrt(stats.var[c] + s.eps);
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t b = 0; b < x.batch(); ++b) {
      auto xs = x.plane(b, c);
      auto gs = dy.plane(b, c);
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double xhat = (xs[i] - stats.mean[c]) / sd;
        sum_dy += gs[i];
        sum_dy_xhat += gs[i] * xhat;
      }
    }
    dgamma[c] += sum_dy_xhat;
    dbeta[c] += sum_dy;
    const double k = s.gamma[c] / (n * sd);
    for (std::size_t b = 0; b < x.batch(); ++b) {
      auto xs = x.plane(b, c);
      auto gs = dy.plane(b, c);
      auto ds = dx.plane(b, c);
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const double xhat = (xs[i] - stats.mean[c]) / sd;
        ds[i] = k * (n * gs[i] - sum_dy - xhat * sum_dy_xhat);
      }
    }
  }
  return dx;
}

inline Tensor4 pool_forward(const Layer& l, const AvgPool& s, const Tensor4& x) {
  const std::size_t K = s.kernel, Ho = l.out.height, Wo = l.out.width, W = l.in.width;
  Tensor4 y(x.batch(), l.out.channels, Ho, Wo);
  const double scale = 1.0 / static_cast<double>(K * K);
  for (std::size_t b = 0; b < x.batch(); ++b)
    for (std::size_t c = 0; c < l.out.channels; ++c) {
      const double* in = x.plane(b, c).data();
      double* out = y.plane(b, c).data();
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          double acc = 0.0;
          for (std::size_t kh = 0; kh < K; ++kh)
            for (std::size_t kw = 0; kw < K; ++kw) acc += in[(oh * K + kh) * W + ow * K + kw];
          out[oh * Wo + ow] = acc * scale;
        }
    }
  return y;
}

inline Tensor4 pool_backward(const Layer& l, const AvgPool& s, const Tensor4& dy) {
  const std::size_t K = s.kernel, Ho = l.out.height, Wo = l.out.width, W = l.in.width;
  Tensor4 dx(dy.batch(), l.in.channels, l.in.height, l.in.width);
  const double scale = 1.0 / static_cast<double>(K * K);
  for (std::size_t b = 0; b < dy.batch(); ++b)
    for (std::size_t c = 0; c < l.out.channels; ++c) {
      const double* g = dy.plane(b, c).data();
      double* d = dx.plane(b, c).data();
      for (std::size_t oh = 0; oh < Ho; ++oh)
        for (std::size_t ow = 0; ow < Wo; ++ow)
          for (std::size_t kh = 0; kh < K; ++kh)
            for (std::size_t kw = 0; kw < K; ++kw)
              d[(oh * K + kh) * W + ow * K + kw] += g[oh * Wo + ow] * scale;
    }
  return dx;
}

inline Tensor4 linear_forward(const Layer& l, const Tensor4& x) {
  const std::size_t F = l.in.size(), O = l.out.channels;
  Tensor4 y(x.batch(), O, 1, 1);
  for (std::size_t b = 0; b < x.batch(); ++b) {
    auto in = x.sample(b);
    for (std::size_t o = 0; o < O; ++o) {
      const double* w = l.weight.data() + o * F;
      double acc = l.bias[o];
      for (std::size_t f = 0; f < F; ++f) acc += w[f] * in[f];
      y(b, o, 0, 0) = acc;
    }
  }
  return y;
}

inline Tensor4 linear_backward(const Layer& l, const Tensor4& x, const Tensor4& dy,
                               std::vector<double>& dw, std::vector<double>& db) {
  const std::size_t F = l.in.size(), O = l.out.channels;
  Tensor4 dx(x.batch(), l.in.channels, l.in.height, l.in.width);
  for (std::size_t b = 0; b < x.batch(); ++b) {
    auto in = x.sample(b);
    auto din = dx.sample(b);
    for (std::size_t o = 0; o < O; ++o) {
      const double g = dy(b, o, 0, 0);
      db[o] += g;
      const double* w = l.weight.data() + o * F;
      double* dwr = dw.data() + o * F;
      for (std::size_t f = 0; f < F; ++f) {
        dwr[f] += g * in[f];
        din[f] += g * w[f];
      }
    }
  }
  return dx;
}

template <class>
inline constexpr bool kAlwaysFalse = false;

}  // namespace nn

// Runs the network without touching the model. In Train mode BN layers
// normalize by batch statistics, which are returned in the cache.
inline ForwardCache forward_pass(const ToyModel& model, const Tensor4& x, Mode mode) {
  const Shape3& in = model.input_shape();
  if (x.channels() != in.channels || x.height() != in.height || x.width() != in.width)
    throw std::invalid_argument("forward: input shape " + x.shape_string() +
                                " does not match the model input");
  if (x.batch() == 0) throw std::invalid_argument("forward: empty batch");
  ForwardCache cache;
  cache.acts.reserve(model.layers().size() + 1);
  cache.acts.push_back(x);
  for (const Layer& l : model.layers()) {
    const Tensor4& cur = cache.acts.back();
    Tensor4 next = std::visit(
        [&](const auto& s) -> Tensor4 {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, Conv2d>) {
            return nn::conv_forward(l, s, cur);
          } else if constexpr (std::is_same_v<S, BatchNorm>) {
            const BnLayerState& st = model.bn_states()[l.bn_index];
            if (mode == Mode::Eval) return bn_forward(cur, st);
            cache.bn_batch_stats.emplace_back();
            return nn::bn_train_forward(cur, st, cache.bn_batch_stats.back());
          } else if constexpr (std::is_same_v<S, Relu>) {
            Tensor4 y = cur;
            for (double& v : y.data()) v = std::max(v, 0.0);
            return y;
          } else if constexpr (std::is_same_v<S, AvgPool>) {
            return nn::pool_forward(l, s, cur);
          } else if constexpr (std::is_same_v<S, Flatten>) {
            return Tensor4(cur.batch(), l.out.channels, 1, 1, cur.data());
          } else if constexpr (std::is_same_v<S, Linear>) {
            return nn::linear_forward(l, cur);
          } else {
            static_assert(nn::kAlwaysFalse<S>);
          }
        },
        l.spec);
    cache.acts.push_back(std::move(next));
  }
  return cache;
}

inline Matrix logits_matrix(const Tensor4& t) {
  return Matrix(t.batch(), t.channels(), t.data());
}

struct ForwardResult {
  Matrix logits;                  // batch x class_count
  std::vector<Tensor4> bn_inputs;  // pre-normalization input of each BN layer when traced
};

namespace detail {
inline ForwardResult collect(const ToyModel& model, ForwardCache& cache, bool trace) {
  ForwardResult r{logits_matrix(cache.acts.back()), {}};
  if (trace)
    for (std::size_t i = 0; i < model.layers().size(); ++i)
      if (model.layers()[i].bn_index != kNoBn) r.bn_inputs.push_back(std::move(cache.acts[i]));
  return r;
}
}  // namespace detail

// Train mode also folds each BN layer's batch statistics into its running
// estimates.
inline ForwardResult forward(ToyModel& model, const Tensor4& x, Mode mode, bool trace) {
  ForwardCache cache = forward_pass(model, x, mode);
  if (mode == Mode::Train)
    for (std::size_t i = 0; i < cache.bn_batch_stats.size(); ++i)
      model.bn_states()[i] = ema_update(model.bn_states()[i], cache.bn_batch_stats[i]);
  return detail::collect(model, cache, trace);
}

// Eval-mode forward on a frozen model.
inline ForwardResult forward(const ToyModel& model, const Tensor4& x, bool trace) {
  ForwardCache cache = forward_pass(model, x, Mode::Eval);
  return detail::collect(model, cache, trace);
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto out = p.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) z += (out[c] = std::exp(in[c] - mx));
    for (double& v : out) v /= z;
  }
  return p;
}

namespace detail {
inline void check_labels(std::span<const int> labels, std::size_t count, std::size_t classes) {
  if (labels.size() != count)
    throw std::invalid_argument("labels: expected " + std::to_string(count) + ", got " +
                                std::to_string(labels.size()));
  for (int y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw std::invalid_argument("label " + std::to_string(y) + " out of range [0, " +
                                  std::to_string(classes) + ")");
}
}  // namespace detail

// Mean softmax cross-entropy of a batch of logits.
inline double cross_entropy(const Matrix& logits, std::span<const int> labels) {
  double loss = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double z = 0.0;
    for (double v : in) z += std::exp(v - mx);
    loss += mx + std::log(z) - in[static_cast<std::size_t>(labels[r])];
  }
  return loss / static_cast<double>(logits.rows());
}

// Parallel to ToyModel::parameter_blocks().
using Gradients = std::vector<std::vector<double>>;

struct LossAndGradients {
  double loss = 0.0;
  Gradients grads;
  std::vector<BatchStats> bn_batch_stats;
};

// Train-mode loss and backprop gradients; running estimates are left alone.
inline LossAndGradients loss_and_gradients(const ToyModel& model, const Tensor4& x,
                                           std::span<const int> labels) {
  detail::check_labels(labels, x.batch(), model.class_count());
  ForwardCache cache = forward_pass(model, x, Mode::Train);
  const Matrix logits = logits_matrix(cache.acts.back());

  LossAndGradients out;
  out.loss = cross_entropy(logits, labels);
  const auto& layers = model.layers();
  out.grads.resize(2 * layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (l.bn_index != kNoBn) {
      out.grads[2 * i].assign(model.bn_states()[l.bn_index].channels(), 0.0);
      out.grads[2 * i + 1].assign(model.bn_states()[l.bn_index].channels(), 0.0);
    } else {
      out.grads[2 * i].assign(l.weight.size(), 0.0);
      out.grads[2 * i + 1].assign(l.bias.size(), 0.0);
    }
  }

  const Matrix p = softmax_rows(logits);
  const double inv_b = 1.0 / static_cast<double>(x.batch());
  Tensor4 grad(x.batch(), model.class_count(), 1, 1);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t c = 0; c < p.cols(); ++c)
      grad(r, c, 0, 0) = (p(r, c) - (static_cast<std::size_t>(labels[r]) == c ? 1.0 : 0.0)) * inv_b;

  for (std::size_t i = layers.size(); i-- > 0;) {
    const Layer& l = layers[i];
    const Tensor4& in = cache.acts[i];
    auto& dw = out.grads[2 * i];
    auto& db = out.grads[2 * i + 1];
    grad = std::visit(
        [&](const auto& s) -> Tensor4 {
          using S = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<S, Conv2d>) {
            return nn::conv_backward(l, s, in, grad, dw, db);
          } else if constexpr (std::is_same_v<S, BatchNorm>) {
            return nn::bn_train_backward(in, model.bn_states()[l.bn_index],
                                         cache.bn_batch_stats[l.bn_index], grad, dw, db);
          } else if constexpr (std::is_same_v<S, Relu>) {
            Tensor4 d = grad;
            for (std::size_t k = 0; k < d.size(); ++k)
              if (!(in.data()[k] > 0.0)) d.data()[k] = 0.0;
            return d;
          } else if constexpr (std::is_same_v<S, AvgPool>) {
            return nn::pool_backward(l, s, grad);
          } else if constexpr (std::is_same_v<S, Flatten>) {
            return Tensor4(grad.batch(), l.in.channels, l.in.height, l.in.width, grad.data());
          } else if constexpr (std::is_same_v<S, Linear>) {
            return nn::linear_backward(l, in, grad, dw, db);
          } else {
            static_assert(nn::kAlwaysFalse<S>);
          }
        },
        l.spec);
  }
  out.bn_batch_stats = std::move(cache.bn_batch_stats);
  return out;
}

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.05;
  double momentum_alpha = 0.9;  // BN retain factor
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch size must be >= 2");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning rate must be positive");
    if (!(momentum_alpha >= 0.0 && momentum_alpha <= 1.0))
      throw std::invalid_argument("TrainConfig: BN retain factor must lie in [0,1]");
  }
};

// Mini-batch SGD on softmax cross-entropy. Running estimates are updated
// after every batch; a trailing batch of one sample is dropped.
inline ToyModel train(ToyModel model, const Tensor4& images, std::span<const int> labels,
                      const TrainConfig& cfg) {
  cfg.validate();
  if (images.batch() == 0) throw std::invalid_argument("train: empty dataset");
  detail::check_labels(labels, images.batch(), model.class_count());
  for (auto& s : model.bn_states()) s.retain_alpha = cfg.momentum_alpha;

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(images.batch());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> batch_labels;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      if (end - start < 2) break;
      std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor4 xb = gather_samples(images, idx);
      batch_labels.clear();
      for (std::size_t i : idx) batch_labels.push_back(labels[i]);

      LossAndGradients lg = loss_and_gradients(model, xb, batch_labels);
      auto blocks = model.parameter_blocks();
      for (std::size_t k = 0; k < blocks.size(); ++k)
        for (std::size_t j = 0; j < blocks[k].size(); ++j)
          blocks[k][j] -= cfg.learning_rate * lg.grads[k][j];
      for (std::size_t i = 0; i < lg.bn_batch_stats.size(); ++i)
        model.bn_states()[i] = ema_update(model.bn_states()[i], lg.bn_batch_stats[i]);
    }
  }
  return model;
}

struct Evaluation {
  double accuracy = 0.0;
  Matrix probabilities;  // samples x classes
};

// Eval-mode accuracy and softmax probabilities, processed in chunks.
inline Evaluation evaluate(const ToyModel& model, const Tensor4& images, std::span<const int> labels) {
  if (images.batch() == 0) throw std::invalid_argument("evaluate: empty dataset");
  detail::check_labels(labels, images.batch(), model.class_count());
  constexpr std::size_t kChunk = 256;
  Evaluation ev{0.0, Matrix(images.batch(), model.class_count())};
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.batch(); start += kChunk) {
    const std::size_t end = std::min(images.batch(), start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Matrix p = softmax_rows(forward(model, gather_samples(images, idx), false).logits);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      auto row = p.row(r);
      std::copy(row.begin(), row.end(), ev.probabilities.row(start + r).begin());
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == static_cast<std::size_t>(labels[start + r])) ++correct;
    }
  }
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(images.batch());
  return ev;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;  // perturbation flipped a ReLU input sign
};

namespace detail {
inline std::vector<bool> relu_pattern(const ToyModel& model, const ForwardCache& cache) {
  std::vector<bool> out;
  for (std::size_t i = 0; i < model.layers().size(); ++i)
    if (std::holds_alternative<Relu>(model.layers()[i].spec))
      for (double v : cache.acts[i].data()) out.push_back(v > 0.0);
  return out;
}
}  // namespace detail

// Central differences of the train-mode loss against backprop, over every
// parameter. Relative error is |g - n| / max(|g|, |n|, 1e-6); the floor keeps
// roundoff on exactly-zero gradients (a conv bias feeding BN) from counting as
// error. Parameters whose +-h perturbation moves a ReLU input across zero are counted and skipped.
inline GradientCheck finite_difference_check(const ToyModel& model, const Tensor4& x,
                                             std::span<const int> labels, double h = 1e-4) {
  const LossAndGradients ref = loss_and_gradients(model, x, labels);
  const std::vector<bool> base_pattern = detail::relu_pattern(model, forward_pass(model, x, Mode::Train));

  ToyModel probe = model;
  auto blocks = probe.parameter_blocks();
  GradientCheck out;
  auto loss_at = [&](std::vector<bool>& pattern) {
    ForwardCache c = forward_pass(probe, x, Mode::Train);
    pattern = detail::relu_pattern(probe, c);
    return cross_entropy(logits_matrix(c.acts.back()), labels);
  };
  std::vector<bool> plus_pattern, minus_pattern;
  for (std::size_t k = 0; k < blocks.size(); ++k)
    for (std::size_t j = 0; j < blocks[k].size(); ++j) {
      const double saved = blocks[k][j];
      blocks[k][j] = saved + h;
      const double lp = loss_at(plus_pattern);
      blocks[k][j] = saved - h;
      const double lm = loss_at(minus_pattern);
      blocks[k][j] = saved;
      if (plus_pattern != base_pattern || minus_pattern != base_pattern) {
        ++out.skipped_kinks;
        continue;
      }
      const double numeric = (lp - lm) / (2.0 * h);
      const double analytic = ref.grads[k][j];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      out.max_relative_error = std::max(out.max_relative_error, std::abs(numeric - analytic) / denom);
      ++out.checked;
    }
  return out;
}

}  // namespace mde
