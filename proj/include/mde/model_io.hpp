#pragma once

// Conversions between in-memory objects and MDET records.
//
// model:   per-layer weight/bias entries (layer_index = position in the
//          network) and four bn_* entries per BN layer (layer_index = BN
//          ordinal). metadata.architecture / input_shape / class_count are
//          present for toy-net models and absent for exported BN-only models.
// trace:   one activation entry per (batch, BN layer), batch-major, each a
//          B x C x H x W tensor; layer_index = BN ordinal.
// dataset: one image entry (N x C x H x W) and one i32 label entry (N).

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "mde/bn.hpp"
#include "mde/mdet.hpp"
#include "mde/shift.hpp"
#include "mde/tensor.hpp"
#include "mde/toy_net.hpp"

namespace mde {

namespace detail {

inline nlohmann::json spec_json(const LayerSpec& spec) {
  return std::visit(
      [](const auto& s) -> nlohmann::json {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, Conv2d>)
          return {{"type", "conv2d"}, {"out_channels", s.out_channels}, {"kernel", s.kernel},
                  {"stride", s.stride}, {"pad", s.pad}, {"bias", s.bias}};
        else if constexpr (std::is_same_v<T, BatchNorm>) return {{"type", "batchnorm"}};
        else if constexpr (std::is_same_v<T, Relu>) return {{"type", "relu"}};
        else if constexpr (std::is_same_v<T, AvgPool>) return {{"type", "avgpool"}, {"kernel", s.kernel}};
        else if constexpr (std::is_same_v<T, Flatten>) return {{"type", "flatten"}};
        else return {{"type", "linear"}, {"out_features", s.out_features}};
      },
      spec);
}

inline LayerSpec spec_from_json(const nlohmann::json& j) {
  const std::string type = j.at("type").get<std::string>();
  auto u = [&](const char* key) { return static_cast<std::size_t>(json_u64(j.at(key))); };
  if (type == "conv2d") {
    if (!j.at("bias").is_boolean()) throw std::invalid_argument("conv2d bias flag is not a boolean");
    return Conv2d{u("out_channels"), u("kernel"), u("stride"), u("pad"), j.at("bias").get<bool>()};
  }
  if (type == "batchnorm") return BatchNorm{};
  if (type == "relu") return Relu{};
  if (type == "avgpool") return AvgPool{u("kernel")};
  if (type == "flatten") return Flatten{};
  if (type == "linear") return Linear{u("out_features")};
  throw std::invalid_argument("unknown layer type '" + type + "'");
}

inline MdetTensor make_tensor(std::string name, TensorRole role, std::int64_t layer,
                              std::vector<std::uint64_t> shape, std::vector<double> values,
                              DType dtype = DType::F32) {
  return MdetTensor{std::move(name), role, layer, dtype, std::move(shape), std::move(values)};
}

inline std::vector<std::uint64_t> dims(const Tensor4& t) {
  return {t.batch(), t.channels(), t.height(), t.width()};
}

inline Tensor4 tensor_from_entry(const MdetTensor& t) {
  if (t.shape.size() != 4)
    throw MdetError(MdetErrorKind::Invalid, 0, "entry '" + t.name + "' is not a 4-d tensor");
  Tensor4 out(t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
  if (out.data().size() != t.values.size())
    throw MdetError(MdetErrorKind::Invalid, 0, "entry '" + t.name + "' value count does not match its shape");
  std::copy(t.values.begin(), t.values.end(), out.data().begin());
  return out;
}

inline std::vector<std::uint64_t> weight_shape(const Layer& l) {
  if (const auto* c = std::get_if<Conv2d>(&l.spec))
    return {c->out_channels, l.in.channels, c->kernel, c->kernel};
  if (std::holds_alternative<Linear>(l.spec)) return {l.out.channels, l.in.size()};
  return {};
}

}  // namespace detail

inline MdetRecord model_to_record(const ToyModel& model, const std::string& model_id,
                                  const std::string& dataset_id = "") {
  MdetRecord rec;
  rec.kind = "model";
  rec.metadata.model_id = model_id;
  rec.metadata.dataset_id = dataset_id;
  rec.metadata.seed = model.seed();
  if (!model.bn_states().empty()) {
    rec.metadata.eps = model.bn_states().front().eps;
    rec.metadata.retain_alpha = model.bn_states().front().retain_alpha;
  }
  nlohmann::json arch = nlohmann::json::array();
  for (const auto& l : model.layers()) arch.push_back(detail::spec_json(l.spec));
  const Shape3 in = model.input_shape();
  rec.metadata.extra["architecture"] = arch;
  rec.metadata.extra["input_shape"] = {in.channels, in.height, in.width};
  rec.metadata.extra["class_count"] = model.class_count();

  const auto& layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    const auto li = static_cast<std::int64_t>(i);
    if (l.bn_index != kNoBn) {
      const BnLayerState& s = model.bn_states()[l.bn_index];
      const auto bi = static_cast<std::int64_t>(l.bn_index);
      const std::string p = "bn" + std::to_string(l.bn_index) + ".";
      const std::vector<std::uint64_t> c{s.channels()};
      rec.tensors.push_back(detail::make_tensor(p + "gamma", TensorRole::BnGamma, bi, c, s.gamma));
      rec.tensors.push_back(detail::make_tensor(p + "beta", TensorRole::BnBeta, bi, c, s.beta));
      rec.tensors.push_back(detail::make_tensor(p + "running_mean", TensorRole::BnRunningMean, bi, c, s.running_mean));
      rec.tensors.push_back(detail::make_tensor(p + "running_var", TensorRole::BnRunningVar, bi, c, s.running_var));
      continue;
    }
    const std::string p = "layer" + std::to_string(i) + ".";
    if (!l.weight.empty())
      rec.tensors.push_back(detail::make_tensor(p + "weight", TensorRole::Weight, li, detail::weight_shape(l), l.weight));
    if (!l.bias.empty())
      rec.tensors.push_back(detail::make_tensor(p + "bias", TensorRole::Bias, li, {l.bias.size()}, l.bias));
  }
  return rec;
}

// BN states in layer order; works for any model record, including exported
// ones without an architecture.
inline std::vector<BnLayerState> bn_states_from_record(const MdetRecord& rec) {
  if (rec.kind != "model") throw MdetError(MdetErrorKind::Invalid, 0, "expected a model record, got " + rec.kind);
  std::map<std::int64_t, BnLayerState> by_layer;
  for (const auto& t : rec.tensors) {
    BnLayerState* s = nullptr;
    switch (t.role) {
      case TensorRole::BnGamma: s = &by_layer[t.layer_index]; s->gamma = t.values; break;
      case TensorRole::BnBeta: s = &by_layer[t.layer_index]; s->beta = t.values; break;
      case TensorRole::BnRunningMean: s = &by_layer[t.layer_index]; s->running_mean = t.values; break;
      case TensorRole::BnRunningVar: s = &by_layer[t.layer_index]; s->running_var = t.values; break;
      default: break;
    }
    if (s) {
      s->eps = rec.metadata.eps;
      s->retain_alpha = rec.metadata.retain_alpha;
    }
  }
  std::vector<BnLayerState> out;
  for (auto& [layer, s] : by_layer) {
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

inline bool has_architecture(const MdetRecord& rec) { return rec.metadata.extra.contains("architecture"); }

// Rebuilds a ToyModel; values come back at f32 precision.
inline ToyModel model_from_record(const MdetRecord& rec) {
  if (rec.kind != "model") throw MdetError(MdetErrorKind::Invalid, 0, "expected a model record, got " + rec.kind);
  if (!has_architecture(rec))
    throw MdetError(MdetErrorKind::Invalid, 0, "model record has no architecture; only its BN states are usable");
  const auto& extra = rec.metadata.extra;
  ToyModel model;
  try {
    std::vector<LayerSpec> specs;
    for (const auto& j : extra.at("architecture")) specs.push_back(detail::spec_from_json(j));
    const auto& in = extra.at("input_shape");
    if (!in.is_array() || in.size() != 3) throw std::invalid_argument("input_shape must hold 3 integers");
    const Shape3 input{detail::json_u64(in[0]), detail::json_u64(in[1]), detail::json_u64(in[2])};
    model = ToyModel(input, specs, detail::json_u64(extra.at("class_count")), rec.metadata.seed,
                     rec.metadata.retain_alpha, rec.metadata.eps);
  } catch (const MdetError&) {
    throw;
  } catch (const std::exception& e) {
    throw MdetError(MdetErrorKind::Invalid, 0, std::string("bad model architecture: ") + e.what());
  }

  auto& layers = model.layers();
  std::vector<bool> seen_weight(layers.size(), false), seen_bias(layers.size(), false);
  for (const auto& t : rec.tensors) {
    if (t.role != TensorRole::Weight && t.role != TensorRole::Bias) continue;
    if (t.layer_index < 0 || static_cast<std::size_t>(t.layer_index) >= layers.size())
      throw MdetError(MdetErrorKind::Invalid, 0, "entry '" + t.name + "' refers to a missing layer");
    const auto i = static_cast<std::size_t>(t.layer_index);
    auto& dst = t.role == TensorRole::Weight ? layers[i].weight : layers[i].bias;
    if (dst.size() != t.values.size())
      throw MdetError(MdetErrorKind::Invalid, 0, "entry '" + t.name + "' does not match the architecture");
    dst = t.values;
    (t.role == TensorRole::Weight ? seen_weight : seen_bias)[i] = true;
  }
  for (std::size_t i = 0; i < layers.size(); ++i)
    if ((!layers[i].weight.empty() && !seen_weight[i]) || (!layers[i].bias.empty() && !seen_bias[i]))
      throw MdetError(MdetErrorKind::Invalid, 0, "layer " + std::to_string(i) + " parameters missing from record");

  auto states = bn_states_from_record(rec);
  if (states.size() != model.bn_states().size())
    throw MdetError(MdetErrorKind::Invalid, 0, "record has " + std::to_string(states.size()) +
                                                   " BN layers, architecture has " + std::to_string(model.bn_states().size()));
  for (std::size_t b = 0; b < states.size(); ++b) {
    if (states[b].channels() != model.bn_states()[b].channels())
      throw MdetError(MdetErrorKind::Invalid, 0, "BN layer " + std::to_string(b) + " channel count mismatch");
    model.bn_states()[b] = std::move(states[b]);
  }
  return model;
}

inline MdetRecord dataset_to_record(const SyntheticDataset& ds, const std::string& dataset_id) {
  MdetRecord rec;
  rec.kind = "dataset";
  rec.metadata.dataset_id = dataset_id;
  rec.metadata.seed = ds.seed;
  rec.metadata.extra["class_count"] = ds.class_count;
  rec.tensors.push_back(detail::make_tensor("images", TensorRole::Image, 0, detail::dims(ds.images),
                                            std::vector<double>(ds.images.data().begin(), ds.images.data().end())));
  rec.tensors.push_back(detail::make_tensor("labels", TensorRole::Label, 0, {ds.labels.size()},
                                            std::vector<double>(ds.labels.begin(), ds.labels.end()), DType::I32));
  return rec;
}

inline SyntheticDataset dataset_from_record(const MdetRecord& rec) {
  if (rec.kind != "dataset") throw MdetError(MdetErrorKind::Invalid, 0, "expected a dataset record, got " + rec.kind);
  SyntheticDataset ds;
  ds.seed = rec.metadata.seed;
  bool have_images = false;
  for (const auto& t : rec.tensors) {
    if (t.role == TensorRole::Image) {
      ds.images = detail::tensor_from_entry(t);
      have_images = true;
    } else if (t.role == TensorRole::Label) {
      ds.labels.assign(t.values.begin(), t.values.end());
    }
  }
  if (!have_images) throw MdetError(MdetErrorKind::Invalid, 0, "dataset record has no image entry");
  if (!ds.labels.empty() && ds.labels.size() != ds.images.batch())
    throw MdetError(MdetErrorKind::Invalid, 0, "label count does not match image count");
  int max_label = -1;
  for (int l : ds.labels) {
    if (l < 0) throw MdetError(MdetErrorKind::Invalid, 0, "negative label");
    max_label = std::max(max_label, l);
  }
  const auto& extra = rec.metadata.extra;
  ds.class_count = extra.contains("class_count") ? detail::json_u64(extra.at("class_count"))
                                                 : static_cast<std::size_t>(max_label + 1);
  if (max_label >= 0 && static_cast<std::size_t>(max_label) >= ds.class_count)
    throw MdetError(MdetErrorKind::Invalid, 0, "label exceeds class_count");
  return ds;
}

// batches[b][l] is the input of BN layer l for batch b.
inline MdetRecord trace_to_record(const std::vector<std::vector<Tensor4>>& batches, const std::string& model_id,
                                  const std::string& dataset_id, std::uint64_t seed = 0) {
  MdetRecord rec;
  rec.kind = "trace";
  rec.metadata.model_id = model_id;
  rec.metadata.dataset_id = dataset_id;
  rec.metadata.seed = seed;
  for (std::size_t b = 0; b < batches.size(); ++b)
    for (std::size_t l = 0; l < batches[b].size(); ++l) {
      const Tensor4& t = batches[b][l];
      rec.tensors.push_back(detail::make_tensor("batch" + std::to_string(b) + ".bn" + std::to_string(l),
                                                TensorRole::Activation, static_cast<std::int64_t>(l), detail::dims(t),
                                                std::vector<double>(t.data().begin(), t.data().end())));
    }
  return rec;
}

namespace detail {
// Batch grouping of activation entries: layer indices run 0..L-1 within each
// batch. Returns L.
template <typename LayerIndexAt>
std::size_t trace_layer_count(std::size_t n, LayerIndexAt layer_at) {
  if (n == 0) throw MdetError(MdetErrorKind::Invalid, 0, "trace holds no activation entries");
  std::int64_t max_layer = 0;
  for (std::size_t i = 0; i < n; ++i) max_layer = std::max(max_layer, layer_at(i));
  const auto layers = static_cast<std::size_t>(max_layer) + 1;
  if (n % layers != 0) throw MdetError(MdetErrorKind::Invalid, 0, "trace batches are incomplete");
  for (std::size_t i = 0; i < n; ++i)
    if (layer_at(i) != static_cast<std::int64_t>(i % layers))
      throw MdetError(MdetErrorKind::Invalid, 0, "trace activation entries are out of layer order");
  return layers;
}
}  // namespace detail

inline std::vector<std::vector<Tensor4>> trace_batches(const MdetRecord& rec) {
  if (rec.kind != "trace") throw MdetError(MdetErrorKind::Invalid, 0, "expected a trace record, got " + rec.kind);
  std::vector<const MdetTensor*> acts;
  for (const auto& t : rec.tensors)
    if (t.role == TensorRole::Activation) acts.push_back(&t);
  const std::size_t layers = detail::trace_layer_count(acts.size(), [&](std::size_t i) { return acts[i]->layer_index; });
  std::vector<std::vector<Tensor4>> out(acts.size() / layers);
  for (std::size_t i = 0; i < acts.size(); ++i) out[i / layers].push_back(detail::tensor_from_entry(*acts[i]));
  return out;
}

// Per-batch, per-layer statistics: stats[b][l].
inline std::vector<std::vector<BatchStats>> stats_only_view(const MdetRecord& rec) {
  if (rec.kind != "trace") throw MdetError(MdetErrorKind::Invalid, 0, "expected a trace record, got " + rec.kind);
  std::vector<const MdetTensor*> acts;
  for (const auto& t : rec.tensors)
    if (t.role == TensorRole::Activation) acts.push_back(&t);
  const std::size_t layers = detail::trace_layer_count(acts.size(), [&](std::size_t i) { return acts[i]->layer_index; });
  std::vector<std::vector<BatchStats>> out(acts.size() / layers);
  for (std::size_t i = 0; i < acts.size(); ++i) out[i / layers].push_back(batch_stats(detail::tensor_from_entry(*acts[i])));
  return out;
}

// Same, reading one entry at a time from disk.
inline std::vector<std::vector<BatchStats>> stats_only_view(const std::string& path) {
  MdetReader reader(path);
  const MdetHeader& h = reader.header();
  if (h.kind != "trace") throw MdetError(MdetErrorKind::Invalid, 0, "expected a trace record, got " + h.kind);
  std::vector<std::size_t> acts;
  for (std::size_t i = 0; i < h.entries.size(); ++i)
    if (h.entries[i].role == TensorRole::Activation) acts.push_back(i);
  const std::size_t layers =
      detail::trace_layer_count(acts.size(), [&](std::size_t i) { return h.entries[acts[i]].layer_index; });
  std::vector<std::vector<BatchStats>> out(acts.size() / layers);
  for (std::size_t i = 0; i < acts.size(); ++i)
    out[i / layers].push_back(batch_stats(detail::tensor_from_entry(reader.read(acts[i]))));
  return out;
}

}  // namespace mde
