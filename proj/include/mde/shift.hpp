#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "mde/tensor.hpp"

namespace mde {

// Grating parameters of one synthetic class.
struct ClassPattern {
  double angle = 0.0;      // radians
  double frequency = 2.0;  // cycles across the image
  double offset = 0.5;     // mean intensity
};

struct SyntheticDataset {
  Tensor4 images;  // values nominally in [0, 1]
  std::vector<int> labels;
  std::size_t class_count = 0;
  std::vector<ClassPattern> patterns;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
};

inline constexpr double kPatternAmplitude = 0.2;
inline constexpr double kPixelNoise = 0.08;

// class_count classes of samples_per_class 16x16 single-channel images, stored
// class-major. Each class is an oriented grating with its own frequency and
// mean offset; every sample gets a random phase and pixel noise, clamped to [0,1].
inline SyntheticDataset generate_dataset(std::size_t class_count, std::size_t samples_per_class,
                                         std::uint64_t seed, std::size_t side = 16) {
  if (class_count < 2) throw std::invalid_argument("generate_dataset: need at least 2 classes");
  if (samples_per_class < 1) throw std::invalid_argument("generate_dataset: need samples");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kPixelNoise);

  SyntheticDataset ds;
  ds.class_count = class_count;
  ds.seed = seed;
  const double frequencies[] = {1.5, 2.0, 2.5, 3.0};
  std::vector<std::size_t> offset_rank(class_count);
  std::iota(offset_rank.begin(), offset_rank.end(), 0);
  std::shuffle(offset_rank.begin(), offset_rank.end(), rng);
  for (std::size_t k = 0; k < class_count; ++k) {
    ClassPattern p;
    p.angle = std::numbers::pi * (static_cast<double>(k) + 0.5 * unit(rng)) / static_cast<double>(class_count);
    p.frequency = frequencies[static_cast<std::size_t>(unit(rng) * 4.0) % 4];
    p.offset = 0.3 + 0.4 * static_cast<double>(offset_rank[k]) / static_cast<double>(class_count - 1);
    ds.patterns.push_back(p);
  }

  const std::size_t n = class_count * samples_per_class;
  ds.images = Tensor4(n, 1, side, side);
  ds.labels.resize(n);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t k = 0; k < class_count; ++k) {
    const ClassPattern& p = ds.patterns[k];
    const double kx = std::cos(p.angle) * p.frequency / static_cast<double>(side);
    const double ky = std::sin(p.angle) * p.frequency / static_cast<double>(side);
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      const std::size_t i = k * samples_per_class + s;
      ds.labels[i] = static_cast<int>(k);
      const double phase = two_pi * unit(rng);
      auto img = ds.images.plane(i, 0);
      for (std::size_t h = 0; h < side; ++h)
        for (std::size_t w = 0; w < side; ++w) {
          const double v = p.offset +
                           kPatternAmplitude * std::cos(two_pi * (kx * static_cast<double>(w) +
                                                                  ky * static_cast<double>(h)) + phase) +
                           noise(rng);
          img[h * side + w] = std::clamp(v, 0.0, 1.0);
        }
    }
  }
  return ds;
}

// Samples at the given indices, keeping labels and class metadata.
inline SyntheticDataset subset(const SyntheticDataset& ds, std::span<const std::size_t> indices) {
  SyntheticDataset out;
  out.images = gather_samples(ds.images, indices);
  for (std::size_t i : indices) out.labels.push_back(ds.labels[i]);
  out.class_count = ds.class_count;
  out.patterns = ds.patterns;
  out.seed = ds.seed;
  return out;
}

inline std::vector<std::size_t> indices_of_classes(std::span<const int> labels,
                                                   std::span<const std::size_t> classes) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (std::find(classes.begin(), classes.end(), static_cast<std::size_t>(labels[i])) != classes.end())
      out.push_back(i);
  return out;
}

// Standard-normal pixels: the maximal-drift reference input.
inline Tensor4 make_fake_data(std::size_t batch, std::size_t channels, std::size_t height,
                              std::size_t width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor4 t(batch, channels, height, width);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

struct Rotation {
  double degrees = 0.0;
};
struct Brightness {
  double delta = 0.0;
};
struct GaussianNoise {
  double sigma = 0.0;
};
struct CutOut {
  std::size_t holes = 0;
  std::size_t hole_size = 0;
};

using ShiftSpec = std::variant<Rotation, Brightness, GaussianNoise, CutOut>;

inline void validate(const ShiftSpec& spec) {
  std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Rotation>) {
          if (!(s.degrees >= 0.0 && s.degrees < 360.0))
            throw std::invalid_argument("Rotation: degrees must lie in [0, 360)");
        } else if constexpr (std::is_same_v<S, Brightness>) {
          if (!std::isfinite(s.delta)) throw std::invalid_argument("Brightness: delta must be finite");
        } else if constexpr (std::is_same_v<S, GaussianNoise>) {
          if (!(s.sigma >= 0.0) || !std::isfinite(s.sigma))
            throw std::invalid_argument("GaussianNoise: sigma must be >= 0");
        }
      },
      spec);
}

namespace detail {

inline bool zero_severity(const ShiftSpec& spec) {
  return std::visit(
      [](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Rotation>) return s.degrees == 0.0;
        else if constexpr (std::is_same_v<S, Brightness>) return s.delta == 0.0;
        else if constexpr (std::is_same_v<S, GaussianNoise>) return s.sigma == 0.0;
        else return s.holes == 0 || s.hole_size == 0;
      },
      spec);
}

// Nearest-neighbour rotation about ((H-1)/2, (W-1)/2). Quarter turns use exact
// index maps; other angles round the back-rotated source coordinate.
inline Tensor4 rotate(const Tensor4& x, double degrees) {
  const std::size_t H = x.height(), W = x.width();
  double fill = 0.0;
  for (double v : x.data()) fill += v;
  fill /= static_cast<double>(std::max<std::size_t>(x.size(), 1));

  Tensor4 out(x.batch(), x.channels(), H, W, fill);
  const bool quarter = std::fmod(degrees, 90.0) == 0.0 && H == W;
  const int quarters = static_cast<int>(degrees / 90.0) % 4;
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double ch = (static_cast<double>(H) - 1.0) / 2.0, cw = (static_cast<double>(W) - 1.0) / 2.0;

  for (std::size_t b = 0; b < x.batch(); ++b)
    for (std::size_t c = 0; c < x.channels(); ++c) {
      auto src = x.plane(b, c);
      auto dst = out.plane(b, c);
      for (std::size_t i = 0; i < H; ++i)
        for (std::size_t j = 0; j < W; ++j) {
          std::ptrdiff_t si, sj;
          if (quarter) {
            const auto ii = static_cast<std::ptrdiff_t>(i), jj = static_cast<std::ptrdiff_t>(j);
            const auto n = static_cast<std::ptrdiff_t>(H) - 1;
            switch (quarters) {
              case 1: si = n - jj; sj = ii; break;
              case 2: si = n - ii; sj = n - jj; break;
              case 3: si = jj; sj = n - ii; break;
              default: si = ii; sj = jj; break;
            }
          } else {
            const double di = static_cast<double>(i) - ch, dj = static_cast<double>(j) - cw;
            si = static_cast<std::ptrdiff_t>(std::lround(cs * di - sn * dj + ch));
            sj = static_cast<std::ptrdiff_t>(std::lround(sn * di + cs * dj + cw));
          }
          if (si < 0 || sj < 0 || si >= static_cast<std::ptrdiff_t>(H) ||
              sj >= static_cast<std::ptrdiff_t>(W))
            continue;
          dst[i * W + j] = src[static_cast<std::size_t>(si) * W + static_cast<std::size_t>(sj)];
        }
    }
  return out;
}

}  // namespace detail

// Applies one covariate perturbation. Zero severity returns the input unchanged.
inline Tensor4 apply_shift(const Tensor4& images, const ShiftSpec& spec, std::uint64_t seed) {
  validate(spec);
  if (detail::zero_severity(spec)) return images;
  std::mt19937_64 rng(seed);
  return std::visit(
      [&](const auto& s) -> Tensor4 {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Rotation>) {
          return detail::rotate(images, s.degrees);
        } else if constexpr (std::is_same_v<S, Brightness>) {
          Tensor4 out = images;
          for (double& v : out.data()) v = std::clamp(v + s.delta, 0.0, 1.0);
          return out;
        } else if constexpr (std::is_same_v<S, GaussianNoise>) {
          Tensor4 out = images;
          std::normal_distribution<double> dist(0.0, s.sigma);
          for (double& v : out.data()) v += dist(rng);
          return out;
        } else {
          Tensor4 out = images;
          const std::size_t H = images.height(), W = images.width();
          const std::size_t hs = std::min(s.hole_size, H), ws = std::min(s.hole_size, W);
          std::uniform_int_distribution<std::size_t> top(0, H - hs), left(0, W - ws);
          for (std::size_t b = 0; b < images.batch(); ++b)
            for (std::size_t k = 0; k < s.holes; ++k) {
              const std::size_t t = top(rng), l = left(rng);
              for (std::size_t c = 0; c < images.channels(); ++c)
                for (std::size_t i = t; i < t + hs; ++i)
                  for (std::size_t j = l; j < l + ws; ++j) out(b, c, i, j) = 0.0;
            }
          return out;
        }
      },
      spec);
}

struct OverlapSpec {
  std::size_t total_classes = 0;
  std::size_t classes_per_split = 0;
  double overlap_probability = 0.0;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train, test;  // sample indices, disjoint
  std::vector<std::size_t> train_classes, test_classes;
  std::size_t overlapped_classes = 0;
};

// Class-level split with round(p * c) shared classes. Every class's samples
// are shuffled and halved; train-side classes draw from the first half and
// test-side classes from the second, so the two sides never share a sample.
inline SplitIndices overlapping_split_indices(std::span<const int> labels, const OverlapSpec& spec) {
  const std::size_t total = spec.total_classes, c = spec.classes_per_split;
  const double p = spec.overlap_probability;
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("overlapping_split: p must lie in [0,1]");
  if (c == 0 || c > total) throw std::invalid_argument("overlapping_split: need 1 <= c <= total classes");
  const auto shared = static_cast<std::size_t>(std::lround(p * static_cast<double>(c)));
  const std::size_t exclusive = c - shared;
  if (shared + 2 * exclusive > total)
    throw std::invalid_argument("overlapping_split: infeasible, " + std::to_string(c) +
                                " classes per side with " + std::to_string(shared) +
                                " shared needs more than " + std::to_string(total) + " classes");

  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> perm(total);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  SplitIndices out;
  out.overlapped_classes = shared;
  out.train_classes.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(c));
  out.test_classes.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(shared));
  out.test_classes.insert(out.test_classes.end(), perm.begin() + static_cast<std::ptrdiff_t>(c),
                          perm.begin() + static_cast<std::ptrdiff_t>(c + exclusive));

  std::vector<std::vector<std::size_t>> by_class(total);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw std::invalid_argument("overlapping_split: negative label");
    const auto k = static_cast<std::size_t>(labels[i]);
    if (k < total) by_class[k].push_back(i);
  }
  std::vector<bool> in_train(total, false), in_test(total, false);
  for (std::size_t k : out.train_classes) in_train[k] = true;
  for (std::size_t k : out.test_classes) in_test[k] = true;
  for (std::size_t k = 0; k < total; ++k) {
    auto& idx = by_class[k];
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t half = idx.size() / 2;
    if (in_train[k]) out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
    if (in_test[k]) out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

struct OverlapSplit {
  SyntheticDataset train, test;
  std::size_t overlapped_classes = 0;
};

inline OverlapSplit overlapping_split(const SyntheticDataset& ds, const OverlapSpec& spec) {
  if (spec.total_classes > ds.class_count)
    throw std::invalid_argument("overlapping_split: spec names more classes than the dataset has");
  const SplitIndices idx = overlapping_split_indices(ds.labels, spec);
  return {subset(ds, idx.train), subset(ds, idx.test), idx.overlapped_classes};
}

// c classes drawn uniformly without replacement, fresh for every cycle.
inline std::vector<std::vector<std::size_t>> draw_class_cycles(std::size_t class_count, std::size_t c,
                                                               std::size_t cycles, std::uint64_t seed) {
  if (c == 0 || c > class_count) throw std::invalid_argument("cycle_stream: need 1 <= c <= class count");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> all(class_count);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t t = 0; t < cycles; ++t) {
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), rng);
    std::vector<std::size_t> pick(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(c));
    std::sort(pick.begin(), pick.end());
    out.push_back(std::move(pick));
  }
  return out;
}

struct Cycle {
  std::vector<std::size_t> classes;
  SyntheticDataset data;
};

inline std::vector<Cycle> cycle_stream(const SyntheticDataset& ds, std::size_t c, std::size_t cycles,
                                       std::uint64_t seed) {
  std::vector<Cycle> out;
  for (auto& classes : draw_class_cycles(ds.class_count, c, cycles, seed)) {
    auto idx = indices_of_classes(ds.labels, classes);
    out.push_back({classes, subset(ds, idx)});
  }
  return out;
}

// Each cycle revisits one of the given class groups, chosen uniformly.
inline std::vector<Cycle> revisit_stream(const SyntheticDataset& ds,
                                         std::span<const std::vector<std::size_t>> groups,
                                         std::size_t cycles, std::uint64_t seed) {
  if (groups.empty()) throw std::invalid_argument("revisit_stream: no class groups");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, groups.size() - 1);
  std::vector<Cycle> out;
  for (std::size_t t = 0; t < cycles; ++t) {
    const auto& g = groups[pick(rng)];
    out.push_back({g, subset(ds, indices_of_classes(ds.labels, g))});
  }
  return out;
}

}  // namespace mde
