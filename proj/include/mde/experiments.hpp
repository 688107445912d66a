#pragma once

// Desk-scale shift experiments: covariate severity sweeps, the overlapping
// (concept shift) test, and expert recovery over revisited class cycles.

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "mde/drift.hpp"
#include "mde/metrics.hpp"
#include "mde/parallel.hpp"
#include "mde/score.hpp"
#include "mde/shift.hpp"
#include "mde/toy_net.hpp"

namespace mde {

// Halves every class: first half (after a seeded shuffle) for training,
// second half held out.
struct HeldOutSplit {
  SyntheticDataset train, test;
};

inline HeldOutSplit split_halves(const SyntheticDataset& ds, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> train, test;
  for (std::size_t k = 0; k < ds.class_count; ++k) {
    const std::size_t cls[] = {k};
    auto idx = indices_of_classes(ds.labels, cls);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t half = idx.size() / 2;
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
    test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {subset(ds, train), subset(ds, test)};
}

inline ToyModel train_default_model(const SyntheticDataset& train_set, const TrainConfig& cfg) {
  ToyModel model(kDefaultInput, default_architecture(train_set.class_count), train_set.class_count, cfg.seed);
  return train(std::move(model), train_set.images, train_set.labels, cfg);
}

// Spearman rho, NaN when either side is constant.
inline double spearman_or_nan(std::span<const double> a, std::span<const double> b) {
  try {
    return spearman_rank_corr(a, b);
  } catch (const std::invalid_argument&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

// ---------------------------------------------------------------- covariate

inline ShiftSpec shift_for(const std::string& kind, double level) {
  if (kind == "noise") return GaussianNoise{level};
  if (kind == "rotation") return Rotation{level};
  if (kind == "brightness") return Brightness{level};
  if (kind == "cutout") {
    if (!(level >= 0.0) || level != std::floor(level))
      throw std::invalid_argument("cutout levels are hole counts and must be non-negative integers");
    return CutOut{static_cast<std::size_t>(level), 4};
  }
  throw std::invalid_argument("unknown shift kind '" + kind + "' (noise, rotation, brightness, cutout)");
}

struct CovariateConfig {
  std::string kind = "noise";
  std::vector<double> levels{0.0, 0.1, 0.2, 0.4, 0.8};
  std::size_t classes = 4;
  std::size_t per_class = 256;  // half trains, half is shifted and scored
  TrainConfig train;
  DriftConfig drift;
  std::uint64_t seed = 0;
};

struct CovariateRow {
  double level = 0.0;
  double accuracy = 0.0;
  double drift = 0.0;
  std::vector<double> per_layer;
};

struct CovariateResult {
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;
  double self_drift = 0.0;  // on the model's own training data
  double fake_drift = 0.0;
  std::vector<CovariateRow> rows;
  double rho_severity_drift = 0.0;
  double rho_drift_accuracy = 0.0;
};

inline CovariateResult run_covariate(const CovariateConfig& cfg) {
  for (double level : cfg.levels) validate(shift_for(cfg.kind, level));
  const auto ds = generate_dataset(cfg.classes, cfg.per_class, cfg.seed);
  const auto split = split_halves(ds, cfg.seed + 1);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const ToyModel model = train_default_model(split.train, tc);

  CovariateResult r;
  r.seed = cfg.seed;
  r.train_accuracy = evaluate(model, split.train.images, split.train.labels).accuracy;
  r.self_drift = mde_score(model, split.train.images, cfg.drift, cfg.seed + 2).aggregate;
  r.fake_drift = fakedata_score(model, cfg.drift).aggregate;
  r.rows.resize(cfg.levels.size());
  for (std::size_t i = 0; i < cfg.levels.size(); ++i) {
    const Tensor4 shifted = apply_shift(split.test.images, shift_for(cfg.kind, cfg.levels[i]), cfg.seed + 3);
    const DriftReport rep = mde_score(model, shifted, cfg.drift, cfg.seed + 4);
    r.rows[i] = {cfg.levels[i], evaluate(model, shifted, split.test.labels).accuracy, rep.aggregate, rep.per_layer};
  }
  std::vector<double> lv, dr, ac;
  for (const auto& row : r.rows) {
    lv.push_back(row.level);
    dr.push_back(row.drift);
    ac.push_back(row.accuracy);
  }
  r.rho_severity_drift = spearman_or_nan(lv, dr);
  r.rho_drift_accuracy = spearman_or_nan(dr, ac);
  return r;
}

// ---------------------------------------------------------------- concept

// Concept scoring defaults to 64 batches over 2 reshuffled passes of each
// 2048-sample pool; with 8 batches the mini-batch class mix dominates the score.
inline DriftConfig concept_drift_config() {
  DriftConfig cfg;
  cfg.iterations = 64;
  return cfg;
}

struct ConceptConfig {
  std::size_t classes = 8;
  std::size_t classes_per_split = 4;
  std::size_t per_class = 1024;
  std::vector<double> overlaps{0.0, 0.25, 0.5, 0.75, 1.0};
  TrainConfig train;
  DriftConfig drift = concept_drift_config();
  std::size_t stream_passes = 2;
  std::uint64_t seed = 0;
};

struct ConceptRow {
  double overlap = 0.0;
  std::size_t overlapped_classes = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double gap = 0.0;  // train - test accuracy
  double drift = 0.0;
};

struct ConceptResult {
  std::uint64_t seed = 0;
  double baseline_drift = 0.0;  // on the training split itself
  double fake_drift = 0.0;
  std::vector<ConceptRow> rows;
};

// The train side of overlapping_split depends only on the seed, so one model
// serves every overlap level.
inline ConceptResult run_concept(const ConceptConfig& cfg) {
  if (cfg.overlaps.empty()) throw std::invalid_argument("concept: no overlap levels");
  const auto ds = generate_dataset(cfg.classes, cfg.per_class, cfg.seed);
  auto spec_at = [&](double p) { return OverlapSpec{cfg.classes, cfg.classes_per_split, p, cfg.seed + 1}; };
  const auto first = overlapping_split(ds, spec_at(cfg.overlaps.front()));
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  const ToyModel model = train_default_model(first.train, tc);
  const double train_acc = evaluate(model, first.train.images, first.train.labels).accuracy;

  ConceptResult r;
  r.seed = cfg.seed;
  r.baseline_drift = mde_score(model, first.train.images, cfg.drift, cfg.seed + 2, cfg.stream_passes).aggregate;
  r.fake_drift = fakedata_score(model, cfg.drift).aggregate;
  for (double p : cfg.overlaps) {
    const auto split = overlapping_split(ds, spec_at(p));
    if (split.train.labels != first.train.labels || split.train.images != first.train.images)
      throw std::logic_error("concept: training split changed with the overlap level");
    ConceptRow row;
    row.overlap = p;
    row.overlapped_classes = split.overlapped_classes;
    row.train_accuracy = train_acc;
    row.test_accuracy = evaluate(model, split.test.images, split.test.labels).accuracy;
    row.gap = train_acc - row.test_accuracy;
    row.drift = mde_score(model, split.test.images, cfg.drift, cfg.seed + 4, cfg.stream_passes).aggregate;
    r.rows.push_back(row);
  }
  return r;
}

// ---------------------------------------------------------------- recovery

struct ZooEntry {
  std::string id;
  ToyModel model;
};

struct CycleOutcome {
  std::size_t cycle = 0;
  std::vector<std::size_t> classes;
  std::vector<CandidateScore> candidates;
  SelectionOutcome outcome;
  double random_regret = 0.0;  // expected regret of a uniform pick
  double worst_regret = 0.0;
};

// Scores every zoo model on each cycle's data and selects by lowest drift.
// Accuracy, regret and top-k hits are filled in when the cycle has labels.
inline std::vector<CycleOutcome> run_concept_recovery(const std::vector<ZooEntry>& zoo,
                                                      const std::vector<Cycle>& stream, const DriftConfig& cfg,
                                                      std::uint64_t seed) {
  if (zoo.empty()) throw std::invalid_argument("recovery: empty model zoo");
  std::vector<CycleOutcome> out;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const auto& data = stream[t].data;
    const bool labelled = !data.labels.empty();
    CycleOutcome c;
    c.cycle = t;
    c.classes = stream[t].classes;
    c.candidates.resize(zoo.size());
    for (std::size_t m = 0; m < zoo.size(); ++m) {
      c.candidates[m].model_id = zoo[m].id;
      c.candidates[m].drift = mde_score(zoo[m].model, data.images, cfg, seed + t).aggregate;
      if (labelled) c.candidates[m].true_accuracy = evaluate(zoo[m].model, data.images, data.labels).accuracy;
    }
    c.outcome = select_model(c.candidates);
    if (labelled) {
      double best = 0.0, worst = 1.0, mean = 0.0;
      for (const auto& cand : c.candidates) {
        best = std::max(best, *cand.true_accuracy);
        worst = std::min(worst, *cand.true_accuracy);
        mean += *cand.true_accuracy;
      }
      mean /= static_cast<double>(c.candidates.size());
      c.random_regret = best - mean;
      c.worst_regret = best - worst;
    }
    out.push_back(std::move(c));
  }
  return out;
}

struct RecoveryConfig {
  std::size_t classes = 10;
  std::size_t experts = 5;
  std::size_t cycles = 25;
  std::size_t per_class = 512;
  TrainConfig train;
  DriftConfig drift;
  std::uint64_t seed = 0;
};

struct RecoverySummary {
  double top1_rate = 0.0, top3_rate = 0.0, top5_rate = 0.0;
  double mean_regret = 0.0;
  double random_regret = 0.0;
  double mean_spearman = 0.0;  // per-cycle rho(drift, accuracy), NaN cycles skipped
  std::size_t cycles = 0;
};

struct RecoveryResult {
  std::vector<ZooEntry> zoo;
  std::vector<double> expert_train_accuracy;
  std::vector<double> expert_self_drift;
  std::vector<double> expert_fake_drift;
  std::vector<CycleOutcome> cycles;
  RecoverySummary summary;
};

inline RecoverySummary summarize(const std::vector<CycleOutcome>& cycles) {
  RecoverySummary s;
  s.cycles = cycles.size();
  if (cycles.empty()) return s;
  double rho_sum = 0.0;
  std::size_t rho_n = 0;
  for (const auto& c : cycles) {
    auto hit = [&](std::size_t k) {
      auto it = c.outcome.topk_hit.find(k);
      return it != c.outcome.topk_hit.end() && it->second ? 1.0 : 0.0;
    };
    s.top1_rate += hit(1);
    s.top3_rate += hit(3);
    s.top5_rate += hit(5);
    s.mean_regret += c.outcome.regret.value_or(0.0);
    s.random_regret += c.random_regret;
    std::vector<double> d, a;
    for (const auto& cand : c.candidates) {
      d.push_back(cand.drift);
      a.push_back(cand.true_accuracy.value_or(0.0));
    }
    if (d.size() >= 2) {
      const double rho = spearman_or_nan(d, a);
      if (!std::isnan(rho)) {
        rho_sum += rho;
        ++rho_n;
      }
    }
  }
  const auto n = static_cast<double>(cycles.size());
  s.top1_rate /= n;
  s.top3_rate /= n;
  s.top5_rate /= n;
  s.mean_regret /= n;
  s.random_regret /= n;
  s.mean_spearman = rho_n ? rho_sum / static_cast<double>(rho_n) : std::numeric_limits<double>::quiet_NaN();
  return s;
}

// Experts e = 0..E-1 each learn a disjoint block of classes/E classes from
// the training halves; cycles revisit those blocks on the held-out halves.
inline RecoveryResult run_recovery(const RecoveryConfig& cfg) {
  if (cfg.experts < 1 || cfg.classes % cfg.experts != 0)
    throw std::invalid_argument("recovery: class count must split evenly across experts");
  const std::size_t per_expert = cfg.classes / cfg.experts;
  const auto ds = generate_dataset(cfg.classes, cfg.per_class, cfg.seed);
  const auto split = split_halves(ds, cfg.seed + 1);

  std::vector<std::vector<std::size_t>> groups(cfg.experts);
  for (std::size_t e = 0; e < cfg.experts; ++e)
    for (std::size_t k = 0; k < per_expert; ++k) groups[e].push_back(e * per_expert + k);

  RecoveryResult r;
  r.zoo.resize(cfg.experts);
  r.expert_train_accuracy.resize(cfg.experts);
  r.expert_self_drift.resize(cfg.experts);
  r.expert_fake_drift.resize(cfg.experts);
  parallel_for(cfg.experts, [&](std::size_t e) {
    const auto own = subset(split.train, indices_of_classes(split.train.labels, groups[e]));
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed + 100 + e;
    ToyModel model(kDefaultInput, default_architecture(cfg.classes), cfg.classes, tc.seed);
    model = train(std::move(model), own.images, own.labels, tc);
    r.expert_train_accuracy[e] = evaluate(model, own.images, own.labels).accuracy;
    r.expert_self_drift[e] = mde_score(model, own.images, cfg.drift, cfg.seed + 2).aggregate;
    r.expert_fake_drift[e] = fakedata_score(model, cfg.drift).aggregate;
    r.zoo[e] = {"expert" + std::to_string(e), std::move(model)};
  });

  const auto stream = revisit_stream(split.test, groups, cfg.cycles, cfg.seed + 3);
  r.cycles = run_concept_recovery(r.zoo, stream, cfg.drift, cfg.seed + 4);
  r.summary = summarize(r.cycles);
  return r;
}

}  // namespace mde
