// mde: train toy models, generate data, score drift, select models and run
// the shift experiments. CSV goes to stdout or --out-dir, logs to stderr.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "mde/csv.hpp"
#include "mde/experiments.hpp"
#include "mde/model_io.hpp"
#include "mde/score.hpp"

namespace fs = std::filesystem;
using namespace mde;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kIncompatible = 3 };

// Flag problems found after parsing, e.g. an empty zoo directory.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  std::string log_level = "info";
};

struct DriftFlags {
  std::string metric = "cosine";
  std::optional<double> truncation;
  std::size_t batch = 64;
  std::size_t iters = 8;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--metric", metric, "cosine | wasserstein | kl")
        ->check(CLI::IsMember({"cosine", "wasserstein", "kl"}))
        ->capture_default_str();
    cmd.add_option("--truncation", truncation, "keep this fraction of singular values, in (0,1]")
        ->check(CLI::Range(0.0, 1.0) & CLI::Validator([](std::string& s) -> std::string {
                  return std::stod(s) > 0.0 ? "" : "truncation ratio must be positive";
                }, "", ""));
    cmd.add_option("--batch", batch, "scoring batch size")->check(CLI::Range(2, 1 << 20))->capture_default_str();
    cmd.add_option("--iters", iters, "batches per score")->check(CLI::Range(1, 1 << 20))->capture_default_str();
  }

  DriftConfig config() const {
    DriftConfig cfg;
    cfg.metric = metric == "cosine" ? DriftMetric::Cosine
                 : metric == "wasserstein" ? DriftMetric::Wasserstein
                                           : DriftMetric::GaussianKL;
    cfg.truncation_ratio = truncation;
    cfg.batch_size = batch;
    cfg.iterations = iters;
    return cfg;
  }
};

struct TrainFlags {
  TrainConfig cfg;

  void add_to(CLI::App& cmd) {
    cmd.add_option("--epochs", cfg.epochs, "training epochs")->check(CLI::Range(1, 100000))->capture_default_str();
    cmd.add_option("--train-batch", cfg.batch_size, "training batch size")
        ->check(CLI::Range(2, 1 << 20))
        ->capture_default_str();
    cmd.add_option("--lr", cfg.learning_rate, "SGD learning rate")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    cmd.add_option("--alpha", cfg.momentum_alpha, "BN running-estimate retain factor")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
  }
};

fs::path out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / name;
}

std::ofstream open_csv(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

std::string fmt(double v) { return format_double(v); }
std::string fmt(std::size_t v) { return std::to_string(v); }

std::string join(const std::vector<std::size_t>& v, char sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : "") + std::to_string(v[i]);
  return s;
}

// Fit of y on x; NaN fields when there are too few points or x is constant.
LinearFit fit_or_nan(const std::vector<double>& x, const std::vector<double>& y) {
  try {
    return linear_fit(x, y);
  } catch (const std::invalid_argument&) {
    LinearFit f;
    f.slope = f.intercept = f.r_squared = std::numeric_limits<double>::quiet_NaN();
    return f;
  }
}

void check_shift(const std::string& kind, double level) {
  try {
    validate(shift_for(kind, level));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

// ---------------------------------------------------------------- data

// A scoring target: a labelled dataset or a captured trace.
struct Target {
  std::optional<SyntheticDataset> dataset;
  std::vector<std::vector<Tensor4>> batches;   // trace, cosine metric
  std::vector<std::vector<BatchStats>> stats;  // trace, closed-form metrics
};

Target load_target(const std::string& path, DriftMetric metric) {
  MdetRecord rec = read_mdet(path);
  Target t;
  if (rec.kind == "dataset") {
    t.dataset = dataset_from_record(rec);
  } else if (rec.kind == "trace") {
    if (metric == DriftMetric::Cosine)
      t.batches = trace_batches(rec);
    else
      t.stats = stats_only_view(rec);
  } else {
    throw MdetError(MdetErrorKind::Invalid, 0, path + " holds a " + rec.kind + " record, not a dataset or trace");
  }
  return t;
}

DriftReport score_record(const MdetRecord& model, const Target& target, const DriftConfig& cfg,
                         std::uint64_t seed) {
  if (target.dataset) {
    if (!has_architecture(model))
      throw ModelIncompatible("model record carries BN states only; score it against a trace, not a dataset");
    return mde_score(model_from_record(model), target.dataset->images, cfg, seed);
  }
  const auto states = bn_states_from_record(model);
  if (states.empty()) throw ModelIncompatible("model has no batch-normalization layers");
  const std::size_t trace_layers = target.batches.empty() ? target.stats.front().size() : target.batches.front().size();
  if (trace_layers != states.size())
    throw ModelIncompatible("trace has " + std::to_string(trace_layers) + " BN layers, model has " +
                            std::to_string(states.size()));
  return cfg.metric == DriftMetric::Cosine ? mde_score_trace(states, target.batches, cfg)
                                           : mde_score_stats(states, target.stats, cfg);
}

// ---------------------------------------------------------------- commands

int cmd_train_toy(const Globals& g, std::size_t classes, std::size_t per_class, const std::string& data,
                  TrainConfig cfg, const std::string& model_id, const std::string& output) {
  SyntheticDataset ds;
  std::string dataset_id;
  if (!data.empty()) {
    ds = dataset_from_record(read_mdet(data));
    dataset_id = fs::path(data).stem().string();
  } else {
    ds = generate_dataset(classes, per_class, g.seed);
    dataset_id = "synthetic";
  }
  if (ds.labels.empty()) throw std::runtime_error("training data has no labels");
  spdlog::info("training on {} samples of {} classes for {} epochs", ds.size(), ds.class_count, cfg.epochs);
  cfg.seed = g.seed;
  ToyModel model(kDefaultInput, default_architecture(ds.class_count), ds.class_count, g.seed);
  model = train(std::move(model), ds.images, ds.labels, cfg);
  const double acc = evaluate(model, ds.images, ds.labels).accuracy;
  write_mdet(model_to_record(model, model_id, dataset_id), output);
  spdlog::info("wrote {}", output);
  CsvWriter out(std::cout);
  out.row({"model", "train_accuracy"});
  out.row({output, fmt(acc)});
  return kOk;
}

int cmd_gen_data(const Globals& g, std::size_t classes, std::size_t per_class, const std::string& half,
                 const std::string& shift, double level, const std::string& output) {
  SyntheticDataset ds = generate_dataset(classes, per_class, g.seed);
  if (half != "all") {
    auto split = split_halves(ds, g.seed + 1);
    ds = half == "train" ? std::move(split.train) : std::move(split.test);
  }
  if (!shift.empty()) ds.images = apply_shift(ds.images, shift_for(shift, level), g.seed + 3);
  write_mdet(dataset_to_record(ds, fs::path(output).stem().string()), output);
  spdlog::info("wrote {} samples to {}", ds.size(), output);
  return kOk;
}

int cmd_score(const Globals& g, const std::string& model_path, const std::string& data_path, const DriftConfig& cfg,
              bool fake_normalize) {
  const MdetRecord model = read_mdet(model_path);
  if (model.kind != "model") throw MdetError(MdetErrorKind::Invalid, 0, model_path + " is not a model record");
  const Target target = load_target(data_path, cfg.metric);
  const DriftReport r = score_record(model, target, cfg, g.seed);
  if (r.channels_skipped) spdlog::warn("{} zero-norm channel planes skipped", r.channels_skipped);

  CsvWriter out(std::cout);
  out.row({"layer", "drift"});
  for (std::size_t l = 0; l < r.per_layer.size(); ++l) out.row({fmt(l), fmt(r.per_layer[l])});
  out.row({"aggregate", fmt(r.aggregate)});
  if (fake_normalize) {
    if (!has_architecture(model))
      throw ModelIncompatible("FakeData normalization needs a model with an architecture");
    const DriftReport fake = fakedata_score(model_from_record(model), cfg);
    out.row({"fakedata", fmt(fake.aggregate)});
    out.row({"normalized", fmt(normalize_by_fakedata(r, fake))});
  }
  return kOk;
}

int cmd_select(const Globals& g, const std::string& zoo_dir, const std::string& data_path, const DriftConfig& cfg) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(zoo_dir))
    if (e.is_regular_file() && e.path().extension() == ".mdet") files.push_back(e.path());
  if (files.empty()) throw UsageError("no .mdet model files in " + zoo_dir);
  std::sort(files.begin(), files.end());

  const Target target = load_target(data_path, cfg.metric);
  const bool labelled = target.dataset && !target.dataset->labels.empty();
  std::vector<CandidateScore> cands;
  for (const auto& f : files) {
    const MdetRecord rec = read_mdet(f.string());
    if (rec.kind != "model") {
      spdlog::warn("skipping {}: {} record", f.string(), rec.kind);
      continue;
    }
    CandidateScore c;
    c.model_id = f.stem().string();
    c.drift = score_record(rec, target, cfg, g.seed).aggregate;
    if (labelled) {
      const SyntheticDataset& ds = *target.dataset;
      c.true_accuracy = evaluate(model_from_record(rec), ds.images, ds.labels).accuracy;
    }
    spdlog::debug("{}: drift {}", c.model_id, c.drift);
    cands.push_back(std::move(c));
  }
  if (cands.empty()) throw UsageError("no model records in " + zoo_dir);
  const SelectionOutcome sel = select_model(cands);

  auto f = open_csv(out_path(g, "ranking.csv"));
  CsvWriter out(f);
  out.row({"rank", "model_id", "drift", "accuracy", "chosen"});
  for (std::size_t i = 0; i < sel.ranking.size(); ++i) {
    const auto& c = *std::find_if(cands.begin(), cands.end(), [&](const auto& x) { return x.model_id == sel.ranking[i]; });
    out.row({fmt(i + 1), c.model_id, fmt(c.drift), c.true_accuracy ? fmt(*c.true_accuracy) : "",
             c.model_id == sel.chosen ? "1" : "0"});
  }
  if (sel.regret) spdlog::info("regret {}", *sel.regret);
  std::cout << sel.chosen << "\n";
  return kOk;
}

int sim_covariate(const Globals& g, CovariateConfig cfg) {
  cfg.seed = g.seed;
  const CovariateResult r = run_covariate(cfg);
  auto rows_file = open_csv(out_path(g, "covariate_levels.csv"));
  CsvWriter rows(rows_file);
  std::vector<std::string> head{"seed", "kind", "level", "accuracy", "drift"};
  const std::size_t layers = r.rows.empty() ? 0 : r.rows.front().per_layer.size();
  for (std::size_t l = 0; l < layers; ++l) head.push_back("drift_layer" + std::to_string(l));
  rows.row(head);
  std::vector<double> drift, acc;
  for (const auto& row : r.rows) {
    std::vector<std::string> f{fmt(r.seed), cfg.kind, fmt(row.level), fmt(row.accuracy), fmt(row.drift)};
    for (double d : row.per_layer) f.push_back(fmt(d));
    rows.row(f);
    drift.push_back(row.drift);
    acc.push_back(row.accuracy);
  }
  const LinearFit fit = fit_or_nan(drift, acc);
  const std::vector<std::string> head_s{"seed", "kind", "train_accuracy", "self_drift", "fake_drift",
                                        "rho_severity_drift", "rho_drift_accuracy", "fit_slope", "fit_intercept",
                                        "fit_r_squared"};
  const std::vector<std::string> row_s{fmt(r.seed), cfg.kind, fmt(r.train_accuracy), fmt(r.self_drift),
                                       fmt(r.fake_drift), fmt(r.rho_severity_drift), fmt(r.rho_drift_accuracy),
                                       fmt(fit.slope), fmt(fit.intercept), fmt(fit.r_squared)};
  auto sum_file = open_csv(out_path(g, "covariate_summary.csv"));
  for (std::ostream* os : {static_cast<std::ostream*>(&sum_file), static_cast<std::ostream*>(&std::cout)}) {
    CsvWriter w(*os);
    w.row(head_s);
    w.row(row_s);
  }
  return kOk;
}

int sim_concept(const Globals& g, ConceptConfig cfg) {
  cfg.seed = g.seed;
  const ConceptResult r = run_concept(cfg);
  auto rows_file = open_csv(out_path(g, "concept_overlaps.csv"));
  CsvWriter rows(rows_file);
  rows.row({"seed", "overlap", "overlapped_classes", "train_accuracy", "test_accuracy", "gap", "drift",
            "drift_over_baseline"});
  std::vector<double> drift, gap;
  for (const auto& row : r.rows) {
    rows.row({fmt(r.seed), fmt(row.overlap), fmt(row.overlapped_classes), fmt(row.train_accuracy),
              fmt(row.test_accuracy), fmt(row.gap), fmt(row.drift), fmt(row.drift / r.baseline_drift)});
    drift.push_back(row.drift);
    gap.push_back(row.gap);
  }
  const LinearFit fit = fit_or_nan(drift, gap);
  const std::vector<std::string> head_s{"seed", "baseline_drift", "fake_drift", "rho_drift_gap",
                                        "fit_slope", "fit_intercept", "fit_r_squared"};
  const std::vector<std::string> row_s{fmt(r.seed), fmt(r.baseline_drift), fmt(r.fake_drift),
                                       fmt(spearman_or_nan(drift, gap)), fmt(fit.slope), fmt(fit.intercept),
                                       fmt(fit.r_squared)};
  auto sum_file = open_csv(out_path(g, "concept_summary.csv"));
  for (std::ostream* os : {static_cast<std::ostream*>(&sum_file), static_cast<std::ostream*>(&std::cout)}) {
    CsvWriter w(*os);
    w.row(head_s);
    w.row(row_s);
  }
  return kOk;
}

int sim_recovery(const Globals& g, RecoveryConfig cfg) {
  cfg.seed = g.seed;
  const RecoveryResult r = run_recovery(cfg);
  auto experts_file = open_csv(out_path(g, "recovery_experts.csv"));
  CsvWriter experts(experts_file);
  experts.row({"seed", "model_id", "train_accuracy", "self_drift", "fake_drift"});
  for (std::size_t e = 0; e < r.zoo.size(); ++e)
    experts.row({fmt(cfg.seed), r.zoo[e].id, fmt(r.expert_train_accuracy[e]), fmt(r.expert_self_drift[e]),
                 fmt(r.expert_fake_drift[e])});

  auto cycles_file = open_csv(out_path(g, "recovery_cycles.csv"));
  CsvWriter cycles(cycles_file);
  cycles.row({"seed", "cycle", "classes", "model_id", "drift", "accuracy", "chosen"});
  for (const auto& c : r.cycles)
    for (const auto& cand : c.candidates)
      cycles.row({fmt(cfg.seed), fmt(c.cycle), join(c.classes, ' '), cand.model_id, fmt(cand.drift),
                  cand.true_accuracy ? fmt(*cand.true_accuracy) : "", cand.model_id == c.outcome.chosen ? "1" : "0"});

  const auto& s = r.summary;
  const std::vector<std::string> head_s{"seed", "cycles", "top1_rate", "top3_rate", "top5_rate",
                                        "mean_regret", "random_regret", "mean_spearman"};
  const std::vector<std::string> row_s{fmt(cfg.seed), fmt(s.cycles), fmt(s.top1_rate), fmt(s.top3_rate),
                                       fmt(s.top5_rate), fmt(s.mean_regret), fmt(s.random_regret),
                                       fmt(s.mean_spearman)};
  auto sum_file = open_csv(out_path(g, "recovery_summary.csv"));
  for (std::ostream* os : {static_cast<std::ostream*>(&sum_file), static_cast<std::ostream*>(&std::cout)}) {
    CsvWriter w(*os);
    w.row(head_s);
    w.row(row_s);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Model drift estimation from batch-normalization statistics"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "seed for data, training and batch order")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "directory for report CSVs")->capture_default_str();
  app.add_option("--log-level", g.log_level, "trace | debug | info | warn | error | off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();

  // train-toy
  auto* train_cmd = app.add_subcommand("train-toy", "train the default toy network; prints model,train_accuracy");
  std::size_t t_classes = 4, t_per_class = 128;
  std::string t_data, t_output, t_model_id = "toy";
  TrainFlags t_train;
  train_cmd->add_option("--classes", t_classes, "synthetic classes")->check(CLI::Range(2, 1000))->capture_default_str();
  train_cmd->add_option("--per-class", t_per_class, "synthetic samples per class")
      ->check(CLI::Range(1, 1 << 20))
      ->capture_default_str();
  train_cmd->add_option("--data", t_data, "train on this dataset file instead")->check(CLI::ExistingFile);
  train_cmd->add_option("--model-id", t_model_id, "model_id written to the file")->capture_default_str();
  train_cmd->add_option("-o,--output", t_output, "model file to write")->required();
  t_train.add_to(*train_cmd);

  // gen-data
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic dataset file (same data train-toy uses)");
  std::size_t d_classes = 4, d_per_class = 128;
  std::string d_half = "all", d_shift, d_output;
  double d_level = 0.0;
  gen_cmd->add_option("--classes", d_classes, "classes")->check(CLI::Range(2, 1000))->capture_default_str();
  gen_cmd->add_option("--per-class", d_per_class, "samples per class")
      ->check(CLI::Range(1, 1 << 20))
      ->capture_default_str();
  gen_cmd->add_option("--half", d_half, "all | train | test half of every class")
      ->check(CLI::IsMember({"all", "train", "test"}))
      ->capture_default_str();
  gen_cmd->add_option("--shift", d_shift, "noise | rotation | brightness | cutout")
      ->check(CLI::IsMember({"noise", "rotation", "brightness", "cutout"}));
  gen_cmd->add_option("--level", d_level, "shift severity: noise sigma, degrees, brightness delta or holes")
      ->capture_default_str();
  gen_cmd->add_option("-o,--output", d_output, "dataset file to write")->required();

  // score
  auto* score_cmd = app.add_subcommand(
      "score", "drift of a model on a dataset or trace; CSV rows layer,drift then aggregate "
               "(and fakedata, normalized with --fake-normalize)");
  std::string s_model, s_data;
  bool s_fake = false;
  DriftFlags s_drift;
  score_cmd->add_option("--model", s_model, "model file")->required()->check(CLI::ExistingFile);
  score_cmd->add_option("--data", s_data, "dataset or trace file")->required()->check(CLI::ExistingFile);
  score_cmd->add_flag("--fake-normalize", s_fake, "also divide by the FakeData drift");
  s_drift.add_to(*score_cmd);

  // select
  auto* select_cmd = app.add_subcommand(
      "select", "pick the lowest-drift model of a zoo; prints its id, writes ranking.csv "
                "(rank,model_id,drift,accuracy,chosen) to --out-dir");
  std::string z_dir, z_data;
  DriftFlags z_drift;
  select_cmd->add_option("--zoo", z_dir, "directory of .mdet model files; ids are file stems")
      ->required()
      ->check(CLI::ExistingDirectory);
  select_cmd->add_option("--data", z_data, "dataset or trace file")->required()->check(CLI::ExistingFile);
  z_drift.add_to(*select_cmd);

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "run a shift experiment; CSVs go to --out-dir, summary to stdout");
  sim_cmd->require_subcommand(1);
  auto* cov_cmd = sim_cmd->add_subcommand(
      "covariate", "severity sweep: covariate_levels.csv (seed,kind,level,accuracy,drift,drift_layer*) and "
                   "covariate_summary.csv (rho and a fit of accuracy on drift)");
  CovariateConfig cov;
  TrainFlags cov_train;
  DriftFlags cov_drift;
  cov_cmd->add_option("--kind", cov.kind, "noise | rotation | brightness | cutout")
      ->check(CLI::IsMember({"noise", "rotation", "brightness", "cutout"}))
      ->capture_default_str();
  cov_cmd->add_option("--levels", cov.levels, "comma-separated severities")->delimiter(',')->capture_default_str();
  cov_cmd->add_option("--classes", cov.classes, "classes")->check(CLI::Range(2, 1000))->capture_default_str();
  cov_cmd->add_option("--per-class", cov.per_class, "samples per class, halved into train and test")
      ->check(CLI::Range(2, 1 << 20))
      ->capture_default_str();
  cov_train.add_to(*cov_cmd);
  cov_drift.add_to(*cov_cmd);

  auto* con_cmd = sim_cmd->add_subcommand(
      "concept", "overlapping test: concept_overlaps.csv (seed,overlap,overlapped_classes,train_accuracy,"
                 "test_accuracy,gap,drift,drift_over_baseline) and concept_summary.csv (fit of gap on drift)");
  ConceptConfig con;
  TrainFlags con_train;
  DriftFlags con_drift;
  con_drift.iters = con.drift.iterations;
  con_cmd->add_option("--overlap", con.overlaps, "comma-separated shared-class fractions")
      ->delimiter(',')
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  con_cmd->add_option("--classes", con.classes, "total classes")->check(CLI::Range(2, 1000))->capture_default_str();
  con_cmd->add_option("--classes-per-split", con.classes_per_split, "classes on each side")
      ->check(CLI::Range(1, 1000))
      ->capture_default_str();
  con_cmd->add_option("--per-class", con.per_class, "samples per class")
      ->check(CLI::Range(2, 1 << 20))
      ->capture_default_str();
  con_cmd->add_option("--passes", con.stream_passes, "reshuffled passes over each scored pool")
      ->check(CLI::Range(1, 1000))
      ->capture_default_str();
  con_train.add_to(*con_cmd);
  con_drift.add_to(*con_cmd);

  auto* rec_cmd = sim_cmd->add_subcommand(
      "recovery", "expert recovery: recovery_experts.csv, recovery_cycles.csv (seed,cycle,classes,model_id,drift,"
                  "accuracy,chosen) and recovery_summary.csv (top-k rates, regrets, mean spearman)");
  RecoveryConfig rec;
  TrainFlags rec_train;
  DriftFlags rec_drift;
  rec_cmd->add_option("--experts", rec.experts, "experts, each on its own block of classes")
      ->check(CLI::Range(1, 1000))
      ->capture_default_str();
  rec_cmd->add_option("--cycles", rec.cycles, "revisit cycles")->check(CLI::Range(1, 100000))->capture_default_str();
  rec_cmd->add_option("--classes", rec.classes, "total classes")->check(CLI::Range(2, 1000))->capture_default_str();
  rec_cmd->add_option("--per-class", rec.per_class, "samples per class")
      ->check(CLI::Range(2, 1 << 20))
      ->capture_default_str();
  rec_train.add_to(*rec_cmd);
  rec_drift.add_to(*rec_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  auto logger = spdlog::stderr_color_mt("mde");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    if (*train_cmd) return cmd_train_toy(g, t_classes, t_per_class, t_data, t_train.cfg, t_model_id, t_output);
    if (*gen_cmd) {
      if (!d_shift.empty()) check_shift(d_shift, d_level);
      return cmd_gen_data(g, d_classes, d_per_class, d_half, d_shift, d_level, d_output);
    }
    if (*score_cmd) return cmd_score(g, s_model, s_data, s_drift.config(), s_fake);
    if (*select_cmd) return cmd_select(g, z_dir, z_data, z_drift.config());
    if (*cov_cmd) {
      if (cov.levels.empty()) throw UsageError("--levels is empty");
      for (double l : cov.levels) check_shift(cov.kind, l);
      cov.train = cov_train.cfg;
      cov.drift = cov_drift.config();
      return sim_covariate(g, cov);
    }
    if (*con_cmd) {
      if (con.classes_per_split > con.classes) throw UsageError("--classes-per-split exceeds --classes");
      con.train = con_train.cfg;
      con.drift = con_drift.config();
      return sim_concept(g, con);
    }
    if (*rec_cmd) {
      if (rec.classes % rec.experts != 0) throw UsageError("--classes must split evenly across --experts");
      rec.train = rec_train.cfg;
      rec.drift = rec_drift.config();
      return sim_recovery(g, rec);
    }
  } catch (const UsageError& e) {
    spdlog::error("{}", e.what());
    return kUsage;
  } catch (const ModelIncompatible& e) {
    spdlog::error("model incompatible: {}", e.what());
    return kIncompatible;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntime;
  }
  return kUsage;
}
