#pragma once

// Subcommand implementations shared by the CLI and the test suites. Every
// command is a function of (config, input files, seed) to output files.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bacon/config.hpp"
#include "bacon/data.hpp"
#include "bacon/error.hpp"
#include "bacon/estimate.hpp"
#include "bacon/eval.hpp"
#include "bacon/io.hpp"
#include "bacon/train.hpp"

namespace bacon {

namespace fs = std::filesystem;

struct ExperimentData {
  DatasetSplit train;
  Pool test;
};

namespace detail {

inline Pool load_pool_file(const fs::path& path, int num_classes) {
  if (!fs::exists(path)) throw IoError("missing data file: " + path.string());
  return load_embeddings(path.string(), num_classes);
}

}  // namespace detail

/// Builds or reads the dataset described by the config.
inline ExperimentData load_data(const ExperimentConfig& cfg) {
  const auto& s = cfg.dataset.synthetic;
  if (cfg.dataset.source == "synthetic") {
    auto d = make_synthetic_dataset(s);
    return {std::move(d.train), std::move(d.test)};
  }
  const fs::path dir = cfg.dataset.dir;
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw IoError("missing data file: " + meta_path.string());
  const Json meta = read_json(meta_path);
  int c = 0, k = 0;
  try {
    c = meta.at("num_classes").get<int>();
    k = meta.at("num_known").get<int>();
  } catch (const Json::exception& e) {
    throw IoError("malformed " + meta_path.string() + ": " + e.what());
  }
  if (c != s.num_classes || k != s.num_known)
    throw InvalidArgument("config: dataset.num_classes/num_known (" + std::to_string(s.num_classes) + "/" +
                          std::to_string(s.num_known) + ") do not match " + meta_path.string() + " (" +
                          std::to_string(c) + "/" + std::to_string(k) + ")");

  ExperimentData out;
  out.train = split_from_pool(detail::load_pool_file(dir / "labeled.csv", k), c, k);
  if (!out.train.unlabeled.empty())
    throw InvalidArgument("labeled.csv contains rows without a label");

  // Unlabeled labels, when present on every row, are kept as evaluation-only
  // ground truth and stripped before training.
  Pool unlabeled = detail::load_pool_file(dir / "unlabeled.csv", c);
  bool complete = !unlabeled.empty();
  for (const auto& smp : unlabeled) complete = complete && smp.label.has_value();
  for (auto& smp : unlabeled) {
    if (complete) out.train.unlabeled_truth.push_back(*smp.label);
    smp.label.reset();
  }
  out.train.unlabeled = std::move(unlabeled);
  if (complete) {
    out.train.true_counts.assign(c, 0);
    for (const auto& smp : out.train.labeled) ++out.train.true_counts[*smp.label];
    for (int y : out.train.unlabeled_truth) ++out.train.true_counts[y];
  }

  out.test = detail::load_pool_file(dir / "test.csv", c);
  for (const auto& smp : out.test)
    if (!smp.label) throw InvalidArgument("test.csv: sample " + std::to_string(smp.id) + " has no label");
  return out;
}

inline ModelConfig model_config_for(const ExperimentConfig& cfg, const DatasetSplit& split) {
  ModelConfig m = cfg.model;
  const Pool& any = split.labeled.empty() ? split.unlabeled : split.labeled;
  detail::require(!any.empty(), "train: empty training split");
  m.d_in = static_cast<int>(any.front().features.size());
  m.num_classes = split.num_classes;
  return m;
}

/// Hash of everything that determines the training trajectory.
inline std::string training_hash(const ExperimentConfig& cfg) {
  Json j = config_json(cfg);
  j["train"].erase("checkpoint_every");
  j.erase("eval");
  return hash_hex(fnv1a(j.dump()));
}

// ---------------------------------------------------------------------------
// gen-data

/// Writes labeled.csv, unlabeled.csv (with evaluation-only ground truth),
/// test.csv and meta.json, and prints a per-class count table.
inline ExperimentData cmd_gen_data(const ExperimentConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  detail::require(cfg.dataset.source == "synthetic", "gen-data: dataset.source must be 'synthetic'");
  auto data = load_data(cfg);
  const auto& split = data.train;

  Pool unlabeled = split.unlabeled;
  for (std::size_t i = 0; i < unlabeled.size(); ++i) unlabeled[i].label = split.unlabeled_truth[i];
  auto csv = [](const Pool& p) {
    std::ostringstream os;
    save_embeddings(os, p);
    return os.str();
  };
  write_file_atomic(out_dir / "labeled.csv", csv(split.labeled));
  write_file_atomic(out_dir / "unlabeled.csv", csv(unlabeled));
  write_file_atomic(out_dir / "test.csv", csv(data.test));

  std::vector<int> labeled_counts(split.num_classes, 0), unlabeled_counts(split.num_classes, 0);
  for (const auto& s : split.labeled) ++labeled_counts[*s.label];
  for (int y : split.unlabeled_truth) ++unlabeled_counts[y];
  const Json meta = {{"num_classes", split.num_classes}, {"num_known", split.num_known},
                     {"class_map", split.class_map},     {"labeled_counts", labeled_counts},
                     {"unlabeled_counts", unlabeled_counts}, {"dataset", config_json(cfg).at("dataset")}};
  write_file_atomic(out_dir / "meta.json", meta.dump(2) + "\n");

  log << "class  kind   labeled  unlabeled  total\n";
  for (int c = 0; c < split.num_classes; ++c)
    log << std::setw(5) << c << "  " << (c < split.num_known ? "known" : "novel") << "  " << std::setw(7)
        << labeled_counts[c] << "  " << std::setw(9) << unlabeled_counts[c] << "  " << std::setw(5)
        << labeled_counts[c] + unlabeled_counts[c] << '\n';
  return data;
}

// ---------------------------------------------------------------------------
// train

/// Trains in memory; no files are written.
inline TrainState train_model(const ExperimentConfig& cfg, const ExperimentData& data,
                              const std::function<void(const EpochTelemetry&)>& on_epoch = {}) {
  Trainer t(data.train, model_config_for(cfg, data.train), cfg.train);
  t.run(on_epoch);
  return t.state();
}

namespace detail {

// Keeps telemetry lines for epochs before `epoch`.
inline std::string trimmed_telemetry(const fs::path& path, int epoch) {
  if (!fs::exists(path)) return {};
  std::istringstream is(read_file(path));
  std::string line, out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const Json rec = Json::parse(line, nullptr, false);
    if (rec.is_discarded() || !rec.contains("epoch")) throw IoError("malformed telemetry line in " + path.string());
    if (rec.at("epoch").get<int>() < epoch) out += line + "\n";
  }
  return out;
}

}  // namespace detail

/// Runs training and writes checkpoint.json, telemetry.jsonl and config.json
/// under `out_dir`, plus checkpoint_epoch<N>.json every `checkpoint_every`
/// epochs. With `resume`, continues from that checkpoint.
inline TrainState cmd_train(const ExperimentConfig& cfg, const fs::path& out_dir,
                            const std::optional<fs::path>& resume, std::ostream& log) {
  validate(cfg);
  const ExperimentData data = load_data(cfg);
  const ModelConfig mc = model_config_for(cfg, data.train);
  Trainer trainer(data.train, mc, cfg.train);
  const Json effective = config_json(cfg);
  const std::string hash = training_hash(cfg);
  const fs::path telemetry_path = out_dir / "telemetry.jsonl";

  if (resume) {
    Checkpoint ck = load_checkpoint(*resume, mc);
    if (ck.config.value("training_hash", std::string()) != hash)
      throw InvalidArgument("checkpoint " + resume->string() + " was written with a different configuration");
    trainer.restore(std::move(ck.state));
    write_file_atomic(telemetry_path, detail::trimmed_telemetry(telemetry_path, trainer.state().epoch));
    log << "resuming at epoch " << trainer.state().epoch << '\n';
  } else {
    write_file_atomic(telemetry_path, "");
  }
  write_file_atomic(out_dir / "config.json", effective.dump(2) + "\n");

  Json stored = effective;
  stored.erase("eval");
  stored["training_hash"] = hash;
  auto checkpoint = [&] { save_checkpoint(out_dir / "checkpoint.json", mc, trainer.state(), stored); };

  std::ofstream telemetry(telemetry_path, std::ios::app);
  if (!telemetry) throw IoError("cannot write " + telemetry_path.string());
  while (!trainer.done()) {
    const EpochTelemetry& t = trainer.run_epoch();
    telemetry << telemetry_json(t).dump() << '\n' << std::flush;
    log << "epoch " << t.epoch << " lr " << t.lr << " L_cls " << t.l_cls << " L_con " << t.l_con << '\n';
    if (cfg.checkpoint_every > 0 && trainer.state().epoch % cfg.checkpoint_every == 0 && !trainer.done()) {
      checkpoint();
      fs::copy_file(out_dir / "checkpoint.json",
                    out_dir / ("checkpoint_epoch" + std::to_string(trainer.state().epoch) + ".json"),
                    fs::copy_options::overwrite_existing);
    }
  }
  checkpoint();
  return trainer.state();
}

// ---------------------------------------------------------------------------
// eval

/// Class counts used for Many/Median/Few. Falls back to the model's estimated
/// distribution when the unlabeled ground truth is unavailable.
inline std::vector<int> group_counts(const DatasetSplit& split, const Vector& pi_e,
                                     std::vector<std::string>* warnings) {
  if (!split.true_counts.empty()) return split.true_counts;
  detail::require(pi_e.size() == split.num_classes, "eval: no class counts available for grouping");
  if (warnings) warnings->push_back("eval: unlabeled ground truth unavailable; groups use estimated counts");
  std::vector<int> counts(split.num_classes);
  for (int c = 0; c < split.num_classes; ++c)
    counts[c] = static_cast<int>(std::lround(pi_e[c] * static_cast<double>(split.size())));
  return counts;
}

inline EvalReport evaluate_model(const Model& model, const ExperimentData& data, const Vector& pi_e,
                                 std::uint64_t seed, int kmeans_n_init = 10) {
  std::vector<std::string> warnings;
  const auto counts = group_counts(data.train, pi_e, &warnings);
  std::vector<int> labels;
  labels.reserve(data.test.size());
  for (const auto& s : data.test) labels.push_back(*s.label);
  KMeansOptions opt;
  opt.n_init = kmeans_n_init;
  EvalReport r = evaluate(backbone_features(model, data.test), labels, data.train.num_classes,
                          data.train.num_known, counts, seed, opt);
  r.warnings.insert(r.warnings.begin(), warnings.begin(), warnings.end());
  return r;
}

struct Aggregate {
  std::vector<std::optional<double>> mean;
  std::vector<std::optional<double>> std_dev;  // population
};

/// Column-wise mean and population standard deviation over reports.
inline Aggregate aggregate_reports(const std::vector<EvalReport>& reports) {
  const std::size_t cols = report_csv_columns().size();
  Aggregate a;
  a.mean.assign(cols, std::nullopt);
  a.std_dev.assign(cols, std::nullopt);
  for (std::size_t j = 0; j < cols; ++j) {
    std::vector<double> vals;
    for (const auto& r : reports)
      if (const auto v = report_row(r)[j]) vals.push_back(*v);
    if (vals.empty()) continue;
    double m = 0.0;
    for (double v : vals) m += v;
    m /= static_cast<double>(vals.size());
    double var = 0.0;
    for (double v : vals) var += (v - m) * (v - m);
    a.mean[j] = m;
    a.std_dev[j] = std::sqrt(var / static_cast<double>(vals.size()));
  }
  return a;
}

inline Json aggregate_json(const Aggregate& a, const std::vector<std::uint64_t>& seeds) {
  Json mean = Json::object(), sd = Json::object();
  const auto& cols = report_csv_columns();
  for (std::size_t j = 0; j < cols.size(); ++j) {
    mean[cols[j]] = optional_json(a.mean[j]);
    sd[cols[j]] = optional_json(a.std_dev[j]);
  }
  return {{"seeds", seeds}, {"mean", mean}, {"std", sd}};
}

inline std::string csv_header(const std::string& key_name) {
  std::string s = key_name;
  for (const auto& c : report_csv_columns()) s += "," + c;
  return s + "\n";
}

inline std::string csv_row(const std::string& key, const std::vector<std::optional<double>>& row) {
  std::string s = key;
  for (const auto& v : row) s += "," + format_cell(v);
  return s + "\n";
}

struct EvalOutcome {
  std::vector<EvalReport> reports;
  Aggregate aggregate;
};

/// Evaluates a checkpoint with each k-means seed; writes report_seed<S>.json
/// and .csv per seed plus aggregate.json and aggregate.csv.
inline EvalOutcome cmd_eval(const ExperimentConfig& cfg, const fs::path& checkpoint_path,
                            const std::vector<std::uint64_t>& seeds, const fs::path& out_dir, std::ostream& log) {
  validate(cfg);
  detail::require(!seeds.empty(), "eval: at least one seed is required");
  const ExperimentData data = load_data(cfg);
  if (!fs::exists(checkpoint_path)) throw IoError("missing checkpoint: " + checkpoint_path.string());
  const Checkpoint ck = load_checkpoint(checkpoint_path, model_config_for(cfg, data.train));
  const Json effective = config_json(cfg);

  EvalOutcome out;
  for (const auto seed : seeds) {
    EvalReport r = evaluate_model(ck.state.model, data, ck.state.pi_e, seed, cfg.eval.kmeans_n_init);
    Json j = report_json(r);
    j["seed"] = seed;
    j["checkpoint_hash"] = ck.config_hash;
    j["config"] = effective;
    const std::string stem = "report_seed" + std::to_string(seed);
    write_file_atomic(out_dir / (stem + ".json"), j.dump(2) + "\n");
    write_file_atomic(out_dir / (stem + ".csv"), report_csv("seed", std::to_string(seed), r));
    log << "seed " << seed << " All " << r.acc_all << " Old " << format_cell(r.acc_old) << " New "
        << format_cell(r.acc_new) << '\n';
    out.reports.push_back(std::move(r));
  }
  out.aggregate = aggregate_reports(out.reports);
  Json agg = aggregate_json(out.aggregate, seeds);
  agg["config"] = effective;
  write_file_atomic(out_dir / "aggregate.json", agg.dump(2) + "\n");
  write_file_atomic(out_dir / "aggregate.csv", csv_header("stat") + csv_row("mean", out.aggregate.mean) +
                                                   csv_row("std", out.aggregate.std_dev));
  return out;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateOutcome {
  EstimationRound round;
  std::optional<double> l1_error;  // against the true training distribution
};

/// One estimation round on the raw training inputs, or on backbone features
/// when a checkpoint is given. Writes estimation.json.
inline EstimateOutcome cmd_estimate(const ExperimentConfig& cfg, std::uint64_t seed,
                                    const std::optional<fs::path>& checkpoint_path, const fs::path& out_dir,
                                    std::ostream& log) {
  validate(cfg);
  const ExperimentData data = load_data(cfg);
  const auto& split = data.train;
  Pool all = split.labeled;
  all.insert(all.end(), split.unlabeled.begin(), split.unlabeled.end());
  Matrix features = stack_features(all);
  if (checkpoint_path) {
    if (!fs::exists(*checkpoint_path)) throw IoError("missing checkpoint: " + checkpoint_path->string());
    const Checkpoint ck = load_checkpoint(*checkpoint_path, model_config_for(cfg, split));
    features = encode_batch(ck.state.model, features);
  }
  std::vector<std::pair<int, int>> labeled;
  for (std::size_t i = 0; i < split.labeled.size(); ++i) labeled.emplace_back(static_cast<int>(i), *split.labeled[i].label);

  EstimateOutcome out;
  out.round = estimate_class_distribution(features, labeled, split.num_known, split.num_classes, seed, cfg.train.kmeans);
  Json j = estimation_json(out.round);
  if (!split.true_counts.empty()) {
    Vector truth(split.num_classes);
    for (int c = 0; c < split.num_classes; ++c) truth[c] = split.true_counts[c] / static_cast<double>(split.size());
    out.l1_error = (out.round.aligned.freq - truth).cwiseAbs().sum();
    j["pi_true"] = to_json(truth);
    j["l1_error"] = *out.l1_error;
  }
  j["seed"] = seed;
  j["features"] = checkpoint_path ? "backbone" : "input";
  j["config"] = config_json(cfg);
  write_file_atomic(out_dir / "estimation.json", j.dump(2) + "\n");
  log << "pi_e";
  for (Eigen::Index c = 0; c < out.round.aligned.freq.size(); ++c) log << ' ' << out.round.aligned.freq[c];
  log << '\n';
  if (out.l1_error) log << "L1 error vs true distribution: " << *out.l1_error << '\n';
  return out;
}

// ---------------------------------------------------------------------------
// ablate

/// Named config variants for one ablation axis.
inline std::vector<std::pair<std::string, ExperimentConfig>> ablation_variants(const ExperimentConfig& base,
                                                                               const std::string& axis) {
  std::vector<std::pair<std::string, ExperimentConfig>> v;
  auto add = [&](std::string name, auto&& edit) {
    ExperimentConfig c = base;
    edit(c.train);
    v.emplace_back(std::move(name), std::move(c));
  };
  auto baseline = [](TrainConfig& t) { t.weights.gamma2 = 0.0; };
  if (axis == "similarity") {
    for (auto s : {Similarity::kL1, Similarity::kL2, Similarity::kCosine, Similarity::kDot})
      add(to_string(s), [s](TrainConfig& t) { t.metric = s; });
  } else if (axis == "r") {
    for (int r : {1, 5, 10, 25, 50}) add("r=" + std::to_string(r), [r](TrainConfig& t) { t.reestimate_interval = r; });
  } else if (axis == "k") {
    for (double k : {0.0, 0.25, 0.5, 1.0, 1.5}) {
      std::ostringstream name;
      name << "k=" << k;
      add(name.str(), [k](TrainConfig& t) { t.sampling.k = k; });
    }
  } else if (axis == "alpha_beta") {
    const SamplingConfig s = base.train.sampling;
    add("baseline", baseline);
    add("vanilla", [](TrainConfig& t) { t.sampling = {0.0, 0.0, 0.0}; });
    add("w/ debiasing", [s](TrainConfig& t) { t.sampling = {0.0, 0.0, s.k}; });
    add("w/ sampling", [s](TrainConfig& t) { t.sampling = {s.alpha, s.beta, 0.0}; });
    add("w/ both", [s](TrainConfig& t) { t.sampling = s; });
  } else if (axis == "loss_mode") {
    add("baseline", baseline);
    add("hard", [](TrainConfig& t) { t.loss_mode = LossMode::kHard; });
    add("soft", [](TrainConfig& t) { t.loss_mode = LossMode::kSoft; });
  } else {
    throw InvalidArgument("ablate: unknown axis '" + axis + "' (similarity, r, k, alpha_beta, loss_mode)");
  }
  return v;
}

struct AblationRow {
  std::string variant;
  std::vector<EvalReport> reports;  // one per seed
  Aggregate aggregate;
};

/// Trains and evaluates one config per seed; the seed drives both.
inline std::vector<EvalReport> run_seeds(const ExperimentConfig& cfg, const ExperimentData& data,
                                         const std::vector<std::uint64_t>& seeds) {
  std::vector<EvalReport> reports;
  for (const auto seed : seeds) {
    ExperimentConfig c = cfg;
    c.train.seed = seed;
    const TrainState s = train_model(c, data);
    reports.push_back(evaluate_model(s.model, data, s.pi_e, seed, c.eval.kmeans_n_init));
  }
  return reports;
}

/// Runs the grid for `axis`; writes ablate_<axis>.csv (seed means) and
/// ablate_<axis>_runs.csv (every run).
inline std::vector<AblationRow> cmd_ablate(const ExperimentConfig& cfg, const std::string& axis,
                                           const std::vector<std::uint64_t>& seeds, const fs::path& out_dir,
                                           std::ostream& log) {
  validate(cfg);
  const auto variants = ablation_variants(cfg, axis);
  const ExperimentData data = load_data(cfg);
  std::vector<AblationRow> rows;
  std::string table = csv_header("variant"), runs = "variant," + csv_header("seed");
  for (const auto& [name, c] : variants) {
    validate(c);
    AblationRow row{name, run_seeds(c, data, seeds), {}};
    row.aggregate = aggregate_reports(row.reports);
    for (std::size_t i = 0; i < seeds.size(); ++i)
      runs += name + "," + csv_row(std::to_string(seeds[i]), report_row(row.reports[i]));
    table += csv_row(name, row.aggregate.mean);
    log << name << " Old " << format_cell(row.aggregate.mean[0]) << " New " << format_cell(row.aggregate.mean[1])
        << " All " << format_cell(row.aggregate.mean[2]) << '\n';
    rows.push_back(std::move(row));
  }
  write_file_atomic(out_dir / ("ablate_" + axis + ".csv"), table);
  write_file_atomic(out_dir / ("ablate_" + axis + "_runs.csv"), runs);
  Json cfg_doc = config_json(cfg);
  write_file_atomic(out_dir / ("ablate_" + axis + "_config.json"), cfg_doc.dump(2) + "\n");
  return rows;
}

}  // namespace bacon
