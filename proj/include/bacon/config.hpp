#pragma once

// Experiment configuration: a JSON document with four blocks.
//
//   dataset  source        "synthetic" | "files"                 ("synthetic")
//            dir           directory with labeled.csv, unlabeled.csv, test.csv
//                          and meta.json (source = "files")
//            num_classes   C                                     (10)
//            num_known     |Y_k|                                 (6)
//            labeled_ratio fraction of each known class labeled  (0.5)
//            profile       "exponential" | "pareto"              ("exponential")
//            rho_l, rho_u  imbalance ratios, labeled / unlabeled (20, 20)
//            n_max         head-class count                      (300)
//            dim           input dimension                       (16)
//            class_separation, noise_scale                       (4, 1)
//            test_per_class                                      (100)
//            seed          data seed                             (1)
//   model    d_hidden (64, 0 = linear encoder), d_feat (16), proj_hidden (64),
//            d_proj (32), classifier_scale (10)
//   train    epochs (200), batch_size (256), lr (0.1), warmup_epochs (10% of
//            epochs), temperature (1), smoothing_p (0.5), k (0.5), alpha (0.8),
//            beta (0.5), reestimate_interval (10), similarity ("dot"),
//            loss_mode ("soft"), eta1, eta2, gamma1, gamma2 (1 each),
//            momentum (0.9), weight_decay (0), confidence_gate (0.5),
//            view_noise (0.1), view_dropout (0.1), kmeans_max_iter (300),
//            kmeans_n_init (10), checkpoint_every (0 = only at the end),
//            seed (set from --seed)
//   eval     seeds ([0]), out_dir ("runs"), kmeans_n_init (10)

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bacon/data.hpp"
#include "bacon/error.hpp"
#include "bacon/nn.hpp"
#include "bacon/train.hpp"

namespace bacon {

struct DatasetConfig {
  std::string source = "synthetic";
  std::string dir;
  SyntheticConfig synthetic;
};

struct EvalConfig {
  std::vector<std::uint64_t> seeds = {0};
  std::string out_dir = "runs";
  int kmeans_n_init = 10;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  int checkpoint_every = 0;
  EvalConfig eval;
};

namespace detail {

using Json = nlohmann::json;

inline void reject_unknown(const Json& obj, const std::string& block, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw InvalidArgument("config: '" + block + "' must be an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw InvalidArgument("config: unknown key '" + block + "." + key + "'");
}

template <typename T>
void read_key(const Json& obj, const std::string& block, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const Json::exception&) {
    throw InvalidArgument("config: bad value for '" + block + "." + key + "': " + obj.at(key).dump());
  }
}

inline int default_warmup(int epochs) { return static_cast<int>(std::lround(0.1 * epochs)); }

}  // namespace detail

/// Parses a config document; missing keys take their defaults.
inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::read_key;
  ExperimentConfig c;
  detail::reject_unknown(j, "config", {"dataset", "model", "train", "eval"});

  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    detail::reject_unknown(d, "dataset",
                           {"source", "dir", "num_classes", "num_known", "labeled_ratio", "profile", "rho_l",
                            "rho_u", "n_max", "dim", "class_separation", "noise_scale", "test_per_class", "seed"});
    auto& s = c.dataset.synthetic;
    read_key(d, "dataset", "source", c.dataset.source);
    read_key(d, "dataset", "dir", c.dataset.dir);
    read_key(d, "dataset", "num_classes", s.num_classes);
    read_key(d, "dataset", "num_known", s.num_known);
    read_key(d, "dataset", "labeled_ratio", s.labeled_ratio);
    std::string profile = to_string(s.profile);
    read_key(d, "dataset", "profile", profile);
    s.profile = parse_profile_kind(profile);
    read_key(d, "dataset", "rho_l", s.rho_l);
    read_key(d, "dataset", "rho_u", s.rho_u);
    read_key(d, "dataset", "n_max", s.n_max);
    read_key(d, "dataset", "dim", s.dim);
    read_key(d, "dataset", "class_separation", s.class_separation);
    read_key(d, "dataset", "noise_scale", s.noise_scale);
    read_key(d, "dataset", "test_per_class", s.test_per_class);
    read_key(d, "dataset", "seed", s.seed);
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, "model", {"d_hidden", "d_feat", "proj_hidden", "d_proj", "classifier_scale"});
    read_key(m, "model", "d_hidden", c.model.d_hidden);
    read_key(m, "model", "d_feat", c.model.d_feat);
    read_key(m, "model", "proj_hidden", c.model.proj_hidden);
    read_key(m, "model", "d_proj", c.model.d_proj);
    read_key(m, "model", "classifier_scale", c.model.classifier_scale);
  }

  auto& t = c.train;
  std::optional<int> warmup;
  if (j.contains("train")) {
    const auto& tr = j.at("train");
    detail::reject_unknown(
        tr, "train",
        {"epochs", "batch_size", "lr", "warmup_epochs", "temperature", "smoothing_p", "k", "alpha", "beta",
         "reestimate_interval", "similarity", "loss_mode", "eta1", "eta2", "gamma1", "gamma2", "momentum",
         "weight_decay", "confidence_gate", "view_noise", "view_dropout", "kmeans_max_iter", "kmeans_n_init",
         "checkpoint_every", "seed"});
    read_key(tr, "train", "epochs", t.schedule.total_epochs);
    read_key(tr, "train", "batch_size", t.schedule.batch_size);
    read_key(tr, "train", "lr", t.schedule.base_lr);
    if (tr.contains("warmup_epochs") && !tr.at("warmup_epochs").is_null()) {
      int w = 0;
      read_key(tr, "train", "warmup_epochs", w);
      warmup = w;
    }
    read_key(tr, "train", "temperature", t.temperature);
    read_key(tr, "train", "smoothing_p", t.smoothing_p);
    read_key(tr, "train", "k", t.sampling.k);
    read_key(tr, "train", "alpha", t.sampling.alpha);
    read_key(tr, "train", "beta", t.sampling.beta);
    read_key(tr, "train", "reestimate_interval", t.reestimate_interval);
    std::string sim = to_string(t.metric);
    read_key(tr, "train", "similarity", sim);
    t.metric = parse_similarity(sim);
    std::string mode = to_string(t.loss_mode);
    read_key(tr, "train", "loss_mode", mode);
    t.loss_mode = parse_loss_mode(mode);
    read_key(tr, "train", "eta1", t.weights.eta1);
    read_key(tr, "train", "eta2", t.weights.eta2);
    read_key(tr, "train", "gamma1", t.weights.gamma1);
    read_key(tr, "train", "gamma2", t.weights.gamma2);
    read_key(tr, "train", "momentum", t.momentum);
    read_key(tr, "train", "weight_decay", t.weight_decay);
    read_key(tr, "train", "confidence_gate", t.confidence_gate);
    read_key(tr, "train", "view_noise", t.view_noise);
    read_key(tr, "train", "view_dropout", t.view_dropout);
    read_key(tr, "train", "kmeans_max_iter", t.kmeans.max_iter);
    read_key(tr, "train", "kmeans_n_init", t.kmeans.n_init);
    read_key(tr, "train", "checkpoint_every", c.checkpoint_every);
    read_key(tr, "train", "seed", t.seed);
  }
  t.schedule.warmup_epochs = warmup ? *warmup : detail::default_warmup(t.schedule.total_epochs);

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, "eval", {"seeds", "out_dir", "kmeans_n_init"});
    read_key(e, "eval", "seeds", c.eval.seeds);
    read_key(e, "eval", "out_dir", c.eval.out_dir);
    read_key(e, "eval", "kmeans_n_init", c.eval.kmeans_n_init);
  }
  return c;
}

/// The effective config with every default materialized.
inline nlohmann::json config_json(const ExperimentConfig& c) {
  const auto& s = c.dataset.synthetic;
  const auto& t = c.train;
  return {
      {"dataset",
       {{"source", c.dataset.source},
        {"dir", c.dataset.dir},
        {"num_classes", s.num_classes},
        {"num_known", s.num_known},
        {"labeled_ratio", s.labeled_ratio},
        {"profile", to_string(s.profile)},
        {"rho_l", s.rho_l},
        {"rho_u", s.rho_u},
        {"n_max", s.n_max},
        {"dim", s.dim},
        {"class_separation", s.class_separation},
        {"noise_scale", s.noise_scale},
        {"test_per_class", s.test_per_class},
        {"seed", s.seed}}},
      {"model",
       {{"d_hidden", c.model.d_hidden},
        {"d_feat", c.model.d_feat},
        {"proj_hidden", c.model.proj_hidden},
        {"d_proj", c.model.d_proj},
        {"classifier_scale", c.model.classifier_scale}}},
      {"train",
       {{"epochs", t.schedule.total_epochs},
        {"batch_size", t.schedule.batch_size},
        {"lr", t.schedule.base_lr},
        {"warmup_epochs", t.schedule.warmup_epochs},
        {"temperature", t.temperature},
        {"smoothing_p", t.smoothing_p},
        {"k", t.sampling.k},
        {"alpha", t.sampling.alpha},
        {"beta", t.sampling.beta},
        {"reestimate_interval", t.reestimate_interval},
        {"similarity", to_string(t.metric)},
        {"loss_mode", to_string(t.loss_mode)},
        {"eta1", t.weights.eta1},
        {"eta2", t.weights.eta2},
        {"gamma1", t.weights.gamma1},
        {"gamma2", t.weights.gamma2},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"confidence_gate", t.confidence_gate},
        {"view_noise", t.view_noise},
        {"view_dropout", t.view_dropout},
        {"kmeans_max_iter", t.kmeans.max_iter},
        {"kmeans_n_init", t.kmeans.n_init},
        {"checkpoint_every", c.checkpoint_every},
        {"seed", t.seed}}},
      {"eval", {{"seeds", c.eval.seeds}, {"out_dir", c.eval.out_dir}, {"kmeans_n_init", c.eval.kmeans_n_init}}}};
}

/// Checks cross-field constraints.
inline void validate(const ExperimentConfig& c) {
  detail::require(c.dataset.source == "synthetic" || c.dataset.source == "files",
                  "config: dataset.source must be 'synthetic' or 'files'");
  detail::require(c.dataset.source != "files" || !c.dataset.dir.empty(),
                  "config: dataset.dir is required when dataset.source is 'files'");
  const auto& s = c.dataset.synthetic;
  detail::require(s.num_classes >= 2, "config: dataset.num_classes must be >= 2");
  detail::require(s.num_known >= 0 && s.num_known <= s.num_classes,
                  "config: dataset.num_known must lie in [0, num_classes]");
  detail::require(s.labeled_ratio > 0.0 && s.labeled_ratio <= 1.0,
                  "config: dataset.labeled_ratio must lie in (0, 1]");
  detail::require(s.test_per_class >= 1, "config: dataset.test_per_class must be >= 1");
  detail::require(c.model.d_feat >= 1 && c.model.d_proj >= 1 && c.model.d_hidden >= 0 && c.model.proj_hidden >= 0,
                  "config: model dimensions must be positive");
  detail::require(c.model.classifier_scale > 0.0, "config: model.classifier_scale must be > 0");
  detail::require(c.checkpoint_every >= 0, "config: train.checkpoint_every must be >= 0");
  detail::require(c.train.kmeans.n_init >= 1 && c.eval.kmeans_n_init >= 1, "config: kmeans_n_init must be >= 1");
  detail::require(!c.eval.seeds.empty(), "config: eval.seeds must not be empty");
  validate(c.train);
}

/// Applies a dotted override such as `train.lr=0.05`. The value is parsed as
/// JSON when possible and taken as a string otherwise.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidArgument("override must look like block.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw InvalidArgument("override has an empty key: " + assignment);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace bacon
