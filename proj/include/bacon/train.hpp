#pragma once

// Two-branch training loop: a pseudo-labeling branch (encoder + cosine
// classifier) and a contrastive branch (encoder + projector) that exchange
// the estimated class distribution and debiased, sampled pseudo-labels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "bacon/data.hpp"
#include "bacon/error.hpp"
#include "bacon/estimate.hpp"
#include "bacon/losses.hpp"
#include "bacon/nn.hpp"
#include "bacon/random.hpp"
#include "bacon/transfer.hpp"

namespace bacon {

enum class LossMode { kSoft, kHard };

inline const char* to_string(LossMode m) { return m == LossMode::kSoft ? "soft" : "hard"; }

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "soft") return LossMode::kSoft;
  if (s == "hard") return LossMode::kHard;
  throw InvalidArgument("unknown loss mode '" + s + "'");
}

struct TrainConfig {
  TrainSchedule schedule;
  LossWeights weights;
  SamplingConfig sampling;
  double temperature = 1.0;
  double smoothing_p = 0.5;
  int reestimate_interval = 10;
  Similarity metric = Similarity::kDot;
  LossMode loss_mode = LossMode::kSoft;
  double momentum = 0.9;
  double weight_decay = 0.0;
  double confidence_gate = 0.5;
  double view_noise = 0.1;    // additive noise std as a fraction of the feature std
  double view_dropout = 0.1;  // coordinate dropout rate
  KMeansOptions kmeans;
  std::uint64_t seed = 0;
};

inline void validate(const TrainConfig& c) {
  validate(c.schedule);
  validate(c.weights);
  validate(c.sampling);
  detail::require(c.temperature > 0.0, "train: temperature must be > 0");
  detail::require(c.smoothing_p >= 0.0 && c.smoothing_p <= 1.0, "train: smoothing p must lie in [0, 1]");
  detail::require(c.reestimate_interval >= 1, "train: re-estimate interval must be >= 1");
  detail::require(c.momentum >= 0.0 && c.momentum < 1.0, "train: momentum must lie in [0, 1)");
  detail::require(c.weight_decay >= 0.0, "train: weight decay must be >= 0");
  detail::require(c.view_noise >= 0.0, "train: view noise must be >= 0");
  detail::require(c.view_dropout >= 0.0 && c.view_dropout < 1.0, "train: view dropout must lie in [0, 1)");
}

struct EpochTelemetry {
  int epoch = 0;
  double lr = 0.0;
  double l_s = 0.0;
  double l_u = 0.0;
  double l_reg = 0.0;
  double l_cls = 0.0;
  double l_cl_u = 0.0;
  double l_cl_s = 0.0;
  double l_cl_soft = 0.0;
  double l_con = 0.0;
  bool estimated = false;
  bool soft_active = false;
  double sampled_fraction = 0.0;  // unlabeled instances kept by sampling
  Vector pi_e;
};

struct TrainState {
  int epoch = 0;  // next epoch to run
  Model model;
  Model cls_velocity;
  Model con_velocity;
  Vector pi_e;  // empty until the first estimation
  std::vector<EpochTelemetry> telemetry;
};

// ---------------------------------------------------------------------------
// Batching.

struct BatchItem {
  bool labeled = false;
  int index = 0;  // into split.labeled or split.unlabeled
};

using Batch = std::vector<BatchItem>;

/// Seeded per-epoch shuffle of both pools, interleaved so each prefix holds
/// labeled items in proportion to the pool sizes, chunked into batches. The
/// last short batch is kept.
inline std::vector<Batch> make_batches(std::size_t num_labeled, std::size_t num_unlabeled, int batch_size,
                                       std::uint64_t seed, int epoch) {
  detail::require(batch_size >= 2, "make_batches: batch size must be >= 2");
  auto rng = make_rng(seed, {kStreamBatches, static_cast<std::uint64_t>(epoch)});
  std::vector<int> lab(num_labeled), unl(num_unlabeled);
  std::iota(lab.begin(), lab.end(), 0);
  std::iota(unl.begin(), unl.end(), 0);
  std::shuffle(lab.begin(), lab.end(), rng);
  std::shuffle(unl.begin(), unl.end(), rng);

  const std::size_t total = num_labeled + num_unlabeled;
  std::vector<BatchItem> order;
  order.reserve(total);
  std::size_t li = 0, ui = 0;
  for (std::size_t pos = 0; pos < total; ++pos) {
    // Labeled next while behind its proportional share.
    const bool want_labeled = li < num_labeled && (ui >= num_unlabeled || li * total < (pos + 1) * num_labeled);
    if (want_labeled) {
      order.push_back({true, lab[li++]});
    } else {
      order.push_back({false, unl[ui++]});
    }
  }

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < total; start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(total, start + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

/// Noisy view of an input: x + N(0, noise_std^2) with coordinates dropped at
/// `dropout` (inverted-dropout scaling is not applied).
inline Vector make_view(const Vector& x, double noise_std, double dropout, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution drop(dropout);
  Vector v = x;
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    if (noise_std > 0.0) v[j] += noise_std * normal(rng);
    if (dropout > 0.0 && drop(rng)) v[j] = 0.0;
  }
  return v;
}

// Mean per-coordinate standard deviation of a feature matrix.
inline double mean_feature_std(const Matrix& x) {
  if (x.rows() < 2) return 1.0;
  const Vector mean = x.colwise().mean().transpose();
  double s = 0.0;
  for (Eigen::Index j = 0; j < x.cols(); ++j)
    s += std::sqrt((x.col(j).array() - mean[j]).square().sum() / static_cast<double>(x.rows()));
  return s / static_cast<double>(x.cols());
}

// ---------------------------------------------------------------------------

class Trainer {
 public:
  Trainer(const DatasetSplit& split, const ModelConfig& model_cfg, TrainConfig cfg)
      : split_(split), cfg_(std::move(cfg)) {
    validate(cfg_);
    detail::require(split_.size() > 0, "train: empty training split");
    detail::require(split_.num_classes >= 1, "train: need at least one class");
    all_features_ = training_features();
    ModelConfig mc = model_cfg;
    mc.d_in = static_cast<int>(all_features_.cols());
    mc.num_classes = split_.num_classes;
    state_.model = init_model(mc, cfg_.seed);
    state_.cls_velocity = zeros_like(state_.model);
    state_.con_velocity = zeros_like(state_.model);
    noise_std_ = cfg_.view_noise * mean_feature_std(all_features_);
    for (std::size_t i = 0; i < split_.labeled.size(); ++i)
      labeled_pairs_.emplace_back(static_cast<int>(i), *split_.labeled[i].label);
  }

  const TrainState& state() const { return state_; }
  TrainState& state() { return state_; }
  const TrainConfig& config() const { return cfg_; }
  const std::vector<EstimationRound>& estimation_rounds() const { return rounds_; }

  /// Replaces the state, e.g. when resuming from a checkpoint.
  void restore(TrainState s) {
    detail::require(s.model.classifier.rows() == split_.num_classes, "train: checkpoint class count mismatch");
    detail::require(s.model.encoder.in_dim() == all_features_.cols(), "train: checkpoint input dimension mismatch");
    state_ = std::move(s);
  }

  bool done() const { return state_.epoch >= cfg_.schedule.total_epochs; }

  /// Runs one epoch of the pipeline and returns its telemetry record.
  const EpochTelemetry& run_epoch() {
    detail::require(!done(), "train: all epochs already ran");
    const int epoch = state_.epoch;
    EpochTelemetry tel;
    tel.epoch = epoch;
    tel.lr = cosine_lr(epoch, cfg_.schedule);
    tel.soft_active = epoch >= cfg_.schedule.warmup_epochs;

    if (epoch % cfg_.reestimate_interval == 0 || state_.pi_e.size() == 0) {
      reestimate(epoch);
      tel.estimated = true;
    }

    const auto batches = make_batches(split_.labeled.size(), split_.unlabeled.size(),
                                      cfg_.schedule.batch_size, cfg_.seed, epoch);
    Sgd cls_opt(state_.model, cfg_.momentum, cfg_.weight_decay);
    Sgd con_opt(state_.model, cfg_.momentum, cfg_.weight_decay);
    cls_opt.velocity() = state_.cls_velocity;
    con_opt.velocity() = state_.con_velocity;

    std::size_t unlabeled_seen = 0, unlabeled_kept = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      try {
        step_batch(batches[b], epoch, b, tel, cls_opt, con_opt, unlabeled_seen, unlabeled_kept);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + " batch " + std::to_string(b) + ": " + e.what());
      }
    }
    state_.cls_velocity = cls_opt.velocity();
    state_.con_velocity = con_opt.velocity();

    const double nb = static_cast<double>(batches.size());
    for (double* v : {&tel.l_s, &tel.l_u, &tel.l_reg, &tel.l_cls, &tel.l_cl_u, &tel.l_cl_s, &tel.l_cl_soft, &tel.l_con})
      *v /= nb;
    tel.sampled_fraction = unlabeled_seen ? static_cast<double>(unlabeled_kept) / unlabeled_seen : 0.0;
    tel.pi_e = state_.pi_e;
    state_.telemetry.push_back(std::move(tel));
    ++state_.epoch;
    return state_.telemetry.back();
  }

  void run(const std::function<void(const EpochTelemetry&)>& on_epoch = {}) {
    while (!done()) {
      const auto& t = run_epoch();
      if (on_epoch) on_epoch(t);
    }
  }

  /// Clean (un-augmented) backbone features of every training sample,
  /// labeled first.
  Matrix backbone_features() const { return encode_batch(state_.model, all_features_); }

 private:
  Matrix training_features() const {
    Pool all;
    all.reserve(split_.size());
    all.insert(all.end(), split_.labeled.begin(), split_.labeled.end());
    all.insert(all.end(), split_.unlabeled.begin(), split_.unlabeled.end());
    return stack_features(all);
  }

  void reestimate(int epoch) {
    const Matrix z = backbone_features();
    auto round = estimate_class_distribution(z, labeled_pairs_, split_.num_known, split_.num_classes,
                                             cfg_.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)), cfg_.kmeans);
    state_.pi_e = round.floored.freq;
    rounds_.push_back(std::move(round));
  }

  const Vector& input_of(const BatchItem& it) const {
    return it.labeled ? split_.labeled[it.index].features : split_.unlabeled[it.index].features;
  }

  void step_batch(const Batch& batch, int epoch, std::size_t batch_id, EpochTelemetry& tel, Sgd& cls_opt,
                  Sgd& con_opt, std::size_t& unlabeled_seen, std::size_t& unlabeled_kept) {
    Model& model = state_.model;
    const auto n = static_cast<Eigen::Index>(batch.size());
    const Eigen::Index classes = split_.num_classes;

    // Two views per item; rows [0, n) are view a, [n, 2n) view b.
    auto rng = make_rng(cfg_.seed, {kStreamViews, static_cast<std::uint64_t>(epoch), batch_id});
    Matrix x(2 * n, all_features_.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vector& in = input_of(batch[i]);
      x.row(i) = make_view(in, noise_std_, cfg_.view_dropout, rng).transpose();
      x.row(n + i) = make_view(in, noise_std_, cfg_.view_dropout, rng).transpose();
    }

    std::vector<Eigen::Index> lab_items, unl_items;
    std::vector<int> lab_labels;
    std::set<int> batch_labels;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (batch[i].labeled) {
        lab_items.push_back(i);
        const int y = *split_.labeled[batch[i].index].label;
        lab_labels.push_back(y);
        batch_labels.insert(y);
      } else {
        unl_items.push_back(i);
      }
    }

    // Pseudo-labeling branch.
    {
      MlpCache enc;
      const Matrix z = mlp_forward(model.encoder, x, &enc);
      ClassifyCache cc;
      const Matrix logits = classify_batch(model, z, &cc);

      ClassificationInput in;
      const auto nl = static_cast<Eigen::Index>(lab_items.size());
      const auto nu = static_cast<Eigen::Index>(unl_items.size());
      in.labeled_logits.resize(2 * nl, classes);
      for (Eigen::Index k = 0; k < nl; ++k) {
        in.labeled_logits.row(k) = logits.row(lab_items[k]);
        in.labeled_logits.row(nl + k) = logits.row(n + lab_items[k]);
        in.labels.push_back(lab_labels[k]);
      }
      for (Eigen::Index k = 0; k < nl; ++k) in.labels.push_back(lab_labels[k]);
      in.unlabeled_a.resize(nu, classes);
      in.unlabeled_b.resize(nu, classes);
      for (Eigen::Index k = 0; k < nu; ++k) {
        in.unlabeled_a.row(k) = logits.row(unl_items[k]);
        in.unlabeled_b.row(k) = logits.row(n + unl_items[k]);
      }
      in.target = state_.pi_e;
      in.smoothing_p = cfg_.smoothing_p;
      in.confidence_gate = cfg_.confidence_gate;
      in.weights = cfg_.weights;
      const auto res = classification_objective(in);

      Matrix d_logits = Matrix::Zero(2 * n, classes);
      for (Eigen::Index k = 0; k < nl; ++k) {
        d_logits.row(lab_items[k]) += res.grad_labeled.row(k);
        d_logits.row(n + lab_items[k]) += res.grad_labeled.row(nl + k);
      }
      for (Eigen::Index k = 0; k < nu; ++k) {
        d_logits.row(unl_items[k]) += res.grad_a.row(k);
        d_logits.row(n + unl_items[k]) += res.grad_b.row(k);
      }
      Model grad = zeros_like(model);
      const Matrix d_z = classify_backward(model, cc, d_logits, grad);
      mlp_backward(model.encoder, enc, d_z, grad.encoder);
      cls_opt.step(model, grad, tel.lr, kEncoder | kClassifier);

      tel.l_s += res.l_s;
      tel.l_u += res.l_u;
      tel.l_reg += res.l_reg;
      tel.l_cls += res.value;
    }

    // Contrastive branch.
    {
      MlpCache enc;
      const Matrix z = mlp_forward(model.encoder, x, &enc);
      ProjectCache pc;
      const Matrix h = project_batch(model, z, &pc);

      ContrastiveObjectiveInput in;
      in.features = h;
      in.temperature = cfg_.temperature;
      in.weights = cfg_.weights;
      in.include_soft = tel.soft_active;
      in.unsup_positives.resize(static_cast<std::size_t>(2 * n));
      for (Eigen::Index i = 0; i < n; ++i) {
        in.unsup_positives[i] = {static_cast<int>(n + i)};
        in.unsup_positives[n + i] = {static_cast<int>(i)};
      }
      for (std::size_t k = 0; k < lab_items.size(); ++k) {
        in.sup_rows.push_back(static_cast<int>(lab_items[k]));
        in.sup_labels.push_back(lab_labels[k]);
        in.sup_rows.push_back(static_cast<int>(n + lab_items[k]));
        in.sup_labels.push_back(lab_labels[k]);
      }

      if (tel.soft_active && cfg_.weights.gamma2 > 0.0) {
        // Pseudo-labels from the view-averaged classifier logits.
        const Matrix logits = classify_batch(model, z);
        Matrix unl_logits(static_cast<Eigen::Index>(unl_items.size()), classes);
        std::vector<std::int64_t> ids;
        for (std::size_t k = 0; k < unl_items.size(); ++k) {
          const Eigen::Index i = unl_items[k];
          unl_logits.row(static_cast<Eigen::Index>(k)) = 0.5 * (logits.row(i) + logits.row(n + i));
          ids.push_back(split_.unlabeled[batch[i].index].id);
        }
        auto pl = make_pseudolabels(unl_logits, state_.pi_e, cfg_.sampling.k, std::move(ids));
        const Vector rates = sampling_rates(state_.pi_e, batch_labels, cfg_.sampling.alpha, cfg_.sampling.beta);
        pl = sample_pseudolabels(std::move(pl), rates);

        std::vector<Vector> soft_probs;
        for (std::size_t k = 0; k < lab_items.size(); ++k) {
          const Vector oh = one_hot(lab_labels[k], classes);
          in.soft_rows.push_back(static_cast<int>(lab_items[k]));
          in.soft_rows.push_back(static_cast<int>(n + lab_items[k]));
          soft_probs.push_back(oh);
          soft_probs.push_back(oh);
        }
        for (std::size_t k = 0; k < unl_items.size(); ++k) {
          ++unlabeled_seen;
          if (!pl.mask[k]) continue;
          ++unlabeled_kept;
          const Vector p = pl.probs.row(static_cast<Eigen::Index>(k)).transpose();
          in.soft_rows.push_back(static_cast<int>(unl_items[k]));
          in.soft_rows.push_back(static_cast<int>(n + unl_items[k]));
          soft_probs.push_back(p);
          soft_probs.push_back(p);
        }
        Matrix probs(static_cast<Eigen::Index>(soft_probs.size()), classes);
        for (std::size_t k = 0; k < soft_probs.size(); ++k) probs.row(static_cast<Eigen::Index>(k)) = soft_probs[k].transpose();
        in.soft_weights = cfg_.loss_mode == LossMode::kSoft ? build_positiveness_matrix(probs, cfg_.metric)
                                                            : hard_positiveness_matrix(probs);
      }

      const auto res = contrastive_objective(in);
      Model grad = zeros_like(model);
      const Matrix d_u = normalize_rows_backward(pc.out, pc.norm, res.grad);
      Matrix d_z;
      mlp_backward(model.projector, pc.mlp, d_u, grad.projector, &d_z);
      mlp_backward(model.encoder, enc, d_z, grad.encoder);
      con_opt.step(model, grad, tel.lr, kEncoder | kProjector);

      tel.l_cl_u += res.l_unsup;
      tel.l_cl_s += res.l_sup;
      tel.l_cl_soft += res.l_soft;
      tel.l_con += res.value;
    }
  }

  const DatasetSplit& split_;
  TrainConfig cfg_;
  TrainState state_;
  Matrix all_features_;
  double noise_std_ = 0.0;
  std::vector<std::pair<int, int>> labeled_pairs_;
  std::vector<EstimationRound> rounds_;
};

struct TrainResult {
  Model model;
  std::vector<EpochTelemetry> telemetry;
  std::vector<EstimationRound> estimation_rounds;
};

/// Trains from scratch for the configured number of epochs.
inline TrainResult run(const DatasetSplit& split, const ModelConfig& model_cfg, const TrainConfig& cfg) {
  Trainer t(split, model_cfg, cfg);
  t.run();
  return {t.state().model, t.state().telemetry, t.estimation_rounds()};
}

/// Backbone features for an arbitrary pool.
inline Matrix backbone_features(const Model& model, const Pool& pool) {
  return encode_batch(model, stack_features(pool));
}

}  // namespace bacon
