#pragma once

// Training objectives of both branches with analytic gradients.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "bacon/error.hpp"
#include "bacon/nn.hpp"

namespace bacon {

// Neumaier-compensated sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

inline double log_sum_exp(const Eigen::Ref<const Vector>& x) {
  const double m = x.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((x.array() - m).exp().sum());
}

inline Vector softmax(const Eigen::Ref<const Vector>& x) {
  const double m = x.maxCoeff();
  Vector e = (x.array() - m).exp();
  return e / e.sum();
}

inline Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) p.row(i) = softmax(logits.row(i).transpose()).transpose();
  return p;
}

// Lowest index wins ties.
inline int argmax(const Eigen::Ref<const Vector>& x) {
  int best = 0;
  for (Eigen::Index i = 1; i < x.size(); ++i)
    if (x[i] > x[best]) best = static_cast<int>(i);
  return best;
}

struct LossWeights {
  double eta1 = 1.0;
  double eta2 = 1.0;
  double gamma1 = 1.0;
  double gamma2 = 1.0;
};

inline void validate(const LossWeights& w) {
  detail::require(w.eta1 >= 0 && w.eta2 >= 0 && w.gamma1 >= 0 && w.gamma2 >= 0,
                  "loss weights must be >= 0");
}

// Rows of `features` are the (unit-norm) contrastive features z_i. For anchor
// i the candidate set A(i) is every other row; positives[i] lists P(i).
struct ContrastiveBatch {
  Matrix features;
  std::vector<std::vector<int>> positives;
  double temperature = 1.0;
  std::vector<int> anchors;  // empty: every row is an anchor
};

struct LossResult {
  double value = 0.0;
  Matrix grad;  // d value / d features
  int anchors_used = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<int> anchor_list(const std::vector<int>& anchors, Eigen::Index n) {
  if (!anchors.empty()) return anchors;
  std::vector<int> all(static_cast<std::size_t>(n));
  for (int i = 0; i < static_cast<int>(n); ++i) all[i] = i;
  return all;
}

// Row i of `sim` with the diagonal removed. `others` receives the matching
// row indices.
inline Vector anchor_logits(const Matrix& sim, int i, std::vector<int>& others) {
  const Eigen::Index n = sim.rows();
  others.clear();
  Vector s(n - 1);
  Eigen::Index k = 0;
  for (Eigen::Index a = 0; a < n; ++a) {
    if (a == i) continue;
    s[k++] = sim(i, a);
    others.push_back(static_cast<int>(a));
  }
  return s;
}

// d loss / d features from d loss / d sim where sim = z z^T / tau.
inline Matrix similarity_backward(const Matrix& d_sim, const Matrix& z, double tau) {
  return (d_sim + d_sim.transpose()) * z / tau;
}

}  // namespace detail

/// General contrastive loss:
///   (1/|D|) sum_i (1/|P(i)|) sum_{p in P(i)} -log( exp(z_i.z_p/t) / sum_{a in A(i)} exp(z_i.z_a/t) )
/// over the anchor set D, with A(i) = all rows except i.
inline LossResult contrastive_loss(const ContrastiveBatch& batch) {
  const Matrix& z = batch.features;
  const Eigen::Index n = z.rows();
  detail::require(batch.temperature > 0.0, "contrastive_loss: temperature must be > 0");
  detail::require(static_cast<Eigen::Index>(batch.positives.size()) == n,
                  "contrastive_loss: one positive set per row is required");
  if (!z.allFinite()) throw NumericalError("contrastive_loss: non-finite feature");

  LossResult r;
  r.grad = Matrix::Zero(n, z.cols());
  const auto anchors = detail::anchor_list(batch.anchors, n);
  if (anchors.empty()) return r;

  const double tau = batch.temperature;
  const double inv_d = 1.0 / static_cast<double>(anchors.size());
  const Matrix sim = z * z.transpose() / tau;
  Matrix d_sim = Matrix::Zero(n, n);
  CompensatedSum total;
  std::vector<int> others;
  for (int i : anchors) {
    detail::require(i >= 0 && i < n, "contrastive_loss: anchor index out of range");
    const auto& pos = batch.positives[i];
    if (pos.empty())
      throw InvalidArgument("contrastive_loss: anchor " + std::to_string(i) + " has no positives");
    const Vector s = detail::anchor_logits(sim, i, others);
    const double lse = log_sum_exp(s);
    Vector d = (s.array() - lse).exp();  // softmax over A(i)
    const double inv_p = 1.0 / static_cast<double>(pos.size());
    double term = 0.0;
    for (int p : pos) {
      detail::require(p >= 0 && p < n && p != i, "contrastive_loss: invalid positive index");
      term += lse - sim(i, p);
      const auto k = static_cast<Eigen::Index>(p < i ? p : p - 1);
      d[k] -= inv_p;
    }
    total.add(term * inv_p);
    for (std::size_t k = 0; k < others.size(); ++k) d_sim(i, others[k]) = inv_d * d[static_cast<Eigen::Index>(k)];
  }
  r.grad = detail::similarity_backward(d_sim, z, tau);
  r.value = total.value() * inv_d;
  r.anchors_used = static_cast<int>(anchors.size());
  return r;
}

struct AnchorTerm {
  double value = 0.0;
  Vector grad;  // d value / d logits
};

/// Per-anchor soft term as a function of its contrastive logits s_j over A(i):
///   (1/sum_j w_j) sum_j -w_j log softmax(s)_j
/// whose gradient is softmax(s) - w / sum(w).
inline AnchorTerm weighted_anchor_term(const Eigen::Ref<const Vector>& logits,
                                       const Eigen::Ref<const Vector>& weights) {
  detail::require(logits.size() == weights.size(), "weighted_anchor_term: size mismatch");
  const double mass = weights.sum();
  detail::require(mass > 0.0, "weighted_anchor_term: weights must have positive mass");
  const double lse = log_sum_exp(logits);
  AnchorTerm t;
  t.value = (weights.array() * (lse - logits.array())).sum() / mass;
  t.grad = (logits.array() - lse).exp().matrix() - weights / mass;
  return t;
}

/// The optimal contrastive probabilities for a positiveness row: w / sum(w).
inline Vector optimal_soft_logits(const Eigen::Ref<const Vector>& w_row) {
  detail::require(w_row.size() > 0, "optimal_soft_logits: empty weight row");
  detail::require((w_row.array() >= 0.0).all(), "optimal_soft_logits: weights must be nonnegative");
  const double mass = w_row.sum();
  detail::require(mass > 0.0, "optimal_soft_logits: weights must not all be zero");
  return w_row / mass;
}

/// Soft contrastive loss: every other row j contributes with weight w_ij,
/// normalized by sum_j w_ij. Anchors whose weight row has no mass are dropped
/// from the mean and reported in `warnings`.
inline LossResult soft_contrastive_loss(const ContrastiveBatch& batch, const Matrix& weights) {
  const Matrix& z = batch.features;
  const Eigen::Index n = z.rows();
  detail::require(batch.temperature > 0.0, "soft_contrastive_loss: temperature must be > 0");
  detail::require(weights.rows() == n && weights.cols() == n,
                  "soft_contrastive_loss: weight matrix must be n x n");
  detail::require((weights.array() >= 0.0).all(), "soft_contrastive_loss: weights must be >= 0");
  if (!z.allFinite()) throw NumericalError("soft_contrastive_loss: non-finite feature");

  LossResult r;
  r.grad = Matrix::Zero(n, z.cols());
  const double tau = batch.temperature;
  std::vector<int> used;
  for (int i : detail::anchor_list(batch.anchors, n)) {
    double mass = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) mass += weights(i, j);
    if (mass > 0.0) {
      used.push_back(i);
    } else {
      r.warnings.push_back("soft_contrastive_loss: anchor " + std::to_string(i) +
                           " has zero positive mass and is excluded");
    }
  }
  if (used.empty()) return r;

  const double inv_d = 1.0 / static_cast<double>(used.size());
  const Matrix sim = z * z.transpose() / tau;
  Matrix d_sim = Matrix::Zero(n, n);
  CompensatedSum total;
  std::vector<int> others;
  Vector w(n - 1);
  for (int i : used) {
    const Vector s = detail::anchor_logits(sim, i, others);
    for (std::size_t k = 0; k < others.size(); ++k) w[static_cast<Eigen::Index>(k)] = weights(i, others[k]);
    const AnchorTerm t = weighted_anchor_term(s, w);
    total.add(t.value);
    for (std::size_t k = 0; k < others.size(); ++k) d_sim(i, others[k]) = inv_d * t.grad[static_cast<Eigen::Index>(k)];
  }
  r.grad = detail::similarity_backward(d_sim, z, tau);
  r.value = total.value() * inv_d;
  r.anchors_used = static_cast<int>(used.size());
  return r;
}

/// Positive sets where rows sharing a label are positives of each other.
inline std::vector<std::vector<int>> same_label_positives(const std::vector<int>& labels) {
  const int n = static_cast<int>(labels.size());
  std::vector<std::vector<int>> pos(n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (j != i && labels[i] == labels[j]) pos[i].push_back(j);
  return pos;
}

// ---------------------------------------------------------------------------
// Distribution regularizer.

struct KlResult {
  double value = 0.0;
  Vector grad;      // d value / d mean_pred
  Vector smoothed;  // normalize(target^p)
};

inline Vector smooth_distribution(const Eigen::Ref<const Vector>& target, double p) {
  detail::require(p >= 0.0 && p <= 1.0, "smoothing exponent must lie in [0, 1]");
  detail::require((target.array() >= 0.0).all(), "target distribution must be nonnegative");
  Vector t = target.array().pow(p);  // 0^0 == 1, so p = 0 gives uniform
  const double mass = t.sum();
  detail::require(mass > 0.0, "target distribution has no mass");
  return t / mass;
}

/// KL(mean_pred || normalize(target^p)) with 0 log 0 = 0.
inline KlResult kl_regularizer(const Eigen::Ref<const Vector>& mean_pred,
                               const Eigen::Ref<const Vector>& target, double p) {
  detail::require(mean_pred.size() == target.size(), "kl_regularizer: size mismatch");
  detail::require((mean_pred.array() >= 0.0).all() && std::abs(mean_pred.sum() - 1.0) < 1e-6,
                  "kl_regularizer: mean prediction must lie on the simplex");
  detail::require(std::abs(target.sum() - 1.0) < 1e-6, "kl_regularizer: target must lie on the simplex");
  KlResult r;
  r.smoothed = smooth_distribution(target, p);
  r.grad = Vector::Zero(mean_pred.size());
  CompensatedSum total;
  for (Eigen::Index c = 0; c < mean_pred.size(); ++c) {
    const double m = mean_pred[c];
    if (m <= 0.0) continue;
    const double t = r.smoothed[c];
    if (t <= 0.0)
      throw InvalidArgument("kl_regularizer: target has zero mass where the prediction does not");
    const double lr = std::log(m / t);
    total.add(m * lr);
    r.grad[c] = lr + 1.0;
  }
  r.value = total.value();
  return r;
}

// ---------------------------------------------------------------------------
// Pseudo-labeling branch objective: L_s + eta1 * L_u + eta2 * L_reg.

struct ClassificationInput {
  Matrix labeled_logits;  // one row per labeled view
  std::vector<int> labels;
  Matrix unlabeled_a;  // view a of each unlabeled sample
  Matrix unlabeled_b;  // view b, same row order
  Vector target;       // aligned estimated distribution
  double smoothing_p = 0.5;
  double confidence_gate = 0.5;
  LossWeights weights;
};

struct ClassificationResult {
  double value = 0.0;
  double l_s = 0.0;
  double l_u = 0.0;
  double l_reg = 0.0;
  Matrix grad_labeled;
  Matrix grad_a;
  Matrix grad_b;
  std::vector<std::string> warnings;
};

inline ClassificationResult classification_objective(const ClassificationInput& in) {
  const Eigen::Index n_l = in.labeled_logits.rows();
  const Eigen::Index n_u = in.unlabeled_a.rows();
  const Eigen::Index classes = n_l > 0 ? in.labeled_logits.cols() : in.unlabeled_a.cols();
  detail::require(static_cast<Eigen::Index>(in.labels.size()) == n_l,
                  "classification_objective: one label per labeled row is required");
  detail::require(in.unlabeled_b.rows() == n_u, "classification_objective: view rows mismatch");
  detail::require(n_u == 0 || (in.unlabeled_a.cols() == classes && in.unlabeled_b.cols() == classes),
                  "classification_objective: logit width mismatch");
  detail::require(in.target.size() == classes, "classification_objective: target size mismatch");
  detail::require(n_l + n_u > 0, "classification_objective: empty batch");
  validate(in.weights);

  ClassificationResult r;
  r.grad_labeled = Matrix::Zero(n_l, classes);
  r.grad_a = Matrix::Zero(n_u, classes);
  r.grad_b = Matrix::Zero(n_u, classes);

  const Matrix p_l = softmax_rows(in.labeled_logits);
  const Matrix p_a = softmax_rows(in.unlabeled_a);
  const Matrix p_b = softmax_rows(in.unlabeled_b);

  // Supervised cross-entropy.
  if (n_l == 0) {
    r.warnings.push_back("classification_objective: no labeled rows, L_s omitted");
  } else {
    CompensatedSum ce;
    for (Eigen::Index i = 0; i < n_l; ++i) {
      const int y = in.labels[i];
      detail::require(y >= 0 && y < classes, "classification_objective: label out of range");
      ce.add(log_sum_exp(in.labeled_logits.row(i).transpose()) - in.labeled_logits(i, y));
      r.grad_labeled.row(i) = p_l.row(i) / static_cast<double>(n_l);
      r.grad_labeled(i, y) -= 1.0 / static_cast<double>(n_l);
    }
    r.l_s = ce.value() / static_cast<double>(n_l);
  }

  // Cross pseudo supervision: each view learns the other's confident argmax.
  if (n_u > 0 && in.weights.eta1 > 0.0) {
    CompensatedSum cps;
    const double norm = 1.0 / static_cast<double>(2 * n_u);
    auto supervise = [&](const Matrix& logits, const Matrix& probs, const Matrix& teacher, Matrix& grad) {
      for (Eigen::Index i = 0; i < n_u; ++i) {
        const Vector t = teacher.row(i).transpose();
        const int y = argmax(t);
        if (t[y] < in.confidence_gate) continue;
        cps.add(log_sum_exp(logits.row(i).transpose()) - logits(i, y));
        grad.row(i) += in.weights.eta1 * norm * probs.row(i);
        grad(i, y) -= in.weights.eta1 * norm;
      }
    };
    supervise(in.unlabeled_a, p_a, p_b, r.grad_a);
    supervise(in.unlabeled_b, p_b, p_a, r.grad_b);
    r.l_u = cps.value() * norm;
  }

  // Distribution regularizer on the batch-mean prediction of every row.
  if (in.weights.eta2 > 0.0) {
    const double rows = static_cast<double>(n_l + 2 * n_u);
    Vector mean = Vector::Zero(classes);
    if (n_l) mean += p_l.colwise().sum().transpose();
    if (n_u) mean += p_a.colwise().sum().transpose() + p_b.colwise().sum().transpose();
    mean /= rows;
    const KlResult kl = kl_regularizer(mean, in.target, in.smoothing_p);
    r.l_reg = kl.value;
    const double scale = in.weights.eta2 / rows;
    auto backprop = [&](const Matrix& probs, Matrix& grad) {
      for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        const Vector s = probs.row(i).transpose();
        const double dot = s.dot(kl.grad);
        grad.row(i) += scale * (s.array() * (kl.grad.array() - dot)).matrix().transpose();
      }
    };
    backprop(p_l, r.grad_labeled);
    backprop(p_a, r.grad_a);
    backprop(p_b, r.grad_b);
  }

  r.value = r.l_s + in.weights.eta1 * r.l_u + in.weights.eta2 * r.l_reg;
  if (!std::isfinite(r.value)) throw NumericalError("classification_objective: non-finite loss");
  return r;
}

// ---------------------------------------------------------------------------
// Contrastive branch objective: L_CL^u + gamma1 * L_CL^s + gamma2 * L_CL^soft.

struct ContrastiveObjectiveInput {
  Matrix features;  // every projected view in the batch, unit rows
  double temperature = 1.0;
  std::vector<std::vector<int>> unsup_positives;  // over all rows
  std::vector<int> sup_rows;                      // labeled views
  std::vector<int> sup_labels;                    // aligned with sup_rows
  std::vector<int> soft_rows;                     // labeled + sampled unlabeled views
  Matrix soft_weights;                            // |soft_rows| x |soft_rows|
  bool include_soft = true;                       // false during warm-up
  LossWeights weights;
};

struct ContrastiveObjectiveResult {
  double value = 0.0;
  double l_unsup = 0.0;
  double l_sup = 0.0;
  double l_soft = 0.0;
  Matrix grad;
  std::vector<std::string> warnings;
};

namespace detail {

inline Matrix gather_rows(const Matrix& m, const std::vector<int>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    require(rows[k] >= 0 && rows[k] < m.rows(), "row index out of range");
    out.row(static_cast<Eigen::Index>(k)) = m.row(rows[k]);
  }
  return out;
}

inline void scatter_add_rows(Matrix& dst, const std::vector<int>& rows, const Matrix& src, double scale) {
  for (std::size_t k = 0; k < rows.size(); ++k) dst.row(rows[k]) += scale * src.row(static_cast<Eigen::Index>(k));
}

}  // namespace detail

inline ContrastiveObjectiveResult contrastive_objective(const ContrastiveObjectiveInput& in) {
  validate(in.weights);
  const Eigen::Index n = in.features.rows();
  ContrastiveObjectiveResult r;
  r.grad = Matrix::Zero(n, in.features.cols());

  {
    ContrastiveBatch b{in.features, in.unsup_positives, in.temperature, {}};
    const auto res = contrastive_loss(b);
    r.l_unsup = res.value;
    r.grad += res.grad;
  }

  if (in.weights.gamma1 > 0.0 && in.sup_rows.size() >= 2) {
    detail::require(in.sup_rows.size() == in.sup_labels.size(),
                    "contrastive_objective: one label per supervised row is required");
    ContrastiveBatch b{detail::gather_rows(in.features, in.sup_rows),
                       same_label_positives(in.sup_labels), in.temperature, {}};
    for (int i = 0; i < static_cast<int>(b.positives.size()); ++i)
      if (!b.positives[i].empty()) b.anchors.push_back(i);
    if (!b.anchors.empty()) {
      const auto res = contrastive_loss(b);
      r.l_sup = res.value;
      detail::scatter_add_rows(r.grad, in.sup_rows, res.grad, in.weights.gamma1);
    }
  }

  if (in.include_soft && in.weights.gamma2 > 0.0 && in.soft_rows.size() >= 2) {
    ContrastiveBatch b{detail::gather_rows(in.features, in.soft_rows), {}, in.temperature, {}};
    const auto res = soft_contrastive_loss(b, in.soft_weights);
    r.l_soft = res.value;
    r.warnings.insert(r.warnings.end(), res.warnings.begin(), res.warnings.end());
    detail::scatter_add_rows(r.grad, in.soft_rows, res.grad, in.weights.gamma2);
  }

  r.value = r.l_unsup + in.weights.gamma1 * r.l_sup + in.weights.gamma2 * r.l_soft;
  if (!std::isfinite(r.value)) throw NumericalError("contrastive_objective: non-finite loss");
  return r;
}

}  // namespace bacon
