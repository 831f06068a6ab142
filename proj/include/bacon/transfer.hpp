#pragma once

// Knowledge transfer from the pseudo-labeling branch to the contrastive
// branch: logit debiasing, class-wise sampling and positiveness scores.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "bacon/error.hpp"
#include "bacon/losses.hpp"
#include "bacon/nn.hpp"

namespace bacon {

struct SamplingConfig {
  double alpha = 0.8;
  double beta = 0.5;
  double k = 0.5;
};

inline void validate(const SamplingConfig& s) {
  detail::require(s.alpha >= 0.0 && s.alpha <= 1.0, "sampling: alpha must lie in [0, 1]");
  detail::require(s.beta >= 0.0 && s.beta <= 1.0, "sampling: beta must lie in [0, 1]");
  detail::require(s.k >= 0.0, "sampling: debias strength k must be >= 0");
}

struct PseudoLabelBatch {
  Matrix probs;  // rectified class probabilities, one row per instance
  std::vector<int> pred_class;
  std::vector<double> confidence;
  std::vector<std::int64_t> ids;  // tie-break key for sampling
  std::vector<char> mask;         // selected for the soft loss

  std::size_t size() const { return pred_class.size(); }
};

/// softmax(logits - k * log(pi_e)).
inline Vector debias(const Eigen::Ref<const Vector>& logits, const Eigen::Ref<const Vector>& pi_e,
                     double k) {
  detail::require(logits.size() == pi_e.size(), "debias: size mismatch");
  if (!logits.allFinite()) throw NumericalError("debias: non-finite logits");
  detail::require((pi_e.array() > 0.0).all(), "debias: estimated distribution must be positive");
  if (k == 0.0) return softmax(logits);
  return softmax(logits.array() - k * pi_e.array().log());
}

/// Builds a pre-mask batch from raw logits.
inline PseudoLabelBatch make_pseudolabels(const Matrix& logits, const Vector& pi_e, double k,
                                          std::vector<std::int64_t> ids) {
  detail::require(ids.size() == static_cast<std::size_t>(logits.rows()),
                  "make_pseudolabels: one id per row is required");
  PseudoLabelBatch b;
  b.probs.resize(logits.rows(), logits.cols());
  b.ids = std::move(ids);
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const Vector p = debias(logits.row(i).transpose(), pi_e, k);
    b.probs.row(i) = p.transpose();
    const int c = argmax(p);
    b.pred_class.push_back(c);
    b.confidence.push_back(p[c]);
  }
  b.mask.assign(b.pred_class.size(), 0);
  return b;
}

/// SR^c = (pi_e^c / min pi_e)^-alpha for classes in `batch_labels`, exponent
/// beta otherwise.
inline Vector sampling_rates(const Eigen::Ref<const Vector>& pi_e, const std::set<int>& batch_labels,
                             double alpha, double beta) {
  detail::require(alpha >= 0.0 && alpha <= 1.0, "sampling_rates: alpha must lie in [0, 1]");
  detail::require(beta >= 0.0 && beta <= 1.0, "sampling_rates: beta must lie in [0, 1]");
  detail::require(pi_e.size() > 0 && (pi_e.array() > 0.0).all(),
                  "sampling_rates: estimated distribution must be positive");
  const double floor = pi_e.minCoeff();
  Vector sr(pi_e.size());
  for (Eigen::Index c = 0; c < pi_e.size(); ++c) {
    const double e = batch_labels.count(static_cast<int>(c)) ? alpha : beta;
    sr[c] = std::pow(pi_e[c] / floor, -e);
  }
  return sr;
}

/// Per predicted class c with m_c members, keeps the ceil(SR^c * m_c) most
/// confident ones (ties: lower id).
inline PseudoLabelBatch sample_pseudolabels(PseudoLabelBatch batch, const Eigen::Ref<const Vector>& rates) {
  const std::size_t n = batch.size();
  batch.mask.assign(n, 0);
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(rates.size()));
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(batch.pred_class[i] >= 0 && batch.pred_class[i] < rates.size(),
                    "sample_pseudolabels: predicted class out of range");
    members[batch.pred_class[i]].push_back(i);
  }
  for (std::size_t c = 0; c < members.size(); ++c) {
    auto& m = members[c];
    if (m.empty()) continue;
    std::sort(m.begin(), m.end(), [&](std::size_t a, std::size_t b) {
      if (batch.confidence[a] != batch.confidence[b]) return batch.confidence[a] > batch.confidence[b];
      return batch.ids[a] < batch.ids[b];
    });
    const double want = rates[static_cast<Eigen::Index>(c)] * static_cast<double>(m.size());
    // Guard against 0.5 * 4 landing at 2.0000000000000004.
    const auto take = std::min(m.size(), static_cast<std::size_t>(std::ceil(want - 1e-9)));
    for (std::size_t k = 0; k < take; ++k) batch.mask[m[k]] = 1;
  }
  return batch;
}

enum class Similarity { kDot, kCosine, kL1, kL2 };

inline const char* to_string(Similarity s) {
  switch (s) {
    case Similarity::kDot: return "dot";
    case Similarity::kCosine: return "cosine";
    case Similarity::kL1: return "L1";
    case Similarity::kL2: return "L2";
  }
  return "?";
}

inline Similarity parse_similarity(const std::string& s) {
  if (s == "dot") return Similarity::kDot;
  if (s == "cosine") return Similarity::kCosine;
  if (s == "L1" || s == "l1") return Similarity::kL1;
  if (s == "L2" || s == "l2") return Similarity::kL2;
  throw InvalidArgument("unknown similarity '" + s + "'");
}

namespace detail {

inline void require_simplex(const Eigen::Ref<const Vector>& p, const char* who) {
  if ((p.array() < -1e-6).any() || std::abs(p.sum() - 1.0) > 1e-6)
    throw InvalidArgument(std::string(who) + ": input is not a probability vector");
}

}  // namespace detail

/// Similarity of two class-probability vectors mapped into [0, 1].
inline double positiveness(const Eigen::Ref<const Vector>& p, const Eigen::Ref<const Vector>& q,
                           Similarity metric = Similarity::kDot) {
  detail::require(p.size() == q.size(), "positiveness: size mismatch");
  detail::require_simplex(p, "positiveness");
  detail::require_simplex(q, "positiveness");
  double w = 0.0;
  switch (metric) {
    case Similarity::kDot: w = p.dot(q); break;
    case Similarity::kCosine: w = p.dot(q) / (p.norm() * q.norm()); break;
    case Similarity::kL1: w = 1.0 - 0.5 * (p - q).lpNorm<1>(); break;
    case Similarity::kL2: w = 1.0 - (p - q).norm() / std::sqrt(2.0); break;
  }
  return std::clamp(w, 0.0, 1.0);
}

/// Pairwise positiveness over the rows of `probs` (labeled rows are one-hot).
/// The diagonal is zero and never used.
inline Matrix build_positiveness_matrix(const Matrix& probs, Similarity metric = Similarity::kDot) {
  const Eigen::Index n = probs.rows();
  Matrix w = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector pi = probs.row(i).transpose();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) w(i, j) = positiveness(pi, probs.row(j).transpose(), metric);
  }
  return w;
}

/// Argmax-indicator weights: 1 when two rows share a predicted class.
inline Matrix hard_positiveness_matrix(const Matrix& probs) {
  const Eigen::Index n = probs.rows();
  std::vector<int> cls(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) cls[i] = argmax(probs.row(i).transpose());
  Matrix w = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j && cls[i] == cls[j]) w(i, j) = 1.0;
  return w;
}

inline Vector one_hot(int cls, Eigen::Index classes) {
  Vector v = Vector::Zero(classes);
  v[cls] = 1.0;
  return v;
}

}  // namespace bacon
