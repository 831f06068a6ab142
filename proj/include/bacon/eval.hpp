#pragma once

// Test protocol: k-means on backbone features, accuracy under the optimal
// cluster-to-class assignment, and balancedness over class-count tertiles.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bacon/error.hpp"
#include "bacon/estimate.hpp"
#include "bacon/nn.hpp"

namespace bacon {

// Many / Median / Few accuracies of one class partition, plus their
// population standard deviation. Groups that end up empty hold no value.
struct GroupAccuracy {
  std::array<std::optional<double>, 3> groups;
  std::array<std::vector<int>, 3> members;
  double std_dev = 0.0;
};

struct EvalReport {
  double acc_all = 0.0;
  std::optional<double> acc_old;
  std::optional<double> acc_new;
  GroupAccuracy known;
  GroupAccuracy novel;
  std::vector<double> per_class_acc;
  std::vector<int> per_class_count;
  std::vector<int> assignment;  // cluster -> class
  int num_known = 0;
  int num_classes = 0;
  std::vector<std::string> warnings;
};

/// Sizes of the three contiguous groups for m classes.
inline std::array<int, 3> group_sizes(int m) {
  const int first = (m + 2) / 3;
  const int second = (m - first + 1) / 2;
  return {first, second, m - first - second};
}

/// Splits `classes` (sorted by training count, descending; ties by class id)
/// into Many/Median/Few and averages the member accuracies.
inline GroupAccuracy group_partition(const std::vector<double>& per_class_acc,
                                     const std::vector<int>& train_counts, std::vector<int> classes,
                                     std::vector<std::string>* warnings = nullptr,
                                     const std::string& label = "") {
  std::stable_sort(classes.begin(), classes.end(), [&](int a, int b) {
    if (train_counts[a] != train_counts[b]) return train_counts[a] > train_counts[b];
    return a < b;
  });
  const int m = static_cast<int>(classes.size());
  if (m < 3 && warnings)
    warnings->push_back("group_metrics: " + label + " partition has " + std::to_string(m) +
                        " classes; groups degenerate");
  GroupAccuracy g;
  const auto sizes = group_sizes(m);
  int pos = 0;
  std::vector<double> present;
  for (int k = 0; k < 3; ++k) {
    for (int t = 0; t < sizes[k]; ++t) g.members[k].push_back(classes[pos++]);
    if (g.members[k].empty()) continue;
    double s = 0.0;
    for (int c : g.members[k]) s += per_class_acc[c];
    g.groups[k] = s / static_cast<double>(g.members[k].size());
    present.push_back(*g.groups[k]);
  }
  if (!present.empty()) {
    const double mean = std::accumulate(present.begin(), present.end(), 0.0) / present.size();
    double var = 0.0;
    for (double a : present) var += (a - mean) * (a - mean);
    g.std_dev = std::sqrt(var / present.size());
  }
  return g;
}

/// Many/Median/Few groups for known classes [0, num_known) and novel classes
/// [num_known, C), using training-set counts.
inline std::pair<GroupAccuracy, GroupAccuracy> group_metrics(const std::vector<double>& per_class_acc,
                                                             const std::vector<int>& train_counts,
                                                             int num_known,
                                                             std::vector<std::string>* warnings = nullptr) {
  const int c = static_cast<int>(per_class_acc.size());
  detail::require(static_cast<int>(train_counts.size()) == c, "group_metrics: counts size mismatch");
  detail::require(num_known >= 0 && num_known <= c, "group_metrics: bad known-class count");
  std::vector<int> known(num_known), novel(c - num_known);
  std::iota(known.begin(), known.end(), 0);
  std::iota(novel.begin(), novel.end(), num_known);
  return {group_partition(per_class_acc, train_counts, known, warnings, "known"),
          group_partition(per_class_acc, train_counts, novel, warnings, "novel")};
}

/// Accuracy of cluster predictions under the agreement-maximizing bijection.
/// Group fields are left empty; see `evaluate`.
inline EvalReport evaluate_predictions(const std::vector<int>& clusters, const std::vector<int>& labels,
                                       int num_classes, int num_known) {
  detail::require(clusters.size() == labels.size(), "evaluate: one label per prediction is required");
  detail::require(!labels.empty(), "evaluate: empty test set");
  detail::require(num_known >= 0 && num_known <= num_classes, "evaluate: bad known-class count");
  const int c = num_classes;

  Matrix counts = Matrix::Zero(c, c);  // cluster x class
  std::vector<int> per_class(c, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    detail::require(clusters[i] >= 0 && clusters[i] < c, "evaluate: cluster id out of range");
    detail::require(labels[i] >= 0 && labels[i] < c, "evaluate: label out of range");
    counts(clusters[i], labels[i]) += 1.0;
    ++per_class[labels[i]];
  }
  for (int k = 0; k < c; ++k)
    if (per_class[k] == 0)
      throw InvalidArgument("evaluate: class " + std::to_string(k) + " is missing from the test set");

  const Assignment a = hungarian(-counts);
  EvalReport r;
  r.num_known = num_known;
  r.num_classes = c;
  r.assignment = a.row_to_col;
  r.per_class_count = per_class;
  r.per_class_acc.assign(c, 0.0);

  std::vector<int> correct(c, 0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (a.row_to_col[clusters[i]] == labels[i]) ++correct[labels[i]];

  long total = 0, old_hit = 0, old_n = 0, new_hit = 0, new_n = 0;
  for (int k = 0; k < c; ++k) {
    r.per_class_acc[k] = static_cast<double>(correct[k]) / per_class[k];
    total += correct[k];
    if (k < num_known) {
      old_hit += correct[k];
      old_n += per_class[k];
    } else {
      new_hit += correct[k];
      new_n += per_class[k];
    }
  }
  r.acc_all = static_cast<double>(total) / static_cast<double>(labels.size());
  if (old_n > 0) r.acc_old = static_cast<double>(old_hit) / old_n;
  if (new_n > 0) r.acc_new = static_cast<double>(new_hit) / new_n;
  return r;
}

/// k-means with C clusters on test features, optimal assignment, metric suite.
inline EvalReport evaluate(const Matrix& features, const std::vector<int>& labels, int num_classes,
                           int num_known, const std::vector<int>& train_counts, std::uint64_t seed,
                           const KMeansOptions& opt = {}) {
  detail::require(features.rows() == static_cast<Eigen::Index>(labels.size()),
                  "evaluate: one label per feature row is required");
  std::vector<int> present(num_classes, 0);
  for (int y : labels) {
    detail::require(y >= 0 && y < num_classes, "evaluate: label out of range");
    present[y] = 1;
  }
  for (int k = 0; k < num_classes; ++k)
    if (!present[k]) throw InvalidArgument("evaluate: class " + std::to_string(k) + " is missing from the test set");

  const KMeansResult km = kmeans(features, num_classes, seed, opt);
  EvalReport r = evaluate_predictions(km.assignments, labels, num_classes, num_known);
  auto [known, novel] = group_metrics(r.per_class_acc, train_counts, num_known, &r.warnings);
  r.known = std::move(known);
  r.novel = std::move(novel);
  return r;
}

}  // namespace bacon
