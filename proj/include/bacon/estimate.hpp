#pragma once

// Training-set class distribution estimated from k-means cluster sizes on the
// contrastive features, aligned to class indices.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "bacon/error.hpp"
#include "bacon/nn.hpp"
#include "bacon/random.hpp"

namespace bacon {

// ---------------------------------------------------------------------------
// Linear assignment.

struct Assignment {
  std::vector<int> row_to_col;
  double cost = 0.0;
};

namespace detail {

// Finds an alternating path in the bipartite graph `tight` from row `start`
// to the free column `target`, avoiding locked rows/columns, and flips it.
inline bool reroute(const std::vector<std::vector<char>>& tight, std::vector<int>& row_to_col,
                    std::vector<int>& col_to_row, const std::vector<char>& row_locked,
                    const std::vector<char>& col_locked, int start, int target) {
  const int n = static_cast<int>(row_to_col.size());
  std::vector<int> parent_row(n, -1);  // for each column, the row we came from
  std::vector<char> seen_col(n, 0);
  std::queue<int> rows;
  rows.push(start);
  while (!rows.empty()) {
    const int r = rows.front();
    rows.pop();
    for (int c = 0; c < n; ++c) {
      if (!tight[r][c] || seen_col[c] || col_locked[c]) continue;
      seen_col[c] = 1;
      parent_row[c] = r;
      if (c == target) {
        // Flip: walk back from target.
        int col = c;
        while (true) {
          const int row = parent_row[col];
          const int prev = row_to_col[row];
          row_to_col[row] = col;
          col_to_row[col] = row;
          if (row == start) break;
          col = prev;
        }
        return true;
      }
      const int next = col_to_row[c];
      if (next >= 0 && !row_locked[next]) rows.push(next);
    }
  }
  return false;
}

}  // namespace detail

/// Minimum-cost perfect assignment of an n x n cost matrix (O(n^3) shortest
/// augmenting paths with potentials). Among optimal permutations the
/// lexicographically smallest row_to_col is returned.
inline Assignment hungarian(const Matrix& cost) {
  detail::require(cost.rows() == cost.cols(), "hungarian: cost matrix must be square");
  if (!cost.allFinite()) throw InvalidArgument("hungarian: cost matrix must be finite");
  const int n = static_cast<int>(cost.rows());
  Assignment out;
  if (n == 0) return out;

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(n), col_to_row(n);
  for (int j = 1; j <= n; ++j) {
    row_to_col[p[j] - 1] = j - 1;
    col_to_row[j - 1] = p[j] - 1;
  }

  // Optimal permutations are exactly the perfect matchings on zero reduced
  // cost edges of the final potentials. Walk rows in order and take the
  // smallest column that still admits a perfect matching.
  const double scale = 1.0 + cost.cwiseAbs().maxCoeff();
  const double eps = 1e-9 * scale;
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) tight[i][j] = cost(i, j) - u[i + 1] - v[j + 1] <= eps;

  std::vector<char> row_locked(n, 0), col_locked(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (!tight[i][j] || col_locked[j]) continue;
      if (row_to_col[i] == j) break;
      const int other = col_to_row[j];
      const int freed = row_to_col[i];
      auto r2c = row_to_col;
      auto c2r = col_to_row;
      r2c[i] = j;
      c2r[j] = i;
      r2c[other] = -1;
      c2r[freed] = -1;
      row_locked[i] = 1;
      col_locked[j] = 1;
      if (detail::reroute(tight, r2c, c2r, row_locked, col_locked, other, freed)) {
        row_to_col = std::move(r2c);
        col_to_row = std::move(c2r);
        break;
      }
      row_locked[i] = 0;
      col_locked[j] = 0;
    }
    row_locked[i] = 1;
    col_locked[row_to_col[i]] = 1;
  }

  out.row_to_col = std::move(row_to_col);
  for (int i = 0; i < n; ++i) out.cost += cost(i, out.row_to_col[i]);
  return out;
}

// ---------------------------------------------------------------------------
// k-means.

struct KMeansOptions {
  int max_iter = 300;
  double tol = 1e-10;  // stop once no center moves farther than this
  int n_init = 10;     // independent k-means++ restarts, best inertia kept
};

struct KMeansResult {
  std::vector<int> assignments;
  Matrix centers;  // k x d
  double inertia = 0.0;
  int iterations = 0;
  std::vector<double> inertia_history;  // after each Lloyd update
  int repairs = 0;                      // empty clusters refilled
};

namespace detail {

inline double sq_dist(const Matrix& x, Eigen::Index i, const Matrix& c, Eigen::Index k) {
  return (x.row(i) - c.row(k)).squaredNorm();
}

// Greedy k-means++: each new center is the best of 2 + floor(ln k) D^2-sampled
// candidates, judged by the resulting potential.
inline Matrix kmeanspp_init(const Matrix& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  const int trials = 2 + static_cast<int>(std::log(static_cast<double>(k)));
  Matrix centers(k, x.cols());
  std::uniform_int_distribution<Eigen::Index> pick(0, n - 1);
  centers.row(0) = x.row(pick(rng));
  std::vector<double> d2(static_cast<std::size_t>(n)), cand(static_cast<std::size_t>(n)),
      best(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = sq_dist(x, i, centers, 0);
  for (int c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    Eigen::Index chosen = -1;
    double chosen_potential = 0.0;
    for (int t = 0; t < trials; ++t) {
      Eigen::Index idx = 0;
      if (total > 0.0) {
        std::uniform_real_distribution<double> u(0.0, total);
        double target = u(rng);
        idx = n - 1;
        for (Eigen::Index i = 0; i < n; ++i) {
          target -= d2[i];
          if (target < 0.0) {
            idx = i;
            break;
          }
        }
      } else {
        idx = pick(rng);
      }
      double potential = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        cand[i] = std::min(d2[i], (x.row(i) - x.row(idx)).squaredNorm());
        potential += cand[i];
      }
      if (chosen < 0 || potential < chosen_potential) {
        chosen = idx;
        chosen_potential = potential;
        best.swap(cand);
      }
    }
    centers.row(c) = x.row(chosen);
    d2.swap(best);
  }
  return centers;
}

// Nearest center, lowest index on ties.
inline void assign_nearest(const Matrix& x, const Matrix& centers, std::vector<int>& assignments,
                           std::vector<double>& dist) {
  const Eigen::Index n = x.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    double best_d = sq_dist(x, i, centers, 0);
    for (Eigen::Index c = 1; c < centers.rows(); ++c) {
      const double d = sq_dist(x, i, centers, c);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    assignments[i] = best;
    dist[i] = best_d;
  }
}

// Moves the point farthest from its center (among clusters with more than
// one member) into each empty cluster.
inline int repair_empty(const Matrix& x, Matrix& centers, std::vector<int>& assignments,
                        std::vector<double>& dist) {
  const int k = static_cast<int>(centers.rows());
  std::vector<int> sizes(k, 0);
  for (int a : assignments) ++sizes[a];
  int repairs = 0;
  for (int c = 0; c < k; ++c) {
    if (sizes[c] > 0) continue;
    Eigen::Index far = -1;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      if (sizes[assignments[i]] <= 1) continue;
      if (far < 0 || dist[i] > dist[far]) far = i;
    }
    if (far < 0) break;  // cannot happen when n >= k
    --sizes[assignments[far]];
    assignments[far] = c;
    sizes[c] = 1;
    dist[far] = 0.0;
    centers.row(c) = x.row(far);
    ++repairs;
  }
  return repairs;
}

inline Matrix cluster_means(const Matrix& x, const std::vector<int>& assignments, const Matrix& previous) {
  Matrix sums = Matrix::Zero(previous.rows(), x.cols());
  std::vector<int> sizes(static_cast<std::size_t>(previous.rows()), 0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    sums.row(assignments[i]) += x.row(i);
    ++sizes[assignments[i]];
  }
  for (Eigen::Index c = 0; c < sums.rows(); ++c)
    sums.row(c) = sizes[c] > 0 ? Matrix(sums.row(c) / sizes[c]) : Matrix(previous.row(c));
  return sums;
}

inline KMeansResult kmeans_single(const Matrix& x, int k, Rng& rng, const KMeansOptions& opt) {
  const Eigen::Index n = x.rows();
  KMeansResult r;
  r.centers = kmeanspp_init(x, k, rng);
  r.assignments.assign(static_cast<std::size_t>(n), 0);
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
  for (int it = 1; it <= opt.max_iter; ++it) {
    assign_nearest(x, r.centers, r.assignments, dist);
    r.repairs += repair_empty(x, r.centers, r.assignments, dist);
    Matrix next = cluster_means(x, r.assignments, r.centers);
    double shift = 0.0;
    for (Eigen::Index c = 0; c < next.rows(); ++c)
      shift = std::max(shift, (next.row(c) - r.centers.row(c)).norm());
    r.centers = std::move(next);
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) inertia += sq_dist(x, i, r.centers, r.assignments[i]);
    r.inertia_history.push_back(inertia);
    r.inertia = inertia;
    r.iterations = it;
    if (shift <= opt.tol) break;
  }
  return r;
}

}  // namespace detail

/// k-means++ seeding followed by Lloyd iterations. Deterministic in `seed`.
inline KMeansResult kmeans(const Matrix& features, int k, std::uint64_t seed,
                           const KMeansOptions& opt = {}) {
  detail::require(k >= 1, "kmeans: need at least one cluster");
  detail::require(features.rows() >= k, "kmeans: fewer samples (" + std::to_string(features.rows()) +
                                            ") than clusters (" + std::to_string(k) + ")");
  detail::require(opt.n_init >= 1 && opt.max_iter >= 1, "kmeans: n_init and max_iter must be >= 1");
  if (!features.allFinite()) throw InvalidArgument("kmeans: non-finite feature");

  KMeansResult best;
  for (int run = 0; run < opt.n_init; ++run) {
    auto rng = make_rng(seed, {kStreamKMeans, static_cast<std::uint64_t>(run)});
    auto r = detail::kmeans_single(features, k, rng, opt);
    if (run == 0 || r.inertia < best.inertia) best = std::move(r);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Distribution estimation and alignment.

// Class frequencies; entries >= 0 summing to one.
struct ClassDistribution {
  Vector freq;

  Eigen::Index size() const { return freq.size(); }
};

/// Cluster-indexed frequencies n / sum(n).
inline ClassDistribution estimate_distribution(const std::vector<int>& assignments, int num_clusters) {
  detail::require(num_clusters >= 1, "estimate_distribution: need at least one cluster");
  detail::require(!assignments.empty(), "estimate_distribution: no assignments");
  Vector counts = Vector::Zero(num_clusters);
  for (int a : assignments) {
    detail::require(a >= 0 && a < num_clusters, "estimate_distribution: cluster id out of range");
    counts[a] += 1.0;
  }
  return {counts / static_cast<double>(assignments.size())};
}

// Bijection from cluster ids to class ids.
struct AlignmentMap {
  std::vector<int> cluster_to_class;
};

/// Known classes are matched to clusters by maximum labeled agreement; the
/// remaining clusters, largest first, take the novel classes in ascending
/// order.
inline AlignmentMap align_clusters(const std::vector<int>& assignments, int num_clusters,
                                   const std::vector<std::pair<int, int>>& labeled, int num_known,
                                   int num_classes) {
  detail::require(num_clusters >= num_classes, "align_clusters: fewer clusters than classes");
  detail::require(num_clusters == num_classes, "align_clusters: cluster count must equal class count");
  detail::require(num_known >= 0 && num_known <= num_classes, "align_clusters: bad known-class count");
  if (num_known > 0 && labeled.empty())
    throw InvalidArgument("align_clusters: no labeled samples to match known classes");

  const int c = num_classes;
  Matrix cost = Matrix::Zero(c, c);  // rows: classes (novel rows padded with zero), cols: clusters
  for (const auto& [index, cls] : labeled) {
    detail::require(index >= 0 && index < static_cast<int>(assignments.size()),
                    "align_clusters: labeled index out of range");
    detail::require(cls >= 0 && cls < num_known, "align_clusters: labeled class is not a known class");
    cost(cls, assignments[index]) -= 1.0;
  }

  AlignmentMap map;
  map.cluster_to_class.assign(c, -1);
  std::vector<char> taken(c, 0);
  if (num_known > 0) {
    const Assignment a = hungarian(cost);
    for (int k = 0; k < num_known; ++k) {
      map.cluster_to_class[a.row_to_col[k]] = k;
      taken[a.row_to_col[k]] = 1;
    }
  }

  std::vector<int> sizes(c, 0);
  for (int a : assignments) ++sizes[a];
  std::vector<int> rest;
  for (int j = 0; j < c; ++j)
    if (!taken[j]) rest.push_back(j);
  std::stable_sort(rest.begin(), rest.end(), [&](int a, int b) { return sizes[a] > sizes[b]; });
  for (std::size_t k = 0; k < rest.size(); ++k) map.cluster_to_class[rest[k]] = num_known + static_cast<int>(k);
  return map;
}

inline AlignmentMap align_clusters(const KMeansResult& result, const std::vector<std::pair<int, int>>& labeled,
                                   int num_known, int num_classes) {
  return align_clusters(result.assignments, static_cast<int>(result.centers.rows()), labeled, num_known,
                        num_classes);
}

/// Reorders cluster frequencies into class order.
inline ClassDistribution aligned_distribution(const ClassDistribution& by_cluster, const AlignmentMap& map) {
  detail::require(static_cast<Eigen::Index>(map.cluster_to_class.size()) == by_cluster.size(),
                  "aligned_distribution: map size mismatch");
  ClassDistribution out{Vector::Zero(by_cluster.size())};
  std::vector<char> hit(map.cluster_to_class.size(), 0);
  for (std::size_t j = 0; j < map.cluster_to_class.size(); ++j) {
    const int cls = map.cluster_to_class[j];
    detail::require(cls >= 0 && cls < by_cluster.size() && !hit[cls], "aligned_distribution: map is not a bijection");
    hit[cls] = 1;
    out.freq[cls] = by_cluster.freq[static_cast<Eigen::Index>(j)];
  }
  return out;
}

/// Clamps frequencies below at 1 / (2N) and renormalizes.
inline ClassDistribution floor_distribution(const ClassDistribution& d, std::size_t num_samples) {
  detail::require(num_samples > 0, "floor_distribution: need at least one sample");
  const double eps = 1.0 / (2.0 * static_cast<double>(num_samples));
  Vector f = d.freq.cwiseMax(eps);
  return {f / f.sum()};
}

struct EstimationRound {
  KMeansResult clusters;
  ClassDistribution by_cluster;
  AlignmentMap map;
  ClassDistribution aligned;
  ClassDistribution floored;  // what the training loop consumes
};

/// Full estimation step: k-means on all training features, alignment, flooring.
/// `labeled` pairs are (row in `features`, known class).
inline EstimationRound estimate_class_distribution(const Matrix& features,
                                                   const std::vector<std::pair<int, int>>& labeled,
                                                   int num_known, int num_classes, std::uint64_t seed,
                                                   const KMeansOptions& opt = {}) {
  EstimationRound r;
  r.clusters = kmeans(features, num_classes, seed, opt);
  r.by_cluster = estimate_distribution(r.clusters.assignments, num_classes);
  r.map = align_clusters(r.clusters, labeled, num_known, num_classes);
  r.aligned = aligned_distribution(r.by_cluster, r.map);
  r.floored = floor_distribution(r.aligned, static_cast<std::size_t>(features.rows()));
  return r;
}

}  // namespace bacon
