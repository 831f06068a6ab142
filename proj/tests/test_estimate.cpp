#include <catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "bacon/data.hpp"
#include "bacon/estimate.hpp"

using namespace bacon;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Exhaustive oracle: minimum cost and the lexicographically smallest permutation attaining it.
std::pair<double, std::vector<int>> brute_force(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  std::vector<int> perm(n), best;
  std::iota(perm.begin(), perm.end(), 0);
  double best_cost = 1e300;
  do {
    double c = 0.0;
    for (int i = 0; i < n; ++i) c += cost(i, perm[i]);
    if (c < best_cost - 1e-9) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best_cost, best};
}

double total_cost(const Matrix& cost, const std::vector<int>& perm) {
  double c = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) c += cost(static_cast<Eigen::Index>(i), perm[i]);
  return c;
}

}  // namespace

TEST_CASE("hungarian hand examples", "[estimate]") {
  Matrix id = Matrix::Ones(4, 4) - Matrix::Identity(4, 4);
  const auto a = hungarian(id);
  CHECK(a.row_to_col == std::vector<int>{0, 1, 2, 3});
  CHECK(a.cost == 0.0);

  const auto b = hungarian(Matrix{{4.0, 1.0}, {2.0, 3.0}});
  CHECK(b.row_to_col == std::vector<int>{1, 0});
  CHECK(b.cost == 3.0);

  CHECK_THROWS_AS(hungarian(Matrix::Zero(2, 3)), InvalidArgument);
  Matrix bad = Matrix::Zero(2, 2);
  bad(0, 1) = std::nan("");
  CHECK_THROWS_AS(hungarian(bad), InvalidArgument);
}

TEST_CASE("hungarian equals exhaustive search with lexicographic ties", "[estimate][property]") {
  Rng rng(1);
  std::uniform_real_distribution<double> real(-5.0, 5.0);
  for (int n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 100; ++trial) {
      Matrix cost(n, n);
      // Small integer costs make ties common.
      const bool ints = trial % 2 == 0;
      for (Eigen::Index i = 0; i < cost.size(); ++i)
        cost.data()[i] = ints ? static_cast<double>(rng() % 4) : real(rng);
      const auto [best, perm] = brute_force(cost);
      const auto a = hungarian(cost);
      REQUIRE_THAT(a.cost, WithinAbs(best, 1e-9));
      REQUIRE_THAT(total_cost(cost, a.row_to_col), WithinAbs(best, 1e-9));
      REQUIRE(a.row_to_col == perm);
    }
  }
}

TEST_CASE("kmeans with one cluster returns the mean", "[estimate]") {
  Rng rng(2);
  Matrix x = Matrix::Random(50, 3);
  const auto r = kmeans(x, 1, 7);
  const Vector mean = x.colwise().mean().transpose();
  CHECK((r.centers.row(0).transpose() - mean).norm() < 1e-12);
  const double total = (x.rowwise() - mean.transpose()).squaredNorm();
  CHECK_THAT(r.inertia, WithinRel(total, 1e-12));
}

TEST_CASE("kmeans separates distant clouds", "[estimate]") {
  const auto pool = gen_synthetic(2, 4, {40, 25}, 50.0, 1.0, 3);
  const auto r = kmeans(stack_features(pool), 2, 4);
  const int first = r.assignments[0];
  for (std::size_t i = 0; i < pool.size(); ++i) CHECK((r.assignments[i] == first) == (*pool[i].label == 0));
}

TEST_CASE("kmeans inertia is non-increasing and ends at a Lloyd fixed point", "[estimate][property]") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto counts = make_longtail_counts(5, {ProfileKind::kExponential, 10.0, 80});
    const Matrix x = stack_features(gen_synthetic(5, 6, counts, 3.0, 1.0, seed));
    const auto r = kmeans(x, 5, seed);
    for (std::size_t k = 1; k < r.inertia_history.size(); ++k)
      REQUIRE(r.inertia_history[k] <= r.inertia_history[k - 1] + 1e-9);

    // Centers are the means of their members and every point sits with its nearest center.
    Matrix sums = Matrix::Zero(5, x.cols());
    std::vector<int> sizes(5, 0);
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const int a = r.assignments[i];
      sums.row(a) += x.row(i);
      ++sizes[a];
      const double own = (x.row(i) - r.centers.row(a)).squaredNorm();
      inertia += own;
      REQUIRE(own <= (r.centers.rowwise() - x.row(i)).rowwise().squaredNorm().minCoeff() + 1e-9);
    }
    for (int k = 0; k < 5; ++k) {
      REQUIRE(sizes[k] > 0);
      REQUIRE((sums.row(k) / sizes[k] - r.centers.row(k)).norm() < 1e-9);
    }
    REQUIRE_THAT(r.inertia, WithinAbs(inertia, 1e-8));
  }
}

TEST_CASE("kmeans is deterministic and validates input", "[estimate]") {
  const Matrix x = stack_features(gen_synthetic(3, 4, {30, 20, 10}, 2.0, 1.0, 5));
  const auto a = kmeans(x, 3, 11), b = kmeans(x, 3, 11);
  CHECK(a.assignments == b.assignments);
  CHECK(a.inertia == b.inertia);
  CHECK_THROWS_AS(kmeans(x.topRows(2), 3, 1), InvalidArgument);
  Matrix bad = x;
  bad(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(kmeans(bad, 3, 1), InvalidArgument);
}

TEST_CASE("kmeans repairs empty clusters on duplicated points", "[estimate]") {
  Matrix x = Matrix::Zero(10, 2);
  x.row(9) << 1.0, 1.0;
  const auto r = kmeans(x, 3, 1);
  std::vector<int> sizes(3, 0);
  for (int a : r.assignments) ++sizes[a];
  for (int s : sizes) CHECK(s >= 1);
}

TEST_CASE("cluster frequencies", "[estimate]") {
  CHECK((estimate_distribution({0, 0, 1, 1}, 2).freq - Vector{{0.5, 0.5}}).norm() == 0.0);
  CHECK((estimate_distribution(std::vector<int>(10, 0), 2).freq - Vector{{1.0, 0.0}}).norm() == 0.0);
  std::vector<int> a;
  const int counts[] = {16, 8, 4, 2, 1};
  for (int c = 0; c < 5; ++c) a.insert(a.end(), counts[c], c);
  const Vector f = estimate_distribution(a, 5).freq;
  for (int c = 0; c < 5; ++c) CHECK_THAT(f[c], WithinAbs(counts[c] / 31.0, 1e-15));
}

TEST_CASE("cluster alignment", "[estimate]") {
  // Clusters 0..3; known classes 0, 1; labeled samples sit in clusters 2 and 0.
  std::vector<int> assign;
  assign.insert(assign.end(), 5, 2);  // rows 0-4
  assign.insert(assign.end(), 4, 0);  // rows 5-8
  assign.insert(assign.end(), 3, 1);  // rows 9-11, size 3
  assign.insert(assign.end(), 7, 3);  // rows 12-18, size 7
  const std::vector<std::pair<int, int>> labeled = {{0, 0}, {1, 0}, {5, 1}, {6, 1}};
  const auto map = align_clusters(assign, 4, labeled, 2, 4);
  CHECK(map.cluster_to_class == std::vector<int>{1, 3, 0, 2});

  const auto by_cluster = estimate_distribution(assign, 4);
  const auto aligned = aligned_distribution(by_cluster, map);
  CHECK_THAT(aligned.freq.sum(), WithinAbs(1.0, 1e-15));
  CHECK_THAT(aligned.freq[2], WithinAbs(7.0 / 19.0, 1e-15));

  CHECK_THROWS_AS(align_clusters(assign, 4, {}, 2, 4), InvalidArgument);
  CHECK_THROWS_AS(align_clusters(assign, 3, labeled, 2, 4), InvalidArgument);
}

TEST_CASE("aligned distribution permutations", "[estimate]") {
  const ClassDistribution d{Vector{{0.7, 0.3}}};
  CHECK(aligned_distribution(d, {{0, 1}}).freq == d.freq);
  CHECK((aligned_distribution(d, {{1, 0}}).freq - Vector{{0.3, 0.7}}).norm() == 0.0);
  CHECK_THROWS_AS(aligned_distribution(d, {{0, 0}}), InvalidArgument);
}

TEST_CASE("pure clusters recover the true distribution", "[estimate]") {
  const auto counts = make_longtail_counts(6, {ProfileKind::kExponential, 10.0, 200});
  const auto pool = gen_synthetic(6, 8, counts, 40.0, 1.0, 9);
  const auto split = split_known_novel(pool, 6, 3, 0.5, 9);
  Pool all = split.labeled;
  all.insert(all.end(), split.unlabeled.begin(), split.unlabeled.end());
  std::vector<std::pair<int, int>> labeled;
  for (std::size_t i = 0; i < split.labeled.size(); ++i) labeled.emplace_back(static_cast<int>(i), *split.labeled[i].label);
  const auto round = estimate_class_distribution(stack_features(all), labeled, 3, 6, 2);
  for (int c = 0; c < 6; ++c)
    CHECK_THAT(round.aligned.freq[c], WithinAbs(split.true_counts[c] / static_cast<double>(all.size()), 1e-15));
}

TEST_CASE("flooring keeps every class positive", "[estimate][property]") {
  const ClassDistribution d{Vector{{0.9, 0.1, 0.0}}};
  const auto f = floor_distribution(d, 100);
  CHECK_THAT(f.freq.sum(), WithinAbs(1.0, 1e-15));
  CHECK(f.freq.minCoeff() > 0.0);
  CHECK_THAT(f.freq[2], WithinAbs(0.005 / 1.005, 1e-15));
}
