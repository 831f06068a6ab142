#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "bacon/transfer.hpp"

using namespace bacon;
using Catch::Matchers::WithinAbs;

namespace {

Vector random_simplex(int c, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  Vector p(c);
  for (int k = 0; k < c; ++k) p[k] = e(rng);
  return p / p.sum();
}

}  // namespace

TEST_CASE("debias with a uniform distribution is a plain softmax", "[transfer]") {
  Rng rng(1);
  std::normal_distribution<double> g(0.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 8);
    Vector logits(c);
    for (int k = 0; k < c; ++k) logits[k] = g(rng);
    const Vector uniform = Vector::Constant(c, 1.0 / c);
    REQUIRE((debias(logits, uniform, 0.5) - softmax(logits)).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE((debias(logits, random_simplex(c, rng), 0.0) - softmax(logits)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("debias hand example", "[transfer]") {
  // logits [0, 0], pi = [0.8, 0.2], k = 1 -> softmax([-ln 0.8, -ln 0.2]) = [0.2, 0.8].
  const Vector p = debias(Vector::Zero(2), Vector{{0.8, 0.2}}, 1.0);
  CHECK_THAT(p[0], WithinAbs(0.2, 1e-15));
  CHECK_THAT(p[1], WithinAbs(0.8, 1e-15));
  CHECK_THROWS_AS(debias(Vector::Zero(2), Vector{{1.0, 0.0}}, 1.0), InvalidArgument);
  CHECK_THROWS_AS(debias(Vector{{std::nan(""), 0.0}}, Vector{{0.5, 0.5}}, 1.0), NumericalError);
}

TEST_CASE("debiasing raises tail-class probability", "[transfer][property]") {
  Rng rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 3 + static_cast<int>(rng() % 6);
    Vector logits(c);
    for (int k = 0; k < c; ++k) logits[k] = g(rng);
    const Vector pi = random_simplex(c, rng);
    Eigen::Index tail = 0;
    pi.minCoeff(&tail);
    REQUIRE(debias(logits, pi, 1.0)[tail] >= softmax(logits)[tail] - 1e-15);
  }
}

TEST_CASE("sampling rates", "[transfer]") {
  const Vector pi{{0.5, 0.3, 0.2}};
  const Vector sr = sampling_rates(pi, {0}, 1.0, 0.0);
  CHECK_THAT(sr[0], WithinAbs(0.4, 1e-15));
  CHECK(sr[1] == 1.0);
  CHECK(sr[2] == 1.0);
  const Vector half = sampling_rates(pi, {}, 0.0, 0.5);
  CHECK_THAT(half[1], WithinAbs(std::sqrt(0.2 / 0.3), 1e-15));
  CHECK(half[2] == 1.0);
  CHECK_THROWS_AS(sampling_rates(pi, {}, 1.5, 0.5), InvalidArgument);
}

TEST_CASE("sampling keeps the most confident members per class", "[transfer]") {
  PseudoLabelBatch b;
  b.pred_class = {0, 0, 0, 0, 1, 1};
  b.confidence = {0.9, 0.6, 0.6, 0.95, 0.7, 0.8};
  b.ids = {10, 12, 11, 13, 14, 15};
  b.probs = Matrix::Zero(6, 2);
  const auto out = sample_pseudolabels(b, Vector{{0.5, 0.4}});
  // Class 0: ceil(0.5 * 4) = 2 -> ids 13 (0.95) and 10 (0.9).
  // Class 1: ceil(0.4 * 2) = 1 -> id 15 (0.8).
  CHECK(out.mask == std::vector<char>{1, 0, 0, 1, 0, 1});

  const auto tie = sample_pseudolabels(b, Vector{{0.75, 0.0}});
  // ceil(3) keeps 13, 10 and then the lower id among the 0.6 tie (11 at index 2).
  CHECK(tie.mask == std::vector<char>{1, 0, 1, 1, 0, 0});
}

TEST_CASE("sampling endpoints against a counting oracle", "[transfer][property]") {
  Rng rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + static_cast<int>(rng() % 6), n = 10 + static_cast<int>(rng() % 60);
    Vector pi = random_simplex(c, rng);
    pi = pi.cwiseMax(0.01);
    pi /= pi.sum();
    PseudoLabelBatch b;
    b.probs = Matrix::Zero(n, c);
    for (int i = 0; i < n; ++i) {
      b.pred_class.push_back(static_cast<int>(rng() % c));
      b.confidence.push_back(u(rng));
      b.ids.push_back(i);
    }
    std::set<int> labels;
    for (int k = 0; k < c; ++k)
      if (rng() % 2) labels.insert(k);

    const auto all = sample_pseudolabels(b, sampling_rates(pi, labels, 0.0, 0.0));
    REQUIRE(std::all_of(all.mask.begin(), all.mask.end(), [](char m) { return m == 1; }));

    const auto prop = sample_pseudolabels(b, sampling_rates(pi, labels, 1.0, 1.0));
    std::map<int, int> members, kept;
    for (int i = 0; i < n; ++i) {
      ++members[b.pred_class[i]];
      kept[b.pred_class[i]] += prop.mask[i];
    }
    for (const auto& [cls, m] : members) {
      const double want = pi.minCoeff() / pi[cls] * m;
      REQUIRE(kept[cls] == static_cast<int>(std::ceil(want - 1e-9)));
      REQUIRE(kept[cls] >= want - 1e-9);
      REQUIRE(kept[cls] < want + 1.0);
    }
  }
}

TEST_CASE("positiveness metrics", "[transfer]") {
  const Vector a{{1.0, 0.0, 0.0}}, b{{0.0, 1.0, 0.0}}, h{{0.5, 0.5, 0.0}};
  for (auto m : {Similarity::kDot, Similarity::kCosine, Similarity::kL1, Similarity::kL2}) {
    CHECK_THAT(positiveness(a, a, m), WithinAbs(1.0, 1e-15));
    CHECK_THAT(positiveness(a, b, m), WithinAbs(0.0, 1e-15));
  }
  CHECK_THAT(positiveness(a, h, Similarity::kDot), WithinAbs(0.5, 1e-15));
  CHECK_THAT(positiveness(a, h, Similarity::kCosine), WithinAbs(0.5 / std::sqrt(0.5), 1e-15));
  CHECK_THAT(positiveness(a, h, Similarity::kL1), WithinAbs(0.5, 1e-15));
  CHECK_THAT(positiveness(a, h, Similarity::kL2), WithinAbs(1.0 - std::sqrt(0.5) / std::sqrt(2.0), 1e-15));
  CHECK_THROWS_AS(positiveness(Vector{{0.7, 0.7}}, a.head(2)), InvalidArgument);
  CHECK(parse_similarity("cosine") == Similarity::kCosine);
  CHECK_THROWS_AS(parse_similarity("jaccard"), InvalidArgument);
}

TEST_CASE("dot positiveness is the probability two independent draws agree", "[transfer]") {
  Rng rng(4);
  const Vector p{{0.6, 0.3, 0.1}}, q{{0.2, 0.5, 0.3}};
  std::discrete_distribution<int> dp(p.data(), p.data() + 3), dq(q.data(), q.data() + 3);
  const int draws = 400000;
  int agree = 0;
  for (int t = 0; t < draws; ++t) agree += dp(rng) == dq(rng);
  const double expected = positiveness(p, q, Similarity::kDot);
  const double sigma = std::sqrt(expected * (1 - expected) / draws);
  CHECK(std::abs(agree / static_cast<double>(draws) - expected) < 4.0 * sigma);
}

TEST_CASE("positiveness matrices", "[transfer][property]") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 8), c = 2 + static_cast<int>(rng() % 4);
    Matrix probs(n, c);
    for (int i = 0; i < n; ++i) probs.row(i) = random_simplex(c, rng).transpose();
    for (auto m : {Similarity::kDot, Similarity::kCosine, Similarity::kL1, Similarity::kL2}) {
      const Matrix w = build_positiveness_matrix(probs, m);
      REQUIRE(w.diagonal().norm() == 0.0);
      REQUIRE((w.array() >= 0.0).all());
      REQUIRE((w.array() <= 1.0).all());
      REQUIRE((w - w.transpose()).cwiseAbs().maxCoeff() < 1e-15);
    }
    const Matrix hard = hard_positiveness_matrix(probs);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) {
        const bool same = i != j && argmax(probs.row(i).transpose()) == argmax(probs.row(j).transpose());
        REQUIRE(hard(i, j) == (same ? 1.0 : 0.0));
      }
  }
  // One-hot rows make soft and hard weights coincide.
  Matrix onehot(4, 3);
  onehot << one_hot(0, 3).transpose(), one_hot(1, 3).transpose(), one_hot(0, 3).transpose(), one_hot(2, 3).transpose();
  CHECK(build_positiveness_matrix(onehot) == hard_positiveness_matrix(onehot));
}

TEST_CASE("pseudo-label batch", "[transfer]") {
  const Matrix logits{{2.0, 0.0}, {0.0, 0.1}};
  const auto b = make_pseudolabels(logits, Vector{{0.5, 0.5}}, 0.5, {7, 8});
  CHECK(b.pred_class == std::vector<int>{0, 1});
  CHECK_THAT(b.confidence[0], WithinAbs(softmax(logits.row(0).transpose())[0], 1e-15));
  CHECK(b.mask == std::vector<char>{0, 0});
  CHECK_THROWS_AS(make_pseudolabels(logits, Vector{{0.5, 0.5}}, 0.5, {1}), InvalidArgument);
}
