#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>

#include "bacon/data.hpp"

using namespace bacon;
using Catch::Matchers::WithinAbs;

TEST_CASE("long-tail counts follow the exponential profile", "[data]") {
  const auto counts = make_longtail_counts(10, {ProfileKind::kExponential, 100.0, 500});
  REQUIRE(counts.size() == 10);
  CHECK(counts.front() == 500);
  CHECK(counts.back() == 5);
  // Independent evaluation of n_max * rho^(-c/(C-1)).
  for (int c = 0; c < 10; ++c) CHECK(counts[c] == static_cast<int>(std::lround(500.0 * std::pow(100.0, -c / 9.0))));
}

TEST_CASE("CIFAR-100-LT sized profile", "[data]") {
  // C = 100, rho = 100, head 500: about 10.8K samples (10899 rounded, 10847 floored).
  const auto counts = make_longtail_counts(100, {ProfileKind::kExponential, 100.0, 500});
  long total = 0, oracle = 0;
  for (int n : counts) total += n;
  for (int c = 0; c < 100; ++c) oracle += std::lround(500.0 * std::pow(100.0, -c / 99.0));
  CHECK(total == oracle);
  CHECK(total == 10899);
  CHECK(std::abs(total - 10800) < 108);

  // 80 known classes with half of each labeled lands near a 3.8K / 6.0K labeled / unlabeled split.
  Pool pool;
  std::int64_t id = 0;
  for (int c = 0; c < 100; ++c)
    for (int i = 0; i < counts[c]; ++i) pool.push_back({id++, Eigen::VectorXd::Zero(2), c});
  const auto split = split_known_novel(pool, 100, 80, 0.5, 3);
  CHECK(split.labeled.size() + split.unlabeled.size() == 10899u);
  CHECK(std::abs(static_cast<double>(split.labeled.size()) - 3800.0) < 0.2 * 3800.0);
  CHECK(std::abs(static_cast<double>(split.unlabeled.size()) - 6000.0) < 0.2 * 6000.0);
}

TEST_CASE("pareto profile hits both endpoints", "[data]") {
  const auto counts = make_longtail_counts(50, {ProfileKind::kPareto, 256.0, 1280});
  CHECK(counts.front() == 1280);
  CHECK(counts.back() == 5);
  for (std::size_t c = 1; c < counts.size(); ++c) CHECK(counts[c] <= counts[c - 1]);
}

TEST_CASE("count profiles are non-increasing with ratio near rho", "[data][property]") {
  Rng rng(7);
  std::uniform_int_distribution<int> classes(2, 120);
  std::uniform_real_distribution<double> rho(1.0, 200.0);
  std::uniform_int_distribution<int> head(200, 3000);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = classes(rng);
    const double r = rho(rng);
    const int n = head(rng);
    for (auto kind : {ProfileKind::kExponential, ProfileKind::kPareto}) {
      const auto counts = make_longtail_counts(c, {kind, r, n});
      for (std::size_t k = 1; k < counts.size(); ++k) REQUIRE(counts[k] <= counts[k - 1]);
      const double tail = counts.back();
      const double ratio = counts.front() / tail;
      REQUIRE(ratio >= r * (1.0 - 2.0 / tail));
      REQUIRE(ratio <= r * (1.0 + 2.0 / tail));
    }
  }
}

TEST_CASE("balanced profile and argument errors", "[data]") {
  const auto counts = make_longtail_counts(4, {ProfileKind::kExponential, 1.0, 30});
  CHECK(counts == std::vector<int>{30, 30, 30, 30});
  CHECK_THROWS_AS(make_longtail_counts(1, {ProfileKind::kExponential, 10.0, 100}), InvalidArgument);
  CHECK_THROWS_AS(make_longtail_counts(5, {ProfileKind::kExponential, 0.5, 100}), InvalidArgument);
  CHECK_THROWS_AS(make_longtail_counts(5, {ProfileKind::kExponential, 10.0, 5}), InvalidArgument);
}

TEST_CASE("well separated synthetic classes are nearest-mean separable", "[data]") {
  auto rng = make_rng(11, {kStreamClassMeans});
  const auto means = make_class_means(3, 8, 10.0, rng);
  auto srng = make_rng(11, {kStreamSamples});
  const Pool pool = sample_pool(means, {100, 10, 1}, 1.0, srng);
  REQUIRE(pool.size() == 111);
  int correct = 0;
  for (const auto& s : pool) {
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if ((s.features - means.row(c).transpose()).squaredNorm() < (s.features - means.row(best).transpose()).squaredNorm())
        best = c;
    correct += best == *s.label;
  }
  CHECK(correct / 111.0 > 0.99);
}

TEST_CASE("class means keep the requested minimum separation", "[data]") {
  for (int c : {3, 10, 40}) {
    auto rng = make_rng(5, {kStreamClassMeans});
    const auto means = make_class_means(c, 16, 4.0, rng);
    double closest = 1e300;
    for (int a = 0; a < c; ++a)
      for (int b = a + 1; b < c; ++b) closest = std::min(closest, (means.row(a) - means.row(b)).norm());
    CHECK_THAT(closest, WithinAbs(4.0, 1e-9));
  }
}

TEST_CASE("zero noise places every sample on its class mean", "[data]") {
  const auto pool = gen_synthetic(4, 5, {3, 3, 2, 1}, 3.0, 0.0, 9);
  auto rng = make_rng(9, {kStreamClassMeans});
  const auto means = make_class_means(4, 5, 3.0, rng);
  for (const auto& s : pool) CHECK((s.features - means.row(*s.label).transpose()).norm() == 0.0);
}

TEST_CASE("generators are deterministic in the seed", "[data]") {
  SyntheticConfig cfg;
  cfg.n_max = 60;
  const auto a = make_synthetic_dataset(cfg);
  const auto b = make_synthetic_dataset(cfg);
  std::ostringstream sa, sb;
  save_embeddings(sa, a.train.labeled);
  save_embeddings(sa, a.train.unlabeled);
  save_embeddings(sa, a.test);
  save_embeddings(sb, b.train.labeled);
  save_embeddings(sb, b.train.unlabeled);
  save_embeddings(sb, b.test);
  CHECK(sa.str() == sb.str());
  cfg.seed = 2;
  const auto c = make_synthetic_dataset(cfg);
  CHECK(c.train.labeled.front().features != a.train.labeled.front().features);
}

TEST_CASE("known/novel split conserves samples and never labels novel classes", "[data][property]") {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const int classes = 2 + static_cast<int>(rng() % 12);
    const int known = static_cast<int>(rng() % (classes + 1));
    const auto counts = make_longtail_counts(classes, {ProfileKind::kExponential, 10.0, 40});
    const auto pool = gen_synthetic(classes, 4, counts, 3.0, 1.0, trial);
    const double ratio = (1 + rng() % 10) / 10.0;
    const auto split = split_known_novel(pool, classes, known, ratio, trial);
    REQUIRE(split.size() == pool.size());
    REQUIRE(split.unlabeled_truth.size() == split.unlabeled.size());
    std::set<std::int64_t> ids;
    for (const auto& s : split.labeled) {
      REQUIRE(s.label);
      REQUIRE(*s.label < known);
      ids.insert(s.id);
    }
    for (const auto& s : split.unlabeled) {
      REQUIRE_FALSE(s.label);
      ids.insert(s.id);
    }
    REQUIRE(ids.size() == pool.size());
    long total = 0;
    for (int n : split.true_counts) total += n;
    REQUIRE(total == static_cast<long>(pool.size()));
    // Per known class, floor(ratio * n) labeled.
    std::vector<int> labeled(classes, 0);
    for (const auto& s : split.labeled) ++labeled[*s.label];
    for (int c = 0; c < known; ++c)
      REQUIRE(labeled[c] == static_cast<int>(std::floor(ratio * split.true_counts[c] + 1e-9)));
  }
}

TEST_CASE("class map puts known classes first in source order", "[data]") {
  const auto map = known_novel_class_map(10, 4, 21);
  std::vector<int> known_src, novel_src;
  for (int src = 0; src < 10; ++src) (map[src] < 4 ? known_src : novel_src).push_back(src);
  REQUIRE(known_src.size() == 4);
  for (std::size_t i = 0; i < known_src.size(); ++i) CHECK(map[known_src[i]] == static_cast<int>(i));
  for (std::size_t i = 0; i < novel_src.size(); ++i) CHECK(map[novel_src[i]] == static_cast<int>(4 + i));
}

TEST_CASE("unequal labeled and unlabeled imbalance ratios", "[data]") {
  SyntheticConfig cfg;
  cfg.rho_l = 100.0;
  cfg.rho_u = 20.0;
  cfg.n_max = 200;
  const auto d = make_synthetic_dataset(cfg);
  std::vector<int> unl(cfg.num_classes, 0);
  for (int y : d.train.unlabeled_truth) ++unl[y];
  // Novel classes are entirely unlabeled, so their counts come from the rho_u profile.
  const auto counts_u = make_longtail_counts(cfg.num_classes, {cfg.profile, cfg.rho_u, cfg.n_max});
  std::multiset<int> expected(counts_u.begin(), counts_u.end());
  for (int c = cfg.num_known; c < cfg.num_classes; ++c) CHECK(expected.count(unl[c]) > 0);
  std::set<std::int64_t> ids;
  for (const auto& s : d.train.labeled) ids.insert(s.id);
  for (const auto& s : d.train.unlabeled) ids.insert(s.id);
  CHECK(ids.size() == d.train.size());
}

TEST_CASE("embedding CSV round trip", "[data]") {
  SyntheticConfig cfg;
  cfg.n_max = 20;
  const auto d = make_synthetic_dataset(cfg);
  Pool pool = d.train.labeled;
  pool.insert(pool.end(), d.train.unlabeled.begin(), d.train.unlabeled.end());
  std::stringstream ss;
  save_embeddings(ss, pool);
  const Pool back = load_embeddings(ss, cfg.num_classes);
  REQUIRE(back.size() == pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    CHECK(back[i].id == pool[i].id);
    CHECK(back[i].label == pool[i].label);
    CHECK((back[i].features - pool[i].features).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("embedding CSV parsing", "[data]") {
  std::istringstream ok("id,label,f0,f1,f2,f3\n1,0,1,2,3,4\n2,-1,0.5,0,0,0\n3,2,1e-3,2,3,4\n");
  const auto pool = load_embeddings(ok, 3);
  REQUIRE(pool.size() == 3);
  CHECK(pool[0].features.size() == 4);
  CHECK_FALSE(pool[1].label);
  CHECK(*pool[2].label == 2);

  auto fails_on_line = [](const std::string& text, std::size_t line) {
    std::istringstream is(text);
    try {
      load_embeddings(is, 3);
    } catch (const ParseError& e) {
      return e.line() == line;
    }
    return false;
  };
  CHECK(fails_on_line("id,label,f0\n1,0,1\n2,0,1,2\n", 3));
  CHECK(fails_on_line("id,label,f0\n1,0,abc\n", 2));
  CHECK(fails_on_line("id,label,f0\n1,5,1\n", 2));
  CHECK(fails_on_line("id,label,f0\n1,-2,1\n", 2));
  CHECK(fails_on_line("id,label,f0\n1,0,nan\n", 2));
  CHECK(fails_on_line("id,lbl,f0\n", 1));
  CHECK(fails_on_line("", 1));
  CHECK_THROWS_AS(load_embeddings(std::string("/nonexistent/file.csv")), IoError);
}
