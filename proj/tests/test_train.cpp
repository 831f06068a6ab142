#include <catch_amalgamated.hpp>

#include <set>

#include "bacon/train.hpp"

using namespace bacon;
using Catch::Matchers::WithinAbs;

namespace {

SyntheticDataset small_data(std::uint64_t seed = 3) {
  SyntheticConfig c;
  c.num_classes = 4;
  c.num_known = 2;
  c.dim = 6;
  c.n_max = 40;
  c.rho_l = c.rho_u = 4.0;
  c.test_per_class = 10;
  c.seed = seed;
  return make_synthetic_dataset(c);
}

ModelConfig small_model() {
  ModelConfig m;
  m.d_hidden = 0;
  m.d_feat = 8;
  m.proj_hidden = 0;
  m.d_proj = 8;
  return m;
}

TrainConfig small_train() {
  TrainConfig t;
  t.schedule.total_epochs = 6;
  t.schedule.warmup_epochs = 2;
  t.schedule.batch_size = 16;
  t.schedule.base_lr = 0.05;
  t.temperature = 0.2;
  t.reestimate_interval = 3;
  t.seed = 11;
  return t;
}

bool block_is_zero(const Model& m, Block which) {
  bool zero = true;
  for_each_tensor(m, [&](const std::string&, Block b, const auto& t) {
    if (b == which) zero = zero && t.isZero(0.0);
  });
  return zero;
}

}  // namespace

TEST_CASE("masked SGD steps leave other blocks untouched", "[train]") {
  Model m = init_model(small_model(), 1);
  const Model before = m;
  Model g = m;  // any non-zero gradient
  Sgd opt(m, 0.9, 1e-3);
  opt.step(m, g, 0.1, kEncoder | kClassifier);
  CHECK(m.projector.layers[0].weight == before.projector.layers[0].weight);
  CHECK(m.projector.layers[0].bias == before.projector.layers[0].bias);
  CHECK(m.classifier != before.classifier);
  CHECK(block_is_zero(opt.velocity(), kProjector));
}

TEST_CASE("each branch only moves its own head", "[train]") {
  const auto data = small_data();
  Trainer t(data.train, small_model(), small_train());
  t.run_epoch();
  CHECK(block_is_zero(t.state().cls_velocity, kProjector));
  CHECK_FALSE(block_is_zero(t.state().cls_velocity, kClassifier));
  CHECK(block_is_zero(t.state().con_velocity, kClassifier));
  CHECK_FALSE(block_is_zero(t.state().con_velocity, kProjector));
}

TEST_CASE("batches cover every item once in proportion", "[train][property]") {
  for (std::size_t nl : {0u, 1u, 7u, 40u, 100u}) {
    for (std::size_t nu : {0u, 5u, 33u, 200u}) {
      if (nl + nu < 2) continue;
      for (int epoch = 0; epoch < 3; ++epoch) {
        const auto batches = make_batches(nl, nu, 16, 5, epoch);
        std::set<int> seen_l, seen_u;
        for (const auto& b : batches) {
          REQUIRE(!b.empty());
          REQUIRE(b.size() <= 16);
          std::size_t lab = 0;
          for (const auto& it : b) {
            if (it.labeled) {
              ++lab;
              REQUIRE(seen_l.insert(it.index).second);
            } else {
              REQUIRE(seen_u.insert(it.index).second);
            }
          }
          const double expected = static_cast<double>(b.size()) * nl / (nl + nu);
          REQUIRE(std::abs(static_cast<double>(lab) - expected) <= 1.0 + 1e-12);
        }
        REQUIRE(seen_l.size() == nl);
        REQUIRE(seen_u.size() == nu);
      }
    }
  }
  CHECK_THROWS_AS(make_batches(3, 3, 1, 0, 0), InvalidArgument);
}

TEST_CASE("telemetry composites match their parts", "[train]") {
  const auto data = small_data();
  TrainConfig cfg = small_train();
  cfg.weights = {0.7, 0.3, 1.5, 0.4};
  Trainer t(data.train, small_model(), cfg);
  t.run();
  REQUIRE(t.state().telemetry.size() == 6);
  for (const auto& e : t.state().telemetry) {
    CHECK_THAT(e.l_cls, WithinAbs(e.l_s + 0.7 * e.l_u + 0.3 * e.l_reg, 1e-9));
    CHECK_THAT(e.l_con, WithinAbs(e.l_cl_u + 1.5 * e.l_cl_s + 0.4 * e.l_cl_soft, 1e-9));
    CHECK(e.soft_active == (e.epoch >= 2));
    if (!e.soft_active) {
      CHECK(e.l_cl_soft == 0.0);
      CHECK(e.sampled_fraction == 0.0);
    }
    CHECK(e.sampled_fraction >= 0.0);
    CHECK(e.sampled_fraction <= 1.0);
  }
}

TEST_CASE("estimated distribution only changes at estimation epochs", "[train]") {
  const auto data = small_data();
  Trainer t(data.train, small_model(), small_train());
  t.run();
  const auto& tel = t.state().telemetry;
  CHECK(t.estimation_rounds().size() == 2);
  for (std::size_t e = 0; e < tel.size(); ++e) {
    CHECK(tel[e].estimated == (e % 3 == 0));
    CHECK_THAT(tel[e].pi_e.sum(), WithinAbs(1.0, 1e-12));
    CHECK(tel[e].pi_e.minCoeff() > 0.0);
    if (!tel[e].estimated) CHECK(tel[e].pi_e == tel[e - 1].pi_e);
  }
}

TEST_CASE("training is deterministic and resumable", "[train]") {
  const auto data = small_data();
  Trainer a(data.train, small_model(), small_train());
  Trainer b(data.train, small_model(), small_train());
  a.run();
  b.run();
  CHECK(flatten(a.state().model) == flatten(b.state().model));

  // Resume after epoch 4 from a copy of the state.
  Trainer c(data.train, small_model(), small_train());
  for (int e = 0; e < 4; ++e) c.run_epoch();
  TrainState saved = c.state();
  Trainer d(data.train, small_model(), small_train());
  d.restore(saved);
  d.run();
  CHECK(flatten(d.state().model) == flatten(a.state().model));
  CHECK(flatten(d.state().cls_velocity) == flatten(a.state().cls_velocity));
  CHECK(d.state().telemetry.back().l_con == a.state().telemetry.back().l_con);

  TrainConfig other = small_train();
  other.seed = 12;
  Trainer e(data.train, small_model(), other);
  e.run();
  CHECK(flatten(e.state().model) != flatten(a.state().model));
}

TEST_CASE("fully labeled split trains with no unlabeled pool", "[train]") {
  SyntheticConfig c;
  c.num_classes = 3;
  c.num_known = 3;
  c.dim = 4;
  c.n_max = 20;
  c.rho_l = c.rho_u = 1.0;
  c.labeled_ratio = 1.0;
  c.test_per_class = 5;
  const auto data = make_synthetic_dataset(c);
  REQUIRE(data.train.unlabeled.empty());
  TrainConfig cfg = small_train();
  cfg.schedule.total_epochs = 3;
  Trainer t(data.train, small_model(), cfg);
  t.run();
  CHECK(t.state().telemetry.back().l_u == 0.0);
}

TEST_CASE("invalid configs are rejected", "[train]") {
  const auto data = small_data();
  TrainConfig cfg = small_train();
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(Trainer(data.train, small_model(), cfg), InvalidArgument);
  cfg = small_train();
  cfg.reestimate_interval = 0;
  CHECK_THROWS_AS(Trainer(data.train, small_model(), cfg), InvalidArgument);
  cfg = small_train();
  cfg.schedule.warmup_epochs = 7;
  CHECK_THROWS_AS(Trainer(data.train, small_model(), cfg), InvalidArgument);
}
