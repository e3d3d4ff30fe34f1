// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <limits>

#include "kdcal/error.hpp"
#include "kdcal/train.hpp"
#include "oracles.hpp"

using namespace kdcal;

namespace {

const ModelSpec kProbe{Arch::mlp_probe, 2, 1.0, {1, 2, 2}, 3};

Gradients constant_grads(const Model& m, double v) {
  Gradients g = zero_gradients(m);
  for (Tensor& t : g) t.fill(v);
  return g;
}

void fill_params(Model& m, double v) {
  for (Tensor& t : m.mutable_parameters()) t.fill(v);
}

struct Toy {
  Dataset train;
  Dataset val;
};

Toy toy_data() {
  Toy t;
  t.train = make_synthetic(3, 16, {3, 8, 8}, 11);
  t.val = make_synthetic(3, 6, {3, 8, 8}, 12);
  return t;
}

TrainConfig toy_config(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 16;
  c.lr0 = 0.05;
  c.schedule = Schedule{ScheduleKind::cosine, epochs == 0 ? 1 : epochs, {}, 0.1, 0.0};
  c.seed = 5;
  return c;
}

const ModelSpec kStudent{Arch::tiny_student, 3, 0.5, {3, 8, 8}, 4};

bool same_parameters(const Model& a, const Model& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    if (!bitwise_equal(a.parameters()[i], b.parameters()[i])) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("train") {
  TEST_CASE("momentum SGD with weight decay follows the recurrence") {
    Model m = build_model(kProbe);
    fill_params(m, 1.0);
    OptimizerState opt = make_optimizer(m, 0.9, 0.1);
    const Gradients g = constant_grads(m, 0.5);
    // step 1: g' = 0.5 + 0.1 = 0.6, v = 0.6, theta = 1 - 0.06 = 0.94
    sgd_step(m, g, opt, 0.1);
    CHECK(m.parameters()[0][0] == doctest::Approx(0.94).epsilon(1e-15));
    // step 2: g' = 0.5 + 0.094 = 0.594, v = 0.54 + 0.594 = 1.134, theta = 0.94 - 0.1134
    sgd_step(m, g, opt, 0.1);
    for (const Tensor& t : m.parameters()) {
      for (double v : t.values()) CHECK(v == doctest::Approx(0.8266).epsilon(1e-14));
    }
  }

  TEST_CASE("two momentum steps on a scalar") {
    Model m = build_model(kProbe);
    fill_params(m, 1.0);
    OptimizerState opt = make_optimizer(m, 0.9, 0.0);
    const Gradients g = constant_grads(m, 1.0);
    sgd_step(m, g, opt, 0.1);
    sgd_step(m, g, opt, 0.1);
    // 1 - 0.1 - 0.1 * 1.9, evaluated in the same order as the update
    const double expected = (1.0 - 0.1 * 1.0) - 0.1 * (0.9 * 1.0 + 1.0);
    for (const Tensor& t : m.parameters()) {
      for (double v : t.values()) CHECK(v == expected);
    }
    CHECK(expected == doctest::Approx(0.71).epsilon(1e-15));
  }

  TEST_CASE("without momentum or decay the step is plain gradient descent") {
    Model m = build_model(kProbe);
    const Model before = m;
    OptimizerState opt = make_optimizer(m, 0.0, 0.0);
    Rng rng(9);
    Gradients g = zero_gradients(m);
    for (Tensor& t : g) t = oracle::random_tensor(t.shape(), rng, 1.0);
    sgd_step(m, g, opt, 0.25);
    for (std::size_t p = 0; p < g.size(); ++p) {
      for (std::size_t i = 0; i < g[p].size(); ++i) {
        CHECK(m.parameters()[p][i] == before.parameters()[p][i] - 0.25 * g[p][i]);
      }
    }
  }

  TEST_CASE("non-finite gradients leave the model untouched") {
    Model m = build_model(kProbe);
    const Model before = m;
    OptimizerState opt = make_optimizer(m, 0.9, 5e-4);
    Gradients g = constant_grads(m, 0.1);
    g.back()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sgd_step(m, g, opt, 0.1), NumericError);
    CHECK(same_parameters(m, before));
    for (const Tensor& v : opt.velocity) {
      for (double x : v.values()) CHECK(x == 0.0);
    }
  }

  TEST_CASE("cosine schedule endpoints") {
    const Schedule s{ScheduleKind::cosine, 240, {}, 0.1, 0.0};
    CHECK(lr_at(s, 0, 0.1) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(lr_at(s, 120, 0.1) == doctest::Approx(0.05).epsilon(1e-14));
    CHECK(std::abs(lr_at(s, 240, 0.1)) < 1e-15);
    for (std::size_t e = 1; e <= 240; ++e) CHECK(lr_at(s, e, 0.1) <= lr_at(s, e - 1, 0.1));
    const Schedule floor{ScheduleKind::cosine, 10, {}, 0.1, 0.001};
    CHECK(lr_at(floor, 10, 0.1) == doctest::Approx(0.001).epsilon(1e-13));
    CHECK_THROWS_AS(lr_at(s, 241, 0.1), UsageError);
  }

  TEST_CASE("multistep schedule decays at the milestones") {
    const Schedule s{ScheduleKind::multistep, 240, {150, 180}, 0.1, 0.0};
    CHECK(lr_at(s, 0, 0.1) == 0.1);
    CHECK(lr_at(s, 149, 0.1) == 0.1);
    CHECK(lr_at(s, 150, 0.1) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(lr_at(s, 179, 0.1) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(lr_at(s, 180, 0.1) == doctest::Approx(0.001).epsilon(1e-15));
    CHECK(lr_at(Schedule{ScheduleKind::constant, 1, {}, 0.1, 0.0}, 99, 0.3) == 0.3);
    CHECK_THROWS_AS(validate(Schedule{ScheduleKind::multistep, 240, {180, 150}, 0.1, 0.0}), ConfigError);
  }

  TEST_CASE("zero epochs returns the initialization") {
    const Toy d = toy_data();
    const TrainResult r = train_teacher(kStudent, d.train, d.val, toy_config(0));
    CHECK(r.record.epochs.empty());
    CHECK(r.record.best_epoch == 0);
    CHECK(same_parameters(r.model, build_model(kStudent)));
    CHECK(r.model.mode() == Mode::eval);
  }

  TEST_CASE("training is deterministic and the loss goes down") {
    const Toy d = toy_data();
    const TrainResult a = train_teacher(kStudent, d.train, d.val, toy_config(6));
    const TrainResult b = train_teacher(kStudent, d.train, d.val, toy_config(6));
    CHECK(same_parameters(a.model, b.model));
    REQUIRE(a.record.epochs.size() == 6);
    for (std::size_t e = 0; e < 6; ++e) {
      CHECK(a.record.epochs[e].train_loss == b.record.epochs[e].train_loss);
      CHECK(a.record.epochs[e].epoch == e + 1);
    }
    CHECK(a.record.epochs.back().train_loss < a.record.epochs.front().train_loss);
    CHECK(a.record.best_epoch >= 1);
    double best = 0.0;
    for (const EpochRecord& e : a.record.epochs) best = std::max(best, e.val_accuracy);
    CHECK(a.record.best_val_accuracy == best);
    CHECK(evaluate(a.model, d.val).accuracy == best);
  }

  TEST_CASE("alpha 0 without augmentation reduces to cross-entropy training") {
    const Toy d = toy_data();
    const TrainResult t = train_teacher({Arch::tiny_teacher, 3, 0.25, {3, 8, 8}, 2}, d.train, d.val, toy_config(1));
    const TrainResult plain = train_teacher(kStudent, d.train, d.val, toy_config(3));
    DistillSpec ds;
    ds.alpha = 0.0;
    const TrainResult kd = distill(t.model, kStudent, d.train, d.val, ds, toy_config(3));
    CHECK(same_parameters(plain.model, kd.model));
    for (std::size_t e = 0; e < 3; ++e) CHECK(kd.record.epochs[e].aug_component == plain.record.epochs[e].train_loss);
  }

  TEST_CASE("a student that already matches the teacher gets no KL gradient") {
    const Toy d = toy_data();
    Model teacher = build_model(kStudent);
    teacher.set_normalization(compute_normalization(d.train));
    DistillSpec ds;
    ds.alpha = 1.0;
    TrainConfig cfg = toy_config(2);
    cfg.weight_decay = 0.0;
    const TrainResult r = distill(teacher, kStudent, d.train, d.val, ds, cfg);
    CHECK(same_parameters(r.model, teacher));
    for (const EpochRecord& e : r.record.epochs) CHECK(std::abs(e.kd_component) < 1e-15);
  }

  TEST_CASE("every distiller and augmentation trains end to end") {
    const Toy d = toy_data();
    const TrainResult t = train_teacher({Arch::tiny_teacher, 3, 0.25, {3, 8, 8}, 2}, d.train, d.val, toy_config(1));
    for (Distiller k : {Distiller::scaled_kd, Distiller::rkd_da}) {
      for (Augmentation a : {Augmentation::none, Augmentation::mixup, Augmentation::cutout, Augmentation::cutmix}) {
        DistillSpec ds;
        ds.distiller = k;
        ds.augmentation = a;
        ds.cutout_size = 4;
        const TrainResult r = distill(t.model, kStudent, d.train, d.val, ds, toy_config(2));
        REQUIRE(r.record.epochs.size() == 2);
        CHECK(std::isfinite(r.record.epochs.back().train_loss));
        REQUIRE(r.record.distill.has_value());
        CHECK(*r.record.distill == ds);
      }
    }
  }

  TEST_CASE("the teacher stays frozen and batch losses decompose") {
    const Toy d = toy_data();
    const TrainResult t = train_teacher({Arch::tiny_teacher, 3, 0.25, {3, 8, 8}, 2}, d.train, d.val, toy_config(1));
    const Model before = t.model;
    DistillSpec ds;
    ds.augmentation = Augmentation::cutmix;
    ds.alpha = 0.3;
    ds.cutmix_p = 1.0;
    TrainConfig cfg = toy_config(2);
    std::size_t batches = 0;
    double worst = 0.0;
    cfg.on_batch = [&](const BatchLog& b) {
      ++batches;
      worst = std::max(worst, std::abs(b.loss - (0.3 * b.kd + 0.7 * b.aug)));
    };
    distill(t.model, kStudent, d.train, d.val, ds, cfg);
    CHECK(same_parameters(before, t.model));
    CHECK(batches == 2 * (d.train.size() / 16));
    CHECK(worst <= 1e-15);
  }

  TEST_CASE("a shared teacher cache changes nothing but the work done") {
    const Toy d = toy_data();
    const TrainResult t = train_teacher({Arch::tiny_teacher, 3, 0.25, {3, 8, 8}, 2}, d.train, d.val, toy_config(1));
    TeacherCache cache;
    for (Distiller k : {Distiller::scaled_kd, Distiller::rkd_da}) {
      for (Augmentation a : {Augmentation::none, Augmentation::mixup, Augmentation::cutmix}) {
        CAPTURE(static_cast<int>(k));
        CAPTURE(static_cast<int>(a));
        DistillSpec ds;
        ds.distiller = k;
        ds.augmentation = a;
        const TrainResult plain = distill(t.model, kStudent, d.train, d.val, ds, toy_config(2));
        const TrainResult cached = distill(t.model, kStudent, d.train, d.val, ds, toy_config(2), &cache);
        CHECK(same_parameters(plain.model, cached.model));
        CHECK(plain.record.epochs.back().train_loss == cached.record.epochs.back().train_loss);
      }
    }
    // Each distiller sees 6 distinct batches; the other two augmentations replay them.
    CHECK(cache.size() == 12);
    CHECK(cache.hits() == 24);

    // A different seed reshuffles, so nothing stale is served.
    TrainConfig other = toy_config(2);
    other.seed = 6;
    const TrainResult plain = distill(t.model, kStudent, d.train, d.val, DistillSpec{}, other);
    const TrainResult cached = distill(t.model, kStudent, d.train, d.val, DistillSpec{}, other, &cache);
    CHECK(same_parameters(plain.model, cached.model));
    CHECK(cache.size() == 18);
  }

  TEST_CASE("invalid configurations are rejected") {
    const Toy d = toy_data();
    TrainConfig c = toy_config(1);
    c.batch_size = 0;
    CHECK_THROWS_AS(train_teacher(kStudent, d.train, d.val, c), ConfigError);
    c = toy_config(1);
    c.lr0 = -1.0;
    CHECK_THROWS_AS(train_teacher(kStudent, d.train, d.val, c), ConfigError);
    const Dataset wrong = make_synthetic(3, 4, {3, 16, 16}, 1);
    CHECK_THROWS_AS(train_teacher(kStudent, wrong, wrong, toy_config(1)), ConfigError);
    CHECK_THROWS_AS(evaluate(build_model(kStudent), wrong), ConfigError);
    const Model other = build_model({Arch::tiny_teacher, 4, 0.25, {3, 8, 8}, 1});
    CHECK_THROWS_AS(distill(other, kStudent, d.train, d.val, DistillSpec{}, toy_config(1)), ConfigError);
  }
}
