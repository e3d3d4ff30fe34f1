// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kdcal/calibration.hpp"
#include "kdcal/error.hpp"
#include "oracles.hpp"

using namespace kdcal;

namespace {

PredictionSet make_set(const std::vector<double>& conf, const std::vector<int>& correct) {
  PredictionSet p;
  for (std::size_t i = 0; i < conf.size(); ++i) {
    p.confidences.push_back(conf[i]);
    p.predicted.push_back(1);
    p.actual.push_back(correct[i] ? 1 : 0);
  }
  return p;
}

}  // namespace

TEST_SUITE("calibration") {
  TEST_CASE("hand-computed reports") {
    const CalibrationReport r = calibration_report(make_set({0.3, 0.4, 0.8, 0.9}, {1, 0, 1, 1}), 2);
    CHECK(r.bins[0].count == 2);
    CHECK(r.bins[0].confidence == doctest::Approx(0.35).epsilon(1e-15));
    CHECK(r.bins[0].accuracy == 0.5);
    CHECK(r.bins[1].count == 2);
    CHECK(r.bins[1].confidence == doctest::Approx(0.85).epsilon(1e-15));
    CHECK(r.bins[1].accuracy == 1.0);
    CHECK(r.ece == doctest::Approx(0.15).epsilon(1e-14));
    CHECK(r.oe == 0.0);

    const CalibrationReport s = calibration_report(make_set({0.9, 0.9}, {1, 0}), 1);
    CHECK(s.ece == doctest::Approx(0.4).epsilon(1e-14));
    CHECK(s.oe == doctest::Approx(0.36).epsilon(1e-14));
  }

  TEST_CASE("bin edges are right-inclusive and zero goes to the first bin") {
    const CalibrationReport r = calibration_report(make_set({0.0, 0.5, 0.5000001, 1.0}, {1, 1, 1, 1}), 2);
    CHECK(r.bins[0].count == 2);
    CHECK(r.bins[1].count == 2);
    CHECK(r.bin_edges.size() == 3);
    CHECK_THROWS_AS(calibration_report(make_set({1.5}, {1}), 2), InputError);
    CHECK_THROWS_AS(calibration_report(make_set({0.5}, {1}), 0), ConfigError);
  }

  TEST_CASE("perfect calibration and empty bins") {
    // Bin (0.5, 0.6]: confidence 0.55 with accuracy 0.55 needs 20 samples, 11 right.
    std::vector<double> conf(20, 0.55);
    std::vector<int> correct(20, 0);
    for (int i = 0; i < 11; ++i) correct[static_cast<std::size_t>(i)] = 1;
    const CalibrationReport r = calibration_report(make_set(conf, correct), 10);
    CHECK(r.ece == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(std::abs(r.ece) < 1e-15);
    CHECK(std::abs(r.oe) < 1e-15);
    CHECK(r.bins.size() == 10);
    CHECK(r.bins[0].count == 0);
    CHECK(r.bins[0].accuracy == 0.0);
    CHECK(r.bins[0].confidence == 0.0);
  }

  TEST_CASE("matches the brute-force oracle on random prediction sets") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 1 + rng.uniform_index(10000);
      std::vector<double> conf(n);
      std::vector<int> correct(n);
      for (std::size_t i = 0; i < n; ++i) {
        conf[i] = rng.uniform_index(10) == 0 ? static_cast<double>(rng.uniform_index(16)) / 15.0 : rng.uniform();
        correct[i] = rng.uniform() < conf[i] ? 1 : 0;
      }
      const std::size_t b = std::vector<std::size_t>{1, 2, 15}[static_cast<std::size_t>(trial % 3)];
      const CalibrationReport r = calibration_report(make_set(conf, correct), b);
      const oracle::EceOe o = oracle::brute_ece_oe(conf, correct, b);
      REQUIRE(std::abs(r.ece - o.ece) <= 1e-12);
      REQUIRE(std::abs(r.oe - o.oe) <= 1e-12);
      REQUIRE(std::abs(r.accuracy - o.accuracy) <= 1e-12);
      REQUIRE(r.oe <= r.ece + 1e-15);
    }
  }

  TEST_CASE("single bin collapses to the accuracy-confidence gap") {
    Rng rng(2);
    std::vector<double> conf(500);
    std::vector<int> correct(500);
    double mc = 0.0, ma = 0.0;
    for (std::size_t i = 0; i < 500; ++i) {
      conf[i] = rng.uniform();
      correct[i] = rng.uniform() < 0.3 ? 1 : 0;
      mc += conf[i];
      ma += correct[i];
    }
    const CalibrationReport r = calibration_report(make_set(conf, correct), 1);
    CHECK(std::abs(r.ece - std::abs(ma / 500 - mc / 500)) <= 1e-12);
  }

  TEST_CASE("predictions from logits") {
    const Tensor z({2, 3}, std::vector<double>{0, 0, 0, 5, 1, -2});
    const PredictionSet p = predictions_from_logits(z, {2, 0});
    CHECK(p.confidences[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(p.predicted[0] == 0);
    CHECK(p.predicted[1] == 0);
    CHECK(predictions_from_logits(Tensor({1, 2}, std::vector<double>{5, 1}), {0}).confidences[0] ==
          doctest::Approx(std::exp(5.0) / (std::exp(5.0) + std::exp(1.0))).epsilon(1e-15));
    CHECK(predictions_from_logits(Tensor({1, 2}, std::vector<double>{5, 1}), {0}).confidences[0] ==
          doctest::Approx(0.982014).epsilon(1e-6));
  }

  TEST_CASE("CSV export round-trips the metrics") {
    Rng rng(3);
    std::vector<double> conf(300);
    std::vector<int> correct(300);
    for (std::size_t i = 0; i < 300; ++i) {
      conf[i] = 0.5 + 0.5 * rng.uniform();
      correct[i] = rng.uniform() < 0.6 ? 1 : 0;
    }
    const PredictionSet preds = make_set(conf, correct);
    const CalibrationReport r = calibration_report(preds, 15);
    std::stringstream bins;
    write_bins_csv(r, bins);
    CHECK(bins.str().rfind("bin_lo,bin_hi,count,accuracy,confidence\n", 0) == 0);
    const auto back = read_bins_csv(bins);
    CHECK(back.size() == 15);
    const BinMetrics m = metrics_from_bins(back);
    CHECK(std::abs(m.ece - r.ece) <= 1e-12);
    CHECK(std::abs(m.oe - r.oe) <= 1e-12);

    std::stringstream scatter;
    write_scatter_csv(preds, scatter);
    std::string header;
    std::getline(scatter, header);
    CHECK(header == "confidence,correct");
    std::size_t lines = 0;
    for (std::string line; std::getline(scatter, line);) ++lines;
    CHECK(lines == 300);
  }
}
