// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "kdcal/augment.hpp"
#include "kdcal/error.hpp"
#include "oracles.hpp"

using namespace kdcal;

namespace {

std::vector<std::size_t> reversed(std::size_t n) {
  std::vector<std::size_t> p(n);
  std::iota(p.rbegin(), p.rend(), 0);
  return p;
}

}  // namespace

TEST_SUITE("augment") {
  TEST_CASE("mixup at lambda 1 is the identity, bitwise") {
    Rng rng(1);
    const Tensor x = oracle::random_tensor({4, 3, 8, 8}, rng);
    const LabelBatch y{0, 1, 2, 3};
    const MixupBatch mb = mixup(x, y, 0.4, rng, {.lambda = 1.0});
    CHECK(bitwise_equal(mb.x_mix, x));
    CHECK(mb.y_i == y);
  }

  TEST_CASE("mixup arithmetic and convexity") {
    Rng rng(2);
    Tensor x({2, 1, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) x[i] = 1.0;
    const MixupBatch mb = mixup(x, {0, 1}, 0.4, rng, {.lambda = 0.4, .pairing = reversed(2)});
    for (std::size_t i = 0; i < 4; ++i) CHECK(mb.x_mix[i] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(mb.y_j == LabelBatch{1, 0});

    const Tensor r = oracle::random_tensor({6, 3, 4, 4}, rng);
    const MixupBatch m2 = mixup(r, {0, 1, 2, 3, 4, 5}, 0.4, rng);
    const std::size_t vol = 48;
    for (std::size_t n = 0; n < 6; ++n) {
      for (std::size_t k = 0; k < vol; ++k) {
        const double a = r[n * vol + k], b = r[m2.pairing[n] * vol + k];
        const double v = m2.x_mix[n * vol + k];
        const double raw = m2.lambda * a + (1.0 - m2.lambda) * b;
        CHECK(v == std::clamp(raw, std::min(a, b), std::max(a, b)));
        CHECK(std::abs(v - raw) <= 1e-15 * std::max(std::abs(a), std::abs(b)));
        CHECK(v >= std::min(a, b));
        CHECK(v <= std::max(a, b));
      }
    }
  }

  TEST_CASE("mixup lambda has mean one half for a = 0.4") {
    Rng rng(3);
    Tensor x({2, 1, 1, 1});
    double s = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) s += mixup(x, {0, 1}, 0.4, rng).lambda;
    CHECK(std::abs(s / n - 0.5) <= 0.01);
  }

  TEST_CASE("mixup rejects bad arguments") {
    Rng rng(1);
    Tensor x({2, 1, 2, 2});
    CHECK_THROWS_AS(mixup(x, {0, 1}, 0.0, rng), ConfigError);
    CHECK_THROWS_AS(mixup(Tensor({1, 1, 2, 2}), {0}, 0.4, rng), InputError);
    CHECK_THROWS_AS(mixup(x, {0, 1}, 0.4, rng, {.pairing = std::vector<std::size_t>{0, 0}}), InputError);
  }

  TEST_CASE("cutout hand geometry with clipping") {
    const Box b = cutout_box(1, 1, 4, 8, 8);
    CHECK(b == Box{0, 3, 0, 3});
    Rng rng(4);
    Tensor x({1, 2, 8, 8}, 1.0);
    const std::vector<std::pair<std::size_t, std::size_t>> centers{{1, 1}};
    const CutoutBatch cb = cutout(x, {0}, 4, rng, centers);
    std::size_t zeros = 0;
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t r = 0; r < 8; ++r) {
        for (std::size_t q = 0; q < 8; ++q) {
          const double v = cb.x_cut[(c * 8 + r) * 8 + q];
          if (r < 3 && q < 3) {
            CHECK(v == 0.0);
            ++zeros;
          } else {
            CHECK(v == 1.0);
          }
        }
      }
    }
    CHECK(zeros == 18);
  }

  TEST_CASE("cutout zeroes exactly the clipped box on random inputs") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const Tensor x = oracle::random_tensor({3, 2, 10, 12}, rng);
      const CutoutBatch cb = cutout(x, {0, 1, 2}, 1 + rng.uniform_index(12), rng);
      for (std::size_t n = 0; n < 3; ++n) {
        const Box& b = cb.boxes[n];
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t r = 0; r < 10; ++r) {
            for (std::size_t q = 0; q < 12; ++q) {
              const std::size_t i = ((n * 2 + c) * 10 + r) * 12 + q;
              if (b.contains(r, q)) {
                REQUIRE(cb.x_cut[i] == 0.0);
              } else {
                REQUIRE(std::memcmp(cb.x_cut.data() + i, x.data() + i, sizeof(double)) == 0);
              }
            }
          }
        }
      }
    }
    const Tensor x = oracle::random_tensor({1, 1, 6, 5}, rng);
    const CutoutBatch all = cutout(x, {0}, 12, rng);
    for (double v : all.x_cut.values()) CHECK(v == 0.0);
  }

  TEST_CASE("cutmix hand geometry") {
    const Box b = cutmix_box(0.64, 5, 5, 10, 10);
    CHECK(b.area() == 36);
    CHECK(b.r2 - b.r1 == 6);
    Rng rng(6);
    Tensor x({2, 1, 10, 10});
    for (std::size_t i = 100; i < 200; ++i) x[i] = 1.0;
    const CutMixBatch cm = cutmix(x, {0, 1}, 0.5, 1.0, rng,
                                  {.apply = true, .lambda = 0.64, .center = std::pair<std::size_t, std::size_t>{5, 5},
                                   .pairing = reversed(2)});
    CHECK(cm.applied);
    CHECK(cm.lambda_adj == 1.0 - 36.0 / 100.0);
    CHECK(cm.lambda_adj == doctest::Approx(0.64).epsilon(1e-15));
  }

  TEST_CASE("cutmix not applied leaves the batch alone") {
    Rng rng(7);
    const Tensor x = oracle::random_tensor({3, 3, 6, 6}, rng);
    const CutMixBatch cm = cutmix(x, {0, 1, 2}, 0.5, 1.0, rng, {.apply = false});
    CHECK_FALSE(cm.applied);
    CHECK(bitwise_equal(cm.x_cm, x));
    CHECK(cm.lambda_adj == 1.0);
    CHECK(cm.y_j == cm.y_i);
  }

  TEST_CASE("cutmix area bookkeeping on random boxes") {
    Rng rng(8);
    for (int trial = 0; trial < 1000; ++trial) {
      const std::size_t H = 1 + rng.uniform_index(16), W = 1 + rng.uniform_index(16);
      const Tensor x = oracle::random_tensor({2, 2, H, W}, rng);
      const CutMixBatch cm = cutmix(x, {0, 1}, 1.0, 1.0, rng, {.pairing = reversed(2)});
      const double frac = static_cast<double>(cm.box.area()) / static_cast<double>(H * W);
      REQUIRE(cm.lambda_adj == 1.0 - frac);
      REQUIRE(cm.lambda_adj + frac == 1.0);
      std::size_t differing = 0;
      for (std::size_t n = 0; n < 2; ++n) {
        for (std::size_t c = 0; c < 2; ++c) {
          for (std::size_t r = 0; r < H; ++r) {
            for (std::size_t q = 0; q < W; ++q) {
              const std::size_t i = ((n * 2 + c) * H + r) * W + q;
              const std::size_t j = (((1 - n) * 2 + c) * H + r) * W + q;
              const double v = cm.x_cm[i];
              REQUIRE((v == x[i] || v == x[j]));
              if (v != x[i]) ++differing;
            }
          }
        }
      }
      REQUIRE(differing == 4 * cm.box.area());
    }
  }
}
