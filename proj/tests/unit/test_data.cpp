// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "kdcal/data.hpp"
#include "kdcal/error.hpp"
#include "oracles.hpp"

using namespace kdcal;

namespace {

constexpr std::size_t kPixels = 3 * 32 * 32;

std::vector<std::uint8_t> record(std::vector<std::uint8_t> label_bytes, std::uint8_t fill) {
  std::vector<std::uint8_t> r = std::move(label_bytes);
  r.resize(r.size() + kPixels, fill);
  return r;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("one cifar10 record decodes to label and unit pixels") {
    const auto bytes = record({3}, 255);
    const Dataset d = decode_cifar_binary(bytes, CifarVariant::cifar10);
    REQUIRE(d.size() == 1);
    CHECK(d.labels[0] == 3);
    CHECK(d.images.shape() == std::vector<std::size_t>{1, 3, 32, 32});
    for (double v : d.images.values()) CHECK(v == 1.0);
    CHECK(d.meta.n_classes == 10);
  }

  TEST_CASE("cifar100 record uses the fine label") {
    const auto bytes = record({5, 77}, 0);
    const Dataset d = decode_cifar_binary(bytes, CifarVariant::cifar100_fine);
    REQUIRE(d.size() == 1);
    CHECK(d.labels[0] == 77);
    CHECK(d.coarse_labels.at(0) == 5);
    CHECK(d.meta.n_classes == 100);
  }

  TEST_CASE("decode then encode is the identity on bytes") {
    Rng rng(1);
    std::vector<std::uint8_t> bytes;
    for (int r = 0; r < 2; ++r) {
      bytes.push_back(static_cast<std::uint8_t>(r + 4));
      for (std::size_t i = 0; i < kPixels; ++i) bytes.push_back(static_cast<std::uint8_t>(rng.uniform_index(256)));
    }
    const Dataset d = decode_cifar_binary(bytes, CifarVariant::cifar10);
    CHECK(encode_cifar_binary(d, CifarVariant::cifar10) == bytes);

    std::vector<std::uint8_t> b100;
    for (int r = 0; r < 2; ++r) {
      b100.push_back(static_cast<std::uint8_t>(r));
      b100.push_back(static_cast<std::uint8_t>(90 + r));
      for (std::size_t i = 0; i < kPixels; ++i) b100.push_back(static_cast<std::uint8_t>(rng.uniform_index(256)));
    }
    const Dataset d100 = decode_cifar_binary(b100, CifarVariant::cifar100_fine);
    CHECK(encode_cifar_binary(d100, CifarVariant::cifar100_fine) == b100);
  }

  TEST_CASE("truncated and out-of-range records are format errors with offsets") {
    auto bytes = record({1}, 7);
    bytes.resize(bytes.size() + 10, 0);
    try {
      decode_cifar_binary(bytes, CifarVariant::cifar10);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("3073") != std::string::npos);
    }
    auto bad = record({0}, 0);
    const auto second = record({12}, 0);
    bad.insert(bad.end(), second.begin(), second.end());
    try {
      decode_cifar_binary(bad, CifarVariant::cifar10);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      CHECK(std::string(e.what()).find("3073") != std::string::npos);
    }
    CHECK_THROWS_AS(load_cifar_binary(std::filesystem::path("/nonexistent/file.bin"), CifarVariant::cifar10), IoError);
  }

  TEST_CASE("synthetic data is balanced, bounded and deterministic") {
    const Dataset a = make_synthetic(10, 100, {3, 32, 32}, 1);
    CHECK(a.size() == 1000);
    std::vector<int> counts(10, 0);
    for (int y : a.labels) ++counts[static_cast<std::size_t>(y)];
    for (int c : counts) CHECK(c == 100);
    for (double v : a.images.values()) {
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    const Dataset b = make_synthetic(10, 100, {3, 32, 32}, 1);
    CHECK(bitwise_equal(a.images, b.images));
    CHECK(a.labels == b.labels);
    const Dataset c = make_synthetic(10, 100, {3, 32, 32}, 2);
    CHECK_FALSE(bitwise_equal(a.images, c.images));
    // quantized to 8 bits, so the CIFAR layout holds it exactly
    const auto bytes = encode_cifar_binary(a, CifarVariant::cifar10);
    CHECK(bitwise_equal(decode_cifar_binary(bytes, CifarVariant::cifar10).images, a.images));
  }

  TEST_CASE("standard augmentation: identity, involution and crop support") {
    Rng rng(3);
    const Tensor x = oracle::random_tensor({2, 3, 32, 32}, rng);
    CHECK(bitwise_equal(standard_augment(x, 0, 0.0, rng), x));
    const Tensor once = standard_augment(x, 0, 1.0, rng);
    CHECK_FALSE(bitwise_equal(once, x));
    CHECK(bitwise_equal(standard_augment(once, 0, 1.0, rng), x));

    // Pixel values encode their coordinates so the crop offset can be read off.
    Tensor probe({1, 1, 32, 32});
    for (std::size_t i = 0; i < 32 * 32; ++i) probe[i] = static_cast<double>(i + 1);
    std::set<std::pair<long, long>> seen;
    for (int k = 0; k < 4000; ++k) {
      const Tensor out = standard_augment(probe, 4, 0.0, rng);
      const long v = static_cast<long>(out[16 * 32 + 16]) - 1;
      const long r0 = v / 32 - 16 + 4, c0 = v % 32 - 16 + 4;
      seen.insert({r0, c0});
    }
    CHECK(seen.size() == 81);
    CHECK(seen.begin()->first == 0);
    CHECK(seen.rbegin()->first == 8);
  }

  TEST_CASE("batching arithmetic, determinism and partition") {
    CHECK(batch_indices(10, {4, 1, true}).size() == 2);
    for (const auto& b : batch_indices(10, {4, 1, true})) CHECK(b.size() == 4);
    CHECK(batch_indices(10, {4, 1, false}).size() == 3);
    CHECK(batch_indices(100, {10, 5, true}) == batch_indices(100, {10, 5, true}));
    CHECK(batch_indices(100, {10, 5, true}) != batch_indices(100, {10, 6, true}));
    CHECK_THROWS_AS(batch_indices(3, {4, 1, true}), ConfigError);

    const Dataset d = make_synthetic(3, 7, {3, 8, 8}, 2);
    std::vector<int> seen;
    for (const Batch& b : batches(d, {4, 9, false})) seen.insert(seen.end(), b.labels.begin(), b.labels.end());
    std::vector<int> want = d.labels;
    std::sort(seen.begin(), seen.end());
    std::sort(want.begin(), want.end());
    CHECK(seen == want);
  }

  TEST_CASE("holdout split is a seeded partition") {
    const Dataset d = make_synthetic(4, 25, {3, 8, 8}, 3);
    const HoldoutSplit s = split_holdout(d, 0.1, 11);
    CHECK(s.val.size() == 10);
    CHECK(s.train.size() == 90);
    const HoldoutSplit t = split_holdout(d, 0.1, 11);
    CHECK(bitwise_equal(s.val.images, t.val.images));
    CHECK_THROWS_AS(split_holdout(d, 1.5, 1), ConfigError);
  }

  TEST_CASE("normalization statistics") {
    Dataset d = make_synthetic(2, 5, {3, 4, 4}, 1);
    const Normalization n = compute_normalization(d);
    REQUIRE(n.mean.size() == 3);
    const Tensor z = normalize(d.images, n);
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0, s2 = 0.0, cnt = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t p = 0; p < 16; ++p) {
          const double v = z[(i * 3 + c) * 16 + p];
          s += v;
          s2 += v * v;
          cnt += 1.0;
        }
      }
      CHECK(std::abs(s / cnt) < 1e-12);
      CHECK(s2 / cnt == doctest::Approx(1.0).epsilon(1e-12));
    }
    d.images.fill(0.5);
    const Normalization flat = compute_normalization(d);
    for (double sd : flat.stddev) CHECK(sd == 1.0);
  }
}
