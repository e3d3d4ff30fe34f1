// SPDX-License-Identifier: Apache-2.0
#include "kdcal/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "kdcal/error.hpp"

namespace kdcal {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarChannels = 3;
constexpr std::size_t kCifarPixels = kCifarChannels * kCifarSide * kCifarSide;

std::size_t label_bytes(CifarVariant v) { return v == CifarVariant::cifar10 ? 1 : 2; }
std::size_t class_count(CifarVariant v) { return v == CifarVariant::cifar10 ? 10 : 100; }

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

void validate(const Dataset& d) {
  if (d.size() == 0) throw InputError("dataset is empty");
  if (d.images.rank() != 4 || d.images.dim(0) != d.size()) {
    throw InputError("dataset images must be M x C x H x W with M = label count");
  }
  for (int y : d.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= d.meta.n_classes) {
      throw InputError("dataset label " + std::to_string(y) + " outside [0, " +
                       std::to_string(d.meta.n_classes) + ")");
    }
  }
  if (!d.images.all_finite()) throw InputError("dataset contains non-finite pixels");
}

CifarVariant parse_cifar_variant(const std::string& name) {
  if (name == "cifar10") return CifarVariant::cifar10;
  if (name == "cifar100" || name == "cifar100_fine") return CifarVariant::cifar100_fine;
  throw ConfigError("unknown CIFAR variant '" + name + "' (valid: cifar10, cifar100)");
}

Dataset decode_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant) {
  const std::size_t lb = label_bytes(variant);
  const std::size_t record = lb + kCifarPixels;
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % record;
    throw FormatError("truncated CIFAR record at byte offset " + std::to_string(offset) + " (file length " +
                      std::to_string(bytes.size()) + " is not a multiple of " + std::to_string(record) + ")");
  }
  const std::size_t m = bytes.size() / record;
  Dataset d;
  d.meta.n_classes = class_count(variant);
  d.images = Tensor({m, kCifarChannels, kCifarSide, kCifarSide});
  d.labels.resize(m);
  if (variant == CifarVariant::cifar100_fine) d.coarse_labels.resize(m);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t base = i * record;
    const std::size_t label_offset = base + lb - 1;
    const int label = bytes[label_offset];
    if (static_cast<std::size_t>(label) >= d.meta.n_classes) {
      throw FormatError("CIFAR label " + std::to_string(label) + " at byte offset " +
                        std::to_string(label_offset) + " is >= " + std::to_string(d.meta.n_classes));
    }
    d.labels[i] = label;
    if (variant == CifarVariant::cifar100_fine) d.coarse_labels[i] = bytes[base];
    double* dst = d.images.data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) dst[p] = bytes[base + lb + p] / 255.0;
  }
  return d;
}

Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = read_file(path);
  try {
    return decode_cifar_binary(bytes, variant);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Dataset load_cifar_binary(std::span<const std::filesystem::path> paths, CifarVariant variant) {
  if (paths.empty()) throw ConfigError("no dataset files given");
  std::vector<std::uint8_t> all;
  const std::size_t record = label_bytes(variant) + kCifarPixels;
  for (const auto& p : paths) {
    auto bytes = read_file(p);
    if (bytes.size() % record != 0) {
      // Decode alone for the precise per-file diagnostic.
      load_cifar_binary(p, variant);
    }
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  return decode_cifar_binary(all, variant);
}

std::vector<std::uint8_t> encode_cifar_binary(const Dataset& d, CifarVariant variant) {
  if (d.images.rank() != 4 || d.images.dim(1) != kCifarChannels || d.images.dim(2) != kCifarSide ||
      d.images.dim(3) != kCifarSide) {
    throw InputError("CIFAR binary layout requires 3 x 32 x 32 images, got " + shape_string(d.images.shape()));
  }
  const std::size_t lb = label_bytes(variant);
  if (d.meta.n_classes > class_count(variant)) {
    throw InputError("dataset has more classes than the CIFAR variant supports");
  }
  std::vector<std::uint8_t> out;
  out.reserve(d.size() * (lb + kCifarPixels));
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (variant == CifarVariant::cifar100_fine) {
      out.push_back(d.coarse_labels.empty() ? 0 : static_cast<std::uint8_t>(d.coarse_labels[i]));
    }
    out.push_back(static_cast<std::uint8_t>(d.labels[i]));
    const double* src = d.images.data() + i * kCifarPixels;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(src[p], 0.0, 1.0) * 255.0)));
    }
  }
  return out;
}

void write_cifar_binary(const Dataset& d, const std::filesystem::path& path, CifarVariant variant) {
  const auto bytes = encode_cifar_binary(d, variant);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing: " + path.string());
}

Dataset make_synthetic(std::size_t n_classes, std::size_t samples_per_class, const ImageShape& image_shape,
                       std::uint64_t seed) {
  if (n_classes < 2) throw ConfigError("synthetic dataset needs n_classes >= 2");
  if (samples_per_class < 1) throw ConfigError("synthetic dataset needs samples_per_class >= 1");
  const auto [C, H, W] = image_shape;
  if (C < 1 || H < 1 || W < 1) throw ConfigError("synthetic image shape entries must be >= 1");

  constexpr double kNoiseSigma = 0.15;
  constexpr double kPi = std::numbers::pi;
  const std::size_t m = n_classes * samples_per_class;
  const double spacing = kPi / static_cast<double>(n_classes);

  Dataset d;
  d.meta.n_classes = n_classes;
  d.images = Tensor({m, C, H, W});
  d.labels.resize(m);
  Rng rng(seed);
  std::vector<double> tint(C);
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t k = i % n_classes;
    d.labels[i] = static_cast<int>(k);

    const double theta = spacing * static_cast<double>(k) + 0.6 * spacing * rng.normal();
    const double freq = 2.0 + 2.5 * rng.uniform();  // cycles per image width
    const double phase = 2.0 * kPi * rng.uniform();
    const double contrast = 0.35 + 0.35 * rng.uniform();
    for (std::size_t c = 0; c < C; ++c) {
      const double hue = static_cast<double>(k) / static_cast<double>(n_classes) +
                         static_cast<double>(c) / static_cast<double>(C);
      tint[c] = std::clamp(0.5 + 0.35 * std::cos(2.0 * kPi * hue) + 0.12 * rng.normal(), 0.0, 1.0);
    }
    const double ct = std::cos(theta), st = std::sin(theta);
    const double scale = 2.0 * kPi * freq / static_cast<double>(W);
    double* img = d.images.data() + i * C * H * W;
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double stripe = 0.5 + 0.5 * std::sin(scale * (ct * x + st * y) + phase);
        for (std::size_t c = 0; c < C; ++c) {
          const double v = 0.5 + contrast * (stripe - 0.5) * (0.5 + tint[c]) + 0.25 * (tint[c] - 0.5) +
                           kNoiseSigma * rng.normal();
          img[(c * H + y) * W + x] = quantize(v);
        }
      }
    }
  }
  return d;
}

Dataset subset(const Dataset& d, std::span<const std::size_t> indices) {
  Dataset out;
  out.meta = d.meta;
  out.images = take_rows(d.images, indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(d.labels.at(i));
  if (!d.coarse_labels.empty()) {
    for (std::size_t i : indices) out.coarse_labels.push_back(d.coarse_labels.at(i));
  }
  return out;
}

HoldoutSplit split_holdout(const Dataset& d, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("holdout fraction must be in (0, 1)");
  const std::size_t m = d.size();
  const auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(m)));
  if (n_val == 0 || n_val >= m) throw ConfigError("holdout split leaves an empty train or validation part");
  Rng rng(seed);
  auto perm = rng.permutation(m);
  std::vector<std::size_t> val(perm.begin(), perm.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> train(perm.begin() + static_cast<long>(n_val), perm.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {subset(d, train), subset(d, val)};
}

Normalization compute_normalization(const Dataset& d) {
  validate(d);
  const std::size_t C = d.images.dim(1), HW = d.images.dim(2) * d.images.dim(3);
  Normalization n;
  n.mean.assign(C, 0.0);
  n.stddev.assign(C, 0.0);
  const double count = static_cast<double>(d.size() * HW);
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0.0;
    for (std::size_t s = 0; s < d.size(); ++s) {
      const double* p = d.images.data() + (s * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) sum += p[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t s = 0; s < d.size(); ++s) {
      const double* p = d.images.data() + (s * C + c) * HW;
      for (std::size_t i = 0; i < HW; ++i) sq += (p[i] - mean) * (p[i] - mean);
    }
    n.mean[c] = mean;
    const double sd = std::sqrt(sq / count);
    n.stddev[c] = sd > 0.0 ? sd : 1.0;  // constant channel
  }
  return n;
}

Tensor standard_augment(const Tensor& batch, std::size_t pad, double flip_prob, Rng& rng) {
  if (batch.rank() != 4) throw InputError("standard_augment expects an N x C x H x W batch");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("flip_prob must be in [0, 1]");
  const std::size_t N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
  Tensor out(batch.shape());
  for (std::size_t s = 0; s < N; ++s) {
    const std::size_t r0 = rng.uniform_index(2 * pad + 1);
    const std::size_t c0 = rng.uniform_index(2 * pad + 1);
    const bool flip = rng.uniform() < flip_prob;
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = batch.data() + (s * C + c) * H * W;
      double* dst = out.data() + (s * C + c) * H * W;
      for (std::size_t y = 0; y < H; ++y) {
        // Row y of the crop is row y + r0 - pad of the source.
        const long sy = static_cast<long>(y + r0) - static_cast<long>(pad);
        for (std::size_t x = 0; x < W; ++x) {
          const long sx = static_cast<long>(x + c0) - static_cast<long>(pad);
          const bool inside = sy >= 0 && sy < static_cast<long>(H) && sx >= 0 && sx < static_cast<long>(W);
          const double v = inside ? src[static_cast<std::size_t>(sy) * W + static_cast<std::size_t>(sx)] : 0.0;
          dst[y * W + (flip ? W - 1 - x : x)] = v;
        }
      }
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t dataset_size, const BatchPlan& plan) {
  if (plan.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (plan.drop_last && plan.batch_size > dataset_size) {
    throw ConfigError("batch_size " + std::to_string(plan.batch_size) + " exceeds dataset size " +
                      std::to_string(dataset_size) + " with drop_last: epoch would be empty");
  }
  Rng rng(plan.shuffle_seed);
  const auto perm = rng.permutation(dataset_size);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start < dataset_size; start += plan.batch_size) {
    const std::size_t end = std::min(dataset_size, start + plan.batch_size);
    if (plan.drop_last && end - start < plan.batch_size) break;
    out.emplace_back(perm.begin() + static_cast<long>(start), perm.begin() + static_cast<long>(end));
  }
  return out;
}

Batch gather(const Dataset& d, std::span<const std::size_t> indices) {
  Batch b;
  b.images = take_rows(d.images, indices);
  b.labels.reserve(indices.size());
  for (std::size_t i : indices) b.labels.push_back(d.labels.at(i));
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

std::vector<Batch> batches(const Dataset& d, const BatchPlan& plan) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(d.size(), plan)) out.push_back(gather(d, idx));
  return out;
}

}  // namespace kdcal
