// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kdcal/model.hpp"
#include "kdcal/rng.hpp"
#include "kdcal/tensor.hpp"

namespace kdcal {

using LabelBatch = std::vector<int>;

struct DatasetMeta {
  std::size_t n_classes = 0;
  std::vector<std::string> class_names;
  Normalization normalization;  // filled by the training split, identity until then
};

/// Images are M x C x H x W with values in [0, 1] (before normalization).
struct Dataset {
  Tensor images;
  LabelBatch labels;
  DatasetMeta meta;
  /// CIFAR-100 coarse labels, kept so re-encoding is lossless. Empty otherwise.
  LabelBatch coarse_labels;

  std::size_t size() const { return labels.size(); }
  ImageShape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

/// Throws InputError unless labels are in range, images finite and M >= 1.
void validate(const Dataset& d);

enum class CifarVariant { cifar10, cifar100_fine };

CifarVariant parse_cifar_variant(const std::string& name);

/// Record = label byte(s) then 3072 pixel bytes as R, G, B planes of 32 x 32.
/// CIFAR-100 records carry a coarse byte followed by the fine label byte.
Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant);
/// Concatenates several files (e.g. the five CIFAR-10 training batches).
Dataset load_cifar_binary(std::span<const std::filesystem::path> paths, CifarVariant variant);
Dataset decode_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant);

/// Pixels are quantized as round(255 x); requires 3 x 32 x 32 images.
std::vector<std::uint8_t> encode_cifar_binary(const Dataset& d, CifarVariant variant);
void write_cifar_binary(const Dataset& d, const std::filesystem::path& path, CifarVariant variant);

/// Seeded procedural classes: oriented stripes with a class orientation and
/// a class colour tint, per-sample phase/frequency/orientation jitter and
/// Gaussian pixel noise (sigma 0.15), clipped to [0, 1] and quantized to
/// multiples of 1/255. Samples are interleaved by class.
Dataset make_synthetic(std::size_t n_classes, std::size_t samples_per_class, const ImageShape& image_shape,
                       std::uint64_t seed);

Dataset subset(const Dataset& d, std::span<const std::size_t> indices);

struct HoldoutSplit {
  Dataset train;
  Dataset val;
};

/// Seeded holdout of round(fraction * M) samples; both parts keep the
/// original relative order.
HoldoutSplit split_holdout(const Dataset& d, double fraction, std::uint64_t seed);

/// Per-channel population mean and standard deviation over all pixels.
Normalization compute_normalization(const Dataset& d);

/// Zero-pads by `pad`, takes an H x W crop at a uniform offset in
/// [0, 2 pad]^2, then mirrors horizontally with probability flip_prob.
Tensor standard_augment(const Tensor& batch, std::size_t pad, double flip_prob, Rng& rng);

struct BatchPlan {
  std::size_t batch_size = 64;
  std::uint64_t shuffle_seed = 0;
  bool drop_last = false;
};

struct Batch {
  Tensor images;
  LabelBatch labels;
  std::vector<std::size_t> indices;
};

/// Seeded permutation of 0..M-1 cut into consecutive batches.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t dataset_size, const BatchPlan& plan);
Batch gather(const Dataset& d, std::span<const std::size_t> indices);
std::vector<Batch> batches(const Dataset& d, const BatchPlan& plan);

}  // namespace kdcal
