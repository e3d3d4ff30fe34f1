// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdcal/tensor.hpp"

namespace kdcal {

enum class Arch { tiny_teacher, tiny_student, mlp_probe };

std::string_view to_string(Arch arch);
/// Throws ConfigError listing the valid names.
Arch parse_arch(std::string_view name);

/// (channels, height, width)
using ImageShape = std::array<std::size_t, 3>;

struct ModelSpec {
  Arch arch = Arch::tiny_student;
  std::size_t n_classes = 10;
  double width_multiplier = 1.0;
  ImageShape input_shape{3, 32, 32};
  std::uint64_t seed = 0;

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

void validate(const ModelSpec& spec);

/// Per-channel input standardization a model was trained with. Stored with the
/// model so evaluation applies the same transform; empty means identity.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool is_identity() const { return mean.empty(); }
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

enum class Mode { train, eval };

enum class LayerKind { conv3x3, relu, maxpool2, global_avg_pool, flatten, linear };

/// One step of a fixed layer recipe. Shapes are per-sample (C, H, W); linear
/// layers use in_c/out_c as feature counts with H = W = 1.
struct Layer {
  LayerKind kind;
  ImageShape in{};
  ImageShape out{};
  std::size_t weight = 0;  // parameter indices, valid for conv3x3/linear
  std::size_t bias = 0;
};

struct ActivationCache;

struct ForwardResult {
  Tensor logits;     // N x n_classes
  Tensor embedding;  // N x d, the penultimate feature vector
  std::shared_ptr<const ActivationCache> cache;  // null in eval mode
};

using Gradients = std::vector<Tensor>;

class Model {
 public:
  explicit Model(const ModelSpec& spec);
  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t embedding_layer() const { return embedding_layer_; }
  std::size_t embedding_dim() const;

  std::span<const Tensor> parameters() const { return params_; }
  /// Mutable access invalidates activation caches taken before the call.
  std::span<Tensor> mutable_parameters();
  std::size_t parameter_count() const;

  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  const Normalization& normalization() const { return normalization_; }
  void set_normalization(Normalization n) { normalization_ = std::move(n); }

  std::uint64_t instance_id() const { return id_; }
  std::uint64_t version() const { return version_; }

 private:
  ModelSpec spec_;
  std::vector<Layer> layers_;
  std::vector<Tensor> params_;
  std::size_t embedding_layer_ = 0;
  Mode mode_ = Mode::train;
  Normalization normalization_;
  std::uint64_t id_ = 0;
  std::uint64_t version_ = 0;
};

/// Builds and initializes a model: weights uniform in +-sqrt(6 / fan_in),
/// biases zero, drawn in parameter order from a stream seeded by spec.seed.
Model build_model(const ModelSpec& spec);

/// Parameter count implied by a spec, without allocating.
std::size_t parameter_count(const ModelSpec& spec);

/// x is N x C x H x W matching spec.input_shape. In train mode the result
/// carries the activation cache needed by backward.
ForwardResult forward(const Model& model, const Tensor& x);

/// Reverse pass. Gradients are of the sum over the batch of
/// <logit_grad, logits> + <embedding_grad, embedding>; embedding_grad may be
/// empty. Returned tensors align 1:1 with model.parameters().
Gradients backward(const Model& model, const ForwardResult& result, const Tensor& logit_grad,
                   const Tensor& embedding_grad = Tensor());

Gradients zero_gradients(const Model& model);
void accumulate(Gradients& into, const Gradients& from);

/// (x - mean) / std per channel on an N x C x H x W batch.
Tensor normalize(const Tensor& images, const Normalization& n);
Tensor denormalize(const Tensor& images, const Normalization& n);

}  // namespace kdcal
