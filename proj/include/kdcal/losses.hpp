// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kdcal/augment.hpp"
#include "kdcal/data.hpp"
#include "kdcal/tensor.hpp"

namespace kdcal {

enum class Distiller { scaled_kd, rkd_da };
enum class Augmentation { none, mixup, cutout, cutmix };

std::string_view to_string(Distiller d);
std::string_view to_string(Augmentation a);
Distiller parse_distiller(std::string_view name);
Augmentation parse_augmentation(std::string_view name);

/// Distillation recipe. Defaults are the reference protocol: T = 50,
/// mixup a = 0.4, alpha = 0.5, a single 16 x 16 cutout hole, CutMix p = 0.5
/// with Beta(1, 1).
struct DistillSpec {
  Distiller distiller = Distiller::scaled_kd;
  Augmentation augmentation = Augmentation::none;
  double alpha = 0.5;
  double temperature = 50.0;
  double mixup_a = 0.4;
  std::size_t cutout_size = 16;
  double cutmix_p = 0.5;
  double cutmix_a = 1.0;
  bool grad_rescale_T2 = false;

  friend bool operator==(const DistillSpec&, const DistillSpec&) = default;
};

/// ConfigError naming the offending field.
void validate(const DistillSpec& spec);

struct LossValue {
  double value = 0.0;
  Tensor logit_grad;      // d value / d student logits, when logits are an input
  Tensor embedding_grad;  // d value / d student embedding, for relational losses
  std::map<std::string, double> components;
};

/// Row-wise softmax(z / T) with max subtraction.
Tensor temp_softmax(const Tensor& z, double temperature);
Tensor temp_log_softmax(const Tensor& z, double temperature);

/// KL(teacher || student) of the temperature-softened distributions averaged
/// over the batch and divided by the number of classes. The teacher side is
/// constant. With rescale_T2 the value and gradient are multiplied by T^2.
LossValue scaled_kl_loss(const Tensor& z_teacher, const Tensor& z_student, double temperature,
                         bool rescale_T2 = false);

/// Batch-mean negative log-likelihood at T = 1; gradient (p - onehot) / N.
LossValue cross_entropy(const Tensor& z, const LabelBatch& y);

/// lambda CE(z, y_i) + (1 - lambda) CE(z, y_j), the hard-label form of the
/// mixed-target cross-entropy.
LossValue pair_cross_entropy(const Tensor& z, const LabelBatch& y_i, const LabelBatch& y_j, double lambda);
LossValue mixup_ce_loss(const Tensor& z_mix, const MixupBatch& mb);
LossValue cutmix_ce_loss(const Tensor& z_cm, const CutMixBatch& cm);

struct MixupDistillValue {
  double value = 0.0;
  Tensor grad_i;  // w.r.t. z_s_i
  Tensor grad_j;  // w.r.t. z_s_j
};

/// scaled_kl(z_t_i, z_s_i) + scaled_kl(z_t_j, z_s_j).
MixupDistillValue mixup_distill_loss(const Tensor& z_t_i, const Tensor& z_s_i, const Tensor& z_t_j,
                                     const Tensor& z_s_j, double temperature, bool rescale_T2 = false);

/// The two-stream loss when the j stream is the batch re-indexed by
/// `pairing`; the gradient of the j term is scattered back onto z_student.
LossValue mixup_distill_loss(const Tensor& z_teacher, const Tensor& z_student,
                             std::span<const std::size_t> pairing, double temperature, bool rescale_T2 = false);

/// Smooth-L1 with delta = 1.
double huber(double x);
double huber_grad(double x);

/// Mean Huber gap between mean-normalized pairwise distances of teacher and
/// student embeddings over all N(N-1)/2 pairs. Zero (with zero gradient)
/// when either side has zero mean distance.
LossValue rkd_distance_loss(const Tensor& e_teacher, const Tensor& e_student);

/// Mean Huber gap between cosines of the angle at j for every ordered triple
/// of distinct (i, j, k). Zero-length edges give cosine 0.
LossValue rkd_angle_loss(const Tensor& e_teacher, const Tensor& e_student);

/// distance_weight * distance + angle_weight * angle (default 1 : 2).
LossValue rkd_da_loss(const Tensor& e_teacher, const Tensor& e_student, double distance_weight = 1.0,
                      double angle_weight = 2.0);

/// alpha * kd + (1 - alpha) * aug. The two parts usually differentiate
/// different forward passes (original vs augmented batch), so their scaled
/// gradients are kept apart.
struct CombinedLoss {
  double value = 0.0;
  std::map<std::string, double> components;  // "kd", "aug"
  Tensor kd_logit_grad;
  Tensor kd_embedding_grad;
  Tensor aug_logit_grad;
};

CombinedLoss combined_loss(const DistillSpec& spec, const LossValue& kd, const LossValue& aug);

}  // namespace kdcal
