// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kdcal/calibration.hpp"
#include "kdcal/data.hpp"
#include "kdcal/error.hpp"
#include "kdcal/losses.hpp"
#include "kdcal/model.hpp"

namespace kdcal {

struct OptimizerState {
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::vector<Tensor> velocity;  // zero-initialized, mirrors parameters
};

OptimizerState make_optimizer(const Model& model, double momentum, double weight_decay);

/// g' = g + wd * theta; v <- momentum * v + g'; theta <- theta - lr * v.
/// Weight decay covers every parameter, biases included. Non-finite
/// gradients raise NumericError before anything is modified.
void sgd_step(Model& model, const Gradients& grads, OptimizerState& opt, double lr);

enum class ScheduleKind { cosine, multistep, constant };

std::string_view to_string(ScheduleKind k);
ScheduleKind parse_schedule_kind(std::string_view name);

struct Schedule {
  ScheduleKind kind = ScheduleKind::cosine;
  std::size_t t_max = 1;
  std::vector<std::size_t> milestones;
  double gamma = 0.1;
  double eta_min = 0.0;
};

void validate(const Schedule& s);

/// Learning rate for a 0-based epoch. Cosine:
/// eta_min + (lr0 - eta_min)(1 + cos(pi epoch / t_max)) / 2 for epoch <= t_max.
/// Multistep: lr0 * gamma^(number of milestones <= epoch).
double lr_at(const Schedule& schedule, std::size_t epoch, double lr0);

struct BatchLog {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double loss = 0.0;
  double kd = 0.0;
  double aug = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double kd_component = 0.0;
  double aug_component = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

struct TrainConfig {
  std::size_t epochs = 240;
  std::size_t batch_size = 64;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Schedule schedule{ScheduleKind::cosine, 240, {}, 0.1, 0.0};
  std::size_t crop_pad = 4;
  double flip_prob = 0.5;
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 256;
  /// Observer for every optimization step; not part of the run's identity.
  std::function<void(const BatchLog&)> on_batch;
  std::function<void(const EpochRecord&)> on_epoch;
};

void validate(const TrainConfig& c);


struct RunRecord {
  std::vector<EpochRecord> epochs;
  /// 1-based epoch whose parameters were kept; 0 means the initialization
  /// (only when no epoch ran).
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
  std::uint64_t seed = 0;
  std::optional<DistillSpec> distill;
  double wall_time_s = 0.0;
};

struct TrainResult {
  Model model;  // best-validation parameters, eval mode
  RunRecord record;
};

/// Raised when a step goes non-finite; carries the best model seen so far.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, Model last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const Model& last_good() const { return last_good_; }

 private:
  Model last_good_;
};

/// Plain cross-entropy training on standard-augmented batches. Input
/// normalization is computed from `train` and stored in the model. Random
/// streams derive from config.seed: data order, crop/flip and the
/// augmentation stream are independent, so a distillation run with the same
/// seed sees the same batches.
TrainResult train_teacher(const ModelSpec& spec, const Dataset& train, const Dataset& val, const TrainConfig& config);

/// Frozen-teacher outputs shared between distillation runs that replay the
/// same standard-augmented batches, such as one run per augmentation with a
/// common seed. Keyed by a hash of the teacher identity and the batch, so a
/// different batch just misses. Safe to share across threads.
class TeacherCache {
 public:
  struct Entry {
    Tensor logits;
    Tensor embedding;  // empty unless the distiller needs it
  };

  std::shared_ptr<const Entry> find(std::uint64_t key) const;
  // Keeps the first entry stored under `key`; returns whichever is kept.
  std::shared_ptr<const Entry> insert(std::uint64_t key, Entry entry);
  std::size_t size() const;
  std::size_t hits() const;

 private:
  mutable std::mutex mu_;
  mutable std::size_t hits_ = 0;
  std::unordered_map<std::uint64_t, std::shared_ptr<const Entry>> map_;
};

/// Per batch: the standard-augmented batch goes through the frozen teacher
/// and the student (distillation term); the augmented batch goes through
/// the student only (augmentation term); the two are mixed with alpha.
TrainResult distill(const Model& teacher, const ModelSpec& student_spec, const Dataset& train, const Dataset& val,
                    const DistillSpec& dspec, const TrainConfig& config, TeacherCache* cache = nullptr);

struct Evaluation {
  CalibrationReport report;
  double accuracy = 0.0;
  PredictionSet predictions;
};

Evaluation evaluate(const Model& model, const Dataset& dataset, std::size_t n_bins = 15,
                    std::size_t batch_size = 256);

}  // namespace kdcal
