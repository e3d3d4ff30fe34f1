// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "kdcal/data.hpp"
#include "kdcal/losses.hpp"
#include "kdcal/model.hpp"
#include "kdcal/train.hpp"

namespace kdcal {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | cifar10 | cifar100
  std::size_t n_classes = 10;
  std::size_t samples_per_class = 500;
  std::size_t test_samples_per_class = 100;
  ImageShape image_shape{3, 32, 32};
  std::uint64_t seed = 1;
  std::vector<std::string> train_paths;
  std::vector<std::string> val_paths;
  std::vector<std::string> test_paths;
  double val_fraction = 0.1;
};

struct ModelConfig {
  Arch arch = Arch::tiny_student;
  double width_multiplier = 1.0;
  std::uint64_t seed = 0;
};

struct TrainSection {
  std::size_t epochs = 240;
  std::size_t batch_size = 64;
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  Schedule schedule{ScheduleKind::cosine, 240, {}, 0.1, 0.0};
  std::size_t crop_pad = 4;
  double flip_prob = 0.5;
};

/// One experiment. Every field has a default; the persisted copy written
/// next to the run materializes all of them.
struct ExperimentConfig {
  std::string name;  // defaults to the output directory's last component
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  DatasetConfig dataset;
  ModelConfig teacher{Arch::tiny_teacher, 1.0, 1};
  TrainSection teacher_train;
  ModelConfig student{Arch::tiny_student, 1.0, 1};
  DistillSpec distill;
  TrainSection train;
  std::size_t n_bins = 15;
};

/// Strict parse: unknown keys and invalid values raise ConfigError whose
/// message starts with the dotted field path (e.g. "distill.alpha: ...").
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& c);
nlohmann::json to_json(const DistillSpec& d);

ModelSpec teacher_spec(const ExperimentConfig& c);
ModelSpec student_spec(const ExperimentConfig& c);
TrainConfig teacher_train_config(const ExperimentConfig& c);
TrainConfig student_train_config(const ExperimentConfig& c);

struct ExperimentData {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Synthetic sets, or CIFAR binaries from the configured paths. Without
/// explicit validation files a seeded holdout of the training set is used.
ExperimentData load_experiment_data(const DatasetConfig& c);

/// Output directory after applying the KDCAL_OUTPUT_ROOT override to
/// relative paths.
std::filesystem::path resolve_output_dir(const ExperimentConfig& c);

struct SummaryArtifacts {
  std::string checkpoint;
  std::string config;
  std::string bins_csv;
  std::string scatter_csv;
};

/// Run summary: config echo, metrics at the best-validation checkpoint,
/// per-epoch series and artifact names (relative to the run directory).
nlohmann::json make_run_summary(const ExperimentConfig& config, const std::string& role, const RunRecord& record,
                                const Evaluation& test_eval, const SummaryArtifacts& artifacts);

}  // namespace kdcal
