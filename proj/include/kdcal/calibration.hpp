// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "kdcal/data.hpp"
#include "kdcal/model.hpp"
#include "kdcal/tensor.hpp"

namespace kdcal {

struct PredictionSet {
  std::vector<double> confidences;  // max softmax probability at T = 1
  std::vector<int> predicted;
  std::vector<int> actual;

  std::size_t size() const { return confidences.size(); }
  void append(const PredictionSet& other);
};

/// Confidence = max softmax(z), prediction = argmax with ties to the lowest
/// class index.
PredictionSet predictions_from_logits(const Tensor& logits, const LabelBatch& labels);

/// Eval-mode forward over the dataset in fixed order, applying the model's
/// stored input normalization.
PredictionSet predict(const Model& model, const Dataset& dataset, std::size_t batch_size = 256);

struct BinStats {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 for empty bins
  double confidence = 0.0;  // 0 for empty bins
};

struct CalibrationReport {
  std::size_t n_bins = 0;
  std::vector<double> bin_edges;  // n_bins + 1 entries, edge b = b / n_bins
  std::vector<BinStats> bins;
  double ece = 0.0;
  double oe = 0.0;
  double accuracy = 0.0;
  std::size_t n_samples = 0;
};

/// Bin index of a confidence: bins are (lo, hi] except the first, which
/// also holds 0.
std::size_t bin_index(double confidence, const std::vector<double>& edges);

/// ECE = sum_b n_b/N |acc(b) - conf(b)|,
/// OE  = sum_b n_b/N conf(b) max(conf(b) - acc(b), 0).
CalibrationReport calibration_report(const PredictionSet& preds, std::size_t n_bins = 15);

/// ECE and OE recomputed from per-bin rows alone.
struct BinMetrics {
  double ece = 0.0;
  double oe = 0.0;
};
BinMetrics metrics_from_bins(const std::vector<BinStats>& bins);

/// Header: bin_lo,bin_hi,count,accuracy,confidence
void write_bins_csv(const CalibrationReport& report, std::ostream& out);
/// Header: confidence,correct
void write_scatter_csv(const PredictionSet& preds, std::ostream& out);
std::vector<BinStats> read_bins_csv(std::istream& in);

struct ReliabilityPaths {
  std::filesystem::path bins_csv;
  std::filesystem::path scatter_csv;
};

void reliability_export(const CalibrationReport& report, const PredictionSet& preds, const ReliabilityPaths& paths);

}  // namespace kdcal
