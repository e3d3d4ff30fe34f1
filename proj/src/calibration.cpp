// SPDX-License-Identifier: Apache-2.0
#include "kdcal/calibration.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>

#include "kdcal/error.hpp"
#include "kdcal/losses.hpp"

namespace kdcal {

namespace {

constexpr const char* kBinsHeader = "bin_lo,bin_hi,count,accuracy,confidence";
constexpr const char* kScatterHeader = "confidence,correct";

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void PredictionSet::append(const PredictionSet& other) {
  confidences.insert(confidences.end(), other.confidences.begin(), other.confidences.end());
  predicted.insert(predicted.end(), other.predicted.begin(), other.predicted.end());
  actual.insert(actual.end(), other.actual.begin(), other.actual.end());
}

PredictionSet predictions_from_logits(const Tensor& logits, const LabelBatch& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw InputError("predictions_from_logits: logits rows must match label count");
  }
  const Tensor p = temp_softmax(logits, 1.0);
  PredictionSet out;
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < c; ++k) {
      if (logits(r, k) > logits(r, best)) best = k;
    }
    out.confidences.push_back(p(r, best));
    out.predicted.push_back(static_cast<int>(best));
    out.actual.push_back(labels[r]);
  }
  return out;
}

PredictionSet predict(const Model& model, const Dataset& dataset, std::size_t batch_size) {
  if (model.mode() != Mode::eval) throw UsageError("predict requires an eval-mode model");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (dataset.images.rank() != 4 || dataset.image_shape() != model.spec().input_shape) {
    throw InputError("predict: dataset image shape " + shape_string(dataset.images.shape()) +
                     " does not match model input");
  }
  PredictionSet out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < dataset.size(); start += batch_size) {
    const std::size_t end = std::min(dataset.size(), start + batch_size);
    idx.resize(end - start);
    for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
    const Batch b = gather(dataset, idx);
    const ForwardResult r = forward(model, normalize(b.images, model.normalization()));
    out.append(predictions_from_logits(r.logits, b.labels));
  }
  return out;
}

std::size_t bin_index(double confidence, const std::vector<double>& edges) {
  // First upper edge >= confidence; confidence 0 lands in bin 0.
  const auto it = std::lower_bound(edges.begin() + 1, edges.end(), confidence);
  const auto b = static_cast<std::size_t>(it - (edges.begin() + 1));
  return std::min(b, edges.size() - 2);
}

CalibrationReport calibration_report(const PredictionSet& preds, std::size_t n_bins) {
  if (n_bins < 1) throw ConfigError("n_bins must be >= 1");
  const std::size_t n = preds.size();
  if (n == 0) throw InputError("calibration_report: empty prediction set");
  if (preds.predicted.size() != n || preds.actual.size() != n) {
    throw InputError("calibration_report: prediction arrays differ in length");
  }
  CalibrationReport rep;
  rep.n_bins = n_bins;
  rep.n_samples = n;
  rep.bin_edges.resize(n_bins + 1);
  for (std::size_t b = 0; b <= n_bins; ++b) {
    rep.bin_edges[b] = static_cast<double>(b) / static_cast<double>(n_bins);
  }
  std::vector<double> conf_sum(n_bins, 0.0), correct_sum(n_bins, 0.0);
  std::vector<std::size_t> counts(n_bins, 0);
  std::size_t correct_total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double c = preds.confidences[i];
    if (!(c >= 0.0 && c <= 1.0)) {
      throw InputError("calibration_report: confidence " + fmt(c) + " outside [0, 1] at index " +
                       std::to_string(i));
    }
    const std::size_t b = bin_index(c, rep.bin_edges);
    const bool ok = preds.predicted[i] == preds.actual[i];
    ++counts[b];
    conf_sum[b] += c;
    correct_sum[b] += ok ? 1.0 : 0.0;
    correct_total += ok ? 1 : 0;
  }
  rep.bins.resize(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    BinStats& s = rep.bins[b];
    s.lo = rep.bin_edges[b];
    s.hi = rep.bin_edges[b + 1];
    s.count = counts[b];
    if (counts[b] > 0) {
      s.accuracy = correct_sum[b] / static_cast<double>(counts[b]);
      s.confidence = conf_sum[b] / static_cast<double>(counts[b]);
    }
  }
  const BinMetrics m = metrics_from_bins(rep.bins);
  rep.ece = m.ece;
  rep.oe = m.oe;
  rep.accuracy = static_cast<double>(correct_total) / static_cast<double>(n);
  return rep;
}

BinMetrics metrics_from_bins(const std::vector<BinStats>& bins) {
  std::size_t total = 0;
  for (const auto& b : bins) total += b.count;
  BinMetrics m;
  if (total == 0) return m;
  for (const auto& b : bins) {
    if (b.count == 0) continue;
    const double w = static_cast<double>(b.count) / static_cast<double>(total);
    m.ece += w * std::abs(b.accuracy - b.confidence);
    m.oe += w * (b.confidence * std::max(b.confidence - b.accuracy, 0.0));
  }
  return m;
}

void write_bins_csv(const CalibrationReport& report, std::ostream& out) {
  out << kBinsHeader << '\n';
  for (const auto& b : report.bins) {
    out << fmt(b.lo) << ',' << fmt(b.hi) << ',' << b.count << ',' << fmt(b.accuracy) << ',' << fmt(b.confidence)
        << '\n';
  }
}

void write_scatter_csv(const PredictionSet& preds, std::ostream& out) {
  out << kScatterHeader << '\n';
  for (std::size_t i = 0; i < preds.size(); ++i) {
    out << fmt(preds.confidences[i]) << ',' << (preds.predicted[i] == preds.actual[i] ? 1 : 0) << '\n';
  }
}

std::vector<BinStats> read_bins_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kBinsHeader) throw FormatError("bins CSV: unexpected header");
  std::vector<BinStats> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (fields.size() != 5) throw FormatError("bins CSV: line " + std::to_string(line_no) + " needs 5 fields");
    try {
      BinStats b;
      b.lo = std::stod(fields[0]);
      b.hi = std::stod(fields[1]);
      b.count = static_cast<std::size_t>(std::stoull(fields[2]));
      b.accuracy = std::stod(fields[3]);
      b.confidence = std::stod(fields[4]);
      out.push_back(b);
    } catch (const std::exception&) {
      throw FormatError("bins CSV: malformed number on line " + std::to_string(line_no));
    }
  }
  return out;
}

void reliability_export(const CalibrationReport& report, const PredictionSet& preds, const ReliabilityPaths& paths) {
  {
    std::ofstream out(paths.bins_csv, std::ios::trunc);
    if (!out) throw IoError("cannot write " + paths.bins_csv.string());
    write_bins_csv(report, out);
    if (!out.flush()) throw IoError("failed writing " + paths.bins_csv.string());
  }
  std::ofstream out(paths.scatter_csv, std::ios::trunc);
  if (!out) throw IoError("cannot write " + paths.scatter_csv.string());
  write_scatter_csv(preds, out);
  if (!out.flush()) throw IoError("failed writing " + paths.scatter_csv.string());
}

}  // namespace kdcal
