#pragma once

// Pixel-level OoD detection and calibration metrics. Anomalous pixels are the
// positive class. Accumulators are mergeable so images can be reduced in any
// order.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace moose {

// Raised when a metric is undefined for its input (e.g. no positives).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Area under the precision-recall step curve (average precision); tied
// scores form a single operating point.
double aupr(std::span<const double> scores, std::span<const std::uint8_t> labels);

// False positive rate at the highest threshold whose TPR reaches 0.95.
double fpr_at_95_tpr(std::span<const double> scores, std::span<const std::uint8_t> labels);

struct DetectionMetrics {
  double aupr = 0.0;
  double fpr95 = 0.0;
  bool exact = true;
};

// Collects (score, label) pairs. Above `exact_limit` samples, finalize() bins
// scores into 2^16 equal-width buckets over [min, max]; only pairs that share a
// bucket are treated as tied, so the result equals the exact metric computed
// on scores quantised to bucket width (max - min) / 65536.
class DetectionAccumulator {
 public:
  static constexpr std::size_t kDefaultExactLimit = 1'000'000;
  static constexpr int kHistogramBins = 1 << 16;

  void add(double score, bool positive);
  void add(std::span<const double> scores, std::span<const std::uint8_t> labels);
  void merge(const DetectionAccumulator& other);

  std::size_t positives() const { return positives_; }
  std::size_t negatives() const { return scores_.size() - positives_; }
  std::size_t size() const { return scores_.size(); }

  DetectionMetrics finalize(std::size_t exact_limit = kDefaultExactLimit) const;

 private:
  std::vector<double> scores_;
  std::vector<std::uint8_t> labels_;
  std::size_t positives_ = 0;
};

// Equal-width confidence bins (i/B, (i+1)/B]; confidence 0 falls in bin 0.
class CalibrationAccumulator {
 public:
  explicit CalibrationAccumulator(int num_bins = 15);

  void add(double confidence, bool correct);
  void merge(const CalibrationAccumulator& other);
  int bin_of(double confidence) const;
  std::size_t count() const { return total_; }
  // Sum over bins of (bin mass) * |accuracy - mean confidence|; 0 when empty.
  double value() const;

 private:
  int bins_;
  std::vector<double> confidence_sum_;
  std::vector<double> correct_sum_;
  std::vector<std::size_t> counts_;
  std::size_t total_ = 0;
};

double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct,
           int num_bins = 15);

// Class confusion counts; pixels whose ground truth is `ignore_index` are void.
class ConfusionAccumulator {
 public:
  ConfusionAccumulator(int num_classes, int ignore_index);

  void add(std::span<const int> pred, std::span<const int> gt);
  void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
  void merge(const ConfusionAccumulator& other);

  int num_classes() const { return classes_; }
  std::size_t intersection(int c) const;
  std::size_t union_count(int c) const;
  // Mean IoU over `class_subset` (all classes when empty), skipping classes
  // absent from both prediction and ground truth. NaN when every class is skipped.
  double miou(std::span<const int> class_subset = {}) const;

 private:
  void add_pair(int p, int g);
  int classes_;
  int ignore_;
  std::vector<std::size_t> matrix_;  // [gt][pred]
};

double miou(std::span<const int> pred, std::span<const int> gt, int num_classes,
            std::span<const int> class_subset = {}, int ignore_index = 255);

}  // namespace moose
