#include "moose/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace moose {
namespace {

struct Counts {
  std::size_t tp = 0, fp = 0;
};

// Sweeps thresholds from high to low; `next_group` yields the (positives,
// negatives) at the next distinct threshold, or false when exhausted.
template <class NextGroup>
DetectionMetrics sweep(std::size_t total_pos, std::size_t total_neg, NextGroup&& next_group) {
  if (total_pos == 0) throw UndefinedMetric("no positive samples");
  if (total_neg == 0) throw UndefinedMetric("no negative samples");
  DetectionMetrics m;
  Counts c;
  double prev_recall = 0.0;
  bool fpr_found = false;
  std::size_t gp = 0, gn = 0;
  while (next_group(gp, gn)) {
    c.tp += gp;
    c.fp += gn;
    if (gp == 0 && gn == 0) continue;
    const double recall = static_cast<double>(c.tp) / static_cast<double>(total_pos);
    const double precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
    m.aupr += (recall - prev_recall) * precision;
    prev_recall = recall;
    if (!fpr_found && c.tp * 100 >= total_pos * 95) {
      m.fpr95 = static_cast<double>(c.fp) / static_cast<double>(total_neg);
      fpr_found = true;
    }
  }
  return m;
}

DetectionMetrics exact_metrics(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores/labels size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t pos = 0;
  for (auto l : labels) pos += l != 0;
  std::size_t i = 0;
  return sweep(pos, scores.size() - pos, [&](std::size_t& gp, std::size_t& gn) {
    if (i >= order.size()) return false;
    gp = gn = 0;
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? gp : gn) += 1;
      ++i;
    }
    return true;
  });
}

void require_finite(std::span<const double> scores) {
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::domain_error("non-finite score");
  }
}

}  // namespace

double aupr(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_finite(scores);
  return exact_metrics(scores, labels).aupr;
}

double fpr_at_95_tpr(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require_finite(scores);
  return exact_metrics(scores, labels).fpr95;
}

void DetectionAccumulator::add(double score, bool positive) {
  if (!std::isfinite(score)) throw std::domain_error("non-finite score");
  scores_.push_back(score);
  labels_.push_back(positive ? 1 : 0);
  positives_ += positive;
}

void DetectionAccumulator::add(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("scores/labels size mismatch");
  for (std::size_t i = 0; i < scores.size(); ++i) add(scores[i], labels[i] != 0);
}

void DetectionAccumulator::merge(const DetectionAccumulator& other) {
  scores_.insert(scores_.end(), other.scores_.begin(), other.scores_.end());
  labels_.insert(labels_.end(), other.labels_.begin(), other.labels_.end());
  positives_ += other.positives_;
}

DetectionMetrics DetectionAccumulator::finalize(std::size_t exact_limit) const {
  if (scores_.size() <= exact_limit) return exact_metrics(scores_, labels_);

  const auto [lo_it, hi_it] = std::minmax_element(scores_.begin(), scores_.end());
  const double lo = *lo_it, range = *hi_it - *lo_it;
  std::vector<std::size_t> pos(kHistogramBins, 0), neg(kHistogramBins, 0);
  for (std::size_t i = 0; i < scores_.size(); ++i) {
    int b = 0;
    if (range > 0.0) {
      b = static_cast<int>((scores_[i] - lo) / range * kHistogramBins);
      b = std::clamp(b, 0, kHistogramBins - 1);
    }
    (labels_[i] ? pos : neg)[b] += 1;
  }
  int bin = kHistogramBins;
  DetectionMetrics m = sweep(positives_, negatives(), [&](std::size_t& gp, std::size_t& gn) {
    if (bin == 0) return false;
    --bin;
    gp = pos[bin];
    gn = neg[bin];
    return true;
  });
  m.exact = false;
  return m;
}

CalibrationAccumulator::CalibrationAccumulator(int num_bins)
    : bins_(num_bins), confidence_sum_(num_bins, 0.0), correct_sum_(num_bins, 0.0), counts_(num_bins, 0) {
  if (num_bins < 1) throw std::invalid_argument("ECE needs at least one bin");
}

int CalibrationAccumulator::bin_of(double confidence) const {
  const int b = static_cast<int>(std::ceil(confidence * bins_)) - 1;
  return std::clamp(b, 0, bins_ - 1);
}

void CalibrationAccumulator::add(double confidence, bool correct) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw std::domain_error("confidence outside [0, 1]");
  }
  const int b = bin_of(confidence);
  confidence_sum_[b] += confidence;
  correct_sum_[b] += correct ? 1.0 : 0.0;
  counts_[b] += 1;
  ++total_;
}

void CalibrationAccumulator::merge(const CalibrationAccumulator& other) {
  if (other.bins_ != bins_) throw std::invalid_argument("bin count mismatch");
  for (int b = 0; b < bins_; ++b) {
    confidence_sum_[b] += other.confidence_sum_[b];
    correct_sum_[b] += other.correct_sum_[b];
    counts_[b] += other.counts_[b];
  }
  total_ += other.total_;
}

double CalibrationAccumulator::value() const {
  if (total_ == 0) return 0.0;
  double e = 0.0;
  for (int b = 0; b < bins_; ++b) {
    if (counts_[b] == 0) continue;
    const double n = static_cast<double>(counts_[b]);
    e += n / static_cast<double>(total_) * std::abs(correct_sum_[b] / n - confidence_sum_[b] / n);
  }
  return e;
}

double ece(std::span<const double> confidences, std::span<const std::uint8_t> correct, int num_bins) {
  if (confidences.size() != correct.size()) throw std::invalid_argument("size mismatch");
  CalibrationAccumulator acc(num_bins);
  for (std::size_t i = 0; i < confidences.size(); ++i) acc.add(confidences[i], correct[i] != 0);
  return acc.value();
}

ConfusionAccumulator::ConfusionAccumulator(int num_classes, int ignore_index)
    : classes_(num_classes), ignore_(ignore_index),
      matrix_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be positive");
}

void ConfusionAccumulator::add_pair(int p, int g) {
  if (g == ignore_) return;
  if (g < 0 || g >= classes_) throw std::out_of_range("ground-truth label " + std::to_string(g));
  if (p < 0 || p >= classes_) throw std::out_of_range("predicted label " + std::to_string(p));
  matrix_[static_cast<std::size_t>(g) * classes_ + p] += 1;
}

void ConfusionAccumulator::add(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("mask size mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) add_pair(pred[i], gt[i]);
}

void ConfusionAccumulator::add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("mask size mismatch");
  for (std::size_t i = 0; i < pred.size(); ++i) add_pair(pred[i], gt[i]);
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.classes_ != classes_) throw std::invalid_argument("class count mismatch");
  for (std::size_t i = 0; i < matrix_.size(); ++i) matrix_[i] += other.matrix_[i];
}

std::size_t ConfusionAccumulator::intersection(int c) const {
  return matrix_[static_cast<std::size_t>(c) * classes_ + c];
}

std::size_t ConfusionAccumulator::union_count(int c) const {
  std::size_t row = 0, col = 0;
  for (int j = 0; j < classes_; ++j) {
    row += matrix_[static_cast<std::size_t>(c) * classes_ + j];
    col += matrix_[static_cast<std::size_t>(j) * classes_ + c];
  }
  return row + col - intersection(c);
}

double ConfusionAccumulator::miou(std::span<const int> class_subset) const {
  std::vector<int> classes(class_subset.begin(), class_subset.end());
  if (classes.empty()) {
    classes.resize(classes_);
    std::iota(classes.begin(), classes.end(), 0);
  }
  double sum = 0.0;
  int used = 0;
  for (int c : classes) {
    if (c < 0 || c >= classes_) throw std::out_of_range("class " + std::to_string(c));
    const std::size_t u = union_count(c);
    if (u == 0) continue;
    sum += static_cast<double>(intersection(c)) / static_cast<double>(u);
    ++used;
  }
  return used ? sum / used : std::numeric_limits<double>::quiet_NaN();
}

double miou(std::span<const int> pred, std::span<const int> gt, int num_classes,
            std::span<const int> class_subset, int ignore_index) {
  ConfusionAccumulator acc(num_classes, ignore_index);
  acc.add(pred, gt);
  return acc.miou(class_subset);
}

}  // namespace moose
