#pragma once

// Slow, direct reference implementations used to check the library.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <vector>

namespace oracle {

// Area under the precision-recall step curve, evaluating every distinct
// threshold from scratch.
inline double aupr(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double positives = 0;
  for (auto v : y) positives += v;
  double area = 0.0, prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    }
    const double recall = tp / positives;
    area += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return area;
}

inline double fpr95(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double positives = 0;
  for (auto v : y) positives += v;
  const double negatives = static_cast<double>(y.size()) - positives;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] >= t) (y[i] ? tp : fp) += 1;
    }
    if (tp / positives >= 0.95) return fp / negatives;
  }
  return 1.0;
}

// Random instance with at least one positive and one negative. Scores are
// drawn from a small alphabet to force ties.
struct Instance {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

inline Instance random_instance(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const int n = 2 + static_cast<int>(gen() % 127);
  const int alphabet = 1 + static_cast<int>(gen() % (n + 1));
  const double prevalence = 0.05 + 0.9 * std::uniform_real_distribution<>(0, 1)(gen);
  Instance inst;
  for (int i = 0; i < n; ++i) {
    inst.scores.push_back(static_cast<double>(gen() % alphabet) / alphabet);
    inst.labels.push_back(std::uniform_real_distribution<>(0, 1)(gen) < prevalence);
  }
  inst.labels[0] = 1;
  inst.labels[1] = 0;
  return inst;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double sum = 0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += p[i] = std::exp(z[i] - m);
  for (auto& v : p) v /= sum;
  return p;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p) {
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}

}  // namespace oracle
