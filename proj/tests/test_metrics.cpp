#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "moose/metrics.hpp"
#include "oracles.hpp"

using namespace moose;

TEST_CASE("aupr and fpr95 agree with the all-thresholds oracle") {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto inst = oracle::random_instance(seed);
    CHECK(aupr(inst.scores, inst.labels) == doctest::Approx(oracle::aupr(inst.scores, inst.labels)).epsilon(1e-12));
    CHECK(std::abs(fpr_at_95_tpr(inst.scores, inst.labels) - oracle::fpr95(inst.scores, inst.labels)) <= 1e-9);
  }
}

TEST_CASE("aupr small cases") {
  SUBCASE("perfect separation") {
    const std::vector<double> s{.9, .8, .2, .1};
    const std::vector<std::uint8_t> y{1, 1, 0, 0};
    CHECK(aupr(s, y) == doctest::Approx(1.0));
    CHECK(fpr_at_95_tpr(s, y) == 0.0);
  }
  SUBCASE("all scores tied gives prevalence") {
    const std::vector<double> s(10, 0.3);
    const std::vector<std::uint8_t> y{1, 0, 0, 1, 0, 0, 0, 1, 0, 0};
    CHECK(aupr(s, y) == doctest::Approx(0.3));
  }
  SUBCASE("mixed ranking") {
    const std::vector<double> s{.9, .8, .3, .1};
    const std::vector<std::uint8_t> y{1, 0, 1, 0};
    // Thresholds .9 -> (R=.5, P=1), .8 -> (.5, .5), .3 -> (1, 2/3).
    CHECK(aupr(s, y) == doctest::Approx(0.5 * 1.0 + 0.5 * 2.0 / 3.0));
    CHECK(aupr(s, y) == doctest::Approx(oracle::aupr(s, y)));
  }
  SUBCASE("negatives all above positives") {
    const std::vector<double> s{.9, .8, .3, .1};
    const std::vector<std::uint8_t> y{0, 0, 1, 1};
    CHECK(fpr_at_95_tpr(s, y) == 1.0);
  }
}

TEST_CASE("metrics are undefined without both classes") {
  const std::vector<double> s{.1, .2};
  CHECK_THROWS_AS(aupr(s, std::vector<std::uint8_t>{0, 0}), UndefinedMetric);
  CHECK_THROWS_AS(fpr_at_95_tpr(s, std::vector<std::uint8_t>{1, 1}), UndefinedMetric);
}

TEST_CASE("detection metrics are invariant to monotone score transforms") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto inst = oracle::random_instance(seed);
    std::vector<double> t;
    for (double v : inst.scores) t.push_back(std::exp(3.0 * v) - 7.0);
    CHECK(aupr(t, inst.labels) == doctest::Approx(aupr(inst.scores, inst.labels)).epsilon(1e-12));
    CHECK(fpr_at_95_tpr(t, inst.labels) == fpr_at_95_tpr(inst.scores, inst.labels));
  }
}

TEST_CASE("shuffled labels give mean aupr near prevalence") {
  std::mt19937_64 gen(11);
  const int n = 400, positives = 40;
  std::vector<double> s(n);
  for (auto& v : s) v = std::uniform_real_distribution<>(0, 1)(gen);
  std::vector<std::uint8_t> y(n, 0);
  std::fill(y.begin(), y.begin() + positives, 1);
  std::vector<double> values;
  for (int trial = 0; trial < 200; ++trial) {
    std::shuffle(y.begin(), y.end(), gen);
    values.push_back(aupr(s, y));
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / values.size();
  double var = 0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double se = std::sqrt(var / (values.size() - 1)) / std::sqrt(values.size());
  // Expected AP of a uniformly random ranking with P positives among n:
  // (P - 1) / (n - 1) + (n - P) / (n (n - 1)) * H_n, slightly above prevalence.
  double h = 0;
  for (int i = 1; i <= n; ++i) h += 1.0 / i;
  const double expected = (positives - 1.0) / (n - 1.0) + (n - positives) / (n * (n - 1.0)) * h;
  CHECK(std::abs(mean - expected) < 3 * se);
  CHECK(std::abs(mean - 0.1) < 0.02);
}

TEST_CASE("histogram path equals exact metric on bucket-quantised scores") {
  std::mt19937_64 gen(5);
  DetectionAccumulator acc;
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (int i = 0; i < 200000; ++i) {
    const bool pos = std::uniform_real_distribution<>(0, 1)(gen) < 0.03;
    const double s = std::normal_distribution<>(pos ? 1.0 : 0.0, 1.0)(gen);
    scores.push_back(s);
    labels.push_back(pos);
    acc.add(s, pos);
  }
  const DetectionMetrics approx = acc.finalize(1000);
  CHECK_FALSE(approx.exact);
  const double lo = *std::min_element(scores.begin(), scores.end());
  const double hi = *std::max_element(scores.begin(), scores.end());
  const int bins = DetectionAccumulator::kHistogramBins;
  std::vector<double> bucket;
  for (double s : scores) {
    int b = static_cast<int>((s - lo) / (hi - lo) * bins);
    bucket.push_back(std::clamp(b, 0, bins - 1));
  }
  CHECK(approx.aupr == doctest::Approx(aupr(bucket, labels)).epsilon(1e-12));
  CHECK(approx.fpr95 == doctest::Approx(fpr_at_95_tpr(bucket, labels)).epsilon(1e-12));
  const DetectionMetrics exact = acc.finalize();
  CHECK(exact.exact);
  CHECK(std::abs(exact.aupr - approx.aupr) < 1e-3);
  CHECK(std::abs(exact.fpr95 - approx.fpr95) < 1e-3);
}

TEST_CASE("detection accumulator merge is order independent") {
  const auto a = oracle::random_instance(3), b = oracle::random_instance(4);
  DetectionAccumulator x, y, ab, ba;
  x.add(a.scores, a.labels);
  y.add(b.scores, b.labels);
  ab = x;
  ab.merge(y);
  ba = y;
  ba.merge(x);
  CHECK(ab.finalize().aupr == ba.finalize().aupr);
  CHECK(ab.finalize().fpr95 == ba.finalize().fpr95);
  CHECK(ab.positives() == x.positives() + y.positives());
}

TEST_CASE("ece") {
  SUBCASE("confident and correct") {
    const std::vector<double> c(50, 1.0);
    const std::vector<std::uint8_t> k(50, 1);
    CHECK(ece(c, k) == 0.0);
  }
  SUBCASE("single bin with a gap") {
    std::vector<double> c(10, 0.8);
    std::vector<std::uint8_t> k{1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
    CHECK(ece(c, k) == doctest::Approx(0.2).epsilon(1e-15));
  }
  SUBCASE("hand-built bins") {
    // bin (0.2, 0.266]: 4 samples conf .25, 3 correct -> gap .5
    // bin (0.6, 0.666]: 6 samples conf .65, 2 correct -> gap .3167
    std::vector<double> c;
    std::vector<std::uint8_t> k;
    for (int i = 0; i < 4; ++i) c.push_back(0.25), k.push_back(i < 3);
    for (int i = 0; i < 6; ++i) c.push_back(0.65), k.push_back(i < 2);
    const double expected = 0.4 * std::abs(0.75 - 0.25) + 0.6 * std::abs(2.0 / 6.0 - 0.65);
    CHECK(ece(c, k) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("adding a calibrated bin of mass m scales by 1 - m") {
    std::vector<double> c(10, 0.8);
    std::vector<std::uint8_t> k{1, 1, 1, 1, 1, 1, 0, 0, 0, 0};
    const double before = ece(c, k);
    // 10 samples at confidence .5 with 5 correct: mass 1/2 of the new set.
    for (int i = 0; i < 10; ++i) c.push_back(0.5), k.push_back(i < 5);
    CHECK(ece(c, k) == doctest::Approx(before * 0.5).epsilon(1e-12));
  }
  SUBCASE("bin edges") {
    CalibrationAccumulator acc(15);
    CHECK(acc.bin_of(0.0) == 0);
    CHECK(acc.bin_of(1.0) == 14);
    CHECK(acc.bin_of(1.0 / 15.0) == 0);
    CHECK(acc.bin_of(1.0 / 15.0 + 1e-12) == 1);
    CHECK_THROWS(acc.add(1.5, true));
  }
}

TEST_CASE("miou") {
  SUBCASE("identical") {
    const std::vector<int> a{0, 1, 2, 2};
    CHECK(miou(a, a, 3) == 1.0);
  }
  SUBCASE("disjoint single class") {
    const std::vector<int> p{0, 0, 1, 1}, g{1, 1, 0, 0};
    CHECK(miou(p, g, 2) == 0.0);
  }
  SUBCASE("two by two") {
    // pred: A on the left column; gt: A on the top row. Row-major.
    const std::vector<int> p{0, 1, 0, 1}, g{0, 0, 1, 1};
    CHECK(miou(p, g, 2, std::vector<int>{0}) == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("void pixels and absent classes are skipped") {
    const std::vector<int> p{0, 1, 1, 3}, g{0, 1, 255, 255};
    CHECK(miou(p, g, 4) == 1.0);
    ConfusionAccumulator acc(4, 255);
    acc.add(std::span<const int>(p), std::span<const int>(g));
    CHECK(acc.union_count(3) == 0);
    CHECK(std::isnan(acc.miou(std::vector<int>{2, 3})));
  }
}
