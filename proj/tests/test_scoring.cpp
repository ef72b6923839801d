#include <doctest.h>

#include <random>
#include <sstream>

#include "moose/scoring.hpp"
#include "oracles.hpp"

using namespace moose;

namespace {

LogitStack random_stack(std::uint64_t seed, int heads, int classes, int h = 3, int w = 4, double scale = 3.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<> n(0.0, scale);
  LogitStack s(heads, classes, h, w);
  for (float& v : s.tensor().values()) v = static_cast<float>(n(gen));
  return s;
}

std::vector<double> pixel_logits(const LogitStack& s, int head, std::size_t px) {
  std::vector<double> z;
  for (int c = 0; c < s.num_classes(); ++c) z.push_back(s.plane(head, c)[px]);
  return z;
}

std::vector<double> mean_probs(const LogitStack& s, const std::vector<int>& heads, std::size_t px) {
  std::vector<double> m(s.num_classes(), 0.0);
  for (int k : heads) {
    const auto p = oracle::softmax(pixel_logits(s, k, px));
    for (int c = 0; c < s.num_classes(); ++c) m[c] += p[c] / heads.size();
  }
  return m;
}

}  // namespace

TEST_CASE("softmax rows sum to one") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = random_stack(seed, 2 + seed % 5, 2 + seed % 9, 3, 4, 10.0);
    const auto p = softmax_per_head(s);
    for (int k = 0; k < p.heads; ++k) {
      for (std::size_t px = 0; px < s.pixels(); ++px) {
        double sum = 0;
        for (int c = 0; c < p.classes; ++c) sum += p.at(k, c, px);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("scores match a per-pixel reference") {
  const auto s = random_stack(9, 5, 6);
  const std::vector<int> all{0, 1, 2, 3, 4};
  const auto msp = score_msp(s, HeadSet::all_heads());
  const auto h = score_entropy(s, HeadSet::all_heads());
  const auto ml = score_maxlogit(s, HeadSet::all_heads());
  for (std::size_t px = 0; px < s.pixels(); ++px) {
    const auto m = mean_probs(s, all, px);
    CHECK(msp.values[px] == doctest::Approx(-*std::max_element(m.begin(), m.end())).epsilon(1e-12));
    CHECK(h.values[px] == doctest::Approx(oracle::entropy(m)).epsilon(1e-12));
    std::vector<double> zbar(s.num_classes(), 0.0);
    for (int k : all) {
      const auto z = pixel_logits(s, k, px);
      for (int c = 0; c < s.num_classes(); ++c) zbar[c] += z[c] / all.size();
    }
    CHECK(ml.values[px] == doctest::Approx(-*std::max_element(zbar.begin(), zbar.end())).epsilon(1e-12));
  }
}

TEST_CASE("global head set equals the single-model baselines exactly") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = random_stack(seed, 4, 5);
    const auto g = s.head(0);
    LogitStack single(1, 5, s.height(), s.width());
    std::copy(g.values().begin(), g.values().end(), single.tensor().values().begin());
    for (ScoringFn fn : kAllScoringFns) {
      CHECK(score(s, fn, HeadSet::global_only()).values == score(single, fn, HeadSet::all_heads()).values);
    }
  }
}

TEST_CASE("mutual information") {
  SUBCASE("non-negative") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto s = random_stack(seed, 2 + seed % 5, 2 + seed % 9);
      for (double v : mutual_information(s, HeadSet::all_heads())) CHECK(v >= -1e-9);
    }
  }
  SUBCASE("zero for duplicated heads") {
    auto s = random_stack(3, 4, 7);
    for (int k = 1; k < 4; ++k) std::copy(s.plane(0, 0), s.plane(0, 0) + 7 * s.pixels(), s.plane(k, 0));
    for (double v : mutual_information(s, HeadSet::all_heads())) CHECK(v < 1e-9);
    for (double v : prediction_variance(s, HeadSet::all_heads())) CHECK(v == 0.0);
  }
  SUBCASE("entropy decomposition") {
    const auto s = random_stack(17, 5, 4);
    const auto h_all = score_entropy(s, HeadSet::all_heads()).values;
    const auto h_g = score_entropy(s, HeadSet::global_only()).values;
    const auto mi = mutual_information(s, HeadSet::all_heads());
    for (std::size_t px = 0; px < s.pixels(); ++px) {
      double mean_h = 0;
      for (int k = 0; k < 5; ++k) mean_h += oracle::entropy(oracle::softmax(pixel_logits(s, k, px))) / 5;
      const double g = oracle::entropy(oracle::softmax(pixel_logits(s, 0, px)));
      CHECK(h_all[px] == doctest::Approx(h_g[px] + mi[px] + (mean_h - g)).epsilon(1e-10));
    }
  }
}

TEST_CASE("prediction variance") {
  SUBCASE("two opposite one-hot heads") {
    LogitStack s(2, 2, 1, 1);
    s.at(0, 0, 0, 0) = 100.f;
    s.at(0, 1, 0, 0) = -100.f;
    s.at(1, 0, 0, 0) = -100.f;
    s.at(1, 1, 0, 0) = 100.f;
    CHECK(prediction_variance(s, HeadSet::all_heads())[0] == doctest::Approx(25.0));
  }
  SUBCASE("two-pass reference") {
    const auto s = random_stack(21, 3, 6);
    const auto var = prediction_variance(s, HeadSet::all_heads());
    for (std::size_t px = 0; px < s.pixels(); ++px) {
      std::vector<std::vector<double>> p;
      for (int k = 0; k < 3; ++k) p.push_back(oracle::softmax(pixel_logits(s, k, px)));
      double total = 0;
      for (int c = 0; c < 6; ++c) {
        double mean = 0;
        for (int k = 0; k < 3; ++k) mean += p[k][c] / 3;
        double v = 0;
        for (int k = 0; k < 3; ++k) v += (p[k][c] - mean) * (p[k][c] - mean) / 3;
        total += v;
      }
      CHECK(std::abs(var[px] - 100.0 * total / 6) < 1e-9);
    }
  }
}

TEST_CASE("mean prediction argmax ignores per-pixel logit shifts") {
  auto s = random_stack(5, 3, 5);
  const auto before = mean_prediction(s, HeadSet::all_heads()).labels;
  for (int k = 0; k < 3; ++k) {
    for (std::size_t px = 0; px < s.pixels(); ++px) {
      for (int c = 0; c < 5; ++c) s.plane(k, c)[px] += static_cast<float>(px);
    }
  }
  CHECK(mean_prediction(s, HeadSet::all_heads()).labels == before);
}

TEST_CASE("head sets") {
  CHECK(parse_head_set("global").resolve(5) == std::vector<int>{0});
  CHECK(parse_head_set("all").resolve(3) == std::vector<int>{0, 1, 2});
  CHECK(parse_head_set("1,3").resolve(5) == std::vector<int>{1, 3});
  CHECK_THROWS_AS(parse_head_set("1,7").resolve(5), std::invalid_argument);
  CHECK_THROWS_AS(parse_head_set("").resolve(5), std::invalid_argument);
  CHECK(parse_scoring_fn("H") == ScoringFn::kEntropy);
  CHECK_THROWS_AS(parse_scoring_fn("auroc"), std::invalid_argument);
}

TEST_CASE("non-finite logits are rejected") {
  auto s = random_stack(1, 2, 3);
  s.at(1, 2, 0, 0) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(score_entropy(s, HeadSet::all_heads()), std::domain_error);
}

TEST_CASE("score map round trip") {
  const auto s = random_stack(2, 3, 4, 5, 6);
  const ScoreMap m = score_entropy(s, HeadSet::all_heads());
  std::stringstream ss;
  write_score_map(ss, m);
  const ScoreMap r = read_score_map(ss);
  CHECK(r.height == 5);
  CHECK(r.width == 6);
  CHECK(r.fn == ScoringFn::kEntropy);
  for (std::size_t i = 0; i < m.values.size(); ++i) CHECK(r.values[i] == static_cast<float>(m.values[i]));
}
