#include <doctest.h>

#include <cmath>
#include <json.hpp>
#include <sstream>

#include "moose/analysis.hpp"
#include "moose/metrics.hpp"
#include "oracles.hpp"

using namespace moose;

namespace {

constexpr int kHeads = 3, kClasses = 4, kSize = 8;

// Small scenes with anomalies, ignore pixels and (in one scene) void pixels.
std::vector<LabeledScene> toy_scenes() {
  std::vector<LabeledScene> out;
  Rng rng(41);
  for (int s = 0; s < 3; ++s) {
    LabeledScene sc;
    sc.image = Tensor({3, kSize, kSize});
    for (float& v : sc.image.values()) v = static_cast<float>(rng.uniform());
    const std::size_t plane = kSize * kSize;
    sc.labels = {kSize, kSize, std::vector<std::uint8_t>(plane)};
    sc.anomaly = {kSize, kSize, std::vector<std::uint8_t>(plane, 0), {}};
    for (std::size_t p = 0; p < plane; ++p) {
      sc.labels.values[p] = static_cast<std::uint8_t>(rng.integer(0, kClasses - 1));
      if (rng.uniform() < 0.2) {
        sc.anomaly.values[p] = 1;
        sc.labels.values[p] = kIgnoreIndex;
      } else if (rng.uniform() < 0.05) {
        sc.labels.values[p] = kIgnoreIndex;
      }
    }
    if (s == 1) {
      sc.anomaly.void_mask.assign(plane, 0);
      for (std::size_t p = 0; p < plane; p += 5) sc.anomaly.void_mask[p] = 1;
    }
    out.push_back(std::move(sc));
  }
  return out;
}

// Logits that depend on the image, so every scene gets a different stack.
LogitStack toy_forward(const Tensor& image) {
  LogitStack s(kHeads, kClasses, kSize, kSize);
  const std::size_t plane = kSize * kSize;
  for (int h = 0; h < kHeads; ++h)
    for (int c = 0; c < kClasses; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        s.plane(h, c)[p] = static_cast<float>(3.0 * image[(c % 3) * plane + p] * (1 + 0.5 * h) - 0.4 * c * h);
      }
  return s;
}

}  // namespace

TEST_CASE("evaluation agrees with a direct recomputation") {
  const auto scenes = toy_scenes();
  const ScoringFn fns[] = {ScoringFn::kMsp, ScoringFn::kEntropy, ScoringFn::kMaxLogit};
  EvalOptions opts;
  opts.method = "toy";
  const auto reports = evaluate_stacks(toy_forward, scenes, fns, opts);
  REQUIRE(reports.size() == 3);

  for (int f = 0; f < 3; ++f) {
    CAPTURE(f);
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;
    std::vector<double> conf;
    std::vector<std::uint8_t> correct;
    for (const auto& sc : scenes) {
      const LogitStack stack = toy_forward(sc.image);
      for (std::size_t p = 0; p < stack.pixels(); ++p) {
        if (!sc.anomaly.void_mask.empty() && sc.anomaly.void_mask[p]) continue;
        std::vector<double> mean(kClasses, 0.0), mean_logit(kClasses, 0.0);
        for (int h = 0; h < kHeads; ++h) {
          std::vector<double> z(kClasses);
          for (int c = 0; c < kClasses; ++c) z[c] = stack.plane(h, c)[p];
          const auto q = oracle::softmax(z);
          for (int c = 0; c < kClasses; ++c) {
            mean[c] += q[c] / kHeads;
            mean_logit[c] += z[c] / kHeads;
          }
        }
        const double top = *std::max_element(mean.begin(), mean.end());
        const double value = f == 0   ? -top
                             : f == 1 ? oracle::entropy(mean)
                                      : -*std::max_element(mean_logit.begin(), mean_logit.end());
        scores.push_back(value);
        labels.push_back(sc.anomaly.values[p]);
        if (!sc.anomaly.values[p] && sc.labels.values[p] != kIgnoreIndex) {
          conf.push_back(top);
          const int arg = static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin());
          correct.push_back(arg == sc.labels.values[p]);
        }
      }
    }
    const auto& r = reports[f];
    CHECK(r.aupr == doctest::Approx(oracle::aupr(scores, labels)).epsilon(1e-9));
    CHECK(r.fpr95 == doctest::Approx(oracle::fpr95(scores, labels)).epsilon(1e-9));
    CHECK(r.ece == doctest::Approx(ece(conf, correct)).epsilon(1e-12));
    CHECK(r.evaluated_pixels == scores.size());
    CHECK(r.method == "toy");
  }
}

TEST_CASE("report text and json") {
  EvalReport r;
  r.aupr = 0.4375;
  r.fpr95 = 0.25;
  r.ece = 0.015625;
  r.miou = 0.75;
  r.positives = 12;
  r.negatives = 300;
  r.evaluated_pixels = 312;
  r.scoring_fn = "msp";
  r.head_set = "all_heads";
  r.method = "MOoSe";
  r.model_id = "m1";
  std::stringstream ss;
  write_report(ss, r);
  const EvalReport back = read_report(ss);
  CHECK(back.aupr == r.aupr);
  CHECK(back.fpr95 == r.fpr95);
  CHECK(back.positives == 12);
  CHECK(back.method == "MOoSe");

  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j["aupr"].get<double>() == r.aupr);
  CHECK(j["scoring_fn"] == "msp");

  r.aupr = std::nan("");
  CHECK(nlohmann::json::parse(report_json(r))["aupr"].is_null());
  CHECK(table_row(back).find("43.75") != std::string::npos);
}

TEST_CASE("diversity of identical heads is zero") {
  const auto scenes = toy_scenes();
  const StackFn copies = [](const Tensor& image) {
    LogitStack s = toy_forward(image);
    for (int h = 1; h < kHeads; ++h) {
      std::copy(s.plane(0, 0), s.plane(0, 0) + kClasses * s.pixels(), s.plane(h, 0));
    }
    return s;
  };
  const NamedStack methods[] = {{"copies", copies}, {"toy", toy_forward}};
  const DiversityReport d = run_diversity_analysis(methods, scenes);
  CHECK(d.row("copies").variance_mean == 0.0);
  CHECK(d.row("copies").mi_mean < 1e-12);
  CHECK(d.row("toy").variance_mean > 0.0);
  CHECK(d.row("toy").mi_mean > 0.0);
  CHECK_THROWS(d.row("absent"));
  CHECK(nlohmann::json::parse(diversity_json(d)).is_object());
}

TEST_CASE("corruption curves") {
  SceneConfig sc;
  sc.image_size = 32;
  sc.min_object_size = 4;
  sc.max_object_size = 8;
  sc.min_anomaly_size = 4;
  sc.max_anomaly_size = 8;
  sc.test_size = 3;
  std::vector<LabeledScene> scenes;
  for (int i = 0; i < 3; ++i) scenes.push_back(generate_scene(sc, i, Split::kTest));
  PyramidConfig p;
  p.encoder_channels = 8;
  p.branch_channels = 4;
  p.head_projection_channels = 8;
  p.output_stride = 4;
  p.branch_dilations = {1, 3, 6};
  const PyramidModel m = build_model(p, {}, 3);
  const std::vector<int> fg = foreground_classes(sc);
  const CorruptionCurve c = run_corruption_analysis(m, scenes, fg, kDefaultNoiseLevels, 9);
  REQUIRE(c.probes.size() == 3);
  for (std::size_t i = 0; i < c.probes.size(); ++i) {
    CHECK(c.probes[i].dilation == p.branch_dilations[i]);
    CHECK(c.probes[i].retained.size() == 5);
    if (c.probes[i].clean_miou > 0) CHECK(c.probes[i].retained[0] == 1.0);
  }
  if (c.global.clean_miou > 0) CHECK(c.global.retained[0] == 1.0);
  CHECK(nlohmann::json::parse(corruption_json(c))["probes"].size() == 3);
}

TEST_CASE("ablation rows") {
  AblationRow r;
  r.label = "SD-4";
  r.global_aupr = {0.2, 0.25, 0.4};
  r.moose_aupr = {0.22, 0.25, 0.3};
  CHECK(r.absolute_change(0) == doctest::Approx(0.02));
  CHECK(r.relative_change(0) == doctest::Approx(0.1));
  CHECK(r.relative_change(2) == doctest::Approx(-0.25));
  CHECK(r.mean_relative_change() == doctest::Approx((0.1 + 0.0 - 0.25) / 3));
  const std::vector<AblationRow> rows{r};
  CHECK(nlohmann::json::parse(ablation_json(rows))["rows"][0]["label"] == "SD-4");
  CHECK(ablation_table(rows).find("SD-4") != std::string::npos);
}
