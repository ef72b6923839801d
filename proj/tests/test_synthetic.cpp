#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "moose/synthetic.hpp"

using namespace moose;
namespace fs = std::filesystem;

namespace {

bool same_scene(const LabeledScene& a, const LabeledScene& b) {
  return a.image.values() == b.image.values() && a.labels.values == b.labels.values &&
         a.anomaly.values == b.anomaly.values;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

SceneConfig small_split_config() {
  SceneConfig c;
  c.image_size = 64;
  c.min_object_size = 6;
  c.max_object_size = 14;
  c.min_anomaly_size = 6;
  c.max_anomaly_size = 20;
  c.train_size = 5;
  c.val_size = 3;
  c.test_size = 4;
  return c;
}

// Two-sided Kolmogorov-Smirnov statistic against U(0, 1).
double ks_uniform(std::vector<double> x) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    d = std::max({d, (i + 1) / n - x[i], x[i] - i / n});
  }
  return d;
}

}  // namespace

TEST_CASE("scenes are deterministic in seed, index and split") {
  const SceneConfig cfg;
  CHECK(same_scene(generate_scene(cfg, 3, Split::kTest), generate_scene(cfg, 3, Split::kTest)));
  CHECK_FALSE(same_scene(generate_scene(cfg, 3, Split::kTest), generate_scene(cfg, 4, Split::kTest)));
  CHECK_FALSE(same_scene(generate_scene(cfg, 3, Split::kTrain), generate_scene(cfg, 3, Split::kVal)));
  SceneConfig other = cfg;
  other.seed = 2;
  CHECK_FALSE(same_scene(generate_scene(cfg, 0, Split::kTrain), generate_scene(other, 0, Split::kTrain)));
}

TEST_CASE("anomalies appear only in test scenes and are ignored in labels") {
  const SceneConfig cfg;
  for (int i = 0; i < 20; ++i) {
    for (Split s : {Split::kTrain, Split::kVal}) {
      const LabeledScene sc = generate_scene(cfg, i, s);
      CHECK(std::count(sc.anomaly.values.begin(), sc.anomaly.values.end(), 1) == 0);
      CHECK(std::count(sc.labels.values.begin(), sc.labels.values.end(), kIgnoreIndex) == 0);
    }
    const LabeledScene t = generate_scene(cfg, i, Split::kTest);
    std::size_t anomalous = 0;
    for (std::size_t p = 0; p < t.labels.values.size(); ++p) {
      if (t.anomaly.values[p]) {
        ++anomalous;
        CHECK(t.labels.values[p] == kIgnoreIndex);
      }
    }
    CHECK(anomalous > 0);
  }
}

TEST_CASE("image values lie in the unit interval") {
  const LabeledScene sc = generate_scene(SceneConfig{}, 0, Split::kTest);
  for (float v : sc.image.values()) {
    CHECK(v >= 0.f);
    CHECK(v <= 1.f);
  }
}

TEST_CASE("context-pair members are decided by their band alone") {
  const SceneConfig cfg;
  const int a = cfg.first_pair_class(), b = a + 1;
  std::vector<double> hist_a(3 * 16), hist_b(3 * 16);
  double count_a = 0, count_b = 0;
  for (int i = 0; i < 100; ++i) {
    SceneLayout layout;
    const LabeledScene sc = generate_scene(cfg, i, Split::kTrain, &layout);
    for (const auto& obj : layout.objects) {
      if (obj.cls == a || obj.cls == b) CHECK(obj.band_class == host_band_class(cfg, obj.cls));
    }
    const std::size_t plane = sc.labels.values.size();
    for (std::size_t p = 0; p < plane; ++p) {
      const int l = sc.labels.values[p];
      if (l != a && l != b) continue;
      auto& h = l == a ? hist_a : hist_b;
      (l == a ? count_a : count_b) += 1;
      for (int ch = 0; ch < 3; ++ch) {
        const int bin = std::min(15, static_cast<int>(sc.image[ch * plane + p] * 16));
        h[ch * 16 + bin] += 1;
      }
    }
  }
  REQUIRE(count_a > 1000);
  REQUIRE(count_b > 1000);
  // Total variation between the two colour histograms stays at sampling-noise level.
  for (int ch = 0; ch < 3; ++ch) {
    double tv = 0;
    for (int k = 0; k < 16; ++k) tv += std::abs(hist_a[ch * 16 + k] / count_a - hist_b[ch * 16 + k] / count_b);
    CHECK(tv / 2 < 0.03);
  }
}

TEST_CASE("every class is present in nearly every training scene") {
  const SceneConfig cfg;
  std::vector<int> present(cfg.num_classes(), 0);
  const int n = 200;
  for (int i = 0; i < n; ++i) {
    const LabeledScene sc = generate_scene(cfg, i, Split::kTrain);
    std::set<int> seen(sc.labels.values.begin(), sc.labels.values.end());
    for (int c : seen) ++present[c];
  }
  for (int c = 0; c < cfg.num_classes(); ++c) {
    CAPTURE(c);
    CHECK(present[c] >= 0.95 * n);
  }
}

TEST_CASE("a local pixel-window classifier cannot separate the pair") {
  // Lookup-table classifier on the quantised mean colour of a 3x3 window,
  // fitted on training scenes and scored on validation pair pixels.
  const SceneConfig cfg;
  const int a = cfg.first_pair_class(), b = a + 1;
  auto feature = [](const LabeledScene& sc, int y, int x) {
    const int size = sc.labels.width;
    const std::size_t plane = sc.labels.values.size();
    int key = 0;
    for (int ch = 0; ch < 3; ++ch) {
      double s = 0;
      int n = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = std::clamp(y + dy, 0, size - 1), xx = std::clamp(x + dx, 0, size - 1);
          s += sc.image[ch * plane + yy * size + xx];
          ++n;
        }
      key = key * 32 + std::min(31, static_cast<int>(s / n * 32));
    }
    return key;
  };
  std::map<int, std::pair<int, int>> table;
  for (int i = 0; i < 60; ++i) {
    const LabeledScene sc = generate_scene(cfg, i, Split::kTrain);
    for (int y = 0; y < sc.labels.height; ++y)
      for (int x = 0; x < sc.labels.width; ++x) {
        const int l = sc.labels.values[y * sc.labels.width + x];
        if (l == a) ++table[feature(sc, y, x)].first;
        if (l == b) ++table[feature(sc, y, x)].second;
      }
  }
  double correct = 0, total = 0;
  for (int i = 0; i < 30; ++i) {
    const LabeledScene sc = generate_scene(cfg, i, Split::kVal);
    for (int y = 0; y < sc.labels.height; ++y)
      for (int x = 0; x < sc.labels.width; ++x) {
        const int l = sc.labels.values[y * sc.labels.width + x];
        if (l != a && l != b) continue;
        const auto it = table.find(feature(sc, y, x));
        const int guess = it == table.end() || it->second.first >= it->second.second ? a : b;
        correct += guess == l;
        total += 1;
      }
  }
  CHECK(correct / total <= 0.55);
}

TEST_CASE("foreground corruption") {
  const SceneConfig cfg;
  const LabeledScene sc = generate_scene(cfg, 1, Split::kTest);
  const std::vector<int> fg = foreground_classes(cfg);
  const std::size_t plane = sc.labels.values.size();
  auto is_fg = [&](std::size_t p) {
    return std::find(fg.begin(), fg.end(), sc.labels.values[p]) != fg.end();
  };

  CHECK(corrupt_foreground(sc, fg, 0.0, cfg.num_classes(), 5).image.values() == sc.image.values());
  for (double level : {0.3, 1.0}) {
    const LabeledScene c = corrupt_foreground(sc, fg, level, cfg.num_classes(), 5);
    CHECK(c.labels.values == sc.labels.values);
    bool changed = false;
    for (std::size_t p = 0; p < plane; ++p)
      for (int ch = 0; ch < 3; ++ch) {
        const float before = sc.image[ch * plane + p], after = c.image[ch * plane + p];
        if (!is_fg(p)) CHECK(std::memcmp(&before, &after, sizeof(float)) == 0);
        changed |= before != after;
      }
    CHECK(changed);
  }

  SUBCASE("full noise is uniform and independent of the original") {
    std::vector<double> noisy, original;
    for (int i = 0; noisy.size() < 10000; ++i) {
      const LabeledScene s = generate_scene(cfg, i, Split::kTrain);
      const LabeledScene c = corrupt_foreground(s, fg, 1.0, cfg.num_classes(), 100 + i);
      for (std::size_t p = 0; p < plane && noisy.size() < 10000; ++p) {
        if (std::find(fg.begin(), fg.end(), s.labels.values[p]) == fg.end()) continue;
        noisy.push_back(c.image[p]);
        original.push_back(s.image[p]);
      }
    }
    const double n = static_cast<double>(noisy.size());
    CHECK(ks_uniform(noisy) < 1.95 / std::sqrt(n));  // alpha = 0.001
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      mx += noisy[i] / n;
      my += original[i] / n;
    }
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < noisy.size(); ++i) {
      sxy += (noisy[i] - mx) * (original[i] - my);
      sxx += (noisy[i] - mx) * (noisy[i] - mx);
      syy += (original[i] - my) * (original[i] - my);
    }
    CHECK(std::abs(sxy / std::sqrt(sxx * syy)) < 4 / std::sqrt(n));
  }

  const std::vector<int> bad{cfg.num_classes()};
  CHECK_THROWS_AS(corrupt_foreground(sc, bad, 0.5, cfg.num_classes(), 1), ConfigError);
  CHECK_THROWS_AS(corrupt_foreground(sc, fg, 1.5, cfg.num_classes(), 1), ConfigError);
}

TEST_CASE("anomaly prevalence on the default test split") {
  const SceneConfig cfg;
  double anomalous = 0, total = 0;
  for (int i = 0; i < cfg.test_size; ++i) {
    const LabeledScene sc = generate_scene(cfg, i, Split::kTest);
    anomalous += std::count(sc.anomaly.values.begin(), sc.anomaly.values.end(), 1);
    total += sc.anomaly.values.size();
  }
  CHECK(anomalous / total >= 0.01);
  CHECK(anomalous / total <= 0.05);
}

TEST_CASE("dataset directories") {
  const SceneConfig cfg = small_split_config();
  TempDir a("moose_test_split_a"), b("moose_test_split_b");
  generate_split(cfg, a.path);
  generate_split(cfg, b.path);

  const auto manifest = read_manifest(a.path);
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const std::string name = to_string(s);
    const int expected = std::stoi(manifest.at("count." + name));
    CHECK(expected == cfg.split_size(s));
    for (const char* kind : {"images", "labels", "anomaly"}) {
      const auto files = std::distance(fs::directory_iterator(a.path / name / kind), fs::directory_iterator{});
      CHECK(files == expected);
    }
  }

  // Byte-identical regeneration.
  for (const auto& entry : fs::recursive_directory_iterator(a.path)) {
    if (!entry.is_regular_file()) continue;
    const fs::path twin = b.path / fs::relative(entry.path(), a.path);
    REQUIRE(fs::exists(twin));
    CHECK(slurp(entry.path()) == slurp(twin));
  }

  // Loading reproduces the in-memory scenes up to 8-bit quantisation.
  const Dataset loaded = load_dataset(a.path);
  const Dataset memory = generate_dataset(cfg);
  REQUIRE(loaded.test.size() == memory.test.size());
  CHECK(loaded.test[2].labels.values == memory.test[2].labels.values);
  CHECK(loaded.test[2].anomaly.values == memory.test[2].anomaly.values);
  double worst = 0;
  for (std::size_t i = 0; i < memory.test[2].image.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(loaded.test[2].image[i] - memory.test[2].image[i])));
  }
  CHECK(worst <= 0.5 / 255 + 1e-6);

  CHECK_THROWS_AS(load_dataset(a.path / "missing"), DataError);
}

TEST_CASE("scene configuration validation") {
  SceneConfig c;
  c.context_pair_count = 3;  // needs six foreground classes
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.min_objects = 9;
  c.max_objects = 4;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = {};
  c.context_affinity = 1.5;
  CHECK_THROWS_AS(validate(c), ConfigError);
}
