#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <set>
#include <sstream>

#include "moose/ensemble.hpp"

using namespace moose;

namespace {

SceneConfig tiny_scenes() {
  SceneConfig c;
  c.image_size = 32;
  c.min_objects = 2;
  c.max_objects = 3;
  c.min_object_size = 4;
  c.max_object_size = 8;
  c.min_anomaly_size = 4;
  c.max_anomaly_size = 8;
  c.train_size = 9;
  c.val_size = 3;
  c.test_size = 4;
  return c;
}

PyramidConfig tiny_pyramid() {
  PyramidConfig p;
  p.encoder_channels = 8;
  p.branch_channels = 4;
  p.branch_dilations = {1, 2, 3};
  p.head_projection_channels = 8;
  p.output_stride = 4;
  return p;
}

Tensor random_image(int size, std::uint64_t seed) {
  Tensor t({3, size, size});
  Rng rng(seed);
  for (float& v : t.values()) v = static_cast<float>(rng.uniform());
  return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("bootstrap subsets") {
  const std::pair<std::size_t, std::size_t> sizes[] = {{1, 1}, {3, 2}, {10, 6}, {300, 201}};
  for (const auto& [n, expected] : sizes) {
    const auto s = bootstrap_subset(n, 0.67, 4);
    CHECK(s.size() == expected);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == s.size());
    for (std::size_t i : s) CHECK(i < n);
    CHECK(bootstrap_subset(n, 0.67, 4) == s);
  }
  CHECK(bootstrap_subset(300, 0.67, 4) != bootstrap_subset(300, 0.67, 5));
  CHECK(bootstrap_subset(100, 1.0, 2).size() == 100);
}

TEST_CASE("member seeds") {
  EnsembleConfig cfg;
  cfg.seed = 3;
  std::set<std::uint64_t> seeds;
  for (int i = 0; i < cfg.num_members; ++i) seeds.insert(member_seed(cfg, i));
  CHECK(seeds.size() == 5);
  cfg.member_seeds = {11, 12, 13, 14, 15};
  CHECK(member_seed(cfg, 2) == 13);

  EnsembleConfig bad;
  bad.num_members = 1;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = {};
  bad.bootstrap_fraction = 0.0;
  CHECK_THROWS_AS(validate(bad), ConfigError);
  bad = {};
  bad.member_seeds = {1, 2};
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("median member rule") {
  const std::vector<double> odd{0.3, 0.1, 0.2};
  CHECK(median_index(odd) == 2);
  const std::vector<double> even{0.4, 0.1, 0.3, 0.2};
  CHECK(median_index(even) == 3);
  const std::vector<double> tied{0.5, 0.2, 0.7, 0.2, 0.9};
  CHECK(median_index(tied) == 0);
  const std::vector<double> tied_low{0.2, 0.9, 0.2, 0.1};
  CHECK(median_index(tied_low) == 0);
  const std::vector<double> flat{0.4, 0.4, 0.4};
  CHECK(median_index(flat) == 0);
}

TEST_CASE("deep ensemble construction and accounting") {
  const PyramidConfig p = tiny_pyramid();
  EnsembleConfig cfg;
  cfg.seed = 8;
  const EnsembleModel ens = build_deep_ensemble(p, cfg);
  REQUIRE(ens.num_members() == 5);
  PyramidModel single = build_model(p, {}, 0);
  single.probes.clear();
  CHECK(parameter_count(ens) == 5 * parameter_count(single));
  for (const auto& m : ens.members) CHECK(m.probes.empty());
  CHECK(group_digest(ens.members[0], "encoder") != group_digest(ens.members[1], "encoder"));

  const Tensor img = random_image(32, 1);
  const LogitStack stack = ensemble_forward(ens, img);
  CHECK(stack.num_heads() == 5);
  for (int i = 0; i < 5; ++i) CHECK(bit_equal(stack.head(i), forward_global(ens.members[i], img)));

  SUBCASE("scores do not depend on member order") {
    LogitStack reversed(5, stack.num_classes(), 32, 32);
    for (int i = 0; i < 5; ++i) {
      std::memcpy(reversed.plane(i, 0), stack.plane(4 - i, 0),
                  stack.num_classes() * stack.pixels() * sizeof(float));
    }
    for (ScoringFn fn : {ScoringFn::kMsp, ScoringFn::kEntropy, ScoringFn::kMaxLogit}) {
      const ScoreMap a = score(stack, fn, HeadSet::all_heads()), b = score(reversed, fn, HeadSet::all_heads());
      for (std::size_t px = 0; px < a.values.size(); ++px) {
        CHECK(a.values[px] == doctest::Approx(b.values[px]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("multi-head ensemble training keeps the trunk") {
  const Dataset data = generate_dataset(tiny_scenes());
  PyramidModel base = build_model(tiny_pyramid(), {}, 2);
  EnsembleConfig cfg;
  cfg.num_members = 3;
  cfg.seed = 5;
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 3;
  const EnsembleModel mh = train_multihead_ensemble(cfg, base, data.train, tc);
  REQUIRE(mh.shared_encoder());
  REQUIRE(mh.num_members() == 3);
  for (const char* g : {"encoder", "pyramid", "global_head"}) {
    CHECK(group_digest(*mh.trunk, g) == group_digest(base, g));
  }
  CHECK(mh.trunk->probes.empty());
  for (const auto& s : mh.subsets) CHECK(s.size() == 6);
  CHECK(mh.subsets[0] != mh.subsets[1]);
  const LogitStack stack = ensemble_forward(mh, data.val[0].image);
  CHECK_FALSE(bit_equal(stack.head(0), stack.head(1)));
  CHECK(parameter_count(mh.heads[0]) == parameter_count(base.global_head));

  // The trunk's own global head is not an ensemble member.
  CHECK(parameter_count(mh) == parameter_count(base, "encoder") + parameter_count(base, "pyramid") +
                                   3 * parameter_count(base.global_head));

  SUBCASE("save and load") {
    std::stringstream ss;
    write_ensemble(ss, mh);
    const EnsembleModel back = read_ensemble(ss);
    CHECK(back.num_members() == 3);
    CHECK(bit_equal(ensemble_forward(back, data.val[1].image).tensor(),
                    ensemble_forward(mh, data.val[1].image).tensor()));
  }
  SUBCASE("median member is one of the members") {
    const int m = select_median_member(mh, data.test, ScoringFn::kEntropy);
    CHECK(m >= 0);
    CHECK(m < 3);
    const PyramidModel single = member_model(mh, m);
    CHECK(bit_equal(forward_global(single, data.val[0].image), stack.head(m)));
  }
}

TEST_CASE("probes cost less than five global-sized heads at the defaults") {
  const PyramidModel m = build_model(PyramidConfig{}, ProbeConfig{}, 1);
  std::size_t probes = 0;
  for (const auto& h : m.probes) probes += parameter_count(h);
  CHECK(probes < 5 * parameter_count(m.global_head));
}

TEST_CASE("deep ensemble round trip") {
  EnsembleConfig cfg;
  cfg.num_members = 2;
  cfg.seed = 1;
  const EnsembleModel ens = build_deep_ensemble(tiny_pyramid(), cfg);
  std::stringstream ss;
  write_ensemble(ss, ens);
  const EnsembleModel back = read_ensemble(ss);
  CHECK_FALSE(back.shared_encoder());
  const Tensor img = random_image(32, 9);
  CHECK(bit_equal(ensemble_forward(back, img).tensor(), ensemble_forward(ens, img).tensor()));
  std::stringstream junk("moose-ensemble-v1\nkind=other\n");
  CHECK_THROWS_AS(read_ensemble(junk), DataError);
}

TEST_CASE("cost report entries") {
  const PyramidConfig p = tiny_pyramid();
  const PyramidModel m = build_model(p, {}, 1);
  EnsembleConfig cfg;
  cfg.seed = 1;
  const EnsembleModel deep = build_deep_ensemble(p, cfg);
  const auto rows = cost_report(m, deep, std::nullopt, 32, 3, 1);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].name == "single");
  CHECK(rows[1].name == "moose");
  CHECK(rows[2].name == "deep_ensemble");
  CHECK(rows[1].parameters == parameter_count(m));
  CHECK(rows[2].parameters == parameter_count(deep));
  for (const auto& r : rows) {
    CHECK(r.latency_ms > 0);
    CHECK(r.runs == 3);
  }
}
