#include "moose/ensemble.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "moose/checkpoint.hpp"
#include "moose/evaluate.hpp"
#include "moose/rng.hpp"

namespace moose {
namespace {

constexpr const char* kMagic = "moose-ensemble-v1";
constexpr std::uint64_t kBootstrapStream = 0xb007;
constexpr std::uint64_t kHeadStream = 0x4ead;

std::string read_line(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("unexpected end of ensemble file");
  return line;
}

std::string value_of(const std::string& line, const std::string& key) {
  if (line.rfind(key + "=", 0) != 0) throw DataError("expected " + key + "=..., got: " + line);
  return line.substr(key.size() + 1);
}

}  // namespace

void validate(const EnsembleConfig& cfg) {
  if (cfg.num_members < 2) throw ConfigError("an ensemble needs at least 2 members");
  if (!(cfg.bootstrap_fraction > 0.0 && cfg.bootstrap_fraction <= 1.0)) {
    throw ConfigError("bootstrap_fraction must lie in (0, 1]");
  }
  if (!cfg.member_seeds.empty() && static_cast<int>(cfg.member_seeds.size()) != cfg.num_members) {
    throw ConfigError("member_seeds must list one seed per member");
  }
}

std::uint64_t member_seed(const EnsembleConfig& cfg, int member) {
  if (!cfg.member_seeds.empty()) return cfg.member_seeds.at(member);
  return Rng::mix(cfg.seed * 1000003u + static_cast<std::uint64_t>(member) + 1);
}

std::vector<std::size_t> bootstrap_subset(std::size_t n, double fraction, std::uint64_t seed) {
  // The epsilon keeps exact products such as 0.67 * 300 from rounding down.
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed, kBootstrapStream);
  rng.shuffle(idx);
  idx.resize(std::max<std::size_t>(k, n ? 1 : 0));
  std::sort(idx.begin(), idx.end());
  return idx;
}

LogitStack ensemble_forward(const EnsembleModel& ens, const Tensor& image) {
  const int m = ens.num_members();
  if (m == 0) throw ConfigError("empty ensemble");
  std::vector<Tensor> logits;
  if (ens.shared_encoder()) {
    const PyramidModel& trunk = *ens.trunk;
    const Tensor batch = as_batch(trunk, image);
    const Tensor input = global_head_input(extract_features(trunk, batch));
    for (const nn::Head& h : ens.heads) {
      logits.push_back(nn::upsample_bilinear(nn::head_forward_eval(h, input), image.dim(1), image.dim(2)));
    }
  } else {
    for (const PyramidModel& member : ens.members) logits.push_back(forward_global(member, image));
  }
  const int n = logits[0].rank() == 4 ? logits[0].dim(1) : logits[0].dim(0);
  LogitStack stack(m, n, image.dim(1), image.dim(2));
  for (int k = 0; k < m; ++k) {
    std::memcpy(stack.plane(k, 0), logits[k].data(), logits[k].size() * sizeof(float));
  }
  return stack;
}

std::size_t parameter_count(const EnsembleModel& ens) {
  std::size_t total = 0;
  if (ens.shared_encoder()) {
    const PyramidModel& t = *ens.trunk;
    total += parameter_count(t, "encoder") + parameter_count(t, "pyramid");
    for (const auto& h : ens.heads) total += parameter_count(h);
  } else {
    for (const auto& m : ens.members) total += parameter_count(m);
  }
  return total;
}

EnsembleModel build_deep_ensemble(const PyramidConfig& pcfg, const EnsembleConfig& cfg) {
  validate(cfg);
  EnsembleModel ens;
  ens.config = cfg;
  ens.config.shared_encoder = false;
  for (int i = 0; i < cfg.num_members; ++i) {
    PyramidModel m = build_model(pcfg, ProbeConfig{}, member_seed(cfg, i));
    m.probes.clear();
    ens.members.push_back(std::move(m));
  }
  return ens;
}

EnsembleModel train_deep_ensemble(const EnsembleConfig& cfg, const PyramidConfig& pcfg,
                                  std::span<const LabeledScene> train,
                                  std::span<const LabeledScene> val, const TrainConfig& train_cfg) {
  EnsembleModel ens = build_deep_ensemble(pcfg, cfg);
  for (int i = 0; i < cfg.num_members; ++i) {
    const std::uint64_t seed = member_seed(cfg, i);
    ens.subsets.push_back(bootstrap_subset(train.size(), cfg.bootstrap_fraction, seed));
    std::vector<LabeledScene> subset;
    for (std::size_t j : ens.subsets.back()) subset.push_back(train[j]);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    train_base_model(ens.members[i], subset, val, tc);
  }
  return ens;
}

EnsembleModel train_multihead_ensemble(const EnsembleConfig& cfg, const PyramidModel& base,
                                       std::span<const LabeledScene> train,
                                       const TrainConfig& train_cfg) {
  validate(cfg);
  EnsembleModel ens;
  ens.config = cfg;
  ens.config.shared_encoder = true;
  ens.trunk = base;
  ens.trunk->probes.clear();
  for (const char* g : {"encoder", "pyramid", "global_head"}) ens.trunk->frozen[g] = true;

  const std::vector<PyramidFeatures> feats = cache_features(*ens.trunk, train);
  std::vector<Tensor> inputs;
  inputs.reserve(feats.size());
  for (const auto& f : feats) inputs.push_back(global_head_input(f));

  const PyramidConfig& p = base.pyramid;
  for (int i = 0; i < cfg.num_members; ++i) {
    const std::uint64_t seed = member_seed(cfg, i);
    Rng rng(seed, kHeadStream);
    nn::Head head = nn::make_head(p.global_head_input_channels(), p.head_projection_channels,
                                  p.head_depth, p.num_classes, rng);
    ens.subsets.push_back(bootstrap_subset(train.size(), cfg.bootstrap_fraction, seed));
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    train_head_on_features(head, inputs, train, ens.subsets.back(), tc, tc.epochs);
    ens.heads.push_back(std::move(head));
  }
  return ens;
}

int median_index(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty set");
  std::vector<int> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return values[a] < values[b]; });
  const double med = values[order[(order.size() - 1) / 2]];
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == med) return static_cast<int>(i);
  }
  return order[(order.size() - 1) / 2];
}

PyramidModel member_model(const EnsembleModel& ens, int member) {
  if (member < 0 || member >= ens.num_members()) throw std::out_of_range("ensemble member index");
  if (!ens.shared_encoder()) return ens.members[member];
  PyramidModel m = *ens.trunk;
  m.global_head = ens.heads[member];
  return m;
}

int select_median_member(const EnsembleModel& ens, std::span<const LabeledScene> val, ScoringFn fn) {
  std::vector<double> aupr;
  for (int i = 0; i < ens.num_members(); ++i) {
    PyramidModel m = member_model(ens, i);
    m.probes.clear();
    EvalOptions opts;
    opts.heads = HeadSet::global_only();
    opts.split_id = "val";
    aupr.push_back(evaluate(m, val, fn, opts).aupr);
  }
  return median_index(aupr);
}

void write_ensemble(std::ostream& os, const EnsembleModel& ens) {
  os << kMagic << '\n'
     << "kind=" << (ens.shared_encoder() ? "multihead" : "deep") << '\n'
     << "members=" << ens.num_members() << '\n'
     << "bootstrap_fraction=" << ens.config.bootstrap_fraction << '\n'
     << "seed=" << ens.config.seed << '\n';
  os << "seeds=";
  for (int i = 0; i < ens.num_members(); ++i) os << (i ? "," : "") << member_seed(ens.config, i);
  os << '\n';
  if (ens.shared_encoder()) {
    write_model(os, *ens.trunk);
    for (int i = 0; i < ens.num_members(); ++i) {
      nn::Head::visit(ens.heads[i], "head" + std::to_string(i),
                      [&](const std::string& name, const Tensor& t, const nn::Param*) {
                        write_tensor_entry(os, name, t);
                      });
    }
    os << "end\n";
  } else {
    for (const auto& m : ens.members) write_model(os, m);
  }
}

EnsembleModel read_ensemble(std::istream& is) {
  if (read_line(is) != kMagic) throw DataError("not a moose ensemble (bad magic)");
  EnsembleModel ens;
  const std::string kind = value_of(read_line(is), "kind");
  if (kind != "deep" && kind != "multihead") throw DataError("unknown ensemble kind " + kind);
  const int members = std::stoi(value_of(read_line(is), "members"));
  ens.config.num_members = members;
  ens.config.bootstrap_fraction = std::stod(value_of(read_line(is), "bootstrap_fraction"));
  ens.config.seed = std::stoull(value_of(read_line(is), "seed"));
  std::stringstream seeds(value_of(read_line(is), "seeds"));
  std::string tok;
  while (std::getline(seeds, tok, ',')) ens.config.member_seeds.push_back(std::stoull(tok));
  ens.config.shared_encoder = kind == "multihead";
  if (ens.config.shared_encoder) {
    ens.trunk = read_model(is);
    const PyramidConfig& p = ens.trunk->pyramid;
    Rng rng(0);
    for (int i = 0; i < members; ++i) {
      ens.heads.push_back(nn::make_head(p.global_head_input_channels(), p.head_projection_channels,
                                        p.head_depth, p.num_classes, rng));
    }
    std::map<std::string, Tensor> entries;
    for (auto& [name, t] : read_tensor_entries(is)) entries[name] = std::move(t);
    for (int i = 0; i < members; ++i) {
      nn::Head::visit(ens.heads[i], "head" + std::to_string(i), [&](const std::string& name, Tensor& t, nn::Param*) {
        auto it = entries.find(name);
        if (it == entries.end() || !it->second.same_shape(t)) throw DataError("ensemble lacks tensor " + name);
        t = it->second;
      });
    }
  } else {
    for (int i = 0; i < members; ++i) ens.members.push_back(read_model(is));
  }
  return ens;
}

void save_ensemble(const std::filesystem::path& path, const EnsembleModel& ens) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  write_ensemble(os, ens);
}

EnsembleModel load_ensemble(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open ensemble " + path.string());
  return read_ensemble(is);
}

std::vector<double> median_latencies_ms(std::span<const std::function<void()>> fns, int runs,
                                        int warmup) {
  using clock = std::chrono::steady_clock;
  std::vector<std::vector<double>> times(fns.size());
  for (int r = 0; r < warmup + runs; ++r) {
    for (std::size_t i = 0; i < fns.size(); ++i) {
      const auto t0 = clock::now();
      fns[i]();
      const double ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
      if (r >= warmup) times[i].push_back(ms);
    }
  }
  std::vector<double> out;
  for (auto& t : times) {
    std::sort(t.begin(), t.end());
    const std::size_t n = t.size();
    out.push_back(n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]));
  }
  return out;
}

std::vector<CostEntry> cost_report(const PyramidModel& model, const EnsembleModel& deep,
                                   const std::optional<EnsembleModel>& multihead, int image_size,
                                   int runs, int warmup) {
  if (runs < 1) throw ConfigError("cost_report needs at least one timed run");
  Tensor image({3, image_size, image_size});
  Rng rng(7);
  for (float& v : image.values()) v = static_cast<float>(rng.uniform());

  std::vector<CostEntry> entries;
  std::vector<std::function<void()>> fns;
  PyramidModel single = model;
  single.probes.clear();
  entries.push_back({"single", parameter_count(single), 0.0, runs});
  fns.emplace_back([&] { (void)forward_global(model, image); });
  entries.push_back({"moose", parameter_count(model), 0.0, runs});
  fns.emplace_back([&] { (void)forward_all(model, image); });
  entries.push_back({"deep_ensemble", parameter_count(deep), 0.0, runs});
  fns.emplace_back([&] { (void)ensemble_forward(deep, image); });
  if (multihead) {
    entries.push_back({"mh_ensemble", parameter_count(*multihead), 0.0, runs});
    fns.emplace_back([&] { (void)ensemble_forward(*multihead, image); });
  }
  const std::vector<double> ms = median_latencies_ms(fns, runs, warmup);
  for (std::size_t i = 0; i < entries.size(); ++i) entries[i].latency_ms = ms[i];
  return entries;
}

}  // namespace moose
