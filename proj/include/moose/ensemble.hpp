#pragma once

// Comparison baselines: deep ensembles (independent full models) and
// multi-head ensembles (shared frozen trunk, independently trained heads).
// Both emit a LogitStack with one slice per member and no global slice, so
// the scoring functions apply unchanged.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "moose/model.hpp"
#include "moose/scoring.hpp"
#include "moose/synthetic.hpp"
#include "moose/training.hpp"

namespace moose {

struct EnsembleConfig {
  int num_members = 5;
  double bootstrap_fraction = 0.67;
  bool shared_encoder = false;
  // Per-member seeds; derived from `seed` when empty.
  std::vector<std::uint64_t> member_seeds;
  std::uint64_t seed = 0;
};

void validate(const EnsembleConfig& cfg);
std::uint64_t member_seed(const EnsembleConfig& cfg, int member);

// floor(fraction * n) distinct indices (at least one) drawn without
// replacement, sorted.
std::vector<std::size_t> bootstrap_subset(std::size_t n, double fraction, std::uint64_t seed);

struct EnsembleModel {
  EnsembleConfig config;
  std::vector<PyramidModel> members;  // deep ensemble; probe-free models
  std::optional<PyramidModel> trunk;  // multi-head ensemble
  std::vector<nn::Head> heads;        // multi-head ensemble
  std::vector<std::vector<std::size_t>> subsets;

  bool shared_encoder() const { return trunk.has_value(); }
  int num_members() const {
    return shared_encoder() ? static_cast<int>(heads.size()) : static_cast<int>(members.size());
  }
};

// image [3, H, W] -> [members, N, H, W]
LogitStack ensemble_forward(const EnsembleModel& ens, const Tensor& image);

std::size_t parameter_count(const EnsembleModel& ens);

// Untrained deep ensemble (member i initialised from member_seed(cfg, i)).
EnsembleModel build_deep_ensemble(const PyramidConfig& pcfg, const EnsembleConfig& cfg);

EnsembleModel train_deep_ensemble(const EnsembleConfig& cfg, const PyramidConfig& pcfg,
                                  std::span<const LabeledScene> train,
                                  std::span<const LabeledScene> val, const TrainConfig& train_cfg);

// Heads clone the global-head architecture of `base` and read the full
// concatenated pyramid features; the trunk is copied and never updated.
EnsembleModel train_multihead_ensemble(const EnsembleConfig& cfg, const PyramidModel& base,
                                       std::span<const LabeledScene> train,
                                       const TrainConfig& train_cfg);

// Index of the median value (lower median for even counts); among members
// sharing the median value the smallest index wins.
int median_index(std::span<const double> values);

// Median-AUPR member, each member scored by its own prediction on `val`
// (scenes carrying anomaly masks).
int select_median_member(const EnsembleModel& ens, std::span<const LabeledScene> val, ScoringFn fn);
PyramidModel member_model(const EnsembleModel& ens, int member);

void write_ensemble(std::ostream& os, const EnsembleModel& ens);
EnsembleModel read_ensemble(std::istream& is);
void save_ensemble(const std::filesystem::path& path, const EnsembleModel& ens);
EnsembleModel load_ensemble(const std::filesystem::path& path);

struct CostEntry {
  std::string name;
  std::size_t parameters = 0;
  double latency_ms = 0.0;  // median over runs
  int runs = 0;
};

// Median wall time of `fns` over `runs` timed rounds after `warmup` rounds.
// Rounds visit every function in turn so slow drift affects all equally.
std::vector<double> median_latencies_ms(std::span<const std::function<void()>> fns, int runs,
                                        int warmup);

// Single model (global head only), MOoSe (all heads) and a deep ensemble,
// timed on one image of the given size.
std::vector<CostEntry> cost_report(const PyramidModel& model, const EnsembleModel& deep,
                                   const std::optional<EnsembleModel>& multihead, int image_size,
                                   int runs = 30, int warmup = 3);

}  // namespace moose
