#pragma once

// Diversity, foreground-corruption and single-dilation experiments.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moose/evaluate.hpp"
#include "moose/model.hpp"
#include "moose/synthetic.hpp"
#include "moose/training.hpp"

namespace moose {

struct DiversityRow {
  std::string method;  // global | mh_ensemble | deep_ensemble | moose
  double variance_mean = 0.0;
  double mi_mean = 0.0;
  double ece = 0.0;
};

struct DiversityReport {
  std::vector<DiversityRow> rows;
  bool anomalous_only = false;

  const DiversityRow& row(const std::string& method) const;
};

struct NamedStack {
  std::string method;
  StackFn forward;
};

DiversityReport run_diversity_analysis(std::span<const NamedStack> methods,
                                       std::span<const LabeledScene> scenes,
                                       bool anomalous_only = false);

struct CorruptionHead {
  int head = 0;       // stack index; 0 = global head
  int dilation = 0;   // 0 for the global head
  double clean_miou = 0.0;
  std::vector<double> corrupt_miou;
  std::vector<double> retained;  // corrupt / clean per noise level
};

struct CorruptionCurve {
  std::vector<double> noise_levels;
  std::vector<int> classes;
  CorruptionHead global;
  std::vector<CorruptionHead> probes;  // ordered by dilation
};

inline constexpr double kDefaultNoiseLevels[] = {0.0, 0.25, 0.5, 0.75, 1.0};

CorruptionCurve run_corruption_analysis(const PyramidModel& model, std::span<const LabeledScene> scenes,
                                        std::span<const int> classes,
                                        std::span<const double> noise_levels, std::uint64_t seed);

struct AblationRow {
  std::string label;
  std::vector<int> dilations;
  double variance_mean = 0.0;
  double mi_mean = 0.0;
  std::array<double, 3> global_aupr{};  // msp, h, ml
  std::array<double, 3> moose_aupr{};

  double absolute_change(int fn) const { return moose_aupr[fn] - global_aupr[fn]; }
  double relative_change(int fn) const { return (moose_aupr[fn] - global_aupr[fn]) / global_aupr[fn]; }
  // Mean of the three per-function relative changes.
  double mean_relative_change() const;
};

// Row for an already trained model: diversity and AUPR on `scenes`.
AblationRow ablation_row(const std::string& label, const PyramidModel& model,
                         std::span<const LabeledScene> scenes);

struct AblationSetup {
  PyramidConfig pyramid;
  ProbeConfig probe;
  TrainConfig base_train;
  TrainConfig probe_train;
  std::uint64_t seed = 0;
};

// Trains one single-dilation variant per rate plus (unless `standard` is
// given) the standard model, and reports each on the test split.
std::vector<AblationRow> run_single_dilation_ablation(const AblationSetup& setup, const Dataset& data,
                                                      std::span<const int> dilation_rates,
                                                      const PyramidModel* standard = nullptr);

// Trains a model with its probes under `setup` (base model then probes).
PyramidModel train_moose(const AblationSetup& setup, const PyramidConfig& pyramid, const Dataset& data);

std::string diversity_json(const DiversityReport& r);
std::string corruption_json(const CorruptionCurve& c);
std::string ablation_json(const std::vector<AblationRow>& rows);
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace moose
