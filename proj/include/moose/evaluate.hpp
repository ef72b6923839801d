#pragma once

// Streams scenes through a head stack and aggregates detection, calibration,
// segmentation and diversity statistics into an EvalReport.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moose/model.hpp"
#include "moose/scoring.hpp"
#include "moose/synthetic.hpp"

namespace moose {

struct EvalReport {
  double aupr = 0.0;
  double fpr95 = 0.0;
  double ece = 0.0;
  double miou = 0.0;
  double variance_mean = 0.0;
  double mi_mean = 0.0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t evaluated_pixels = 0;
  bool exact_metrics = true;
  std::string model_id;
  std::string split_id;
  std::string scoring_fn;
  std::string head_set;
  std::string method;  // row label used by Table-style rendering
};

struct EvalOptions {
  HeadSet heads = HeadSet::all_heads();
  // Variance / MI over anomalous pixels only instead of every evaluated pixel.
  bool diversity_on_anomalous_only = false;
  std::size_t exact_limit = 1'000'000;
  // Skip AUPR / FPR95 (reported as NaN), e.g. on anomaly-free splits.
  bool detection = true;
  std::string model_id;
  std::string split_id = "test";
  std::string method;
};

using StackFn = std::function<LogitStack(const Tensor& image)>;

// One report per scoring function, sharing a single pass over the scenes.
std::vector<EvalReport> evaluate_stacks(const StackFn& forward, std::span<const LabeledScene> scenes,
                                        std::span<const ScoringFn> fns, const EvalOptions& opts);

EvalReport evaluate(const PyramidModel& model, std::span<const LabeledScene> scenes, ScoringFn fn,
                    const EvalOptions& opts = {});
std::vector<EvalReport> evaluate_all(const PyramidModel& model, std::span<const LabeledScene> scenes,
                                     const EvalOptions& opts = {});

// Flat `key=value` lines.
void write_report(std::ostream& os, const EvalReport& r);
EvalReport read_report(std::istream& is);
std::string report_json(const EvalReport& r);
void save_report(const std::filesystem::path& stem, const EvalReport& r);  // stem.txt + stem.json
EvalReport load_report(const std::filesystem::path& path);

// `method  fn  AUPR  FPR95` in percent.
std::string table_header();
std::string table_row(const EvalReport& r);

}  // namespace moose
