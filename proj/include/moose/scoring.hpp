#pragma once

// Per-pixel anomaly scores and diversity maps over a stack of head logits.
// All scores follow "higher = more anomalous"; entropies use natural logs and
// every head in a set is weighted uniformly.

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "moose/model.hpp"

namespace moose {

enum class ScoringFn { kMsp, kEntropy, kMaxLogit };

std::string to_string(ScoringFn fn);
// Accepts "msp", "h" / "entropy", "ml" / "maxlogit" (case-insensitive).
ScoringFn parse_scoring_fn(const std::string& text);
inline constexpr ScoringFn kAllScoringFns[] = {ScoringFn::kMsp, ScoringFn::kEntropy,
                                               ScoringFn::kMaxLogit};

class HeadSet {
 public:
  enum class Kind { kGlobalOnly, kAllHeads, kCustom };

  static HeadSet global_only() { return HeadSet(Kind::kGlobalOnly, {}); }
  static HeadSet all_heads() { return HeadSet(Kind::kAllHeads, {}); }
  static HeadSet custom(std::vector<int> indices) { return HeadSet(Kind::kCustom, std::move(indices)); }

  Kind kind() const { return kind_; }
  // Concrete head indices for a stack with `num_heads` slices. Throws
  // std::invalid_argument for an empty or out-of-range selection.
  std::vector<int> resolve(int num_heads) const;
  std::string tag() const;

 private:
  HeadSet(Kind kind, std::vector<int> indices) : kind_(kind), indices_(std::move(indices)) {}
  Kind kind_;
  std::vector<int> indices_;
};

// Parses "global" | "all" | comma-separated indices.
HeadSet parse_head_set(const std::string& text);

struct ScoreMap {
  int height = 0;
  int width = 0;
  ScoringFn fn = ScoringFn::kMsp;
  std::string head_set = "all_heads";
  std::vector<double> values;  // row-major [H, W]
};

// Probabilities with the same layout as the logits.
struct ProbabilityStack {
  int heads = 0, classes = 0, height = 0, width = 0;
  std::vector<double> values;

  double at(int head, int cls, std::size_t pixel) const {
    return values[(static_cast<std::size_t>(head) * classes + cls) * height * width + pixel];
  }
};

ProbabilityStack softmax_per_head(const LogitStack& stack);

ScoreMap score_msp(const LogitStack& stack, const HeadSet& heads);
ScoreMap score_entropy(const LogitStack& stack, const HeadSet& heads);
ScoreMap score_maxlogit(const LogitStack& stack, const HeadSet& heads);
ScoreMap score(const LogitStack& stack, ScoringFn fn, const HeadSet& heads);

// H[mean distribution] - mean per-head entropy, clipped at zero.
std::vector<double> mutual_information(const LogitStack& stack, const HeadSet& heads);
// Across-head population variance of each class probability, averaged over
// classes and scaled by 100.
std::vector<double> prediction_variance(const LogitStack& stack, const HeadSet& heads);

struct DiversityMaps {
  std::vector<double> variance;
  std::vector<double> mutual_information;
};
DiversityMaps diversity_maps(const LogitStack& stack, const HeadSet& heads);

// Argmax class and max probability of the mean head distribution per pixel.
struct MeanPrediction {
  std::vector<int> labels;
  std::vector<double> confidence;
};
MeanPrediction mean_prediction(const LogitStack& stack, const HeadSet& heads);

// Shannon entropy (nats) of a probability vector.
double entropy(std::span<const double> p);

// `moose-score-v1 H=<h> W=<w> fn=<tag>\n` + H*W little-endian float32.
void write_score_map(std::ostream& os, const ScoreMap& map);
ScoreMap read_score_map(std::istream& is);

}  // namespace moose
