#include "moose/scoring.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace moose {
namespace {

void require_finite(const LogitStack& stack) {
  if (!stack.all_finite()) throw std::domain_error("logit stack contains non-finite values");
}

// Writes the softmax of head `h` at `pixel` into `out`.
void pixel_softmax(const LogitStack& stack, int h, std::size_t pixel, std::span<double> out) {
  const int n = stack.num_classes();
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(stack.plane(h, c)[pixel]));
  double sum = 0.0;
  for (int c = 0; c < n; ++c) {
    out[c] = std::exp(static_cast<double>(stack.plane(h, c)[pixel]) - mx);
    sum += out[c];
  }
  for (int c = 0; c < n; ++c) out[c] /= sum;
}

// Mean head distribution at every pixel; calls visit(pixel, mean, per_head).
template <class F>
void for_each_pixel_distribution(const LogitStack& stack, const std::vector<int>& heads, F&& visit) {
  const int n = stack.num_classes();
  const std::size_t hk = heads.size();
  std::vector<double> per_head(hk * n), mean(n);
  for (std::size_t px = 0; px < stack.pixels(); ++px) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t i = 0; i < hk; ++i) {
      std::span<double> p(per_head.data() + i * n, n);
      pixel_softmax(stack, heads[i], px, p);
      for (int c = 0; c < n; ++c) mean[c] += p[c];
    }
    for (int c = 0; c < n; ++c) mean[c] /= static_cast<double>(hk);
    visit(px, std::span<const double>(mean), std::span<const double>(per_head));
  }
}

ScoreMap blank_map(const LogitStack& stack, ScoringFn fn, const HeadSet& heads) {
  ScoreMap m;
  m.height = stack.height();
  m.width = stack.width();
  m.fn = fn;
  m.head_set = heads.tag();
  m.values.assign(stack.pixels(), 0.0);
  return m;
}

}  // namespace

std::string to_string(ScoringFn fn) {
  switch (fn) {
    case ScoringFn::kMsp: return "msp";
    case ScoringFn::kEntropy: return "h";
    case ScoringFn::kMaxLogit: return "ml";
  }
  return "?";
}

ScoringFn parse_scoring_fn(const std::string& text) {
  std::string t = text;
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
  if (t == "msp") return ScoringFn::kMsp;
  if (t == "h" || t == "entropy") return ScoringFn::kEntropy;
  if (t == "ml" || t == "maxlogit") return ScoringFn::kMaxLogit;
  throw std::invalid_argument("unknown scoring function '" + text + "' (expected msp|h|ml)");
}

std::vector<int> HeadSet::resolve(int num_heads) const {
  std::vector<int> out;
  switch (kind_) {
    case Kind::kGlobalOnly:
      out = {0};
      break;
    case Kind::kAllHeads:
      for (int i = 0; i < num_heads; ++i) out.push_back(i);
      break;
    case Kind::kCustom:
      out = indices_;
      break;
  }
  if (out.empty() || num_heads <= 0) throw std::invalid_argument("empty head set");
  for (int i : out) {
    if (i < 0 || i >= num_heads) {
      throw std::invalid_argument("head index " + std::to_string(i) + " out of range");
    }
  }
  return out;
}

std::string HeadSet::tag() const {
  switch (kind_) {
    case Kind::kGlobalOnly: return "global_only";
    case Kind::kAllHeads: return "all_heads";
    case Kind::kCustom: break;
  }
  std::string s = "custom:";
  for (std::size_t i = 0; i < indices_.size(); ++i) s += (i ? "," : "") + std::to_string(indices_[i]);
  return s;
}

HeadSet parse_head_set(const std::string& text) {
  if (text == "global") return HeadSet::global_only();
  if (text == "all") return HeadSet::all_heads();
  std::vector<int> idx;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      idx.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad head set '" + text + "' (expected global|all|i,j,...)");
    }
  }
  if (idx.empty()) throw std::invalid_argument("empty head set");
  return HeadSet::custom(std::move(idx));
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

ProbabilityStack softmax_per_head(const LogitStack& stack) {
  require_finite(stack);
  ProbabilityStack out;
  out.heads = stack.num_heads();
  out.classes = stack.num_classes();
  out.height = stack.height();
  out.width = stack.width();
  out.values.resize(stack.tensor().size());
  std::vector<double> p(out.classes);
  const std::size_t plane = stack.pixels();
  for (int h = 0; h < out.heads; ++h) {
    for (std::size_t px = 0; px < plane; ++px) {
      pixel_softmax(stack, h, px, p);
      for (int c = 0; c < out.classes; ++c) {
        out.values[(static_cast<std::size_t>(h) * out.classes + c) * plane + px] = p[c];
      }
    }
  }
  return out;
}

ScoreMap score_msp(const LogitStack& stack, const HeadSet& heads) {
  require_finite(stack);
  const auto idx = heads.resolve(stack.num_heads());
  ScoreMap m = blank_map(stack, ScoringFn::kMsp, heads);
  for_each_pixel_distribution(stack, idx, [&](std::size_t px, auto mean, auto) {
    m.values[px] = -*std::max_element(mean.begin(), mean.end());
  });
  return m;
}

ScoreMap score_entropy(const LogitStack& stack, const HeadSet& heads) {
  require_finite(stack);
  const auto idx = heads.resolve(stack.num_heads());
  ScoreMap m = blank_map(stack, ScoringFn::kEntropy, heads);
  for_each_pixel_distribution(stack, idx,
                              [&](std::size_t px, auto mean, auto) { m.values[px] = entropy(mean); });
  return m;
}

ScoreMap score_maxlogit(const LogitStack& stack, const HeadSet& heads) {
  require_finite(stack);
  const auto idx = heads.resolve(stack.num_heads());
  ScoreMap m = blank_map(stack, ScoringFn::kMaxLogit, heads);
  const int n = stack.num_classes();
  const double inv = 1.0 / static_cast<double>(idx.size());
  for (std::size_t px = 0; px < stack.pixels(); ++px) {
    double best = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n; ++c) {
      double s = 0.0;
      for (int h : idx) s += stack.plane(h, c)[px];
      best = std::max(best, s * inv);
    }
    m.values[px] = -best;
  }
  return m;
}

ScoreMap score(const LogitStack& stack, ScoringFn fn, const HeadSet& heads) {
  switch (fn) {
    case ScoringFn::kMsp: return score_msp(stack, heads);
    case ScoringFn::kEntropy: return score_entropy(stack, heads);
    case ScoringFn::kMaxLogit: return score_maxlogit(stack, heads);
  }
  throw std::invalid_argument("unknown scoring function");
}

DiversityMaps diversity_maps(const LogitStack& stack, const HeadSet& heads) {
  require_finite(stack);
  const auto idx = heads.resolve(stack.num_heads());
  const int n = stack.num_classes();
  const double k = static_cast<double>(idx.size());
  DiversityMaps out;
  out.variance.assign(stack.pixels(), 0.0);
  out.mutual_information.assign(stack.pixels(), 0.0);
  for_each_pixel_distribution(stack, idx, [&](std::size_t px, auto mean, auto per_head) {
    double mean_entropy = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) mean_entropy += entropy(per_head.subspan(i * n, n));
    mean_entropy /= k;
    out.mutual_information[px] = std::max(0.0, entropy(mean) - mean_entropy);

    // Shifted by the first head so identical heads give exactly zero.
    double var_sum = 0.0;
    for (int c = 0; c < n; ++c) {
      const double ref = per_head[c];
      double d1 = 0.0, d2 = 0.0;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double d = per_head[i * n + c] - ref;
        d1 += d;
        d2 += d * d;
      }
      var_sum += std::max(0.0, d2 / k - (d1 / k) * (d1 / k));
    }
    out.variance[px] = 100.0 * var_sum / n;
  });
  return out;
}

std::vector<double> mutual_information(const LogitStack& stack, const HeadSet& heads) {
  return diversity_maps(stack, heads).mutual_information;
}

std::vector<double> prediction_variance(const LogitStack& stack, const HeadSet& heads) {
  return diversity_maps(stack, heads).variance;
}

MeanPrediction mean_prediction(const LogitStack& stack, const HeadSet& heads) {
  require_finite(stack);
  const auto idx = heads.resolve(stack.num_heads());
  MeanPrediction out;
  out.labels.assign(stack.pixels(), 0);
  out.confidence.assign(stack.pixels(), 0.0);
  for_each_pixel_distribution(stack, idx, [&](std::size_t px, auto mean, auto) {
    const auto it = std::max_element(mean.begin(), mean.end());
    out.labels[px] = static_cast<int>(it - mean.begin());
    out.confidence[px] = *it;
  });
  return out;
}

void write_score_map(std::ostream& os, const ScoreMap& map) {
  if (map.values.size() != static_cast<std::size_t>(map.height) * map.width) {
    throw ShapeError("score map size does not match its header");
  }
  os << "moose-score-v1 H=" << map.height << " W=" << map.width << " fn=" << to_string(map.fn)
     << '\n';
  for (double v : map.values) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
  }
}

ScoreMap read_score_map(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("empty score map file");
  std::istringstream hs(line);
  std::string magic, h, w, fn;
  hs >> magic >> h >> w >> fn;
  if (magic != "moose-score-v1" || h.rfind("H=", 0) != 0 || w.rfind("W=", 0) != 0 ||
      fn.rfind("fn=", 0) != 0) {
    throw DataError("bad score map header: " + line);
  }
  ScoreMap m;
  m.height = std::stoi(h.substr(2));
  m.width = std::stoi(w.substr(2));
  m.fn = parse_scoring_fn(fn.substr(3));
  m.values.resize(static_cast<std::size_t>(m.height) * m.width);
  for (double& v : m.values) {
    std::uint32_t bits = 0;
    if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) throw DataError("truncated score map");
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    v = std::bit_cast<float>(bits);
  }
  return m;
}

}  // namespace moose
