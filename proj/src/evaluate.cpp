#include "moose/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "moose/metrics.hpp"
#include "moose/parallel.hpp"

namespace moose {
namespace {

struct ImageStats {
  std::vector<DetectionAccumulator> detection;
  CalibrationAccumulator calibration;
  ConfusionAccumulator confusion;
  double variance_sum = 0.0;
  double mi_sum = 0.0;
  std::size_t diversity_pixels = 0;
  std::size_t evaluated = 0;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<EvalReport> evaluate_stacks(const StackFn& forward, std::span<const LabeledScene> scenes,
                                        std::span<const ScoringFn> fns, const EvalOptions& opts) {
  if (scenes.empty()) throw DataError("evaluation split is empty");
  std::vector<ImageStats> stats;
  stats.reserve(scenes.size());
  int num_classes = -1;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    stats.push_back(ImageStats{std::vector<DetectionAccumulator>(fns.size()), CalibrationAccumulator(15),
                               ConfusionAccumulator(1, kIgnoreIndex)});
  }
  std::vector<int> classes_seen(scenes.size(), 0);

  parallel_for(scenes.size(), [&](std::size_t i) {
    const LabeledScene& s = scenes[i];
    const LogitStack stack = forward(s.image);
    if (!stack.all_finite()) throw std::domain_error("non-finite logits on scene " + std::to_string(i));
    const int n = stack.num_classes();
    classes_seen[i] = n;
    ImageStats& st = stats[i];
    st.confusion = ConfusionAccumulator(n, kIgnoreIndex);
    const std::size_t px = stack.pixels();
    const auto& anom = s.anomaly.values;
    const auto& void_mask = s.anomaly.void_mask;
    auto is_void = [&](std::size_t p) { return !void_mask.empty() && void_mask[p]; };
    auto is_anom = [&](std::size_t p) { return !anom.empty() && anom[p]; };

    for (std::size_t f = 0; f < fns.size(); ++f) {
      const ScoreMap map = score(stack, fns[f], opts.heads);
      for (std::size_t p = 0; p < px; ++p) {
        if (!is_void(p)) st.detection[f].add(map.values[p], is_anom(p));
      }
    }
    const MeanPrediction pred = mean_prediction(stack, opts.heads);
    std::vector<int> pv, gv;
    for (std::size_t p = 0; p < px; ++p) {
      if (is_void(p)) continue;
      ++st.evaluated;
      const int y = s.labels.values[p];
      if (is_anom(p) || y == kIgnoreIndex) continue;
      st.calibration.add(pred.confidence[p], pred.labels[p] == y);
      pv.push_back(pred.labels[p]);
      gv.push_back(y);
    }
    st.confusion.add(std::span<const int>(pv), std::span<const int>(gv));

    const DiversityMaps div = diversity_maps(stack, opts.heads);
    for (std::size_t p = 0; p < px; ++p) {
      if (is_void(p)) continue;
      if (opts.diversity_on_anomalous_only && !is_anom(p)) continue;
      st.variance_sum += div.variance[p];
      st.mi_sum += div.mutual_information[p];
      ++st.diversity_pixels;
    }
  });

  num_classes = classes_seen[0];
  for (int c : classes_seen) {
    if (c != num_classes) throw ShapeError("class count changed between scenes");
  }
  CalibrationAccumulator cal(15);
  ConfusionAccumulator conf(num_classes, kIgnoreIndex);
  std::vector<DetectionAccumulator> det(fns.size());
  double var_sum = 0.0, mi_sum = 0.0;
  std::size_t div_px = 0, evaluated = 0;
  for (const ImageStats& st : stats) {
    for (std::size_t f = 0; f < fns.size(); ++f) det[f].merge(st.detection[f]);
    cal.merge(st.calibration);
    conf.merge(st.confusion);
    var_sum += st.variance_sum;
    mi_sum += st.mi_sum;
    div_px += st.diversity_pixels;
    evaluated += st.evaluated;
  }

  std::vector<EvalReport> out;
  for (std::size_t f = 0; f < fns.size(); ++f) {
    EvalReport r;
    if (opts.detection) {
      const DetectionMetrics m = det[f].finalize(opts.exact_limit);
      r.aupr = m.aupr;
      r.fpr95 = m.fpr95;
      r.exact_metrics = m.exact;
    } else {
      r.aupr = r.fpr95 = std::numeric_limits<double>::quiet_NaN();
    }
    r.ece = cal.value();
    r.miou = conf.miou();
    r.variance_mean = div_px ? var_sum / static_cast<double>(div_px) : 0.0;
    r.mi_mean = div_px ? mi_sum / static_cast<double>(div_px) : 0.0;
    r.positives = det[f].positives();
    r.negatives = det[f].negatives();
    r.evaluated_pixels = evaluated;
    r.model_id = opts.model_id;
    r.split_id = opts.split_id;
    r.scoring_fn = to_string(fns[f]);
    r.head_set = opts.heads.tag();
    r.method = opts.method;
    out.push_back(std::move(r));
  }
  return out;
}

EvalReport evaluate(const PyramidModel& model, std::span<const LabeledScene> scenes, ScoringFn fn,
                    const EvalOptions& opts) {
  const ScoringFn fns[] = {fn};
  return evaluate_stacks([&](const Tensor& img) { return forward_all(model, img); }, scenes, fns, opts)[0];
}

std::vector<EvalReport> evaluate_all(const PyramidModel& model, std::span<const LabeledScene> scenes,
                                     const EvalOptions& opts) {
  return evaluate_stacks([&](const Tensor& img) { return forward_all(model, img); }, scenes,
                         kAllScoringFns, opts);
}

void write_report(std::ostream& os, const EvalReport& r) {
  os << "schema=moose-report-v1\n"
     << "method=" << r.method << '\n'
     << "model_id=" << r.model_id << '\n'
     << "split=" << r.split_id << '\n'
     << "scoring_fn=" << r.scoring_fn << '\n'
     << "head_set=" << r.head_set << '\n'
     << "aupr=" << fmt(r.aupr) << '\n'
     << "fpr95=" << fmt(r.fpr95) << '\n'
     << "ece=" << fmt(r.ece) << '\n'
     << "miou=" << fmt(r.miou) << '\n'
     << "variance_mean=" << fmt(r.variance_mean) << '\n'
     << "mi_mean=" << fmt(r.mi_mean) << '\n'
     << "positives=" << r.positives << '\n'
     << "negatives=" << r.negatives << '\n'
     << "evaluated_pixels=" << r.evaluated_pixels << '\n'
     << "exact_metrics=" << (r.exact_metrics ? 1 : 0) << '\n';
}

EvalReport read_report(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad report line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["schema"] != "moose-report-v1") throw DataError("not a moose report");
  auto num = [&](const char* k) {
    if (!kv.count(k)) throw DataError(std::string("report lacks ") + k);
    return std::stod(kv[k]);
  };
  EvalReport r;
  r.method = kv["method"];
  r.model_id = kv["model_id"];
  r.split_id = kv["split"];
  r.scoring_fn = kv["scoring_fn"];
  r.head_set = kv["head_set"];
  r.aupr = num("aupr");
  r.fpr95 = num("fpr95");
  r.ece = num("ece");
  r.miou = num("miou");
  r.variance_mean = num("variance_mean");
  r.mi_mean = num("mi_mean");
  r.positives = static_cast<std::size_t>(num("positives"));
  r.negatives = static_cast<std::size_t>(num("negatives"));
  r.evaluated_pixels = static_cast<std::size_t>(num("evaluated_pixels"));
  r.exact_metrics = num("exact_metrics") != 0.0;
  return r;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "moose-report-v1";
  j["method"] = r.method;
  j["model_id"] = r.model_id;
  j["split"] = r.split_id;
  j["scoring_fn"] = r.scoring_fn;
  j["head_set"] = r.head_set;
  auto maybe = [](double v) { return std::isnan(v) ? nlohmann::ordered_json() : nlohmann::ordered_json(v); };
  j["aupr"] = maybe(r.aupr);
  j["fpr95"] = maybe(r.fpr95);
  j["ece"] = r.ece;
  j["miou"] = maybe(r.miou);
  j["variance_mean"] = r.variance_mean;
  j["mi_mean"] = r.mi_mean;
  j["counts"] = {{"positives", r.positives}, {"negatives", r.negatives}, {"evaluated_pixels", r.evaluated_pixels}};
  j["exact_metrics"] = r.exact_metrics;
  return j.dump(2);
}

void save_report(const std::filesystem::path& stem, const EvalReport& r) {
  std::filesystem::path txt = stem, json = stem;
  txt += ".txt";
  json += ".json";
  std::ofstream t(txt);
  write_report(t, r);
  std::ofstream j(json);
  j << report_json(r) << '\n';
  if (!t || !j) throw DataError("failed writing report " + stem.string());
}

EvalReport load_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open report " + path.string());
  return read_report(is);
}

std::string table_header() {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-16s %-4s %-10s %8s %8s", "method", "fn", "heads", "AUPR", "FPR95");
  return buf;
}

std::string table_row(const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %-4s %-10s %8.2f %8.2f",
                (r.method.empty() ? r.model_id : r.method).c_str(), r.scoring_fn.c_str(),
                r.head_set.c_str(), 100.0 * r.aupr, 100.0 * r.fpr95);
  return buf;
}

}  // namespace moose
