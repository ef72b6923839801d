#include "moose/analysis.hpp"

#include <cstdio>
#include <stdexcept>

#include <json.hpp>

#include "moose/metrics.hpp"
#include "moose/parallel.hpp"

namespace moose {

const DiversityRow& DiversityReport::row(const std::string& method) const {
  for (const auto& r : rows) {
    if (r.method == method) return r;
  }
  throw std::out_of_range("no diversity row for " + method);
}

DiversityReport run_diversity_analysis(std::span<const NamedStack> methods,
                                       std::span<const LabeledScene> scenes, bool anomalous_only) {
  DiversityReport report;
  report.anomalous_only = anomalous_only;
  const ScoringFn fns[] = {ScoringFn::kEntropy};
  for (const NamedStack& m : methods) {
    EvalOptions opts;
    opts.heads = HeadSet::all_heads();
    opts.diversity_on_anomalous_only = anomalous_only;
    opts.method = m.method;
    opts.detection = false;
    const EvalReport r = evaluate_stacks(m.forward, scenes, fns, opts)[0];
    report.rows.push_back({m.method, r.variance_mean, r.mi_mean, r.ece});
  }
  return report;
}

namespace {

// Per-head confusion over one set of (possibly corrupted) scenes.
std::vector<ConfusionAccumulator> head_confusions(const PyramidModel& model,
                                                  std::span<const LabeledScene> scenes) {
  const int heads = model.num_heads(), n = model.pyramid.num_classes;
  std::vector<std::vector<ConfusionAccumulator>> per(
      scenes.size(), std::vector<ConfusionAccumulator>(heads, ConfusionAccumulator(n, kIgnoreIndex)));
  parallel_for(scenes.size(), [&](std::size_t i) {
    const LogitStack stack = forward_all(model, scenes[i].image);
    std::vector<std::uint8_t> gt = scenes[i].labels.values;
    for (std::size_t p = 0; p < gt.size(); ++p) {
      if (!scenes[i].anomaly.values.empty() && scenes[i].anomaly.values[p]) gt[p] = kIgnoreIndex;
    }
    std::vector<std::uint8_t> pred(stack.pixels());
    for (int k = 0; k < heads; ++k) {
      for (std::size_t p = 0; p < stack.pixels(); ++p) {
        int best = 0;
        for (int c = 1; c < n; ++c) {
          if (stack.plane(k, c)[p] > stack.plane(k, best)[p]) best = c;
        }
        pred[p] = static_cast<std::uint8_t>(best);
      }
      per[i][k].add(std::span<const std::uint8_t>(pred), std::span<const std::uint8_t>(gt));
    }
  });
  std::vector<ConfusionAccumulator> out(heads, ConfusionAccumulator(n, kIgnoreIndex));
  for (const auto& s : per) {
    for (int k = 0; k < heads; ++k) out[k].merge(s[k]);
  }
  return out;
}

}  // namespace

CorruptionCurve run_corruption_analysis(const PyramidModel& model, std::span<const LabeledScene> scenes,
                                        std::span<const int> classes,
                                        std::span<const double> noise_levels, std::uint64_t seed) {
  if (classes.empty()) throw ConfigError("corruption analysis needs at least one class");
  CorruptionCurve curve;
  curve.noise_levels.assign(noise_levels.begin(), noise_levels.end());
  curve.classes.assign(classes.begin(), classes.end());
  const int heads = model.num_heads();

  const auto clean = head_confusions(model, scenes);
  std::vector<CorruptionHead> all(heads);
  for (int k = 0; k < heads; ++k) {
    all[k].head = k;
    all[k].dilation = k == 0 ? 0 : model.pyramid.branch_dilations[k - 1];
    all[k].clean_miou = clean[k].miou(classes);
  }
  const int n = model.pyramid.num_classes;
  for (double level : noise_levels) {
    std::vector<LabeledScene> corrupted(scenes.size());
    parallel_for(scenes.size(), [&](std::size_t i) {
      corrupted[i] = corrupt_foreground(scenes[i], classes, level, n, seed + i);
    });
    const auto conf = head_confusions(model, corrupted);
    for (int k = 0; k < heads; ++k) {
      const double m = conf[k].miou(classes);
      all[k].corrupt_miou.push_back(m);
      all[k].retained.push_back(m / all[k].clean_miou);
    }
  }
  curve.global = all[0];
  curve.probes.assign(all.begin() + 1, all.end());
  std::stable_sort(curve.probes.begin(), curve.probes.end(),
                   [](const CorruptionHead& a, const CorruptionHead& b) { return a.dilation < b.dilation; });
  return curve;
}

double AblationRow::mean_relative_change() const {
  double s = 0.0;
  for (int f = 0; f < 3; ++f) s += relative_change(f);
  return s / 3.0;
}

AblationRow ablation_row(const std::string& label, const PyramidModel& model,
                         std::span<const LabeledScene> scenes) {
  AblationRow row;
  row.label = label;
  row.dilations = model.pyramid.branch_dilations;
  auto forward = [&](const Tensor& img) { return forward_all(model, img); };
  EvalOptions all;
  all.heads = HeadSet::all_heads();
  const auto moose = evaluate_stacks(forward, scenes, kAllScoringFns, all);
  EvalOptions global;
  global.heads = HeadSet::global_only();
  const auto single = evaluate_stacks(forward, scenes, kAllScoringFns, global);
  for (int f = 0; f < 3; ++f) {
    row.moose_aupr[f] = moose[f].aupr;
    row.global_aupr[f] = single[f].aupr;
  }
  row.variance_mean = moose[0].variance_mean;
  row.mi_mean = moose[0].mi_mean;
  return row;
}

PyramidModel train_moose(const AblationSetup& setup, const PyramidConfig& pyramid, const Dataset& data) {
  PyramidModel model = build_model(pyramid, setup.probe, setup.seed);
  TrainConfig base = setup.base_train;
  base.seed = setup.seed;
  train_base_model(model, data.train, data.val, base);
  TrainConfig probe = setup.probe_train;
  probe.seed = setup.seed + 1;
  train_probes(model, data.train, data.val, probe);
  return model;
}

std::vector<AblationRow> run_single_dilation_ablation(const AblationSetup& setup, const Dataset& data,
                                                      std::span<const int> dilation_rates,
                                                      const PyramidModel* standard) {
  std::vector<AblationRow> rows;
  for (int rate : dilation_rates) {
    PyramidConfig p = setup.pyramid;
    p.shared_dilation = true;
    p.branch_dilations.assign(setup.pyramid.branch_dilations.size(), rate);
    const PyramidModel m = train_moose(setup, p, data);
    rows.push_back(ablation_row("SD-" + std::to_string(rate), m, data.test));
  }
  if (standard) {
    rows.push_back(ablation_row("MOoSe", *standard, data.test));
  } else {
    const PyramidModel m = train_moose(setup, setup.pyramid, data);
    rows.push_back(ablation_row("MOoSe", m, data.test));
  }
  return rows;
}

std::string diversity_json(const DiversityReport& r) {
  nlohmann::ordered_json j;
  j["schema"] = "moose-diversity-v1";
  j["pixels"] = r.anomalous_only ? "anomalous" : "all_evaluated";
  for (const auto& row : r.rows) {
    j["methods"].push_back(
        {{"method", row.method}, {"variance_mean", row.variance_mean}, {"mi_mean", row.mi_mean}, {"ece", row.ece}});
  }
  return j.dump(2);
}

namespace {

nlohmann::ordered_json head_json(const CorruptionHead& h) {
  return {{"head", h.head},
          {"dilation", h.dilation},
          {"clean_miou", h.clean_miou},
          {"corrupt_miou", h.corrupt_miou},
          {"retained_miou", h.retained}};
}

}  // namespace

std::string corruption_json(const CorruptionCurve& c) {
  nlohmann::ordered_json j;
  j["schema"] = "moose-corruption-v1";
  j["noise_levels"] = c.noise_levels;
  j["classes"] = c.classes;
  j["global"] = head_json(c.global);
  for (const auto& h : c.probes) j["probes"].push_back(head_json(h));
  return j.dump(2);
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  nlohmann::ordered_json j;
  j["schema"] = "moose-ablation-v1";
  const char* fns[] = {"msp", "h", "ml"};
  for (const auto& r : rows) {
    nlohmann::ordered_json row{{"label", r.label}, {"dilations", r.dilations},
                               {"variance_mean", r.variance_mean}, {"mi_mean", r.mi_mean}};
    for (int f = 0; f < 3; ++f) {
      row[fns[f]] = {{"global_aupr", r.global_aupr[f]},
                     {"moose_aupr", r.moose_aupr[f]},
                     {"absolute_change", r.absolute_change(f)},
                     {"relative_change", r.relative_change(f)}};
    }
    row["mean_relative_change"] = r.mean_relative_change();
    j["rows"].push_back(row);
  }
  return j.dump(2);
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-8s %7s %8s %8s %8s %8s\n", "model", "var", "fn", "Ghead", "+probes", "chng%");
  out += buf;
  const char* fns[] = {"msp", "h", "ml"};
  for (const auto& r : rows) {
    for (int f = 0; f < 3; ++f) {
      std::snprintf(buf, sizeof buf, "%-8s %7.3f %8s %8.2f %8.2f %+8.1f\n", f ? "" : r.label.c_str(),
                    r.variance_mean, fns[f], 100.0 * r.global_aupr[f], 100.0 * r.moose_aupr[f],
                    100.0 * r.relative_change(f));
      out += buf;
    }
  }
  return out;
}

}  // namespace moose
