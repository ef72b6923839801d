#include "moose/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "moose/analysis.hpp"
#include "moose/checkpoint.hpp"
#include "moose/config.hpp"
#include "moose/ensemble.hpp"
#include "moose/evaluate.hpp"
#include "moose/synthetic.hpp"
#include "moose/training.hpp"

namespace fs = std::filesystem;

namespace moose::cli {
namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  RunConfig cfg;
  fs::path out;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!text.empty() && text.back() != '\n') os << '\n';
  if (!os) throw DataError("failed writing " + path.string());
}

Dataset load_data(const Context& ctx) {
  const fs::path dir = ctx.cfg.get("paths.data");
  if (!fs::exists(dir / "manifest.txt")) throw DataError("no dataset at " + dir.string() + " (run gen-data)");
  return load_dataset(dir);
}

void check_classes(int model_classes, const Dataset& data, const std::string& what) {
  const int n = data.config.num_classes();
  if (model_classes != n) {
    throw DataError("class count mismatch: " + what + " has N=" + std::to_string(model_classes) +
                    " classes but the dataset has N=" + std::to_string(n));
  }
}

std::vector<ScoringFn> score_list(const std::string& text) {
  if (text == "all") return {std::begin(kAllScoringFns), std::end(kAllScoringFns)};
  try {
    return {parse_scoring_fn(text)};
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// Held-out test-style scenes for median-member selection, indexed past the
// evaluation test split so the two never overlap.
std::vector<LabeledScene> selection_scenes(const SceneConfig& sc, int count) {
  std::vector<LabeledScene> out;
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(sc, sc.test_size + i, Split::kTest));
  return out;
}

int cmd_gen_data(const Context& ctx) {
  const SceneConfig sc = ctx.cfg.scene();
  generate_split(sc, ctx.out);
  const auto manifest = read_manifest(ctx.out);
  std::cout << "wrote dataset to " << ctx.out.string() << ": train=" << sc.train_size
            << " val=" << sc.val_size << " test=" << sc.test_size
            << " anomalous_test_pixels=" << manifest.at("test_anomalous_pixels") << '\n';
  return kExitOk;
}

int cmd_train(const Context& ctx) {
  const Dataset data = load_data(ctx);
  PyramidModel model = build_model(ctx.cfg.pyramid(data.config.num_classes()), ctx.cfg.probe(), ctx.cfg.seed());
  TrainConfig base = ctx.cfg.base_train();
  std::cout << "training base model on " << data.train.size() << " scenes\n";
  const TrainLog base_log = train_base_model(model, data.train, data.val, base);
  {
    std::ofstream os(ctx.out / "train_base.log");
    write_train_log(os, base_log);
  }
  TrainConfig probe = ctx.cfg.probe_train();
  probe.seed = ctx.cfg.seed() + 1;
  std::cout << "training " << model.probes.size() << " probes on frozen features\n";
  const TrainLog probe_log = train_probes(model, data.train, data.val, probe);
  {
    std::ofstream os(ctx.out / "train_probes.log");
    write_train_log(os, probe_log);
  }
  save_model(ctx.out / "model.ckpt", model);
  const auto miou = validation_miou(model, data.val);
  std::cout << "val mIoU global=" << miou[0];
  for (std::size_t k = 1; k < miou.size(); ++k) std::cout << " probe" << k << '=' << miou[k];
  std::cout << "\nwrote " << (ctx.out / "model.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_train_ensemble(const Context& ctx) {
  const Dataset data = load_data(ctx);
  const EnsembleConfig ec = ctx.cfg.ensemble();
  EnsembleModel ens;
  fs::path file;
  if (ec.shared_encoder) {
    const PyramidModel base = load_model(ctx.cfg.get("paths.checkpoint"));
    check_classes(base.pyramid.num_classes, data, "checkpoint");
    TrainConfig tc = ctx.cfg.probe_train();
    tc.epochs = ctx.cfg.get_int("ensemble.head_epochs");
    ens = train_multihead_ensemble(ec, base, data.train, tc);
    file = ctx.out / "mh_ensemble.bin";
  } else {
    ens = train_deep_ensemble(ec, ctx.cfg.pyramid(data.config.num_classes()), data.train, data.val,
                              ctx.cfg.base_train());
    file = ctx.out / "deep_ensemble.bin";
  }
  save_ensemble(file, ens);
  const ScoringFn fn = parse_scoring_fn(ctx.cfg.get("ensemble.selection_score"));
  const auto held_out = selection_scenes(data.config, ctx.cfg.get_int("ensemble.selection_scenes"));
  const int median = select_median_member(ens, held_out, fn);
  write_text(ctx.out / "median_member.txt", "median_member=" + std::to_string(median));
  std::cout << "wrote " << file.string() << " (" << ens.num_members() << " members, median member "
            << median << ")\n";
  return kExitOk;
}

int cmd_eval(const Context& ctx) {
  const Dataset data = load_data(ctx);
  const Split split = parse_split(ctx.cfg.get("eval.split"));
  const std::string kind = ctx.cfg.get("eval.model");
  EvalOptions opts;
  opts.split_id = to_string(split);
  opts.exact_limit = ctx.cfg.get_u64("eval.exact_limit");
  opts.diversity_on_anomalous_only = ctx.cfg.get("eval.diversity_pixels") == "anomalous";
  const auto fns = score_list(ctx.cfg.get("eval.score"));

  std::optional<PyramidModel> model;
  std::optional<EnsembleModel> ens;
  StackFn forward;
  if (kind == "moose") {
    model = load_model(ctx.cfg.get("paths.checkpoint"));
    check_classes(model->pyramid.num_classes, data, "checkpoint");
    try {
      opts.heads = parse_head_set(ctx.cfg.get("eval.heads"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    (void)opts.heads.resolve(model->num_heads());
    opts.model_id = ctx.cfg.get("paths.checkpoint");
    opts.method = opts.heads.kind() == HeadSet::Kind::kGlobalOnly ? "Ghead" : "MOoSe";
    forward = [&](const Tensor& img) { return forward_all(*model, img); };
  } else {
    const std::string path = ctx.cfg.get(kind == "mh_ensemble" ? "paths.ensemble" : "paths.deep_ensemble");
    ens = load_ensemble(path);
    check_classes(ens->shared_encoder() ? ens->trunk->pyramid.num_classes
                                        : ens->members.at(0).pyramid.num_classes,
                  data, "ensemble");
    opts.heads = HeadSet::all_heads();
    opts.model_id = path;
    opts.method = kind == "mh_ensemble" ? "MH-Ens" : "DeepEns";
    forward = [&](const Tensor& img) { return ensemble_forward(*ens, img); };
  }
  const auto reports = evaluate_stacks(forward, data.split(split), fns, opts);
  std::cout << table_header() << '\n';
  for (const auto& r : reports) {
    std::cout << table_row(r) << '\n';
    save_report(ctx.out / ("eval_" + r.method + "_" + r.scoring_fn), r);
  }
  return kExitOk;
}

int cmd_analyze(const Context& ctx) {
  const Dataset data = load_data(ctx);
  const PyramidModel model = load_model(ctx.cfg.get("paths.checkpoint"));
  check_classes(model.pyramid.num_classes, data, "checkpoint");
  PyramidModel global = model;
  global.probes.clear();

  std::vector<NamedStack> methods;
  methods.push_back({"global", [&](const Tensor& img) { return forward_all(global, img); }});
  std::optional<EnsembleModel> mh, deep;
  if (fs::exists(ctx.cfg.get("paths.ensemble"))) {
    mh = load_ensemble(ctx.cfg.get("paths.ensemble"));
    methods.push_back({"mh_ensemble", [&](const Tensor& img) { return ensemble_forward(*mh, img); }});
  }
  if (fs::exists(ctx.cfg.get("paths.deep_ensemble"))) {
    deep = load_ensemble(ctx.cfg.get("paths.deep_ensemble"));
    methods.push_back({"deep_ensemble", [&](const Tensor& img) { return ensemble_forward(*deep, img); }});
  }
  methods.push_back({"moose", [&](const Tensor& img) { return forward_all(model, img); }});
  const auto& div_scenes = data.split(parse_split(ctx.cfg.get("analyze.diversity_split")));
  const DiversityReport div =
      run_diversity_analysis(methods, div_scenes, ctx.cfg.get("eval.diversity_pixels") == "anomalous");
  write_text(ctx.out / "diversity.json", diversity_json(div));
  std::printf("%-14s %9s %9s %9s\n", "method", "Var", "MI", "ECE");
  for (const auto& r : div.rows) {
    std::printf("%-14s %9.4f %9.5f %9.4f\n", r.method.c_str(), r.variance_mean, r.mi_mean, r.ece);
  }

  const auto fg = foreground_classes(data.config);
  const auto levels = ctx.cfg.get_doubles("analyze.noise_levels");
  const CorruptionCurve curve = run_corruption_analysis(
      model, data.split(parse_split(ctx.cfg.get("analyze.corruption_split"))), fg, levels, ctx.cfg.seed());
  write_text(ctx.out / "corruption.json", corruption_json(curve));
  std::printf("retained foreground mIoU at noise %.2f:", levels.back());
  std::printf(" global=%.3f", curve.global.retained.back());
  for (const auto& h : curve.probes) std::printf(" d%d=%.3f", h.dilation, h.retained.back());
  std::printf("\n");
  return kExitOk;
}

int cmd_ablate(const Context& ctx) {
  const Dataset data = load_data(ctx);
  AblationSetup setup;
  setup.pyramid = ctx.cfg.pyramid(data.config.num_classes());
  setup.probe = ctx.cfg.probe();
  setup.base_train = ctx.cfg.base_train();
  setup.probe_train = ctx.cfg.probe_train();
  setup.seed = ctx.cfg.seed();
  std::optional<PyramidModel> standard;
  if (fs::exists(ctx.cfg.get("paths.checkpoint"))) {
    standard = load_model(ctx.cfg.get("paths.checkpoint"));
    check_classes(standard->pyramid.num_classes, data, "checkpoint");
  }
  const auto rates = ctx.cfg.get_ints("ablate.dilations");
  const auto rows = run_single_dilation_ablation(setup, data, rates, standard ? &*standard : nullptr);
  write_text(ctx.out / "ablation.json", ablation_json(rows));
  const std::string table = ablation_table(rows);
  write_text(ctx.out / "ablation.txt", table);
  std::cout << table;
  return kExitOk;
}

int cmd_cost(const Context& ctx) {
  const int size = ctx.cfg.get_int("cost.image_size");
  PyramidModel model;
  if (fs::exists(ctx.cfg.get("paths.checkpoint"))) {
    model = load_model(ctx.cfg.get("paths.checkpoint"));
  } else {
    model = build_model(ctx.cfg.pyramid(ctx.cfg.scene().num_classes()), ctx.cfg.probe(), ctx.cfg.seed());
  }
  EnsembleConfig ec = ctx.cfg.ensemble();
  const EnsembleModel deep = build_deep_ensemble(model.pyramid, ec);
  ec.shared_encoder = true;
  EnsembleModel mh;
  mh.config = ec;
  mh.trunk = model;
  mh.trunk->probes.clear();
  for (int i = 0; i < ec.num_members; ++i) mh.heads.push_back(model.global_head);
  const auto entries = cost_report(model, deep, mh, size, ctx.cfg.get_int("cost.runs"), ctx.cfg.get_int("cost.warmup"));
  nlohmann::ordered_json j;
  j["schema"] = "moose-cost-v1";
  j["image_size"] = size;
  std::printf("%-14s %12s %12s %8s\n", "model", "params", "latency_ms", "ratio");
  for (const auto& e : entries) {
    const double ratio = e.latency_ms / entries[0].latency_ms;
    std::printf("%-14s %12zu %12.3f %8.2f\n", e.name.c_str(), e.parameters, e.latency_ms, ratio);
    j["models"].push_back({{"name", e.name}, {"parameters", e.parameters}, {"latency_ms", e.latency_ms},
                           {"runs", e.runs}, {"relative_latency", ratio}});
  }
  write_text(ctx.out / "cost.json", j.dump(2));
  return kExitOk;
}

int cmd_report(const fs::path& out) {
  if (!fs::is_directory(out)) throw DataError("no such directory " + out.string());
  std::vector<EvalReport> reports;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream is(f);
    std::string first;
    std::getline(is, first);
    if (first != "schema=moose-report-v1") continue;
    reports.push_back(load_report(f));
  }
  if (reports.empty()) throw DataError("no evaluation reports under " + out.string());
  std::string table = table_header() + '\n';
  for (const auto& r : reports) table += table_row(r) + '\n';
  std::cout << table;
  write_text(out / "table.md", table);
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"moose: multi-head out-of-distribution segmentation toolkit", "moose"};
  app.require_subcommand(1);
  std::string config_path, out_dir, heads, score;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "run configuration file");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "run seed (run.seed)");
  app.add_option("--set", overrides, "override, section.key=value (repeatable)");
  app.add_option("--heads", heads, "head set for eval: global | all");
  app.add_option("--score", score, "scoring function for eval: msp | h | ml");
  const char* subcommands[][2] = {
      {"gen-data", "generate the synthetic dataset into --out"},
      {"train", "train base model and probes"},
      {"train-ensemble", "train a deep or multi-head ensemble"},
      {"eval", "evaluate OoD detection on a split"},
      {"analyze", "diversity and corruption analyses"},
      {"ablate", "single-dilation ablation"},
      {"cost", "parameter counts and forward latency"},
      {"report", "render stored evaluation reports as a table"},
  };
  for (const auto& s : subcommands) app.add_subcommand(s[0], s[1])->fallthrough();

  // Name the offending token for anything that is neither an option, an
  // option value nor a known subcommand.
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("-", 0) == 0) {
      if (a.find('=') == std::string::npos && a != "-h" && a != "--help") ++i;
      continue;
    }
    const bool known = std::any_of(std::begin(subcommands), std::end(subcommands),
                                   [&](const auto& s) { return a == s[0]; });
    if (!known) {
      std::cerr << "moose: unknown subcommand '" << a << "'\n";
      return kExitUsage;
    }
    break;
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  } catch (const CLI::ParseError& e) {
    std::cerr << "moose: " << e.what() << '\n';
    return kExitUsage;
  }
  const std::string sub = app.get_subcommands().front()->get_name();

  if (out_dir.empty()) {
    std::cerr << "moose: --out is required\n";
    return kExitUsage;
  }
  if (sub == "report") {
    try {
      return cmd_report(out_dir);
    } catch (const std::exception& e) {
      std::cerr << "moose: " << e.what() << '\n';
      return kExitRuntime;
    }
  }

  Context ctx;
  ctx.out = out_dir;
  try {
    if (config_path.empty()) throw UsageError("--config is required for " + sub);
    if (!fs::is_regular_file(config_path)) throw UsageError("config file not found: " + config_path);
    ctx.cfg.load_file(config_path);
    for (const auto& o : overrides) ctx.cfg.apply_override(o);
    if (seed) ctx.cfg.set("run.seed", std::to_string(*seed));
    if (!heads.empty()) ctx.cfg.set("eval.heads", heads);
    if (!score.empty()) ctx.cfg.set("eval.score", score);
    ctx.cfg.check();
    if (!heads.empty() && heads != "global" && heads != "all") throw UsageError("--heads must be global or all");
    if (!score.empty()) (void)score_list(score);
    fs::create_directories(ctx.out);
    std::ofstream snap(ctx.out / "resolved_config.cfg");
    ctx.cfg.write(snap);
    if (!snap) throw DataError("cannot write config snapshot into " + ctx.out.string());
  } catch (const UsageError& e) {
    std::cerr << "moose: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "moose: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "moose: " << e.what() << '\n';
    return kExitRuntime;
  }

  try {
    if (sub == "gen-data") return cmd_gen_data(ctx);
    if (sub == "train") return cmd_train(ctx);
    if (sub == "train-ensemble") return cmd_train_ensemble(ctx);
    if (sub == "eval") return cmd_eval(ctx);
    if (sub == "analyze") return cmd_analyze(ctx);
    if (sub == "ablate") return cmd_ablate(ctx);
    if (sub == "cost") return cmd_cost(ctx);
  } catch (const std::exception& e) {
    std::cerr << "moose: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args);
}

}  // namespace moose::cli
