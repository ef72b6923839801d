#include "moose/config.hpp"

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace moose {
namespace {

const char* const kDefaults[][2] = {
    {"run.seed", "1"},

    {"paths.data", "data"},
    {"paths.checkpoint", "model.ckpt"},
    {"paths.ensemble", "mh_ensemble.bin"},
    {"paths.deep_ensemble", "deep_ensemble.bin"},

    {"data.image_size", "128"},
    {"data.num_background_classes", "3"},
    {"data.num_foreground_classes", "4"},
    {"data.context_pair_count", "1"},
    {"data.min_objects", "4"},
    {"data.max_objects", "7"},
    {"data.min_object_size", "10"},
    {"data.max_object_size", "28"},
    {"data.min_anomalies", "1"},
    {"data.max_anomalies", "2"},
    {"data.min_anomaly_size", "8"},
    {"data.max_anomaly_size", "48"},
    {"data.noise_floor", "0.03"},
    {"data.context_affinity", "0.0"},
    {"data.object_grain", "0.0"},
    {"data.train_size", "300"},
    {"data.val_size", "60"},
    {"data.test_size", "60"},
    {"data.seed", "1"},

    {"model.encoder_channels", "64"},
    {"model.branch_dilations", "1,4,8,12"},
    {"model.branch_channels", "32"},
    {"model.global_pool_branch", "true"},
    {"model.output_stride", "8"},
    {"model.shared_dilation", "false"},
    {"model.head_projection_channels", "64"},
    {"model.head_depth", "1"},

    {"probe.depth", "1"},
    {"probe.projection_channels", "32"},

    {"train.epochs", "30"},
    {"train.learning_rate", "0.05"},
    {"train.momentum", "0.9"},
    {"train.weight_decay", "0.0001"},
    {"train.batch_size", "8"},
    {"train.early_stop", "true"},
    {"train.plateau_min_delta", "0.002"},
    {"train.plateau_patience", "10"},
    {"train.horizontal_flip", "true"},

    {"probe_train.epochs", "30"},
    {"probe_train.learning_rate", "0.01"},
    {"probe_train.momentum", "0.9"},
    {"probe_train.weight_decay", "0"},
    {"probe_train.batch_size", "8"},
    {"probe_train.early_stop", "true"},
    {"probe_train.plateau_min_delta", "0.002"},
    {"probe_train.plateau_patience", "10"},
    {"probe_train.horizontal_flip", "false"},

    {"ensemble.kind", "multihead"},
    {"ensemble.num_members", "5"},
    {"ensemble.bootstrap_fraction", "0.67"},
    {"ensemble.head_epochs", "30"},
    {"ensemble.selection_scenes", "20"},
    {"ensemble.selection_score", "h"},

    {"eval.model", "moose"},
    {"eval.split", "test"},
    {"eval.heads", "all"},
    {"eval.score", "all"},
    {"eval.diversity_pixels", "all"},
    {"eval.exact_limit", "1000000"},

    {"analyze.noise_levels", "0,0.25,0.5,0.75,1"},
    {"analyze.corruption_split", "test"},
    {"analyze.diversity_split", "val"},

    {"ablate.dilations", "1,4,8,12"},

    {"cost.runs", "30"},
    {"cost.warmup", "3"},
    {"cost.image_size", "128"},
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  std::istringstream is(text);
  T v{};
  if (!(is >> v) || !(is >> std::ws).eof()) {
    throw ConfigError("config key " + key + ": cannot parse '" + text + "' as a number");
  }
  return v;
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& kv : kDefaults) values_[kv[0]] = kv[1];
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  parse(is, path.string());
}

void RunConfig::parse(std::istream& is, const std::string& origin) {
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of any [section]");
    set(section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

void RunConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const { return parse_number<int>(key, get(key)); }
double RunConfig::get_double(const std::string& key) const { return parse_number<double>(key, get(key)); }
std::uint64_t RunConfig::get_u64(const std::string& key) const {
  const std::string& v = get(key);
  if (!v.empty() && v[0] == '-') throw ConfigError("config key " + key + " must be non-negative");
  return parse_number<std::uint64_t>(key, v);
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
}

std::vector<int> RunConfig::get_ints(const std::string& key) const {
  std::vector<int> out;
  std::stringstream ss(get(key));
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(parse_number<int>(key, trim(tok)));
  return out;
}

std::vector<double> RunConfig::get_doubles(const std::string& key) const {
  std::vector<double> out;
  std::stringstream ss(get(key));
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(parse_number<double>(key, trim(tok)));
  return out;
}

void RunConfig::write(std::ostream& os) const {
  std::string section;
  for (const auto& [key, value] : values_) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      os << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    os << key.substr(dot + 1) << " = " << value << '\n';
  }
}

SceneConfig RunConfig::scene() const {
  SceneConfig c;
  c.image_size = get_int("data.image_size");
  c.num_background_classes = get_int("data.num_background_classes");
  c.num_foreground_classes = get_int("data.num_foreground_classes");
  c.context_pair_count = get_int("data.context_pair_count");
  c.min_objects = get_int("data.min_objects");
  c.max_objects = get_int("data.max_objects");
  c.min_object_size = get_int("data.min_object_size");
  c.max_object_size = get_int("data.max_object_size");
  c.min_anomalies = get_int("data.min_anomalies");
  c.max_anomalies = get_int("data.max_anomalies");
  c.min_anomaly_size = get_int("data.min_anomaly_size");
  c.max_anomaly_size = get_int("data.max_anomaly_size");
  c.noise_floor = get_double("data.noise_floor");
  c.context_affinity = get_double("data.context_affinity");
  c.object_grain = get_double("data.object_grain");
  c.train_size = get_int("data.train_size");
  c.val_size = get_int("data.val_size");
  c.test_size = get_int("data.test_size");
  c.seed = get_u64("data.seed");
  validate(c);
  return c;
}

PyramidConfig RunConfig::pyramid(int num_classes) const {
  PyramidConfig p;
  p.num_classes = num_classes;
  p.encoder_channels = get_int("model.encoder_channels");
  p.branch_dilations = get_ints("model.branch_dilations");
  p.branch_channels = get_int("model.branch_channels");
  p.include_global_pool_branch = get_bool("model.global_pool_branch");
  p.output_stride = get_int("model.output_stride");
  p.shared_dilation = get_bool("model.shared_dilation");
  p.head_projection_channels = get_int("model.head_projection_channels");
  p.head_depth = get_int("model.head_depth");
  validate(p);
  return p;
}

ProbeConfig RunConfig::probe() const {
  ProbeConfig p;
  p.depth = get_int("probe.depth");
  p.projection_channels = get_int("probe.projection_channels");
  validate(p);
  return p;
}

TrainConfig RunConfig::train_section(const std::string& s) const {
  TrainConfig t;
  t.epochs = get_int(s + ".epochs");
  t.learning_rate = get_double(s + ".learning_rate");
  t.momentum = get_double(s + ".momentum");
  t.weight_decay = get_double(s + ".weight_decay");
  t.batch_size = get_int(s + ".batch_size");
  t.early_stop_on_miou_plateau = get_bool(s + ".early_stop");
  t.plateau_min_delta = get_double(s + ".plateau_min_delta");
  t.plateau_patience = get_int(s + ".plateau_patience");
  t.horizontal_flip = get_bool(s + ".horizontal_flip");
  t.seed = seed();
  validate(t, 2);
  return t;
}

TrainConfig RunConfig::base_train() const { return train_section("train"); }
TrainConfig RunConfig::probe_train() const { return train_section("probe_train"); }

EnsembleConfig RunConfig::ensemble() const {
  EnsembleConfig e;
  const std::string& kind = get("ensemble.kind");
  if (kind != "deep" && kind != "multihead") {
    throw ConfigError("ensemble.kind must be 'deep' or 'multihead', got '" + kind + "'");
  }
  e.shared_encoder = kind == "multihead";
  e.num_members = get_int("ensemble.num_members");
  e.bootstrap_fraction = get_double("ensemble.bootstrap_fraction");
  e.seed = seed();
  validate(e);
  return e;
}

void RunConfig::check() const {
  (void)scene();
  (void)pyramid(scene().num_classes());
  (void)probe();
  (void)base_train();
  (void)probe_train();
  (void)ensemble();
  (void)get_int("ensemble.head_epochs");
  (void)get_int("ensemble.selection_scenes");
  (void)get_doubles("analyze.noise_levels");
  (void)get_ints("ablate.dilations");
  (void)get_int("cost.runs");
  (void)get_int("cost.warmup");
  (void)get_int("cost.image_size");
  (void)get_u64("eval.exact_limit");
  for (const char* k : {"eval.split", "analyze.corruption_split", "analyze.diversity_split"}) {
    (void)parse_split(get(k));
  }
  const std::string& m = get("eval.model");
  if (m != "moose" && m != "mh_ensemble" && m != "deep_ensemble") {
    throw ConfigError("eval.model must be moose, mh_ensemble or deep_ensemble");
  }
  const std::string& dp = get("eval.diversity_pixels");
  if (dp != "all" && dp != "anomalous") throw ConfigError("eval.diversity_pixels must be all or anomalous");
}

}  // namespace moose
