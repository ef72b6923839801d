#include "moose/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "moose/parallel.hpp"
#include "moose/rng.hpp"

namespace moose {
namespace fs = std::filesystem;
namespace {

using Rgb = std::array<double, 3>;

struct BandTexture {
  Rgb base;
  double amplitude;
  double period;
  double angle;  // stripe orientation in radians
};

// Fixed palettes for the first classes; further ones are derived from the id.
BandTexture band_texture(int cls) {
  static const BandTexture kBands[] = {
      {{0.55, 0.70, 0.90}, 0.08, 40.0, 0.0},
      {{0.55, 0.52, 0.48}, 0.10, 12.0, M_PI / 2},
      {{0.35, 0.30, 0.25}, 0.08, 20.0, M_PI / 4},
      {{0.30, 0.55, 0.30}, 0.09, 16.0, -M_PI / 4},
  };
  if (cls < 4) return kBands[cls];
  Rng r(0xba9d, static_cast<std::uint64_t>(cls));
  return {{r.uniform(0.2, 0.7), r.uniform(0.2, 0.7), r.uniform(0.2, 0.7)}, 0.08,
          r.uniform(10.0, 40.0), r.uniform(0.0, M_PI)};
}

// Flat colour of a foreground texture slot (pairs share one slot).
Rgb foreground_color(int slot) {
  static const Rgb kColors[] = {
      {0.85, 0.20, 0.15}, {0.95, 0.85, 0.20}, {0.20, 0.65, 0.30},
      {0.15, 0.25, 0.75}, {0.90, 0.90, 0.90}, {0.10, 0.10, 0.10},
  };
  if (slot < 6) return kColors[slot];
  Rng r(0xf0f0, static_cast<std::uint64_t>(slot));
  return {r.uniform(), r.uniform(), r.uniform()};
}

const Rgb kOutline = {0.0, 0.0, 0.0};

struct AnomalyTexture {
  Rgb a, b;
  int cell;  // checker cell size; 0 = flat colour a
};

// Held-out textures; none of these colours occur in the in-distribution palettes.
const AnomalyTexture kAnomalyTextures[] = {
    {{0.80, 0.20, 0.80}, {0.10, 0.80, 0.80}, 4},
    {{0.45, 0.15, 0.65}, {0.45, 0.15, 0.65}, 0},
    {{0.98, 0.98, 0.98}, {0.02, 0.02, 0.02}, 2},
};
constexpr Shape kAnomalyShapes[] = {Shape::kTriangle, Shape::kRing};
constexpr Shape kObjectShapes[] = {Shape::kDisk, Shape::kBar, Shape::kCross};

int texture_slot(const SceneConfig& cfg, int cls) {
  const int fg = cls - cfg.num_background_classes;
  const int first_pair = cfg.first_pair_class() - cfg.num_background_classes;
  if (fg < first_pair) return fg;
  return first_pair + (fg - first_pair) / 2;
}

bool inside_shape(Shape shape, int size, bool vertical, int dy, int dx) {
  const double r = size / 2.0;
  const double d2 = static_cast<double>(dy) * dy + static_cast<double>(dx) * dx;
  const int thick = std::max(3, size / 3);
  const auto in_bar = [&](bool vert) {
    const int along = vert ? dy : dx, across = vert ? dx : dy;
    return std::abs(along) <= size / 2 && std::abs(across) <= thick / 2;
  };
  switch (shape) {
    case Shape::kDisk: return d2 <= r * r;
    case Shape::kBar: return in_bar(vertical);
    case Shape::kCross: return in_bar(true) || in_bar(false);
    case Shape::kTriangle:
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    case Shape::kRing: return d2 <= r * r && d2 >= 0.3 * r * r;
  }
  return false;
}

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

std::uint64_t scene_stream(Split split, int index) {
  return (static_cast<std::uint64_t>(split) + 1) << 32 | static_cast<std::uint32_t>(index);
}

std::string pad5(int i) {
  std::ostringstream os;
  os.width(5);
  os.fill('0');
  os << i;
  return os.str();
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test") return Split::kTest;
  throw ConfigError("unknown split '" + text + "'");
}

int SceneConfig::split_size(Split s) const {
  switch (s) {
    case Split::kTrain: return train_size;
    case Split::kVal: return val_size;
    case Split::kTest: return test_size;
  }
  return 0;
}

void validate(const SceneConfig& cfg) {
  if (cfg.image_size < 32) throw ConfigError("image_size must be >= 32");
  if (cfg.num_background_classes < 2) throw ConfigError("need at least two background classes");
  if (cfg.context_pair_count < 0 || 2 * cfg.context_pair_count > cfg.num_background_classes) {
    throw ConfigError("context_pair_count needs two distinct host bands per pair");
  }
  if (cfg.num_foreground_classes < 2 * cfg.context_pair_count || cfg.num_foreground_classes < 1) {
    throw ConfigError("num_foreground_classes must cover every context pair");
  }
  if (cfg.num_classes() >= kIgnoreIndex) throw ConfigError("too many classes");
  if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects) throw ConfigError("bad objects range");
  if (cfg.min_object_size < 4 || cfg.max_object_size < cfg.min_object_size) {
    throw ConfigError("bad object size range");
  }
  if (cfg.min_anomalies < 0 || cfg.max_anomalies < cfg.min_anomalies) {
    throw ConfigError("bad anomaly count range");
  }
  if (cfg.min_anomaly_size < 4 || cfg.max_anomaly_size < cfg.min_anomaly_size ||
      cfg.max_anomaly_size >= cfg.image_size) {
    throw ConfigError("bad anomaly size range");
  }
  if ((cfg.max_object_size + 2) * cfg.num_background_classes > cfg.image_size) {
    throw ConfigError("bands too thin for the configured object sizes");
  }
  if (cfg.noise_floor < 0.0) throw ConfigError("noise_floor must be >= 0");
  if (cfg.object_grain < 0.0) throw ConfigError("object_grain must be >= 0");
  if (cfg.context_affinity < 0.0 || cfg.context_affinity > 1.0) {
    throw ConfigError("context_affinity must lie in [0, 1]");
  }
  if (cfg.train_size < 0 || cfg.val_size < 0 || cfg.test_size < 0) throw ConfigError("negative split size");
}

std::vector<int> foreground_classes(const SceneConfig& cfg) {
  std::vector<int> out(cfg.num_foreground_classes);
  std::iota(out.begin(), out.end(), cfg.num_background_classes);
  return out;
}

int host_band_class(const SceneConfig& cfg, int cls) {
  const int first = cfg.first_pair_class();
  if (cls < first || cls >= cfg.num_classes()) return -1;
  return (cls - first) % cfg.num_background_classes;
}

int home_band_class(const SceneConfig& cfg, int cls) {
  const int fg = cls - cfg.num_background_classes;
  if (fg < 0 || cls >= cfg.first_pair_class()) return -1;
  return (2 * cfg.context_pair_count + fg) % cfg.num_background_classes;
}

LabeledScene generate_scene(const SceneConfig& cfg, int index, Split split, SceneLayout* layout) {
  validate(cfg);
  const int size = cfg.image_size;
  const int nb = cfg.num_background_classes;
  Rng rng(cfg.seed, scene_stream(split, index));

  // Bands: one per background class, shuffled order, random heights.
  std::vector<int> order(nb);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const int min_h = std::max(cfg.max_object_size + 2, size / (2 * nb));
  const int spare = std::max(0, size - min_h * nb);
  std::vector<double> w(nb);
  double wsum = 0.0;
  for (double& v : w) wsum += (v = rng.uniform(0.2, 1.0));
  std::vector<int> band_top(nb + 1, 0);
  for (int i = 0; i < nb; ++i) {
    const int extra = i + 1 == nb ? 0 : static_cast<int>(spare * w[i] / wsum);
    band_top[i + 1] = band_top[i] + min_h + extra;
  }
  band_top[nb] = size;
  std::vector<int> row_band(size);
  for (int i = 0; i < nb; ++i) {
    for (int y = band_top[i]; y < band_top[i + 1]; ++y) row_band[y] = order[i];
  }
  auto band_index_of_class = [&](int bg) {
    return static_cast<int>(std::find(order.begin(), order.end(), bg) - order.begin());
  };

  std::vector<Rgb> pixels(static_cast<std::size_t>(size) * size);
  std::vector<std::uint8_t> labels(pixels.size());
  std::vector<std::uint8_t> anomaly(pixels.size(), 0);
  std::vector<double> phases(nb);
  for (double& p : phases) p = rng.uniform(0.0, 2.0 * M_PI);
  for (int y = 0; y < size; ++y) {
    const int bg = row_band[y];
    const BandTexture tex = band_texture(bg);
    const double ca = std::cos(tex.angle), sa = std::sin(tex.angle);
    for (int x = 0; x < size; ++x) {
      const double s = std::sin(2.0 * M_PI * (ca * y + sa * x) / tex.period + phases[bg]);
      Rgb c;
      for (int ch = 0; ch < 3; ++ch) c[ch] = tex.base[ch] + tex.amplitude * s;
      pixels[static_cast<std::size_t>(y) * size + x] = c;
      labels[static_cast<std::size_t>(y) * size + x] = static_cast<std::uint8_t>(bg);
    }
  }

  SceneLayout local;
  local.row_band_class = row_band;

  // Objects: one of every foreground class first, then random extras.
  std::vector<int> classes = foreground_classes(cfg);
  const int extra = rng.integer(cfg.min_objects, cfg.max_objects) - static_cast<int>(classes.size());
  for (int i = 0; i < extra; ++i) {
    classes.push_back(cfg.num_background_classes + rng.integer(0, cfg.num_foreground_classes - 1));
  }
  for (int cls : classes) {
    PlacedObject obj;
    obj.cls = cls;
    obj.shape = kObjectShapes[rng.integer(0, 2)];
    const bool vertical = rng.uniform() < 0.5;
    const int host = host_band_class(cfg, cls);
    int band = host >= 0 ? band_index_of_class(host) : rng.integer(0, nb - 1);
    const int home = home_band_class(cfg, cls);
    if (home >= 0 && rng.uniform() < cfg.context_affinity) band = band_index_of_class(home);
    const int top = band_top[band], bottom = band_top[band + 1];
    obj.size = std::min(rng.integer(cfg.min_object_size, cfg.max_object_size), bottom - top - 2);
    const int r = obj.size / 2;
    const int lo_y = top + r + 1;
    obj.center_y = rng.integer(lo_y, std::max(lo_y, bottom - r - 2));
    obj.center_x = rng.integer(r, size - 1 - r);
    obj.band_class = row_band[obj.center_y];
    const Rgb color = foreground_color(texture_slot(cfg, cls));
    for (int dy = -r - 2; dy <= r + 2; ++dy) {
      for (int dx = -r - 2; dx <= r + 2; ++dx) {
        const int y = obj.center_y + dy, x = obj.center_x + dx;
        if (y < 0 || y >= size || x < 0 || x >= size) continue;
        const std::size_t i = static_cast<std::size_t>(y) * size + x;
        if (!inside_shape(obj.shape, obj.size, vertical, dy, dx)) {
          // Outline: keeps the label underneath, hides the band from the object's border pixels.
          bool touches = false;
          for (int oy = -1; oy <= 1 && !touches; ++oy)
            for (int ox = -1; ox <= 1 && !touches; ++ox)
              touches = inside_shape(obj.shape, obj.size, vertical, dy + oy, dx + ox);
          if (touches) pixels[i] = kOutline;
          continue;
        }
        pixels[i] = color;
        if (cfg.object_grain > 0.0) {
          for (int ch = 0; ch < 3; ++ch) pixels[i][ch] += rng.uniform(-cfg.object_grain, cfg.object_grain);
        }
        labels[i] = static_cast<std::uint8_t>(cls);
      }
    }
    local.objects.push_back(obj);
  }

  if (split == Split::kTest) {
    const int count = rng.integer(cfg.min_anomalies, cfg.max_anomalies);
    const double log_lo = std::log(cfg.min_anomaly_size), log_hi = std::log(cfg.max_anomaly_size);
    for (int a = 0; a < count; ++a) {
      PlacedObject obj;
      obj.cls = kIgnoreIndex;
      obj.shape = kAnomalyShapes[rng.integer(0, 1)];
      const AnomalyTexture& tex = kAnomalyTextures[rng.integer(0, 2)];
      obj.size = static_cast<int>(std::round(std::exp(rng.uniform(log_lo, log_hi))));
      const int r = obj.size / 2;
      obj.center_y = rng.integer(r, size - 1 - r);
      obj.center_x = rng.integer(r, size - 1 - r);
      obj.band_class = row_band[obj.center_y];
      for (int dy = -r - 1; dy <= r + 1; ++dy) {
        for (int dx = -r - 1; dx <= r + 1; ++dx) {
          const int y = obj.center_y + dy, x = obj.center_x + dx;
          if (y < 0 || y >= size || x < 0 || x >= size) continue;
          if (!inside_shape(obj.shape, obj.size, false, dy, dx)) continue;
          const std::size_t i = static_cast<std::size_t>(y) * size + x;
          const bool alt = tex.cell > 0 && ((y / tex.cell + x / tex.cell) % 2 == 1);
          pixels[i] = alt ? tex.b : tex.a;
          labels[i] = kIgnoreIndex;
          anomaly[i] = 1;
        }
      }
      local.anomalies.push_back(obj);
    }
  }

  LabeledScene scene;
  scene.image = Tensor({3, size, size});
  const std::size_t plane = pixels.size();
  for (std::size_t i = 0; i < plane; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      scene.image[ch * plane + i] =
          static_cast<float>(quantize(pixels[i][ch] + cfg.noise_floor * rng.normal()));
    }
  }
  scene.labels = LabelMask{size, size, std::move(labels)};
  scene.anomaly = AnomalyMask{size, size, std::move(anomaly), {}};
  if (layout) *layout = std::move(local);
  return scene;
}

LabeledScene corrupt_foreground(const LabeledScene& scene, std::span<const int> classes,
                                double noise_level, int num_classes, std::uint64_t seed) {
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw ConfigError("noise_level must be in [0, 1]");
  std::vector<bool> selected(kIgnoreIndex + 1, false);
  for (int c : classes) {
    if (c < 0 || c >= num_classes) throw ConfigError("unknown class id " + std::to_string(c));
    selected[c] = true;
  }
  LabeledScene out = scene;
  Rng rng(seed);
  const std::size_t plane = scene.labels.values.size();
  const float keep = static_cast<float>(1.0 - noise_level);
  const float mix = static_cast<float>(noise_level);
  for (std::size_t i = 0; i < plane; ++i) {
    if (!selected[scene.labels.values[i]]) continue;
    for (int ch = 0; ch < 3; ++ch) {
      const float u = static_cast<float>(rng.uniform());
      float& v = out.image[ch * plane + i];
      v = keep * v + mix * u;
    }
  }
  return out;
}

const std::vector<LabeledScene>& Dataset::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kVal: return val;
    case Split::kTest: return test;
  }
  return train;
}

Dataset generate_dataset(const SceneConfig& cfg) {
  validate(cfg);
  Dataset ds;
  ds.config = cfg;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    std::vector<LabeledScene> scenes(cfg.split_size(s));
    parallel_for(scenes.size(), [&](std::size_t i) {
      scenes[i] = generate_scene(cfg, static_cast<int>(i), s);
    });
    (s == Split::kTrain ? ds.train : s == Split::kVal ? ds.val : ds.test) = std::move(scenes);
  }
  return ds;
}

void write_ppm(const fs::path& path, const Tensor& image) {
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P6\n" << w << ' ' << h << "\n255\n";
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> buf(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      buf[i * 3 + ch] = static_cast<unsigned char>(
          std::lround(std::clamp(image[ch * plane + i], 0.0f, 1.0f) * 255.0f));
    }
  }
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

namespace {

void read_netpbm_header(std::istream& is, const std::string& magic, int& w, int& h, const fs::path& path) {
  std::string m;
  int maxval = 0;
  is >> m >> w >> h >> maxval;
  is.get();
  if (!is || m != magic || maxval != 255 || w <= 0 || h <= 0) {
    throw DataError("bad netpbm header in " + path.string());
  }
}

}  // namespace

Tensor read_ppm(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  int w = 0, h = 0;
  read_netpbm_header(is, "P6", w, h, path);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> buf(plane * 3);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw DataError("truncated " + path.string());
  }
  Tensor image({3, h, w});
  for (std::size_t i = 0; i < plane; ++i) {
    for (int ch = 0; ch < 3; ++ch) {
      image[ch * plane + i] = static_cast<float>(static_cast<double>(buf[i * 3 + ch]) / 255.0);
    }
  }
  return image;
}

void write_pgm(const fs::path& path, int height, int width, std::span<const std::uint8_t> values) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size()));
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, int& height, int& width) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  read_netpbm_header(is, "P5", width, height, path);
  std::vector<std::uint8_t> v(static_cast<std::size_t>(height) * width);
  if (!is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size()))) {
    throw DataError("truncated " + path.string());
  }
  return v;
}

void generate_split(const SceneConfig& cfg, const fs::path& dir) {
  validate(cfg);
  std::size_t test_pixels = 0, test_anomalous = 0;
  std::map<std::string, int> counts;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const fs::path root = dir / to_string(s);
    for (const char* sub : {"images", "labels", "anomaly"}) fs::create_directories(root / sub);
    const int n = cfg.split_size(s);
    std::vector<std::size_t> anomalous(n, 0);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      const LabeledScene scene = generate_scene(cfg, static_cast<int>(i), s);
      const std::string stem = pad5(static_cast<int>(i));
      write_ppm(root / "images" / (stem + ".ppm"), scene.image);
      write_pgm(root / "labels" / (stem + ".pgm"), scene.labels.height, scene.labels.width,
                scene.labels.values);
      write_pgm(root / "anomaly" / (stem + ".pgm"), scene.anomaly.height, scene.anomaly.width,
                scene.anomaly.values);
      anomalous[i] = static_cast<std::size_t>(
          std::count(scene.anomaly.values.begin(), scene.anomaly.values.end(), std::uint8_t{1}));
    });
    counts[to_string(s)] = n;
    if (s == Split::kTest) {
      test_pixels = static_cast<std::size_t>(n) * cfg.image_size * cfg.image_size;
      test_anomalous = std::accumulate(anomalous.begin(), anomalous.end(), std::size_t{0});
    }
  }

  std::ofstream m(dir / "manifest.txt");
  if (!m) throw DataError("cannot write manifest in " + dir.string());
  m << "format=moose-data-v1\n";
  m << "seed=" << cfg.seed << '\n';
  m << "image_size=" << cfg.image_size << '\n';
  m << "num_classes=" << cfg.num_classes() << '\n';
  m << "num_background_classes=" << cfg.num_background_classes << '\n';
  m << "num_foreground_classes=" << cfg.num_foreground_classes << '\n';
  m << "context_pair_count=" << cfg.context_pair_count << '\n';
  m << "objects_per_scene=" << cfg.min_objects << ',' << cfg.max_objects << '\n';
  m << "object_size=" << cfg.min_object_size << ',' << cfg.max_object_size << '\n';
  m << "anomalies_per_scene=" << cfg.min_anomalies << ',' << cfg.max_anomalies << '\n';
  m << "anomaly_size=" << cfg.min_anomaly_size << ',' << cfg.max_anomaly_size << '\n';
  m << "noise_floor=" << cfg.noise_floor << '\n';
  m << "context_affinity=" << cfg.context_affinity << '\n';
  m << "object_grain=" << cfg.object_grain << '\n';
  m << "ignore_index=" << static_cast<int>(kIgnoreIndex) << '\n';
  for (const auto& [split, n] : counts) m << "count." << split << '=' << n << '\n';
  m << "test_pixels=" << test_pixels << '\n';
  m << "test_anomalous_pixels=" << test_anomalous << '\n';
  for (int c = 0; c < cfg.num_classes(); ++c) {
    m << "class." << c << '=';
    if (c < cfg.num_background_classes) {
      m << "band" << c;
    } else if (host_band_class(cfg, c) >= 0) {
      m << "pair" << (c - cfg.first_pair_class()) / 2 << (((c - cfg.first_pair_class()) % 2) ? 'b' : 'a')
        << "@band" << host_band_class(cfg, c);
    } else {
      m << "object" << c - cfg.num_background_classes;
    }
    m << '\n';
  }
}

std::map<std::string, std::string> read_manifest(const fs::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw DataError("missing manifest.txt in " + dir.string());
  std::map<std::string, std::string> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("bad manifest line: " + line);
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (out["format"] != "moose-data-v1") throw DataError("unsupported dataset format");
  return out;
}

SceneConfig config_from_manifest(const std::map<std::string, std::string>& m) {
  auto get = [&](const std::string& k) {
    auto it = m.find(k);
    if (it == m.end()) throw DataError("manifest missing key " + k);
    return it->second;
  };
  auto pair = [&](const std::string& k, int& lo, int& hi) {
    const std::string v = get(k);
    const auto comma = v.find(',');
    lo = std::stoi(v.substr(0, comma));
    hi = std::stoi(v.substr(comma + 1));
  };
  SceneConfig cfg;
  cfg.seed = std::stoull(get("seed"));
  cfg.image_size = std::stoi(get("image_size"));
  cfg.num_background_classes = std::stoi(get("num_background_classes"));
  cfg.num_foreground_classes = std::stoi(get("num_foreground_classes"));
  cfg.context_pair_count = std::stoi(get("context_pair_count"));
  pair("objects_per_scene", cfg.min_objects, cfg.max_objects);
  pair("object_size", cfg.min_object_size, cfg.max_object_size);
  pair("anomalies_per_scene", cfg.min_anomalies, cfg.max_anomalies);
  pair("anomaly_size", cfg.min_anomaly_size, cfg.max_anomaly_size);
  cfg.noise_floor = std::stod(get("noise_floor"));
  cfg.context_affinity = std::stod(get("context_affinity"));
  cfg.object_grain = std::stod(get("object_grain"));
  cfg.train_size = std::stoi(get("count.train"));
  cfg.val_size = std::stoi(get("count.val"));
  cfg.test_size = std::stoi(get("count.test"));
  return cfg;
}

std::vector<LabeledScene> load_split(const fs::path& dir, Split split) {
  const auto manifest = read_manifest(dir);
  const SceneConfig cfg = config_from_manifest(manifest);
  const fs::path root = dir / to_string(split);
  std::vector<LabeledScene> scenes(cfg.split_size(split));
  parallel_for(scenes.size(), [&](std::size_t i) {
    const std::string stem = pad5(static_cast<int>(i));
    LabeledScene s;
    s.image = read_ppm(root / "images" / (stem + ".ppm"));
    int h = 0, w = 0;
    s.labels.values = read_pgm(root / "labels" / (stem + ".pgm"), h, w);
    s.labels.height = h;
    s.labels.width = w;
    s.anomaly.values = read_pgm(root / "anomaly" / (stem + ".pgm"), h, w);
    s.anomaly.height = h;
    s.anomaly.width = w;
    if (h != s.image.dim(1) || w != s.image.dim(2)) throw DataError("mask/image size mismatch for " + stem);
    scenes[i] = std::move(s);
  });
  return scenes;
}

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.config = config_from_manifest(read_manifest(dir));
  ds.train = load_split(dir, Split::kTrain);
  ds.val = load_split(dir, Split::kVal);
  ds.test = load_split(dir, Split::kTest);
  return ds;
}

Tensor stack_images(std::span<const LabeledScene> scenes, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ShapeError("empty batch");
  const Tensor& first = scenes[indices[0]].image;
  Tensor batch({static_cast<int>(indices.size()), first.dim(0), first.dim(1), first.dim(2)});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tensor& img = scenes[indices[b]].image;
    if (!img.same_shape(first)) throw ShapeError("images in a batch differ in size");
    std::copy(img.values().begin(), img.values().end(), batch.sample(static_cast<int>(b)));
  }
  return batch;
}

}  // namespace moose
