#pragma once

// Procedural scenes where some object classes are decidable only from the
// surrounding background band, plus held-out anomalies for test scenes.
//
// Class ids: backgrounds [0, B), foregrounds [B, B + F). The last 2P
// foreground classes form P context pairs; both members of a pair share one
// texture and shape distribution and differ only by the band they sit in.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "moose/tensor.hpp"

namespace moose {

inline constexpr std::uint8_t kIgnoreIndex = 255;

struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // [0, N) or kIgnoreIndex
};

struct AnomalyMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;     // 1 = anomalous
  std::vector<std::uint8_t> void_mask;  // optional; 1 = excluded from evaluation
};

struct LabeledScene {
  Tensor image;  // [3, H, W], values in [0, 1]
  LabelMask labels;
  AnomalyMask anomaly;
};

enum class Split { kTrain, kVal, kTest };
std::string to_string(Split split);
Split parse_split(const std::string& text);

struct SceneConfig {
  int image_size = 128;
  int num_background_classes = 3;
  int num_foreground_classes = 4;
  int context_pair_count = 1;
  int min_objects = 4;
  int max_objects = 7;
  int min_object_size = 10;
  int max_object_size = 28;
  int min_anomalies = 1;
  int max_anomalies = 2;
  int min_anomaly_size = 8;
  int max_anomaly_size = 48;
  double noise_floor = 0.03;
  // Probability that a foreground class outside the context pairs is placed
  // in its home band rather than a uniformly chosen one.
  double context_affinity = 0.0;
  // Per-pixel, per-channel uniform jitter of foreground colours, +-grain.
  double object_grain = 0.0;
  int train_size = 300;
  int val_size = 60;
  int test_size = 60;
  std::uint64_t seed = 1;

  int num_classes() const { return num_background_classes + num_foreground_classes; }
  int first_pair_class() const {
    return num_background_classes + num_foreground_classes - 2 * context_pair_count;
  }
  int split_size(Split s) const;
};

void validate(const SceneConfig& cfg);

// Foreground class ids.
std::vector<int> foreground_classes(const SceneConfig& cfg);
// Background class hosting context-pair member `cls`, or -1 for other classes.
int host_band_class(const SceneConfig& cfg, int cls);
// Preferred background class of a foreground class outside the pairs, or -1.
int home_band_class(const SceneConfig& cfg, int cls);

enum class Shape { kDisk, kBar, kCross, kTriangle, kRing };

struct PlacedObject {
  int cls = 0;  // class id, or kIgnoreIndex for anomalies
  Shape shape = Shape::kDisk;
  int center_y = 0, center_x = 0, size = 0;
  int band_class = 0;  // background class under the object's centre
};

// Generation record exposing the latent structure of a scene.
struct SceneLayout {
  std::vector<int> row_band_class;  // background class of every image row
  std::vector<PlacedObject> objects;
  std::vector<PlacedObject> anomalies;
};

// Deterministic in (cfg.seed, index, split). Anomalies only for kTest.
LabeledScene generate_scene(const SceneConfig& cfg, int index, Split split,
                            SceneLayout* layout = nullptr);

// Replaces the pixels of `classes` with (1 - level) * x + level * U(0, 1),
// independently per channel; every other pixel and all labels are untouched.
LabeledScene corrupt_foreground(const LabeledScene& scene, std::span<const int> classes,
                                double noise_level, int num_classes, std::uint64_t seed);

struct Dataset {
  SceneConfig config;
  std::vector<LabeledScene> train, val, test;

  const std::vector<LabeledScene>& split(Split s) const;
};

// In-memory generation of every split.
Dataset generate_dataset(const SceneConfig& cfg);

// Writes `<dir>/<split>/{images,labels,anomaly}/NNNNN.(ppm|pgm)` and
// `<dir>/manifest.txt`.
void generate_split(const SceneConfig& cfg, const std::filesystem::path& dir);

std::map<std::string, std::string> read_manifest(const std::filesystem::path& dir);
SceneConfig config_from_manifest(const std::map<std::string, std::string>& manifest);
std::vector<LabeledScene> load_split(const std::filesystem::path& dir, Split split);
Dataset load_dataset(const std::filesystem::path& dir);

// 8-bit binary netpbm I/O. Images are quantised to k/255.
void write_ppm(const std::filesystem::path& path, const Tensor& image);
Tensor read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, int height, int width,
               std::span<const std::uint8_t> values);
std::vector<std::uint8_t> read_pgm(const std::filesystem::path& path, int& height, int& width);

// Stacks images of the given scenes into [B, 3, H, W].
Tensor stack_images(std::span<const LabeledScene> scenes, std::span<const std::size_t> indices);

}  // namespace moose
