#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "moose/model.hpp"
#include "moose/synthetic.hpp"

namespace moose {

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 80;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int batch_size = 8;
  int ignore_index = kIgnoreIndex;
  std::uint64_t seed = 0;
  bool early_stop_on_miou_plateau = true;
  // Plateau: no gain >= min_delta in mean val mIoU for `patience` epochs.
  double plateau_min_delta = 0.002;
  int plateau_patience = 10;
  // Random horizontal flips of training scenes.
  bool horizontal_flip = true;
};

void validate(const TrainConfig& cfg, int num_classes);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  // Validation mIoU keyed by stack head index (0 = global).
  std::vector<std::pair<int, double>> miou;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  bool stopped_early = false;
};

// `epoch=<i> loss=<f> miou_head_<k>=<f> ...` per line.
void write_train_log(std::ostream& os, const TrainLog& log);
TrainLog read_train_log(std::istream& is);

struct LossResult {
  double loss = 0.0;
  bool all_ignored = false;  // every pixel carried ignore_index; loss reported as 0
};

// Sum over the contextual heads (stack slices 1..K) of the mean per-pixel
// cross-entropy; the global slice contributes nothing. When `grad` is given it
// receives dLoss/dlogits with the stack's shape (zero on slice 0).
LossResult multi_head_ce_loss(const LogitStack& stack, const LabelMask& labels,
                              int ignore_index = kIgnoreIndex, LogitStack* grad = nullptr);

// Contextual-head CE on the inlier stack plus, per head, `weight` times the
// mean KL(uniform || softmax) over the outlier pixels of the outlier stack.
LossResult outlier_exposure_loss(const LogitStack& inlier, const LabelMask& inlier_labels,
                                 const LogitStack& outlier, const AnomalyMask& outlier_mask,
                                 double weight, int ignore_index = kIgnoreIndex);

// Trains encoder, pyramid and global head end to end on the global-head loss.
// Probe heads are left untouched.
TrainLog train_base_model(PyramidModel& model, std::span<const LabeledScene> train,
                          std::span<const LabeledScene> val, const TrainConfig& cfg);

// Trains only the probe heads on frozen trunk features. Encoder, pyramid,
// global head and every normalization statistic outside the probes stay
// bit-identical.
TrainLog train_probes(PyramidModel& model, std::span<const LabeledScene> train,
                      std::span<const LabeledScene> val, const TrainConfig& cfg);

// One SGD step on the probe heads with the outlier-exposure objective.
// Returns the loss evaluated before the update.
double outlier_exposure_step(PyramidModel& model, std::span<const LabeledScene> inlier_batch,
                             std::span<const LabeledScene> outlier_batch, double weight,
                             const TrainConfig& cfg);

// Per-head validation mIoU of a model (stack order), eval mode.
std::vector<double> validation_miou(const PyramidModel& model, std::span<const LabeledScene> val,
                                    int ignore_index = kIgnoreIndex);

// Lower-level pieces reused by ensemble training.

// Mean CE over non-ignored pixels of logits [B, N, H, W]; writes the gradient
// (already divided by the valid-pixel count) into `grad` when non-null.
double cross_entropy(const Tensor& logits, std::span<const std::uint8_t* const> labels,
                     int ignore_index, Tensor* grad, std::size_t* valid_pixels = nullptr);

// Frozen-trunk features for every scene, one PyramidFeatures (batch 1) each.
std::vector<PyramidFeatures> cache_features(const PyramidModel& model,
                                            std::span<const LabeledScene> scenes);

// Concatenates per-scene feature tensors into a batch.
Tensor batch_features(std::span<const Tensor* const> per_scene);

// Trains a free-standing head on cached inputs (one [1, C, h, w] tensor per
// scene) against full-resolution labels. Returns per-epoch loss.
struct HeadTrainingResult {
  std::vector<double> epoch_loss;
};
HeadTrainingResult train_head_on_features(nn::Head& head, std::span<const Tensor> inputs,
                                          std::span<const LabeledScene> scenes,
                                          std::span<const std::size_t> subset,
                                          const TrainConfig& cfg, int epochs);

}  // namespace moose
