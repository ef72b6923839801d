#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "moose/nn.hpp"
#include "moose/tensor.hpp"

namespace moose {

struct PyramidConfig {
  int num_classes = 7;
  int encoder_channels = 64;
  // Context sizes of the pyramid branches, one probe per entry.
  std::vector<int> branch_dilations{1, 4, 8, 12};
  int branch_channels = 32;
  bool include_global_pool_branch = true;
  int output_stride = 8;
  // Allows every branch to share one dilation (single-dilation ablation).
  bool shared_dilation = false;
  // Global head: 1x1 projection width and number of 3x3 blocks.
  int head_projection_channels = 64;
  int head_depth = 1;

  int num_branches() const { return static_cast<int>(branch_dilations.size()); }
  int global_head_input_channels() const {
    return branch_channels * (num_branches() + (include_global_pool_branch ? 1 : 0));
  }
  int probe_input_channels() const {
    return branch_channels * (include_global_pool_branch ? 2 : 1);
  }
};

struct ProbeConfig {
  int depth = 1;
  int projection_channels = 32;
};

// Throws ConfigError describing the first violated constraint.
void validate(const PyramidConfig& cfg);
void validate(const ProbeConfig& cfg);

// Image-level global average pool -> 1x1 conv (bias) -> ReLU, broadcast back.
struct PoolBranch {
  nn::Conv2d conv;
};

// Logits from several heads, dims [heads, classes, H, W]. For a PyramidModel
// the head order is [global, probe_1, ..., probe_K].
class LogitStack {
 public:
  LogitStack() = default;
  explicit LogitStack(Tensor logits);
  LogitStack(int heads, int classes, int height, int width)
      : LogitStack(Tensor({heads, classes, height, width})) {}

  int num_heads() const { return logits_.dim(0); }
  int num_classes() const { return logits_.dim(1); }
  int height() const { return logits_.dim(2); }
  int width() const { return logits_.dim(3); }
  std::size_t pixels() const { return static_cast<std::size_t>(height()) * width(); }

  float& at(int head, int cls, int y, int x) { return logits_.at(head, cls, y, x); }
  float at(int head, int cls, int y, int x) const { return logits_.at(head, cls, y, x); }
  // Plane of one (head, class) pair, row-major [H, W].
  const float* plane(int head, int cls) const {
    return logits_.data() + (static_cast<std::size_t>(head) * num_classes() + cls) * pixels();
  }
  float* plane(int head, int cls) {
    return logits_.data() + (static_cast<std::size_t>(head) * num_classes() + cls) * pixels();
  }

  const Tensor& tensor() const { return logits_; }
  Tensor& tensor() { return logits_; }
  // Single head as [classes, H, W].
  Tensor head(int index) const;
  bool all_finite() const;

 private:
  Tensor logits_;
};

struct PyramidModel {
  PyramidConfig pyramid;
  ProbeConfig probe;
  std::vector<nn::ConvBlock> encoder;
  std::vector<nn::ConvBlock> branches;
  std::optional<PoolBranch> pool;
  nn::Head global_head;
  std::vector<nn::Head> probes;
  // Parameter groups excluded from optimisation ("encoder", "pyramid",
  // "global_head", "probe<k>").
  std::map<std::string, bool> frozen;

  int num_branches() const { return static_cast<int>(branches.size()); }
  int num_heads() const { return 1 + static_cast<int>(probes.size()); }
  bool is_frozen(const std::string& group) const;

  // Visits every parameter and buffer. f(name, tensor, param-or-null).
  template <class Self, class F>
  static void visit(Self& self, F&& f) {
    for (std::size_t i = 0; i < self.encoder.size(); ++i) {
      nn::ConvBlock::visit(self.encoder[i], "encoder.block" + std::to_string(i), f);
    }
    for (std::size_t i = 0; i < self.branches.size(); ++i) {
      nn::ConvBlock::visit(self.branches[i], "pyramid.branch" + std::to_string(i), f);
    }
    if (self.pool) nn::Conv2d::visit(self.pool->conv, "pyramid.pool", f);
    nn::Head::visit(self.global_head, "global_head", f);
    for (std::size_t i = 0; i < self.probes.size(); ++i) {
      nn::Head::visit(self.probes[i], "probe" + std::to_string(i), f);
    }
  }
};

// Group name of a visited tensor ("encoder", "pyramid", "global_head", "probe<k>").
std::string parameter_group(const std::string& tensor_name);

PyramidModel build_model(const PyramidConfig& pcfg, const ProbeConfig& hcfg, std::uint64_t seed);

// Fresh probe heads for `model` (replacing any existing ones).
void reset_probes(PyramidModel& model, std::uint64_t seed);

std::size_t parameter_count(const PyramidModel& model);
std::size_t parameter_count(const PyramidModel& model, const std::string& group);
std::size_t parameter_count(const nn::Head& head);

// Digest over all tensors (parameters and normalization statistics) of a group.
std::uint64_t group_digest(const PyramidModel& model, const std::string& group);

// Frozen-trunk features at 1/output_stride resolution.
struct PyramidFeatures {
  std::vector<Tensor> branches;  // each [B, branch_channels, h, w]
  Tensor pooled;                 // [B, branch_channels, h, w] or empty
};

Tensor encoder_forward_eval(const PyramidModel& model, const Tensor& images);
PyramidFeatures pyramid_forward_eval(const PyramidModel& model, const Tensor& encoded);
PyramidFeatures extract_features(const PyramidModel& model, const Tensor& images);
Tensor global_head_input(const PyramidFeatures& features);
Tensor probe_input(const PyramidFeatures& features, int branch);

// Batched inference. Returns logits upsampled to the input size, one tensor
// per head in stack order, each [B, N, H, W].
std::vector<Tensor> forward_heads(const PyramidModel& model, const Tensor& images);

// images: [3, H, W] -> [K + 1, N, H, W]
LogitStack forward_all(const PyramidModel& model, const Tensor& image);
// images: [3, H, W] -> [N, H, W]
Tensor forward_global(const PyramidModel& model, const Tensor& image);

// Validates an image batch [B, 3, H, W] (or a single [3, H, W] image) against
// the model's output stride; returns the batched view.
Tensor as_batch(const PyramidModel& model, const Tensor& images);

// Train-mode trunk pass (encoder + pyramid + global head) used by
// full-model training.
struct TrunkCache {
  std::vector<nn::ConvBlockCache> encoder;
  std::vector<nn::ConvBlockCache> branches;
  Tensor encoded;
  Tensor pool_mean;    // [B, C, 1, 1]
  Tensor pool_output;  // [B, bc, 1, 1] after ReLU
  nn::HeadCache head;
};

// Returns global-head logits at feature resolution.
Tensor trunk_forward_train(PyramidModel& model, const Tensor& images, TrunkCache& cache);
void trunk_backward(PyramidModel& model, const TrunkCache& cache, const Tensor& dlogits);

// Gradient of the summed branch-k activations at feature cell (fy, fx) with
// respect to the input image (eval mode). Used to measure receptive fields.
Tensor branch_input_gradient(const PyramidModel& model, const Tensor& image, int branch, int fy,
                             int fx);

}  // namespace moose
