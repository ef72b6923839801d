#pragma once

// Minimal convolutional building blocks with hand-written backward passes.
// Forward functions taking `const` layers are pure; `_train` variants mutate
// normalization running statistics and fill a cache consumed by `backward`.

#include <string>
#include <vector>

#include "moose/rng.hpp"
#include "moose/tensor.hpp"

namespace moose::nn {

// Trainable tensor with its gradient accumulator and momentum buffer.
struct Param {
  Tensor value;
  Tensor grad;
  Tensor velocity;

  Param() = default;
  explicit Param(std::vector<int> dims) : value(dims), grad(dims), velocity(dims) {}
};

struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int dilation = 1;
  bool has_bias = false;
  Param weight;  // [out, in * k * k]
  Param bias;    // [out], empty when !has_bias

  int padding() const { return dilation * (kernel - 1) / 2; }
  int output_extent(int in) const {
    return (in + 2 * padding() - dilation * (kernel - 1) - 1) / stride + 1;
  }
  std::size_t parameter_count() const { return weight.value.size() + bias.value.size(); }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".weight", self.weight.value, &self.weight);
    if (self.has_bias) f(prefix + ".bias", self.bias.value, &self.bias);
  }
};

// He-normal initialised weights, zero bias.
Conv2d make_conv(int in, int out, int kernel, int stride, int dilation, bool bias, Rng& rng);
Tensor conv_forward(const Conv2d& conv, const Tensor& x);
// Accumulates weight/bias gradients. Returns dL/dx, or an empty tensor when
// `want_input_grad` is false.
Tensor conv_backward(Conv2d& conv, const Tensor& x, const Tensor& dy, bool want_input_grad);

struct BatchNorm2d {
  int channels = 0;
  float momentum = 0.1f;
  float eps = 1e-5f;
  Param gamma;
  Param beta;
  Tensor running_mean;
  Tensor running_var;

  std::size_t parameter_count() const { return gamma.value.size() + beta.value.size(); }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    f(prefix + ".gamma", self.gamma.value, &self.gamma);
    f(prefix + ".beta", self.beta.value, &self.beta);
    f(prefix + ".running_mean", self.running_mean, static_cast<decltype(&self.gamma)>(nullptr));
    f(prefix + ".running_var", self.running_var, static_cast<decltype(&self.gamma)>(nullptr));
  }
};

struct BnCache {
  Tensor xhat;
  std::vector<float> inv_std;
};

BatchNorm2d make_batchnorm(int channels);
Tensor bn_forward_eval(const BatchNorm2d& bn, const Tensor& x);
Tensor bn_forward_train(BatchNorm2d& bn, const Tensor& x, BnCache& cache);
Tensor bn_backward(BatchNorm2d& bn, const BnCache& cache, const Tensor& dy);

void relu_inplace(Tensor& x);
// dy *= (y > 0)
void relu_backward_inplace(Tensor& dy, const Tensor& y);

// conv (no bias) -> batch norm -> ReLU
struct ConvBlock {
  Conv2d conv;
  BatchNorm2d bn;

  std::size_t parameter_count() const { return conv.parameter_count() + bn.parameter_count(); }

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    Conv2d::visit(self.conv, prefix + ".conv", f);
    BatchNorm2d::visit(self.bn, prefix + ".bn", f);
  }
};

struct ConvBlockCache {
  Tensor input;
  BnCache bn;
  Tensor output;
};

ConvBlock make_block(int in, int out, int kernel, int stride, int dilation, Rng& rng);
Tensor block_forward_eval(const ConvBlock& block, const Tensor& x);
Tensor block_forward_train(ConvBlock& block, const Tensor& x, ConvBlockCache& cache);
Tensor block_backward(ConvBlock& block, const ConvBlockCache& cache, const Tensor& dy,
                      bool want_input_grad);

// Segmentation head: 1x1 projection block, `depth` 3x3 prediction blocks and a
// 1x1 classifier with bias.
struct Head {
  ConvBlock projection;
  std::vector<ConvBlock> blocks;
  Conv2d classifier;

  int in_channels() const { return projection.conv.in_channels; }
  int num_classes() const { return classifier.out_channels; }
  std::size_t parameter_count() const;

  template <class Self, class F>
  static void visit(Self& self, const std::string& prefix, F&& f) {
    ConvBlock::visit(self.projection, prefix + ".projection", f);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      ConvBlock::visit(self.blocks[i], prefix + ".block" + std::to_string(i), f);
    }
    Conv2d::visit(self.classifier, prefix + ".classifier", f);
  }
};

struct HeadCache {
  ConvBlockCache projection;
  std::vector<ConvBlockCache> blocks;
  Tensor classifier_input;
};

Head make_head(int in_channels, int projection_channels, int depth, int num_classes, Rng& rng);
Tensor head_forward_eval(const Head& head, const Tensor& x);
Tensor head_forward_train(Head& head, const Tensor& x, HeadCache& cache);
Tensor head_backward(Head& head, const HeadCache& cache, const Tensor& dlogits,
                     bool want_input_grad);

// Bilinear resize with half-pixel centres (align_corners = false).
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);
Tensor upsample_bilinear_backward(const Tensor& dy, int in_h, int in_w);

// SGD with momentum on every visited Param. Clears gradients afterwards.
struct SgdConfig {
  float learning_rate = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
};

void sgd_step(Param& p, const SgdConfig& cfg);
void zero_grad(Param& p);

}  // namespace moose::nn
