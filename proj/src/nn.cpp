#include "moose/nn.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace moose::nn {
namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMajor>;
using ConstMatMap = Eigen::Map<const RowMajor>;

void require_rank4(const Tensor& x, const char* what) {
  if (x.rank() != 4) throw ShapeError(std::string(what) + ": expected 4-d tensor, got " + x.shape_string());
}

bool is_pointwise(const Conv2d& conv) { return conv.kernel == 1 && conv.stride == 1; }

// x: one sample [C, H, W] -> col [C*k*k, OH*OW]
void im2col(const Conv2d& conv, const float* x, int h, int w, int oh, int ow, float* col) {
  const int k = conv.kernel, s = conv.stride, d = conv.dilation, pad = conv.padding();
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < conv.in_channels; ++c) {
    const float* xc = x + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * out_plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - pad + ky * d;
          float* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0f);
            continue;
          }
          const float* src = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - pad + kx * d;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const Conv2d& conv, const float* col, int h, int w, int oh, int ow, float* dx) {
  const int k = conv.kernel, s = conv.stride, d = conv.dilation, pad = conv.padding();
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < conv.in_channels; ++c) {
    float* xc = dx + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * out_plane;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - pad + ky * d;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + static_cast<std::size_t>(oy) * ow;
          float* dst = xc + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - pad + kx * d;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Conv2d make_conv(int in, int out, int kernel, int stride, int dilation, bool bias, Rng& rng) {
  if (in <= 0 || out <= 0 || kernel <= 0 || kernel % 2 == 0 || stride <= 0 || dilation <= 0) {
    throw ConfigError("invalid convolution geometry");
  }
  Conv2d conv;
  conv.in_channels = in;
  conv.out_channels = out;
  conv.kernel = kernel;
  conv.stride = stride;
  conv.dilation = dilation;
  conv.has_bias = bias;
  conv.weight = Param({out, in * kernel * kernel});
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  const double std_dev = std::sqrt(2.0 / fan_in);
  for (float& v : conv.weight.value.values()) v = static_cast<float>(rng.normal() * std_dev);
  if (bias) conv.bias = Param({out});
  return conv;
}

Tensor conv_forward(const Conv2d& conv, const Tensor& x) {
  require_rank4(x, "conv_forward");
  if (x.dim(1) != conv.in_channels) {
    throw ShapeError("conv_forward: expected " + std::to_string(conv.in_channels) +
                     " input channels, got " + x.shape_string());
  }
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = conv.output_extent(h), ow = conv.output_extent(w);
  const int ck = conv.in_channels * conv.kernel * conv.kernel;
  const int p = oh * ow;
  Tensor y({n, conv.out_channels, oh, ow});
  std::vector<float> col;
  if (!is_pointwise(conv)) col.resize(static_cast<std::size_t>(ck) * p);
  ConstMatMap wmat(conv.weight.value.data(), conv.out_channels, ck);
  for (int b = 0; b < n; ++b) {
    const float* src = x.sample(b);
    if (!is_pointwise(conv)) {
      im2col(conv, src, h, w, oh, ow, col.data());
      src = col.data();
    }
    MatMap out(y.sample(b), conv.out_channels, p);
    out.noalias() = wmat * ConstMatMap(src, ck, p);
    if (conv.has_bias) {
      for (int o = 0; o < conv.out_channels; ++o) out.row(o).array() += conv.bias.value[o];
    }
  }
  return y;
}

Tensor conv_backward(Conv2d& conv, const Tensor& x, const Tensor& dy, bool want_input_grad) {
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const int oh = dy.dim(2), ow = dy.dim(3);
  const int ck = conv.in_channels * conv.kernel * conv.kernel;
  const int p = oh * ow;
  if (dy.dim(0) != n || dy.dim(1) != conv.out_channels || oh != conv.output_extent(h) ||
      ow != conv.output_extent(w)) {
    throw ShapeError("conv_backward: gradient shape " + dy.shape_string());
  }
  Tensor dx;
  if (want_input_grad) dx = Tensor({n, conv.in_channels, h, w});
  std::vector<float> col, dcol;
  if (!is_pointwise(conv)) {
    col.resize(static_cast<std::size_t>(ck) * p);
    if (want_input_grad) dcol.resize(col.size());
  }
  MatMap dw(conv.weight.grad.data(), conv.out_channels, ck);
  ConstMatMap wmat(conv.weight.value.data(), conv.out_channels, ck);
  for (int b = 0; b < n; ++b) {
    ConstMatMap g(dy.sample(b), conv.out_channels, p);
    const float* src = x.sample(b);
    if (!is_pointwise(conv)) {
      im2col(conv, src, h, w, oh, ow, col.data());
      src = col.data();
    }
    dw.noalias() += g * ConstMatMap(src, ck, p).transpose();
    if (conv.has_bias) {
      for (int o = 0; o < conv.out_channels; ++o) conv.bias.grad[o] += g.row(o).sum();
    }
    if (want_input_grad) {
      if (is_pointwise(conv)) {
        MatMap(dx.sample(b), ck, p).noalias() = wmat.transpose() * g;
      } else {
        MatMap(dcol.data(), ck, p).noalias() = wmat.transpose() * g;
        col2im(conv, dcol.data(), h, w, oh, ow, dx.sample(b));
      }
    }
  }
  return dx;
}

BatchNorm2d make_batchnorm(int channels) {
  BatchNorm2d bn;
  bn.channels = channels;
  bn.gamma = Param({channels});
  bn.gamma.value.fill(1.0f);
  bn.beta = Param({channels});
  bn.running_mean = Tensor({channels});
  bn.running_var = Tensor({channels}, 1.0f);
  return bn;
}

Tensor bn_forward_eval(const BatchNorm2d& bn, const Tensor& x) {
  require_rank4(x, "bn_forward_eval");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor y(x.dims());
  for (int ch = 0; ch < c; ++ch) {
    const float scale = bn.gamma.value[ch] / std::sqrt(bn.running_var[ch] + bn.eps);
    const float shift = bn.beta.value[ch] - bn.running_mean[ch] * scale;
    for (int b = 0; b < n; ++b) {
      const float* src = x.sample(b) + ch * plane;
      float* dst = y.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * scale + shift;
    }
  }
  return y;
}

Tensor bn_forward_train(BatchNorm2d& bn, const Tensor& x, BnCache& cache) {
  require_rank4(x, "bn_forward_train");
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double count = static_cast<double>(n) * plane;
  Tensor y(x.dims());
  cache.xhat = Tensor(x.dims());
  cache.inv_std.assign(c, 0.0f);
  for (int ch = 0; ch < c; ++ch) {
    double sum = 0.0;
    for (int b = 0; b < n; ++b) {
      const float* src = x.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) sum += src[i];
    }
    const double mean = sum / count;
    double sq = 0.0;
    for (int b = 0; b < n; ++b) {
      const float* src = x.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double dv = src[i] - mean;
        sq += dv * dv;
      }
    }
    const double var = sq / count;
    const float inv_std = static_cast<float>(1.0 / std::sqrt(var + bn.eps));
    cache.inv_std[ch] = inv_std;
    const float g = bn.gamma.value[ch], be = bn.beta.value[ch];
    const float m = static_cast<float>(mean);
    for (int b = 0; b < n; ++b) {
      const float* src = x.sample(b) + ch * plane;
      float* xh = cache.xhat.sample(b) + ch * plane;
      float* dst = y.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (src[i] - m) * inv_std;
        dst[i] = g * xh[i] + be;
      }
    }
    const double unbiased = count > 1 ? sq / (count - 1) : var;
    bn.running_mean[ch] = (1.0f - bn.momentum) * bn.running_mean[ch] + bn.momentum * m;
    bn.running_var[ch] =
        (1.0f - bn.momentum) * bn.running_var[ch] + bn.momentum * static_cast<float>(unbiased);
  }
  return y;
}

Tensor bn_backward(BatchNorm2d& bn, const BnCache& cache, const Tensor& dy) {
  const int n = dy.dim(0), c = dy.dim(1);
  const std::size_t plane = static_cast<std::size_t>(dy.dim(2)) * dy.dim(3);
  const double count = static_cast<double>(n) * plane;
  Tensor dx(dy.dims());
  for (int ch = 0; ch < c; ++ch) {
    double dgamma = 0.0, dbeta = 0.0;
    for (int b = 0; b < n; ++b) {
      const float* g = dy.sample(b) + ch * plane;
      const float* xh = cache.xhat.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dgamma += static_cast<double>(g[i]) * xh[i];
        dbeta += g[i];
      }
    }
    bn.gamma.grad[ch] += static_cast<float>(dgamma);
    bn.beta.grad[ch] += static_cast<float>(dbeta);
    const float k = bn.gamma.value[ch] * cache.inv_std[ch];
    const float mean_dy = static_cast<float>(dbeta / count);
    const float mean_dyx = static_cast<float>(dgamma / count);
    for (int b = 0; b < n; ++b) {
      const float* g = dy.sample(b) + ch * plane;
      const float* xh = cache.xhat.sample(b) + ch * plane;
      float* dst = dx.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = k * (g[i] - mean_dy - xh[i] * mean_dyx);
    }
  }
  return dx;
}

void relu_inplace(Tensor& x) {
  for (float& v : x.values()) v = v > 0.0f ? v : 0.0f;
}

void relu_backward_inplace(Tensor& dy, const Tensor& y) {
  float* g = dy.data();
  const float* out = y.data();
  for (std::size_t i = 0; i < dy.size(); ++i) {
    if (!(out[i] > 0.0f)) g[i] = 0.0f;
  }
}

ConvBlock make_block(int in, int out, int kernel, int stride, int dilation, Rng& rng) {
  return ConvBlock{make_conv(in, out, kernel, stride, dilation, false, rng), make_batchnorm(out)};
}

Tensor block_forward_eval(const ConvBlock& block, const Tensor& x) {
  Tensor y = bn_forward_eval(block.bn, conv_forward(block.conv, x));
  relu_inplace(y);
  return y;
}

Tensor block_forward_train(ConvBlock& block, const Tensor& x, ConvBlockCache& cache) {
  cache.input = x;
  Tensor y = bn_forward_train(block.bn, conv_forward(block.conv, x), cache.bn);
  relu_inplace(y);
  cache.output = y;
  return y;
}

Tensor block_backward(ConvBlock& block, const ConvBlockCache& cache, const Tensor& dy,
                      bool want_input_grad) {
  Tensor g = dy;
  relu_backward_inplace(g, cache.output);
  Tensor dconv = bn_backward(block.bn, cache.bn, g);
  return conv_backward(block.conv, cache.input, dconv, want_input_grad);
}

std::size_t Head::parameter_count() const {
  std::size_t n = projection.parameter_count() + classifier.parameter_count();
  for (const auto& b : blocks) n += b.parameter_count();
  return n;
}

Head make_head(int in_channels, int projection_channels, int depth, int num_classes, Rng& rng) {
  if (depth < 1) throw ConfigError("head depth must be >= 1");
  Head head;
  head.projection = make_block(in_channels, projection_channels, 1, 1, 1, rng);
  for (int i = 0; i < depth; ++i) {
    head.blocks.push_back(make_block(projection_channels, projection_channels, 3, 1, 1, rng));
  }
  head.classifier = make_conv(projection_channels, num_classes, 1, 1, 1, true, rng);
  return head;
}

Tensor head_forward_eval(const Head& head, const Tensor& x) {
  Tensor y = block_forward_eval(head.projection, x);
  for (const auto& b : head.blocks) y = block_forward_eval(b, y);
  return conv_forward(head.classifier, y);
}

Tensor head_forward_train(Head& head, const Tensor& x, HeadCache& cache) {
  Tensor y = block_forward_train(head.projection, x, cache.projection);
  cache.blocks.resize(head.blocks.size());
  for (std::size_t i = 0; i < head.blocks.size(); ++i) {
    y = block_forward_train(head.blocks[i], y, cache.blocks[i]);
  }
  cache.classifier_input = y;
  return conv_forward(head.classifier, y);
}

Tensor head_backward(Head& head, const HeadCache& cache, const Tensor& dlogits,
                     bool want_input_grad) {
  Tensor g = conv_backward(head.classifier, cache.classifier_input, dlogits, true);
  for (std::size_t i = head.blocks.size(); i-- > 0;) {
    g = block_backward(head.blocks[i], cache.blocks[i], g, true);
  }
  return block_backward(head.projection, cache.projection, g, want_input_grad);
}

namespace {

struct AxisTable {
  std::vector<int> lo, hi;
  std::vector<float> frac;
};

AxisTable axis_table(int in, int out) {
  AxisTable t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(src);
    if (i0 > in - 1) i0 = in - 1;
    t.lo[o] = i0;
    t.hi[o] = i0 < in - 1 ? i0 + 1 : i0;
    t.frac[o] = static_cast<float>(src - i0);
  }
  return t;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  require_rank4(x, "upsample_bilinear");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const AxisTable ty = axis_table(h, out_h), tx = axis_table(w, out_w);
  Tensor y({n, c, out_h, out_w});
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const float* src = x.sample(b) + static_cast<std::size_t>(ch) * h * w;
      float* dst = y.sample(b) + static_cast<std::size_t>(ch) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const float* r0 = src + static_cast<std::size_t>(ty.lo[oy]) * w;
        const float* r1 = src + static_cast<std::size_t>(ty.hi[oy]) * w;
        const float fy = ty.frac[oy];
        float* drow = dst + static_cast<std::size_t>(oy) * out_w;
        for (int ox = 0; ox < out_w; ++ox) {
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          const float fx = tx.frac[ox];
          const float top = r0[x0] + fx * (r0[x1] - r0[x0]);
          const float bot = r1[x0] + fx * (r1[x1] - r1[x0]);
          drow[ox] = top + fy * (bot - top);
        }
      }
    }
  }
  return y;
}

Tensor upsample_bilinear_backward(const Tensor& dy, int in_h, int in_w) {
  const int n = dy.dim(0), c = dy.dim(1), out_h = dy.dim(2), out_w = dy.dim(3);
  const AxisTable ty = axis_table(in_h, out_h), tx = axis_table(in_w, out_w);
  Tensor dx({n, c, in_h, in_w});
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const float* src = dy.sample(b) + static_cast<std::size_t>(ch) * out_h * out_w;
      float* dst = dx.sample(b) + static_cast<std::size_t>(ch) * in_h * in_w;
      for (int oy = 0; oy < out_h; ++oy) {
        float* r0 = dst + static_cast<std::size_t>(ty.lo[oy]) * in_w;
        float* r1 = dst + static_cast<std::size_t>(ty.hi[oy]) * in_w;
        const float fy = ty.frac[oy];
        const float* grow = src + static_cast<std::size_t>(oy) * out_w;
        for (int ox = 0; ox < out_w; ++ox) {
          const int x0 = tx.lo[ox], x1 = tx.hi[ox];
          const float fx = tx.frac[ox];
          const float g = grow[ox];
          r0[x0] += g * (1.0f - fy) * (1.0f - fx);
          r0[x1] += g * (1.0f - fy) * fx;
          r1[x0] += g * fy * (1.0f - fx);
          r1[x1] += g * fy * fx;
        }
      }
    }
  }
  return dx;
}

void sgd_step(Param& p, const SgdConfig& cfg) {
  float* v = p.value.data();
  float* g = p.grad.data();
  float* m = p.velocity.data();
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const float grad = g[i] + cfg.weight_decay * v[i];
    m[i] = cfg.momentum * m[i] + grad;
    v[i] -= cfg.learning_rate * m[i];
    g[i] = 0.0f;
  }
}

void zero_grad(Param& p) { p.grad.fill(0.0f); }

}  // namespace moose::nn
