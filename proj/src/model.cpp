#include "moose/model.hpp"

#include <cmath>
#include <cstring>
#include <set>

#include "moose/rng.hpp"

namespace moose {
namespace {

constexpr int kInputChannels = 3;
constexpr int kEncoderBlocks = 4;

enum Stream : std::uint64_t { kEncoderStream = 1, kPyramidStream = 2, kGlobalStream = 3, kProbeStream = 100 };

int log2_exact(int v) {
  int r = 0;
  while ((1 << r) < v) ++r;
  return (1 << r) == v ? r : -1;
}

Tensor broadcast_pool(const Tensor& pooled, int h, int w) {
  const int n = pooled.dim(0), c = pooled.dim(1);
  Tensor out({n, c, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const float v = pooled.at(b, ch, 0, 0);
      float* dst = out.sample(b) + ch * plane;
      std::fill(dst, dst + plane, v);
    }
  }
  return out;
}

Tensor spatial_mean(const Tensor& x) {
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out({n, c, 1, 1});
  for (int b = 0; b < n; ++b) {
    for (int ch = 0; ch < c; ++ch) {
      const float* src = x.sample(b) + ch * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += src[i];
      out.at(b, ch, 0, 0) = static_cast<float>(s / static_cast<double>(plane));
    }
  }
  return out;
}

Tensor pool_forward(const PoolBranch& pool, const Tensor& encoded) {
  Tensor y = nn::conv_forward(pool.conv, spatial_mean(encoded));
  nn::relu_inplace(y);
  return broadcast_pool(y, encoded.dim(2), encoded.dim(3));
}

std::vector<nn::Head> make_probes(const PyramidConfig& p, const ProbeConfig& h, std::uint64_t seed) {
  std::vector<nn::Head> probes;
  for (int k = 0; k < p.num_branches(); ++k) {
    Rng rng(seed, kProbeStream + static_cast<std::uint64_t>(k));
    probes.push_back(nn::make_head(p.probe_input_channels(), h.projection_channels, h.depth,
                                   p.num_classes, rng));
  }
  return probes;
}

// Eval-mode backward through a conv block given its recorded input/output.
Tensor block_backward_eval(nn::ConvBlock& block, const Tensor& input, const Tensor& output,
                           const Tensor& dy) {
  Tensor g = dy;
  nn::relu_backward_inplace(g, output);
  const std::size_t plane = static_cast<std::size_t>(g.dim(2)) * g.dim(3);
  for (int b = 0; b < g.dim(0); ++b) {
    for (int ch = 0; ch < g.dim(1); ++ch) {
      const float scale =
          block.bn.gamma.value[ch] / std::sqrt(block.bn.running_var[ch] + block.bn.eps);
      float* p = g.sample(b) + ch * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] *= scale;
    }
  }
  return nn::conv_backward(block.conv, input, g, true);
}

}  // namespace

void validate(const PyramidConfig& cfg) {
  if (cfg.num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (cfg.encoder_channels < 4 || cfg.encoder_channels % 4 != 0) {
    throw ConfigError("encoder_channels must be a positive multiple of 4");
  }
  if (cfg.branch_channels < 1) throw ConfigError("branch_channels must be >= 1");
  if (cfg.head_projection_channels < 1) throw ConfigError("head_projection_channels must be >= 1");
  if (cfg.head_depth < 1) throw ConfigError("head_depth must be >= 1");
  const int k = cfg.num_branches();
  if (k < 2) throw ConfigError("at least two pyramid branches are required");
  for (int i = 0; i < k; ++i) {
    const int d = cfg.branch_dilations[i];
    if (d < 1) throw ConfigError("branch dilation must be >= 1, got " + std::to_string(d));
    if (i == 0) continue;
    const int prev = cfg.branch_dilations[i - 1];
    if (cfg.shared_dilation) {
      if (d != prev) throw ConfigError("shared_dilation requires equal branch dilations");
    } else if (d <= prev) {
      throw ConfigError("branch dilations must be strictly increasing (duplicate or unordered " +
                        std::to_string(d) + ")");
    }
  }
  const int lg = log2_exact(cfg.output_stride);
  if (lg < 0 || lg > kEncoderBlocks) {
    throw ConfigError("output_stride must be a power of two <= 16");
  }
}

void validate(const ProbeConfig& cfg) {
  if (cfg.depth < 1) throw ConfigError("probe depth must be >= 1");
  if (cfg.projection_channels < 1) throw ConfigError("projection_channels must be >= 1");
}

LogitStack::LogitStack(Tensor logits) : logits_(std::move(logits)) {
  if (logits_.rank() != 4) throw ShapeError("LogitStack expects [heads, classes, H, W]");
}

Tensor LogitStack::head(int index) const {
  Tensor out({num_classes(), height(), width()});
  std::memcpy(out.data(), plane(index, 0), out.size() * sizeof(float));
  return out;
}

bool LogitStack::all_finite() const {
  for (float v : logits_.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool PyramidModel::is_frozen(const std::string& group) const {
  auto it = frozen.find(group);
  return it != frozen.end() && it->second;
}

std::string parameter_group(const std::string& tensor_name) {
  return tensor_name.substr(0, tensor_name.find('.'));
}

PyramidModel build_model(const PyramidConfig& pcfg, const ProbeConfig& hcfg, std::uint64_t seed) {
  validate(pcfg);
  validate(hcfg);
  PyramidModel model;
  model.pyramid = pcfg;
  model.probe = hcfg;

  Rng enc_rng(seed, kEncoderStream);
  const int c = pcfg.encoder_channels;
  const int widths[kEncoderBlocks] = {c / 4, c / 2, c, c};
  const int strided = log2_exact(pcfg.output_stride);
  int in = kInputChannels;
  for (int i = 0; i < kEncoderBlocks; ++i) {
    // The first `strided` blocks downsample; the rest run at feature resolution.
    const int stride = i < strided ? 2 : 1;
    model.encoder.push_back(nn::make_block(in, widths[i], 3, stride, 1, enc_rng));
    in = widths[i];
  }

  Rng pyr_rng(seed, kPyramidStream);
  for (int d : pcfg.branch_dilations) {
    model.branches.push_back(nn::make_block(c, pcfg.branch_channels, 3, 1, d, pyr_rng));
  }
  if (pcfg.include_global_pool_branch) {
    model.pool = PoolBranch{nn::make_conv(c, pcfg.branch_channels, 1, 1, 1, true, pyr_rng)};
  }

  Rng head_rng(seed, kGlobalStream);
  model.global_head = nn::make_head(pcfg.global_head_input_channels(), pcfg.head_projection_channels,
                                    pcfg.head_depth, pcfg.num_classes, head_rng);
  model.probes = make_probes(pcfg, hcfg, seed);
  return model;
}

void reset_probes(PyramidModel& model, std::uint64_t seed) {
  model.probes = make_probes(model.pyramid, model.probe, seed);
}

std::size_t parameter_count(const nn::Head& head) { return head.parameter_count(); }

std::size_t parameter_count(const PyramidModel& model, const std::string& group) {
  std::size_t n = 0;
  PyramidModel::visit(model, [&](const std::string& name, const Tensor& t, const nn::Param* p) {
    if (p && (group.empty() || parameter_group(name) == group)) n += t.size();
  });
  return n;
}

std::size_t parameter_count(const PyramidModel& model) { return parameter_count(model, ""); }

std::uint64_t group_digest(const PyramidModel& model, const std::string& group) {
  std::uint64_t h = 1469598103934665603ull;
  PyramidModel::visit(model, [&](const std::string& name, const Tensor& t, const nn::Param*) {
    if (parameter_group(name) == group) h = digest(t.span(), h);
  });
  return h;
}

Tensor as_batch(const PyramidModel& model, const Tensor& images) {
  Tensor batch = images;
  if (batch.rank() == 3) batch.reshape({1, images.dim(0), images.dim(1), images.dim(2)});
  if (batch.rank() != 4 || batch.dim(1) != kInputChannels) {
    throw ShapeError("expected image [3, H, W] or batch [B, 3, H, W], got " + images.shape_string());
  }
  const int os = model.pyramid.output_stride;
  if (batch.dim(2) % os != 0 || batch.dim(3) % os != 0 || batch.dim(2) == 0 || batch.dim(3) == 0) {
    throw ShapeError("image size " + std::to_string(batch.dim(2)) + "x" +
                     std::to_string(batch.dim(3)) + " not divisible by output stride " +
                     std::to_string(os));
  }
  return batch;
}

Tensor encoder_forward_eval(const PyramidModel& model, const Tensor& images) {
  Tensor x = images;
  for (const auto& block : model.encoder) x = nn::block_forward_eval(block, x);
  return x;
}

PyramidFeatures pyramid_forward_eval(const PyramidModel& model, const Tensor& encoded) {
  PyramidFeatures f;
  for (const auto& branch : model.branches) f.branches.push_back(nn::block_forward_eval(branch, encoded));
  if (model.pool) f.pooled = pool_forward(*model.pool, encoded);
  return f;
}

PyramidFeatures extract_features(const PyramidModel& model, const Tensor& images) {
  return pyramid_forward_eval(model, encoder_forward_eval(model, as_batch(model, images)));
}

Tensor global_head_input(const PyramidFeatures& features) {
  std::vector<const Tensor*> parts;
  for (const auto& b : features.branches) parts.push_back(&b);
  if (!features.pooled.empty()) parts.push_back(&features.pooled);
  return concat_channels(parts);
}

Tensor probe_input(const PyramidFeatures& features, int branch) {
  std::vector<const Tensor*> parts{&features.branches.at(branch)};
  if (!features.pooled.empty()) parts.push_back(&features.pooled);
  return concat_channels(parts);
}

std::vector<Tensor> forward_heads(const PyramidModel& model, const Tensor& images) {
  const Tensor batch = as_batch(model, images);
  const int h = batch.dim(2), w = batch.dim(3);
  const PyramidFeatures f = extract_features(model, batch);
  std::vector<Tensor> out;
  out.push_back(nn::upsample_bilinear(nn::head_forward_eval(model.global_head, global_head_input(f)), h, w));
  for (std::size_t k = 0; k < model.probes.size(); ++k) {
    out.push_back(nn::upsample_bilinear(
        nn::head_forward_eval(model.probes[k], probe_input(f, static_cast<int>(k))), h, w));
  }
  return out;
}

LogitStack forward_all(const PyramidModel& model, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("forward_all expects a single [3, H, W] image");
  const std::vector<Tensor> heads = forward_heads(model, image);
  const int n = model.pyramid.num_classes, h = image.dim(1), w = image.dim(2);
  LogitStack stack(static_cast<int>(heads.size()), n, h, w);
  for (std::size_t k = 0; k < heads.size(); ++k) {
    std::memcpy(stack.plane(static_cast<int>(k), 0), heads[k].data(), heads[k].size() * sizeof(float));
  }
  return stack;
}

Tensor forward_global(const PyramidModel& model, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("forward_global expects a single [3, H, W] image");
  const Tensor batch = as_batch(model, image);
  const PyramidFeatures f = extract_features(model, batch);
  Tensor logits = nn::upsample_bilinear(
      nn::head_forward_eval(model.global_head, global_head_input(f)), image.dim(1), image.dim(2));
  logits.reshape({model.pyramid.num_classes, image.dim(1), image.dim(2)});
  return logits;
}

Tensor trunk_forward_train(PyramidModel& model, const Tensor& images, TrunkCache& cache) {
  Tensor x = as_batch(model, images);
  cache.encoder.resize(model.encoder.size());
  for (std::size_t i = 0; i < model.encoder.size(); ++i) {
    x = nn::block_forward_train(model.encoder[i], x, cache.encoder[i]);
  }
  cache.encoded = x;
  PyramidFeatures f;
  cache.branches.resize(model.branches.size());
  for (std::size_t i = 0; i < model.branches.size(); ++i) {
    f.branches.push_back(nn::block_forward_train(model.branches[i], x, cache.branches[i]));
  }
  if (model.pool) {
    cache.pool_mean = spatial_mean(x);
    cache.pool_output = nn::conv_forward(model.pool->conv, cache.pool_mean);
    nn::relu_inplace(cache.pool_output);
    f.pooled = broadcast_pool(cache.pool_output, x.dim(2), x.dim(3));
  }
  return nn::head_forward_train(model.global_head, global_head_input(f), cache.head);
}

void trunk_backward(PyramidModel& model, const TrunkCache& cache, const Tensor& dlogits) {
  const Tensor dinput = nn::head_backward(model.global_head, cache.head, dlogits, true);
  const int bc = model.pyramid.branch_channels;
  const int n = cache.encoded.dim(0), h = cache.encoded.dim(2), w = cache.encoded.dim(3);
  Tensor dencoded(cache.encoded.dims());
  for (std::size_t i = 0; i < model.branches.size(); ++i) {
    const Tensor dbranch = slice_channels(dinput, static_cast<int>(i) * bc, bc);
    const Tensor dx = nn::block_backward(model.branches[i], cache.branches[i], dbranch, true);
    add_into_channels(dencoded, dx, 0);
  }
  if (model.pool) {
    const Tensor dbroad = slice_channels(dinput, static_cast<int>(model.branches.size()) * bc, bc);
    Tensor dpool({n, bc, 1, 1});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < bc; ++ch) {
        const float* src = dbroad.sample(b) + ch * plane;
        double s = 0.0;
        for (std::size_t i = 0; i < plane; ++i) s += src[i];
        dpool.at(b, ch, 0, 0) = static_cast<float>(s);
      }
    }
    nn::relu_backward_inplace(dpool, cache.pool_output);
    const Tensor dmean = nn::conv_backward(model.pool->conv, cache.pool_mean, dpool, true);
    const int c = cache.encoded.dim(1);
    for (int b = 0; b < n; ++b) {
      for (int ch = 0; ch < c; ++ch) {
        const float g = dmean.at(b, ch, 0, 0) / static_cast<float>(plane);
        float* dst = dencoded.sample(b) + ch * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += g;
      }
    }
  }
  Tensor g = dencoded;
  for (std::size_t i = model.encoder.size(); i-- > 0;) {
    g = nn::block_backward(model.encoder[i], cache.encoder[i], g, i > 0);
  }
}

Tensor branch_input_gradient(const PyramidModel& model, const Tensor& image, int branch, int fy,
                             int fx) {
  PyramidModel scratch = model;
  const Tensor batch = as_batch(model, image);
  std::vector<Tensor> inputs, outputs;
  Tensor x = batch;
  for (const auto& block : scratch.encoder) {
    inputs.push_back(x);
    x = nn::block_forward_eval(block, x);
    outputs.push_back(x);
  }
  const Tensor branch_out = nn::block_forward_eval(scratch.branches.at(branch), x);
  Tensor dy(branch_out.dims());
  for (int ch = 0; ch < dy.dim(1); ++ch) dy.at(0, ch, fy, fx) = 1.0f;
  Tensor g = block_backward_eval(scratch.branches[branch], x, branch_out, dy);
  for (std::size_t i = scratch.encoder.size(); i-- > 0;) {
    g = block_backward_eval(scratch.encoder[i], inputs[i], outputs[i], g);
  }
  g.reshape({batch.dim(1), batch.dim(2), batch.dim(3)});
  return g;
}

}  // namespace moose
