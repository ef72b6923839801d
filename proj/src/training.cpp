#include "moose/training.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>

#include "moose/metrics.hpp"
#include "moose/parallel.hpp"
#include "moose/rng.hpp"

namespace moose {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5eed;

nn::SgdConfig sgd_config(const TrainConfig& cfg) {
  return nn::SgdConfig{static_cast<float>(cfg.learning_rate), static_cast<float>(cfg.momentum),
                       static_cast<float>(cfg.weight_decay)};
}

void step_head(nn::Head& head, const nn::SgdConfig& sgd) {
  nn::Head::visit(head, "", [&](const std::string&, Tensor&, nn::Param* p) {
    if (p) nn::sgd_step(*p, sgd);
  });
}

void zero_head(nn::Head& head) {
  nn::Head::visit(head, "", [&](const std::string&, Tensor&, nn::Param* p) {
    if (p) nn::zero_grad(*p);
  });
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed ^ kShuffleStream, static_cast<std::uint64_t>(epoch));
  rng.shuffle(order);
  return order;
}

template <class F>
void for_each_batch(const std::vector<std::size_t>& order, int batch_size, F&& f) {
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    f(std::span<const std::size_t>(order.data() + start, end - start));
  }
}

void check_finite(double loss, const std::string& what, int epoch) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << what << " diverged at epoch " << epoch << ": loss=" << loss
       << " (try a lower learning rate)";
    throw TrainingDiverged(os.str());
  }
}

// Softmax of one pixel of logits [N, plane] (stride = plane), in double.
// Returns the log-sum-exp of the logits.
double pixel_softmax(const float* logits, int n, std::size_t stride, std::size_t px, double* p) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < n; ++c) mx = std::max(mx, static_cast<double>(logits[c * stride + px]));
  double sum = 0.0;
  for (int c = 0; c < n; ++c) sum += (p[c] = std::exp(logits[c * stride + px] - mx));
  for (int c = 0; c < n; ++c) p[c] /= sum;
  return mx + std::log(sum);
}

// Mean KL(uniform || softmax) over masked pixels of logits [B, N, H, W].
double uniform_kl(const Tensor& logits, std::span<const std::uint8_t* const> masks, Tensor* grad,
                  double scale, std::size_t* count_out = nullptr) {
  const int b = logits.dim(0), n = logits.dim(1);
  const std::size_t plane = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  std::size_t count = 0;
  for (int i = 0; i < b; ++i) {
    for (std::size_t px = 0; px < plane; ++px) count += masks[i][px] != 0;
  }
  if (count_out) *count_out = count;
  if (count == 0) return 0.0;
  std::vector<double> p(n);
  const double log_n = std::log(static_cast<double>(n));
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const float* z = logits.sample(i);
    for (std::size_t px = 0; px < plane; ++px) {
      if (!masks[i][px]) continue;
      const double lse = pixel_softmax(z, n, plane, px, p.data());
      double mean_log = 0.0;
      for (int c = 0; c < n; ++c) mean_log += z[c * plane + px] - lse;
      total += -log_n - mean_log / n;
      if (grad) {
        float* g = grad->sample(i);
        for (int c = 0; c < n; ++c) {
          g[c * plane + px] += static_cast<float>(scale * (p[c] - 1.0 / n) / static_cast<double>(count));
        }
      }
    }
  }
  return total / static_cast<double>(count);
}

// Flips an image batch and label buffers left-right in place.
void flip_sample(Tensor& batch, int b, std::vector<std::uint8_t>& labels) {
  const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  float* s = batch.sample(b);
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      float* row = s + (static_cast<std::size_t>(ch) * h + y) * w;
      std::reverse(row, row + w);
    }
  }
  for (int y = 0; y < h; ++y) {
    std::reverse(labels.begin() + static_cast<std::ptrdiff_t>(y) * w,
                 labels.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
  }
}

std::vector<const std::uint8_t*> label_pointers(std::span<const LabeledScene> scenes,
                                                std::span<const std::size_t> idx) {
  std::vector<const std::uint8_t*> out;
  for (std::size_t i : idx) out.push_back(scenes[i].labels.values.data());
  return out;
}

// One epoch of head training over `order`. Returns the mean batch loss.
double run_head_epoch(nn::Head& head, const std::function<Tensor(std::span<const std::size_t>)>& input,
                      std::span<const LabeledScene> scenes, const std::vector<std::size_t>& order,
                      const TrainConfig& cfg) {
  const nn::SgdConfig sgd = sgd_config(cfg);
  double loss_sum = 0.0;
  int batches = 0;
  zero_head(head);
  for_each_batch(order, cfg.batch_size, [&](std::span<const std::size_t> idx) {
    const Tensor x = input(idx);
    const int out_h = scenes[idx[0]].labels.height, out_w = scenes[idx[0]].labels.width;
    nn::HeadCache cache;
    const Tensor low = nn::head_forward_train(head, x, cache);
    const Tensor logits = nn::upsample_bilinear(low, out_h, out_w);
    Tensor grad;
    const auto labels = label_pointers(scenes, idx);
    loss_sum += cross_entropy(logits, labels, cfg.ignore_index, &grad);
    ++batches;
    nn::head_backward(head, cache, nn::upsample_bilinear_backward(grad, low.dim(2), low.dim(3)), false);
    step_head(head, sgd);
  });
  return batches ? loss_sum / batches : 0.0;
}

bool plateau_reached(const std::vector<double>& history, const TrainConfig& cfg) {
  if (!cfg.early_stop_on_miou_plateau) return false;
  const int n = static_cast<int>(history.size());
  if (n <= cfg.plateau_patience) return false;
  const double before = *std::max_element(history.begin(), history.end() - cfg.plateau_patience);
  const double recent = *std::max_element(history.end() - cfg.plateau_patience, history.end());
  return recent < before + cfg.plateau_min_delta;
}

}  // namespace

void validate(const TrainConfig& cfg, int num_classes) {
  if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (cfg.ignore_index >= 0 && cfg.ignore_index < num_classes) {
    throw ConfigError("ignore_index must lie outside [0, num_classes)");
  }
  if (cfg.momentum < 0.0 || cfg.momentum >= 1.0) throw ConfigError("momentum must be in [0, 1)");
  if (cfg.plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
}

void write_train_log(std::ostream& os, const TrainLog& log) {
  for (const auto& e : log.epochs) {
    os << "epoch=" << e.epoch << " loss=" << std::setprecision(9) << e.loss;
    for (const auto& [k, m] : e.miou) os << " miou_head_" << k << '=' << m;
    os << '\n';
  }
}

TrainLog read_train_log(std::istream& is) {
  TrainLog log;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tok;
    EpochRecord rec;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw DataError("bad train log token: " + tok);
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "epoch") {
        rec.epoch = std::stoi(val);
      } else if (key == "loss") {
        rec.loss = std::stod(val);
      } else if (key.rfind("miou_head_", 0) == 0) {
        rec.miou.emplace_back(std::stoi(key.substr(10)), std::stod(val));
      } else {
        throw DataError("unknown train log key: " + key);
      }
    }
    log.epochs.push_back(rec);
  }
  return log;
}

double cross_entropy(const Tensor& logits, std::span<const std::uint8_t* const> labels,
                     int ignore_index, Tensor* grad, std::size_t* valid_pixels) {
  const int b = logits.dim(0), n = logits.dim(1);
  const std::size_t plane = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
  if (labels.size() != static_cast<std::size_t>(b)) throw ShapeError("label batch size mismatch");
  if (grad) *grad = Tensor(logits.dims());
  std::size_t valid = 0;
  double total = 0.0;
  std::vector<double> p(n);
  for (int i = 0; i < b; ++i) {
    const float* z = logits.sample(i);
    for (std::size_t px = 0; px < plane; ++px) {
      const int y = labels[i][px];
      if (y == ignore_index) continue;
      if (y < 0 || y >= n) throw std::out_of_range("label " + std::to_string(y) + " outside [0, N)");
      ++valid;
      const double lse = pixel_softmax(z, n, plane, px, p.data());
      total += lse - z[y * plane + px];
      if (grad) {
        float* g = grad->sample(i);
        for (int c = 0; c < n; ++c) g[c * plane + px] = static_cast<float>(p[c] - (c == y ? 1.0 : 0.0));
      }
    }
  }
  if (valid_pixels) *valid_pixels = valid;
  if (valid == 0) return 0.0;
  if (grad) {
    const float inv = 1.0f / static_cast<float>(valid);
    for (float& g : grad->values()) g *= inv;
  }
  return total / static_cast<double>(valid);
}

LossResult multi_head_ce_loss(const LogitStack& stack, const LabelMask& labels, int ignore_index,
                              LogitStack* grad) {
  if (labels.height != stack.height() || labels.width != stack.width()) {
    throw ShapeError("label mask does not match logit stack size");
  }
  const int n = stack.num_classes();
  const std::size_t plane = stack.pixels();
  if (grad) *grad = LogitStack(stack.num_heads(), n, stack.height(), stack.width());
  LossResult r;
  const std::uint8_t* lbl = labels.values.data();
  for (int k = 1; k < stack.num_heads(); ++k) {
    Tensor head({1, n, stack.height(), stack.width()});
    std::copy(stack.plane(k, 0), stack.plane(k, 0) + n * plane, head.data());
    Tensor g;
    std::size_t valid = 0;
    r.loss += cross_entropy(head, std::span<const std::uint8_t* const>(&lbl, 1), ignore_index,
                            grad ? &g : nullptr, &valid);
    if (valid == 0) r.all_ignored = true;
    if (grad) std::copy(g.values().begin(), g.values().end(), grad->plane(k, 0));
  }
  return r;
}

LossResult outlier_exposure_loss(const LogitStack& inlier, const LabelMask& inlier_labels,
                                 const LogitStack& outlier, const AnomalyMask& outlier_mask,
                                 double weight, int ignore_index) {
  LossResult r = multi_head_ce_loss(inlier, inlier_labels, ignore_index);
  if (outlier.num_heads() != inlier.num_heads()) throw ShapeError("stacks differ in head count");
  std::vector<std::uint8_t> mask = outlier_mask.values;
  for (std::size_t i = 0; i < outlier_mask.void_mask.size(); ++i) {
    if (outlier_mask.void_mask[i]) mask[i] = 0;
  }
  const std::uint8_t* m = mask.data();
  const int n = outlier.num_classes();
  for (int k = 1; k < outlier.num_heads(); ++k) {
    Tensor head({1, n, outlier.height(), outlier.width()});
    std::copy(outlier.plane(k, 0), outlier.plane(k, 0) + n * outlier.pixels(), head.data());
    r.loss += weight * uniform_kl(head, std::span<const std::uint8_t* const>(&m, 1), nullptr, 0.0);
  }
  return r;
}

std::vector<PyramidFeatures> cache_features(const PyramidModel& model,
                                            std::span<const LabeledScene> scenes) {
  std::vector<PyramidFeatures> out(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) { out[i] = extract_features(model, scenes[i].image); });
  return out;
}

Tensor batch_features(std::span<const Tensor* const> per_scene) {
  const Tensor& first = *per_scene[0];
  Tensor out({static_cast<int>(per_scene.size()), first.dim(1), first.dim(2), first.dim(3)});
  for (std::size_t b = 0; b < per_scene.size(); ++b) {
    if (!per_scene[b]->same_shape(first)) throw ShapeError("feature batch shape mismatch");
    std::copy(per_scene[b]->values().begin(), per_scene[b]->values().end(), out.sample(static_cast<int>(b)));
  }
  return out;
}

std::vector<double> validation_miou(const PyramidModel& model, std::span<const LabeledScene> val,
                                    int ignore_index) {
  const int heads = model.num_heads(), n = model.pyramid.num_classes;
  std::vector<std::vector<ConfusionAccumulator>> per_scene(
      val.size(), std::vector<ConfusionAccumulator>(heads, ConfusionAccumulator(n, ignore_index)));
  parallel_for(val.size(), [&](std::size_t i) {
    const LogitStack stack = forward_all(model, val[i].image);
    std::vector<std::uint8_t> pred(stack.pixels());
    for (int k = 0; k < heads; ++k) {
      for (std::size_t px = 0; px < stack.pixels(); ++px) {
        int best = 0;
        for (int c = 1; c < n; ++c) {
          if (stack.plane(k, c)[px] > stack.plane(k, best)[px]) best = c;
        }
        pred[px] = static_cast<std::uint8_t>(best);
      }
      per_scene[i][k].add(std::span<const std::uint8_t>(pred), val[i].labels.values);
    }
  });
  std::vector<double> out(heads, 0.0);
  for (int k = 0; k < heads; ++k) {
    ConfusionAccumulator acc(n, ignore_index);
    for (const auto& s : per_scene) acc.merge(s[k]);
    out[k] = acc.miou();
  }
  return out;
}

TrainLog train_base_model(PyramidModel& model, std::span<const LabeledScene> train,
                          std::span<const LabeledScene> val, const TrainConfig& cfg) {
  validate(cfg, model.pyramid.num_classes);
  if (train.empty()) throw ConfigError("empty training set");
  const nn::SgdConfig sgd = sgd_config(cfg);
  TrainLog log;
  std::vector<double> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), cfg.seed, epoch);
    Rng flip_rng(cfg.seed ^ 0xf11b, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    int batches = 0;
    for_each_batch(order, cfg.batch_size, [&](std::span<const std::size_t> idx) {
      Tensor images = stack_images(train, idx);
      std::vector<std::vector<std::uint8_t>> labels;
      for (std::size_t b = 0; b < idx.size(); ++b) {
        labels.push_back(train[idx[b]].labels.values);
        if (cfg.horizontal_flip && flip_rng.uniform() < 0.5) flip_sample(images, static_cast<int>(b), labels.back());
      }
      std::vector<const std::uint8_t*> ptrs;
      for (const auto& l : labels) ptrs.push_back(l.data());
      TrunkCache cache;
      const Tensor low = trunk_forward_train(model, images, cache);
      const Tensor logits = nn::upsample_bilinear(low, images.dim(2), images.dim(3));
      Tensor grad;
      loss_sum += cross_entropy(logits, ptrs, cfg.ignore_index, &grad);
      ++batches;
      trunk_backward(model, cache, nn::upsample_bilinear_backward(grad, low.dim(2), low.dim(3)));
      PyramidModel::visit(model, [&](const std::string& name, Tensor&, nn::Param* p) {
        if (!p) return;
        const std::string group = parameter_group(name);
        if (group.rfind("probe", 0) == 0) return;
        if (model.is_frozen(group)) {
          nn::zero_grad(*p);
        } else {
          nn::sgd_step(*p, sgd);
        }
      });
    });
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = batches ? loss_sum / batches : 0.0;
    check_finite(rec.loss, "base model training", epoch);
    if (!val.empty()) {
      PyramidModel global_only = model;
      global_only.probes.clear();
      const double m = validation_miou(global_only, val, cfg.ignore_index)[0];
      rec.miou.emplace_back(0, m);
      history.push_back(m);
    }
    log.epochs.push_back(rec);
    if (plateau_reached(history, cfg)) {
      log.stopped_early = true;
      break;
    }
  }
  return log;
}

TrainLog train_probes(PyramidModel& model, std::span<const LabeledScene> train,
                      std::span<const LabeledScene> val, const TrainConfig& cfg) {
  validate(cfg, model.pyramid.num_classes);
  if (train.empty()) throw ConfigError("empty training set");
  for (const char* g : {"encoder", "pyramid", "global_head"}) model.frozen[g] = true;
  for (int k = 0; k < static_cast<int>(model.probes.size()); ++k) model.frozen["probe" + std::to_string(k)] = false;

  // The trunk is frozen and runs in eval mode, so its features can be computed once.
  const std::vector<PyramidFeatures> feats = cache_features(model, train);
  TrainLog log;
  std::vector<double> history;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto order = epoch_order(train.size(), cfg.seed, epoch);
    double loss = 0.0;
    for (int k = 0; k < static_cast<int>(model.probes.size()); ++k) {
      auto input = [&](std::span<const std::size_t> idx) {
        std::vector<Tensor> parts;
        for (std::size_t i : idx) parts.push_back(probe_input(feats[i], k));
        std::vector<const Tensor*> ptrs;
        for (const auto& p : parts) ptrs.push_back(&p);
        return batch_features(ptrs);
      };
      loss += run_head_epoch(model.probes[k], input, train, order, cfg);
    }
    check_finite(loss, "probe training", epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss;
    if (!val.empty()) {
      const std::vector<double> m = validation_miou(model, val, cfg.ignore_index);
      double mean = 0.0;
      for (std::size_t k = 1; k < m.size(); ++k) {
        rec.miou.emplace_back(static_cast<int>(k), m[k]);
        mean += m[k];
      }
      history.push_back(mean / static_cast<double>(m.size() - 1));
    }
    log.epochs.push_back(rec);
    if (plateau_reached(history, cfg)) {
      log.stopped_early = true;
      break;
    }
  }
  return log;
}

double outlier_exposure_step(PyramidModel& model, std::span<const LabeledScene> inlier_batch,
                             std::span<const LabeledScene> outlier_batch, double weight,
                             const TrainConfig& cfg) {
  validate(cfg, model.pyramid.num_classes);
  if (inlier_batch.empty()) throw ConfigError("empty inlier batch");
  const nn::SgdConfig sgd = sgd_config(cfg);
  std::vector<std::size_t> in_idx(inlier_batch.size()), out_idx(outlier_batch.size());
  std::iota(in_idx.begin(), in_idx.end(), std::size_t{0});
  std::iota(out_idx.begin(), out_idx.end(), std::size_t{0});
  const PyramidFeatures fin = extract_features(model, stack_images(inlier_batch, in_idx));
  const auto in_labels = label_pointers(inlier_batch, in_idx);

  PyramidFeatures fout;
  std::vector<std::vector<std::uint8_t>> masks;
  std::vector<const std::uint8_t*> mask_ptrs;
  std::size_t outlier_pixels = 0;
  if (!outlier_batch.empty()) {
    fout = extract_features(model, stack_images(outlier_batch, out_idx));
    for (const auto& s : outlier_batch) {
      std::vector<std::uint8_t> m = s.anomaly.values;
      for (std::size_t i = 0; i < s.anomaly.void_mask.size(); ++i) {
        if (s.anomaly.void_mask[i]) m[i] = 0;
      }
      outlier_pixels += static_cast<std::size_t>(std::count(m.begin(), m.end(), std::uint8_t{1}));
      masks.push_back(std::move(m));
    }
    for (const auto& m : masks) mask_ptrs.push_back(m.data());
  }
  const bool exposure = outlier_pixels > 0 && weight != 0.0;

  const int h = inlier_batch[0].labels.height, w = inlier_batch[0].labels.width;
  double total = 0.0;
  for (int k = 0; k < static_cast<int>(model.probes.size()); ++k) {
    nn::Head& head = model.probes[k];
    zero_head(head);
    nn::HeadCache cache;
    const Tensor low = nn::head_forward_train(head, probe_input(fin, k), cache);
    Tensor grad;
    total += cross_entropy(nn::upsample_bilinear(low, h, w), in_labels, cfg.ignore_index, &grad);
    nn::head_backward(head, cache, nn::upsample_bilinear_backward(grad, low.dim(2), low.dim(3)), false);
    if (exposure) {
      nn::HeadCache ocache;
      const Tensor olow = nn::head_forward_train(head, probe_input(fout, k), ocache);
      const Tensor ologits = nn::upsample_bilinear(olow, outlier_batch[0].labels.height,
                                                   outlier_batch[0].labels.width);
      Tensor ograd(ologits.dims());
      total += weight * uniform_kl(ologits, mask_ptrs, &ograd, weight);
      nn::head_backward(head, ocache, nn::upsample_bilinear_backward(ograd, olow.dim(2), olow.dim(3)), false);
    }
    step_head(head, sgd);
  }
  if (!std::isfinite(total)) throw TrainingDiverged("outlier exposure step produced a non-finite loss");
  return total;
}

HeadTrainingResult train_head_on_features(nn::Head& head, std::span<const Tensor> inputs,
                                          std::span<const LabeledScene> scenes,
                                          std::span<const std::size_t> subset,
                                          const TrainConfig& cfg, int epochs) {
  if (inputs.size() != scenes.size()) throw ShapeError("one feature tensor per scene required");
  HeadTrainingResult result;
  auto input = [&](std::span<const std::size_t> idx) {
    std::vector<const Tensor*> ptrs;
    for (std::size_t i : idx) ptrs.push_back(&inputs[i]);
    return batch_features(ptrs);
  };
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    auto order = epoch_order(subset.size(), cfg.seed, epoch);
    for (auto& o : order) o = subset[o];
    const double loss = run_head_epoch(head, input, scenes, order, cfg);
    check_finite(loss, "head training", epoch);
    result.epoch_loss.push_back(loss);
  }
  return result;
}

}  // namespace moose
