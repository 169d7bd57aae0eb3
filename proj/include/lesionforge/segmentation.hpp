#pragma once

// Dual-encoder lesion segmentation. Encoder A is `encoder_a_depth` blocks of
// 3x3 conv + ReLU + 2x2 max-pool. Encoder B repeats those blocks with its own
// weights, adds (encoder_b_depth - encoder_a_depth) unpooled 3x3 blocks and a
// 1x1 conv so both end at the same scale and width. The bottleneck is their
// channel concatenation; the decoder is nearest upsampling + 3x3 conv per
// pooling level, then a 1x1 conv to one logit and a sigmoid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lesionforge/core.hpp"
#include "lesionforge/image.hpp"
#include "lesionforge/imageops.hpp"
#include "lesionforge/nn/adam.hpp"
#include "lesionforge/nn/ops.hpp"
#include "lesionforge/nn/serialize.hpp"
#include "lesionforge/tensor.hpp"

namespace lesionforge {

struct DualEncoderConfig {
  std::size_t encoder_a_depth = 2;
  std::size_t encoder_b_depth = 3;
  std::size_t base_channels = 16;
  std::size_t in_channels = 3;

  void validate() const {
    if (encoder_a_depth < 1) throw ValidationError("segmentation: encoder A needs at least one block");
    if (encoder_b_depth <= encoder_a_depth)
      throw ValidationError("segmentation: encoder B must be deeper than encoder A");
    if (base_channels < 1 || in_channels < 1) throw ValidationError("segmentation: channel counts must be positive");
  }
  /// Input sides must be a multiple of this and at least twice it.
  std::size_t scale() const { return std::size_t{1} << encoder_a_depth; }
};

template <typename T>
class DualEncoder {
 public:
  DualEncoder() = default;

  DualEncoder(const DualEncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg.validate();
    const std::size_t da = cfg.encoder_a_depth, base = cfg.base_channels;
    std::size_t in = cfg.in_channels;
    for (std::size_t i = 0; i < da; ++i) {
      const std::size_t out = base << i;
      enc_a_.push_back({Step::conv, add_conv("enc_a." + std::to_string(i), in, out, 3, true, seed)});
      enc_a_.push_back({Step::pool, 0});
      enc_b_.push_back({Step::conv, add_conv("enc_b." + std::to_string(i), in, out, 3, true, seed)});
      enc_b_.push_back({Step::pool, 0});
      in = out;
    }
    const std::size_t width = in;
    for (std::size_t i = da; i < cfg.encoder_b_depth; ++i)
      enc_b_.push_back({Step::conv, add_conv("enc_b." + std::to_string(i), width, width, 3, true, seed)});
    enc_b_.push_back({Step::conv, add_conv("enc_b.match", width, width, 1, true, seed)});
    bottleneck_a_ = width;
    in = 2 * width;
    for (std::size_t i = 0; i < da; ++i) {
      const std::size_t out = base << (da - 1 - i);
      dec_.push_back({Step::upsample, 0});
      dec_.push_back({Step::conv, add_conv("dec." + std::to_string(i), in, out, 3, true, seed)});
      in = out;
    }
    dec_.push_back({Step::conv, add_conv("dec.out", in, 1, 1, false, seed)});
  }

  const DualEncoderConfig& config() const { return cfg_; }

  struct Cache {
    Tensor<T> input;
    std::vector<Tensor<T>> a, b, d;  // per-step inputs
    std::vector<Tensor<T>> a_pre, b_pre, d_pre;
    std::vector<std::vector<std::size_t>> a_arg, b_arg, d_arg;
    Tensor<T> logits, probs;
  };

  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels)
      throw std::invalid_argument("dual encoder: expected N x " + std::to_string(cfg_.in_channels) + " x H x W input");
    const std::size_t s = cfg_.scale();
    for (std::size_t d : {x.dim(2), x.dim(3)})
      if (d < 2 * s || d % s)
        throw std::invalid_argument("dual encoder: input side " + std::to_string(d) + " must be a multiple of " +
                                    std::to_string(s) + " and at least " + std::to_string(2 * s));
  }

  /// Returns sigmoid probabilities, N x 1 x H x W.
  Tensor<T> forward(const Tensor<T>& x, Cache& c) const {
    check_input(x);
    c.input = x;
    Tensor<T> ya = run(enc_a_, x, c.a, c.a_pre, c.a_arg);
    Tensor<T> yb = run(enc_b_, x, c.b, c.b_pre, c.b_arg);
    c.logits = run(dec_, nn::concat_channels(ya, yb), c.d, c.d_pre, c.d_arg);
    c.probs = nn::sigmoid(c.logits);
    return c.probs;
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    Cache c;
    return forward(x, c);
  }

  /// Accumulates parameter gradients from dL/dlogits; returns dL/dinput.
  Tensor<T> backward(const Cache& c, const Tensor<T>& g_logits) {
    Tensor<T> g = back(dec_, c.d, c.d_pre, c.d_arg, g_logits);
    Tensor<T> ga, gb;
    nn::split_channels_backward(g, bottleneck_a_, ga, gb);
    Tensor<T> gx = back(enc_a_, c.a, c.a_pre, c.a_arg, ga);
    Tensor<T> gxb = back(enc_b_, c.b, c.b_pre, c.b_arg, gb);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gxb[i];
    return gx;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> ps;
    for (auto& u : convs_) {
      ps.push_back(&u.w);
      ps.push_back(&u.b);
    }
    return ps;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& u : convs_) n += u.w.value.size() + u.b.value.size();
    return n;
  }

  std::vector<nn::NamedTensor> to_named() const {
    std::vector<nn::NamedTensor> out;
    out.emplace_back("dual_encoder.config",
                     Tensor<float>({4}, {static_cast<float>(cfg_.encoder_a_depth), static_cast<float>(cfg_.encoder_b_depth),
                                         static_cast<float>(cfg_.base_channels), static_cast<float>(cfg_.in_channels)}));
    for (const auto& u : convs_) {
      out.emplace_back(u.w.name, u.w.value.template cast<float>());
      out.emplace_back(u.b.name, u.b.value.template cast<float>());
    }
    return out;
  }

  static DualEncoder from_named(const std::vector<nn::NamedTensor>& tensors) {
    const auto& c = nn::find_tensor(tensors, "dual_encoder.config");
    if (c.size() != 4) throw ValidationError("segmentation model: malformed config tensor");
    DualEncoderConfig cfg{static_cast<std::size_t>(c[0]), static_cast<std::size_t>(c[1]),
                          static_cast<std::size_t>(c[2]), static_cast<std::size_t>(c[3])};
    DualEncoder net(cfg, 0);
    for (auto* p : net.parameters()) {
      const auto& t = nn::find_tensor(tensors, p->name);
      if (t.shape != p->value.shape)
        throw ValidationError("segmentation model: tensor '" + p->name + "' has shape " + shape_str(t.shape) +
                              ", expected " + shape_str(p->value.shape));
      p->value = t.template cast<T>();
    }
    return net;
  }

 private:
  struct ConvUnit {
    Parameter<T> w, b;
    bool relu = true;
  };
  struct Step {
    enum Kind { conv, pool, upsample } kind;
    std::size_t conv_index;
  };

  std::size_t add_conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, bool relu,
                       std::uint64_t seed) {
    ConvUnit u{Parameter<T>("seg." + name + ".w", {out, in, k, k}), Parameter<T>("seg." + name + ".b", {out}),
               relu};
    he_uniform_init(u.w, in * k * k, seed);
    convs_.push_back(std::move(u));
    return convs_.size() - 1;
  }

  Tensor<T> run(const std::vector<Step>& steps, Tensor<T> h, std::vector<Tensor<T>>& ins, std::vector<Tensor<T>>& pre,
                std::vector<std::vector<std::size_t>>& arg) const {
    ins.assign(steps.size(), {});
    pre.assign(steps.size(), {});
    arg.assign(steps.size(), {});
    for (std::size_t i = 0; i < steps.size(); ++i) {
      ins[i] = h;
      switch (steps[i].kind) {
        case Step::conv: {
          const auto& u = convs_[steps[i].conv_index];
          Tensor<T> z = nn::conv2d(h, u.w.value, u.b.value, 1, nn::Padding::same);
          if (u.relu) {
            h = nn::relu(z);
            pre[i] = std::move(z);
          } else {
            h = std::move(z);
          }
          break;
        }
        case Step::pool: {
          auto r = nn::max_pool2d(h, 2, 2);
          h = std::move(r.out);
          arg[i] = std::move(r.argmax);
          break;
        }
        case Step::upsample:
          h = nn::upsample2x(h);
          break;
      }
    }
    return h;
  }

  Tensor<T> back(const std::vector<Step>& steps, const std::vector<Tensor<T>>& ins, const std::vector<Tensor<T>>& pre,
                 const std::vector<std::vector<std::size_t>>& arg, Tensor<T> g) {
    for (std::size_t i = steps.size(); i-- > 0;) {
      switch (steps[i].kind) {
        case Step::conv: {
          auto& u = convs_[steps[i].conv_index];
          if (u.relu) g = nn::relu_backward(pre[i], g);
          Tensor<T> gx;
          nn::conv2d_backward(ins[i], u.w.value, 1, nn::Padding::same, g, &gx, u.w.grad, &u.b.grad);
          g = std::move(gx);
          break;
        }
        case Step::pool:
          g = nn::max_pool2d_backward(ins[i].shape, arg[i], g);
          break;
        case Step::upsample:
          g = nn::upsample2x_backward(g);
          break;
      }
    }
    return g;
  }

  DualEncoderConfig cfg_;
  std::vector<ConvUnit> convs_;
  std::vector<Step> enc_a_, enc_b_, dec_;
  std::size_t bottleneck_a_ = 0;
};

template <typename T = float>
DualEncoder<T> build_dual_encoder(const DualEncoderConfig& cfg, std::uint64_t seed) {
  return DualEncoder<T>(cfg, seed);
}

/// Image to a 1 x C x H x W tensor centred on 0.5.
template <typename T>
Tensor<T> image_tensor(const Image& img) {
  Tensor<T> t({1, img.channels, img.height, img.width});
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) t.at(0, c, y, x) = static_cast<T>(img.at(y, x, c) - 0.5);
  return t;
}

inline MaskImage binarize(const MaskImage& m) {
  MaskImage b = m;
  for (auto& v : b.data) v = v >= 0.5 ? 1.0 : 0.0;
  return b;
}

/// Dice of the binarized masks; two empty masks score 1.
inline double dice_score(const MaskImage& pred, const MaskImage& truth) {
  if (pred.data.size() != truth.data.size()) throw std::invalid_argument("dice_score: mask sizes differ");
  std::size_t inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] >= 0.5, g = truth.data[i] >= 0.5;
    inter += p && g;
    sp += p;
    sg += g;
  }
  return sp + sg == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

template <typename T>
MaskImage predict_mask(const DualEncoder<T>& net, const Image& img) {
  const Tensor<T> p = net.forward(image_tensor<T>(img));
  MaskImage m(img.height, img.width, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = static_cast<double>(p[i]);
  return m;
}

struct SegPair {
  Image image;
  MaskImage mask;
};

struct SegTrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  nn::DiceBceOptions loss;
  // Stop once the epoch's mean training Dice reaches this value; 0 disables.
  double stop_at_train_dice = 0.0;
};

struct SegTrainHistory {
  std::vector<double> loss;        // mean per-sample loss, one entry per epoch
  std::vector<double> train_dice;  // mean binarized Dice over the epoch's forward passes
  std::size_t epochs_run = 0;
};

template <typename T>
SegTrainHistory train_segmenter(DualEncoder<T>& net, const std::vector<SegPair>& pairs, const SegTrainConfig& cfg) {
  if (pairs.empty()) throw ValidationError("segmentation training needs at least one image/mask pair");
  for (const auto& p : pairs) {
    if (p.mask.channels != 1 || p.mask.height != p.image.height || p.mask.width != p.image.width)
      throw ValidationError("segmentation training: mask must be single-channel and match its image size");
    for (double v : p.mask.data)
      if (v != 0.0 && v != 1.0) throw ValidationError("segmentation training: masks must be binary");
  }
  if (cfg.batch_size == 0) throw ValidationError("segmentation training: batch size must be positive");
  std::vector<Tensor<T>> inputs;
  std::vector<std::vector<T>> targets;
  for (const auto& p : pairs) {
    inputs.push_back(image_tensor<T>(p.image));
    targets.emplace_back(p.mask.data.begin(), p.mask.data.end());
  }
  nn::Adam<T> adam({cfg.lr});
  auto params = net.parameters();
  SegTrainHistory hist;
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    CounterRng(cfg.seed, 0x736567ULL + epoch).shuffle(order.begin(), order.end());
    double loss_sum = 0, dice_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const T inv_b = T(1) / static_cast<T>(stop - start);
      net.zero_grad();
      for (std::size_t j = start; j < stop; ++j) {
        const std::size_t i = order[j];
        typename DualEncoder<T>::Cache cache;
        const Tensor<T> probs = net.forward(inputs[i], cache);
        std::span<const T> ps(probs.data), gs(targets[i]);
        const double l = static_cast<double>(nn::dice_bce_loss<T>(ps, gs, cfg.loss));
        if (!std::isfinite(l)) throw std::runtime_error("segmentation training: non-finite loss at epoch " + std::to_string(epoch));
        loss_sum += l;
        MaskImage pm(pairs[i].mask.height, pairs[i].mask.width, 1);
        for (std::size_t k = 0; k < probs.size(); ++k) pm.data[k] = static_cast<double>(probs[k]);
        dice_sum += dice_score(pm, pairs[i].mask);
        std::vector<T> g = nn::dice_bce_logit_grad<T>(ps, gs, cfg.loss);
        for (auto& v : g) v *= inv_b;
        net.backward(cache, Tensor<T>(probs.shape, std::move(g)));
      }
      adam.step(params);
    }
    hist.loss.push_back(loss_sum / static_cast<double>(pairs.size()));
    hist.train_dice.push_back(dice_sum / static_cast<double>(pairs.size()));
    hist.epochs_run = epoch + 1;
    if (cfg.stop_at_train_dice > 0 && hist.train_dice.back() >= cfg.stop_at_train_dice) break;
  }
  return hist;
}

enum class MaskMode { multiply, crop };

inline std::string to_string(MaskMode m) { return m == MaskMode::multiply ? "multiply" : "crop"; }

struct MaskedImage {
  Image image;
  bool fell_back = false;  // crop requested but the binary mask was empty
};

inline constexpr std::size_t kCropPad = 8;

inline MaskedImage apply_mask(const Image& img, const MaskImage& mask, MaskMode mode) {
  if (mask.channels != 1 || mask.height != img.height || mask.width != img.width)
    throw std::invalid_argument("apply_mask: mask must be single-channel with the image's spatial size");
  auto multiply = [&] {
    Image out = img;
    for (std::size_t p = 0; p < img.pixels(); ++p)
      for (std::size_t c = 0; c < img.channels; ++c) out.data[p * img.channels + c] *= mask.data[p];
    return out;
  };
  if (mode == MaskMode::multiply) return {multiply(), false};
  std::size_t y0 = img.height, y1 = 0, x0 = img.width, x1 = 0;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      if (mask.at(y, x, 0) >= 0.5) {
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
      }
  if (y0 > y1) return {multiply(), true};
  y0 = y0 > kCropPad ? y0 - kCropPad : 0;
  x0 = x0 > kCropPad ? x0 - kCropPad : 0;
  y1 = std::min(img.height - 1, y1 + kCropPad);
  x1 = std::min(img.width - 1, x1 + kCropPad);
  return {resize_bilinear(crop(img, y0, x0, y1 - y0 + 1, x1 - x0 + 1), img.height, img.width), false};
}

template <typename T>
void save_segmenter(const std::filesystem::path& path, const DualEncoder<T>& net) {
  nn::save_parameters(path, net.to_named());
}

inline DualEncoder<float> load_segmenter(const std::filesystem::path& path) {
  return DualEncoder<float>::from_named(nn::load_parameters(path));
}

}  // namespace lesionforge
