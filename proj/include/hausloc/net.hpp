#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hausloc/core.hpp"
#include "hausloc/parallel.hpp"
#include "hausloc/rng.hpp"
#include "hausloc/whd.hpp"

namespace hausloc {

/// Desk-scale encoder-decoder localizer. Each encoder block is two 3x3
/// convolutions with rectifiers followed by a 2x2 max-pool; channels double
/// per block up to channel_cap. Each decoder block upsamples (nearest
/// neighbor), concatenates the matching encoder activation and applies two
/// 3x3 conv+rectifier layers. A 1x1 convolution with a logistic squashing
/// produces the saliency map; a small fully connected head on pooled
/// encoder+decoder features regresses the object count.
struct NetConfig {
  Index input_size = 64;  // square input; 0 accepts any compatible size
  int encoder_blocks = 3;
  int base_channels = 8;
  int channel_cap = 32;
  int count_head_hidden = 16;

  int channels_out(int block) const {
    long c = long(base_channels) << block;
    return int(std::min<long>(c, channel_cap));
  }

  void validate() const {
    detail::require(encoder_blocks >= 1 && encoder_blocks <= 8, "NetConfig: bad block count");
    detail::require(base_channels >= 1, "NetConfig: base_channels must be >= 1");
    detail::require(channel_cap >= base_channels, "NetConfig: channel_cap below base");
    detail::require(count_head_hidden >= 1, "NetConfig: empty count head");
    if (input_size > 0) {
      const Index stride = Index(1) << encoder_blocks;
      detail::require(input_size % stride == 0 && input_size >= stride,
                      "NetConfig: input_size not divisible by 2^encoder_blocks");
    }
  }
};

enum class Partition : std::uint8_t { Encoder = 0, Decoder = 1, CountHead = 2 };

template <typename Scalar>
struct TensorT {
  std::string name;
  Partition partition = Partition::Encoder;
  std::vector<Index> dims;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> data;

  Index size() const { return data.size(); }
};

template <typename Scalar>
struct ModelParamsT {
  NetConfig config;
  std::vector<TensorT<Scalar>> tensors;

  TensorT<Scalar>& at(const std::string& name) {
    for (auto& t : tensors)
      if (t.name == name) return t;
    throw ShapeError("model: unknown tensor " + name);
  }
  const TensorT<Scalar>& at(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw ShapeError("model: unknown tensor " + name);
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  /// Same tensor layout with all values set to zero.
  ModelParamsT zeros_like() const {
    ModelParamsT out = *this;
    for (auto& t : out.tensors) t.data.setZero();
    return out;
  }
};

using ModelParams = ModelParamsT<double>;

template <typename Scalar>
struct ForwardOutputT {
  ProbMap<Scalar> prob_map;
  Scalar count_estimate = 0;  // clamped at zero; raw value used in training
};

namespace detail {

template <typename Scalar>
using MatRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Feature map stored channels x (h*w), pixels flattened row-major.
template <typename Scalar>
struct FeatureMapT {
  MatRM<Scalar> data;
  Index h = 0, w = 0;

  FeatureMapT() = default;
  FeatureMapT(Index channels, Index height, Index width)
      : data(MatRM<Scalar>::Zero(channels, height * width)), h(height), w(width) {}
  Index channels() const { return data.rows(); }
};

template <typename Scalar>
MatRM<Scalar> im2col3(const FeatureMapT<Scalar>& x) {
  const Index c_in = x.channels(), h = x.h, w = x.w;
  MatRM<Scalar> col(c_in * 9, h * w);
  for (Index c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Index r = c * 9 + ky * 3 + kx;
        for (Index i = 0; i < h; ++i) {
          const Index yy = i + ky - 1;
          Scalar* dst = col.data() + r * (h * w) + i * w;
          if (yy < 0 || yy >= h) {
            std::fill(dst, dst + w, Scalar(0));
            continue;
          }
          const Scalar* src = x.data.data() + c * (h * w) + yy * w;
          for (Index j = 0; j < w; ++j) {
            const Index xx = j + kx - 1;
            dst[j] = (xx < 0 || xx >= w) ? Scalar(0) : src[xx];
          }
        }
      }
    }
  }
  return col;
}

template <typename Scalar>
void col2im3(const MatRM<Scalar>& dcol, FeatureMapT<Scalar>& dx) {
  const Index c_in = dx.channels(), h = dx.h, w = dx.w;
  for (Index c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const Index r = c * 9 + ky * 3 + kx;
        for (Index i = 0; i < h; ++i) {
          const Index yy = i + ky - 1;
          if (yy < 0 || yy >= h) continue;
          const Scalar* src = dcol.data() + r * (h * w) + i * w;
          Scalar* dst = dx.data.data() + c * (h * w) + yy * w;
          for (Index j = 0; j < w; ++j) {
            const Index xx = j + kx - 1;
            if (xx >= 0 && xx < w) dst[xx] += src[j];
          }
        }
      }
    }
  }
}

/// 3x3 same-padding convolution: weight laid out [c_out, c_in*9].
template <typename Scalar>
FeatureMapT<Scalar> conv3x3_forward(const FeatureMapT<Scalar>& x,
                                    const Eigen::Array<Scalar, Eigen::Dynamic, 1>& weight,
                                    const Eigen::Array<Scalar, Eigen::Dynamic, 1>& bias,
                                    MatRM<Scalar>* col_cache = nullptr) {
  const Index c_out = bias.size();
  const Index c_in = x.channels();
  MatRM<Scalar> col = im2col3(x);
  Eigen::Map<const MatRM<Scalar>> wmat(weight.data(), c_out, c_in * 9);
  FeatureMapT<Scalar> y(c_out, x.h, x.w);
  y.data.noalias() = wmat * col;
  y.data.colwise() += Eigen::Matrix<Scalar, Eigen::Dynamic, 1>(bias.matrix());
  if (col_cache) *col_cache = std::move(col);
  return y;
}

template <typename Scalar>
void conv3x3_backward(const MatRM<Scalar>& col, const FeatureMapT<Scalar>& dy,
                      const Eigen::Array<Scalar, Eigen::Dynamic, 1>& weight, Index c_in,
                      Eigen::Array<Scalar, Eigen::Dynamic, 1>& dweight,
                      Eigen::Array<Scalar, Eigen::Dynamic, 1>& dbias,
                      FeatureMapT<Scalar>* dx) {
  const Index c_out = dy.channels();
  Eigen::Map<const MatRM<Scalar>> wmat(weight.data(), c_out, c_in * 9);
  Eigen::Map<MatRM<Scalar>> dwmat(dweight.data(), c_out, c_in * 9);
  dwmat.noalias() += dy.data * col.transpose();
  dbias.matrix() += dy.data.rowwise().sum();
  if (dx) {
    MatRM<Scalar> dcol(c_in * 9, dy.h * dy.w);
    dcol.noalias() = wmat.transpose() * dy.data;
    col2im3(dcol, *dx);
  }
}

template <typename Scalar>
void relu_inplace(FeatureMapT<Scalar>& x) {
  x.data = x.data.cwiseMax(Scalar(0));
}

/// Backward through a rectifier given the pre-activation values.
template <typename Scalar>
void relu_backward_inplace(const FeatureMapT<Scalar>& pre, FeatureMapT<Scalar>& dy) {
  const Scalar* z = pre.data.data();
  Scalar* g = dy.data.data();
  for (Index i = 0; i < dy.data.size(); ++i)
    if (z[i] <= Scalar(0)) g[i] = Scalar(0);
}

template <typename Scalar>
FeatureMapT<Scalar> maxpool2_forward(const FeatureMapT<Scalar>& x,
                                     std::vector<Index>& argmax) {
  const Index c = x.channels(), oh = x.h / 2, ow = x.w / 2;
  FeatureMapT<Scalar> y(c, oh, ow);
  argmax.assign(std::size_t(c * oh * ow), 0);
  for (Index ch = 0; ch < c; ++ch) {
    const Scalar* src = x.data.data() + ch * (x.h * x.w);
    Scalar* dst = y.data.data() + ch * (oh * ow);
    for (Index i = 0; i < oh; ++i) {
      for (Index j = 0; j < ow; ++j) {
        Index best_idx = (2 * i) * x.w + (2 * j);
        Scalar best = src[best_idx];
        // Fixed scan order; ties keep the first maximum.
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const Index idx = (2 * i + dy) * x.w + (2 * j + dx);
            if (src[idx] > best) {
              best = src[idx];
              best_idx = idx;
            }
          }
        dst[i * ow + j] = best;
        argmax[std::size_t(ch * oh * ow + i * ow + j)] = best_idx;
      }
    }
  }
  return y;
}

template <typename Scalar>
FeatureMapT<Scalar> maxpool2_backward(const FeatureMapT<Scalar>& dy,
                                      const std::vector<Index>& argmax, Index in_h,
                                      Index in_w) {
  FeatureMapT<Scalar> dx(dy.channels(), in_h, in_w);
  for (Index ch = 0; ch < dy.channels(); ++ch) {
    const Scalar* src = dy.data.data() + ch * (dy.h * dy.w);
    Scalar* dst = dx.data.data() + ch * (in_h * in_w);
    for (Index p = 0; p < dy.h * dy.w; ++p)
      dst[argmax[std::size_t(ch * dy.h * dy.w + p)]] += src[p];
  }
  return dx;
}

template <typename Scalar>
FeatureMapT<Scalar> upsample2_forward(const FeatureMapT<Scalar>& x) {
  FeatureMapT<Scalar> y(x.channels(), x.h * 2, x.w * 2);
  for (Index ch = 0; ch < x.channels(); ++ch) {
    const Scalar* src = x.data.data() + ch * (x.h * x.w);
    Scalar* dst = y.data.data() + ch * (y.h * y.w);
    for (Index i = 0; i < y.h; ++i)
      for (Index j = 0; j < y.w; ++j) dst[i * y.w + j] = src[(i / 2) * x.w + (j / 2)];
  }
  return y;
}

template <typename Scalar>
FeatureMapT<Scalar> upsample2_backward(const FeatureMapT<Scalar>& dy) {
  FeatureMapT<Scalar> dx(dy.channels(), dy.h / 2, dy.w / 2);
  for (Index ch = 0; ch < dy.channels(); ++ch) {
    const Scalar* src = dy.data.data() + ch * (dy.h * dy.w);
    Scalar* dst = dx.data.data() + ch * (dx.h * dx.w);
    for (Index i = 0; i < dy.h; ++i)
      for (Index j = 0; j < dy.w; ++j) dst[(i / 2) * dx.w + (j / 2)] += src[i * dy.w + j];
  }
  return dx;
}

template <typename Scalar>
FeatureMapT<Scalar> concat_channels(const FeatureMapT<Scalar>& a, const FeatureMapT<Scalar>& b) {
  FeatureMapT<Scalar> y(a.channels() + b.channels(), a.h, a.w);
  y.data.topRows(a.channels()) = a.data;
  y.data.bottomRows(b.channels()) = b.data;
  return y;
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar z) {
  if (z >= Scalar(0)) return Scalar(1) / (Scalar(1) + std::exp(-z));
  const Scalar e = std::exp(z);
  return e / (Scalar(1) + e);
}

}  // namespace detail

/// Deterministic initialization: fan-in-scaled uniform weights
/// U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases.
template <typename Scalar = double>
ModelParamsT<Scalar> init_params(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParamsT<Scalar> params;
  params.config = config;
  Rng rng(seed);

  auto add = [&](const std::string& name, Partition part, std::vector<Index> dims,
                 Index fan_in) {
    TensorT<Scalar> t;
    t.name = name;
    t.partition = part;
    t.dims = std::move(dims);
    Index n = 1;
    for (Index d : t.dims) n *= d;
    t.data.resize(n);
    if (name.ends_with(".bias")) {
      t.data.setZero();
    } else {
      const double bound = std::sqrt(6.0 / double(fan_in));
      for (Index i = 0; i < n; ++i) t.data[i] = Scalar(rng.uniform(-bound, bound));
    }
    params.tensors.push_back(std::move(t));
  };

  const int blocks = config.encoder_blocks;
  for (int b = 0; b < blocks; ++b) {
    const Index c_in = (b == 0) ? 3 : config.channels_out(b - 1);
    const Index c_out = config.channels_out(b);
    const std::string p = "enc" + std::to_string(b);
    add(p + ".conv1.weight", Partition::Encoder, {c_out, c_in, 3, 3}, c_in * 9);
    add(p + ".conv1.bias", Partition::Encoder, {c_out}, 1);
    add(p + ".conv2.weight", Partition::Encoder, {c_out, c_out, 3, 3}, c_out * 9);
    add(p + ".conv2.bias", Partition::Encoder, {c_out}, 1);
  }
  for (int b = blocks - 1; b >= 0; --b) {
    const Index c_up = (b == blocks - 1) ? config.channels_out(blocks - 1)
                                         : config.channels_out(b + 1);
    const Index c_skip = config.channels_out(b);
    const Index c_out = config.channels_out(b);
    const std::string p = "dec" + std::to_string(b);
    add(p + ".conv1.weight", Partition::Decoder, {c_out, c_up + c_skip, 3, 3},
        (c_up + c_skip) * 9);
    add(p + ".conv1.bias", Partition::Decoder, {c_out}, 1);
    add(p + ".conv2.weight", Partition::Decoder, {c_out, c_out, 3, 3}, c_out * 9);
    add(p + ".conv2.bias", Partition::Decoder, {c_out}, 1);
  }
  add("head.weight", Partition::Decoder, {1, config.channels_out(0), 1, 1},
      config.channels_out(0));
  add("head.bias", Partition::Decoder, {1}, 1);

  const Index feat = config.channels_out(blocks - 1) + config.channels_out(0);
  add("count.fc1.weight", Partition::CountHead, {config.count_head_hidden, feat}, feat);
  add("count.fc1.bias", Partition::CountHead, {config.count_head_hidden}, 1);
  add("count.fc2.weight", Partition::CountHead, {1, config.count_head_hidden},
      config.count_head_hidden);
  add("count.fc2.bias", Partition::CountHead, {1}, 1);
  return params;
}

namespace detail {

template <typename Scalar>
struct EncoderCache {
  FeatureMapT<Scalar> input;     // block input
  MatRM<Scalar> col1, col2;      // im2col caches for the two convolutions
  FeatureMapT<Scalar> pre1, pre2;  // pre-activation values
  FeatureMapT<Scalar> skip;      // post-activation output, the skip source
  std::vector<Index> pool_argmax;
  FeatureMapT<Scalar> pooled;
};

template <typename Scalar>
struct DecoderCache {
  FeatureMapT<Scalar> concat_in;
  MatRM<Scalar> col1, col2;
  FeatureMapT<Scalar> pre1, pre2;
  FeatureMapT<Scalar> out;
};

template <typename Scalar>
struct ForwardCache {
  std::vector<EncoderCache<Scalar>> enc;
  std::vector<DecoderCache<Scalar>> dec;  // indexed by block, dec[0] is the last executed
  FeatureMapT<Scalar> deepest;
  FeatureMapT<Scalar> head_pre;  // 1 x (h*w) pre-squash logits
  ProbMap<Scalar> prob_map;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> gap_features;  // deep then decoder pools
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> count_pre;     // hidden pre-activation
  Scalar count_raw = 0;
};

template <typename Scalar>
FeatureMapT<Scalar> image_to_feature(const RgbImageT<Scalar>& image) {
  FeatureMapT<Scalar> x(3, image.height(), image.width());
  for (int c = 0; c < 3; ++c) {
    const auto& ch = image.channel(c);
    std::copy(ch.data(), ch.data() + ch.size(), x.data.data() + c * ch.size());
  }
  return x;
}

template <typename Scalar>
void validate_forward_input(const ModelParamsT<Scalar>& params, const RgbImageT<Scalar>& image) {
  if (!image.consistent()) throw ShapeError("forward: inconsistent image channels");
  if (image.width() != image.height()) throw ShapeError("forward: input must be square");
  const NetConfig& cfg = params.config;
  if (cfg.input_size > 0 && image.width() != cfg.input_size)
    throw ShapeError("forward: image size does not match the configured input size");
  const Index stride = Index(1) << cfg.encoder_blocks;
  if (image.width() % stride != 0 || image.width() < stride)
    throw ShapeError("forward: image size not divisible by the pooling stride");
}

template <typename Scalar>
ForwardCache<Scalar> forward_cached(const ModelParamsT<Scalar>& params,
                                    const RgbImageT<Scalar>& image) {
  validate_forward_input(params, image);
  const NetConfig& cfg = params.config;
  const int blocks = cfg.encoder_blocks;

  ForwardCache<Scalar> cache;
  cache.enc.resize(std::size_t(blocks));
  cache.dec.resize(std::size_t(blocks));

  FeatureMapT<Scalar> x = image_to_feature(image);
  for (int b = 0; b < blocks; ++b) {
    auto& ec = cache.enc[std::size_t(b)];
    const std::string p = "enc" + std::to_string(b);
    ec.input = std::move(x);
    ec.pre1 = conv3x3_forward(ec.input, params.at(p + ".conv1.weight").data,
                              params.at(p + ".conv1.bias").data, &ec.col1);
    FeatureMapT<Scalar> a1 = ec.pre1;
    relu_inplace(a1);
    ec.pre2 = conv3x3_forward(a1, params.at(p + ".conv2.weight").data,
                              params.at(p + ".conv2.bias").data, &ec.col2);
    ec.skip = ec.pre2;
    relu_inplace(ec.skip);
    ec.pooled = maxpool2_forward(ec.skip, ec.pool_argmax);
    x = ec.pooled;
  }
  cache.deepest = x;

  FeatureMapT<Scalar> d = cache.deepest;
  for (int b = blocks - 1; b >= 0; --b) {
    auto& dc = cache.dec[std::size_t(b)];
    const std::string p = "dec" + std::to_string(b);
    dc.concat_in = concat_channels(upsample2_forward(d), cache.enc[std::size_t(b)].skip);
    dc.pre1 = conv3x3_forward(dc.concat_in, params.at(p + ".conv1.weight").data,
                              params.at(p + ".conv1.bias").data, &dc.col1);
    FeatureMapT<Scalar> a1 = dc.pre1;
    relu_inplace(a1);
    dc.pre2 = conv3x3_forward(a1, params.at(p + ".conv2.weight").data,
                              params.at(p + ".conv2.bias").data, &dc.col2);
    dc.out = dc.pre2;
    relu_inplace(dc.out);
    d = dc.out;
  }

  // Saliency head: 1x1 convolution + logistic squashing.
  const auto& hw = params.at("head.weight").data;
  const Scalar hb = params.at("head.bias").data[0];
  const FeatureMapT<Scalar>& last = cache.dec[0].out;
  cache.head_pre = FeatureMapT<Scalar>(1, last.h, last.w);
  cache.head_pre.data.noalias() =
      Eigen::Map<const MatRM<Scalar>>(hw.data(), 1, last.channels()) * last.data;
  cache.head_pre.data.array() += hb;
  cache.prob_map.resize(last.h, last.w);
  for (Index i = 0; i < last.h * last.w; ++i)
    cache.prob_map.data()[i] = stable_sigmoid(cache.head_pre.data.data()[i]);

  // Count head over pooled deep + decoder features.
  const Index c_deep = cache.deepest.channels(), c_dec = last.channels();
  cache.gap_features.resize(c_deep + c_dec);
  cache.gap_features.head(c_deep) = cache.deepest.data.rowwise().mean();
  cache.gap_features.tail(c_dec) = last.data.rowwise().mean();
  const auto& w1 = params.at("count.fc1.weight").data;
  const auto& b1 = params.at("count.fc1.bias").data;
  const auto& w2 = params.at("count.fc2.weight").data;
  const Scalar b2 = params.at("count.fc2.bias").data[0];
  const Index hidden = b1.size();
  cache.count_pre =
      Eigen::Map<const MatRM<Scalar>>(w1.data(), hidden, cache.gap_features.size()) *
          cache.gap_features +
      b1.matrix();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> hvec = cache.count_pre.cwiseMax(Scalar(0));
  cache.count_raw =
      (Eigen::Map<const MatRM<Scalar>>(w2.data(), 1, hidden) * hvec)(0, 0) + b2;
  return cache;
}

}  // namespace detail

template <typename Scalar>
ForwardOutputT<Scalar> forward(const ModelParamsT<Scalar>& params,
                               const RgbImageT<Scalar>& image) {
  auto cache = detail::forward_cached(params, image);
  ForwardOutputT<Scalar> out;
  out.prob_map = std::move(cache.prob_map);
  out.count_estimate = std::max(cache.count_raw, Scalar(0));
  return out;
}

namespace detail {

/// Reverse pass for one sample. map_grad is dLoss/d(prob_map); count_grad is
/// dLoss/d(count_raw). Parameter gradients are accumulated into grads.
template <typename Scalar>
void backward_into(const ModelParamsT<Scalar>& params, const ForwardCache<Scalar>& cache,
                   const Grid<Scalar>& map_grad, Scalar count_grad,
                   ModelParamsT<Scalar>& grads) {
  const NetConfig& cfg = params.config;
  const int blocks = cfg.encoder_blocks;
  const FeatureMapT<Scalar>& last = cache.dec[0].out;
  const Index hw_pixels = last.h * last.w;

  // Logistic head backward.
  FeatureMapT<Scalar> dhead(1, last.h, last.w);
  for (Index i = 0; i < hw_pixels; ++i) {
    const Scalar p = cache.prob_map.data()[i];
    dhead.data.data()[i] = map_grad.data()[i] * p * (Scalar(1) - p);
  }
  const auto& hwgt = params.at("head.weight").data;
  auto& dhw = grads.at("head.weight").data;
  Eigen::Map<MatRM<Scalar>>(dhw.data(), 1, last.channels()).noalias() +=
      dhead.data * last.data.transpose();
  grads.at("head.bias").data[0] += dhead.data.sum();
  FeatureMapT<Scalar> d_last(last.channels(), last.h, last.w);
  d_last.data.noalias() =
      Eigen::Map<const MatRM<Scalar>>(hwgt.data(), 1, last.channels()).transpose() *
      dhead.data;

  // Count head backward.
  const Index c_deep = cache.deepest.channels(), c_dec = last.channels();
  const Index hidden = params.at("count.fc1.bias").data.size();
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> hvec = cache.count_pre.cwiseMax(Scalar(0));
  const auto& w2 = params.at("count.fc2.weight").data;
  grads.at("count.fc2.weight").data.matrix() += count_grad * hvec;
  grads.at("count.fc2.bias").data[0] += count_grad;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> dh =
      count_grad * Eigen::Map<const MatRM<Scalar>>(w2.data(), 1, hidden).transpose();
  for (Index i = 0; i < hidden; ++i)
    if (cache.count_pre[i] <= Scalar(0)) dh[i] = 0;
  Eigen::Map<MatRM<Scalar>>(grads.at("count.fc1.weight").data.data(), hidden,
                            cache.gap_features.size())
      .noalias() += dh * cache.gap_features.transpose();
  grads.at("count.fc1.bias").data.matrix() += dh;
  const Eigen::Matrix<Scalar, Eigen::Dynamic, 1> du =
      Eigen::Map<const MatRM<Scalar>>(params.at("count.fc1.weight").data.data(), hidden,
                                      cache.gap_features.size())
          .transpose() *
      dh;

  // Pooled-feature gradients spread evenly over their pixels.
  FeatureMapT<Scalar> d_deepest(c_deep, cache.deepest.h, cache.deepest.w);
  const Index deep_pixels = cache.deepest.h * cache.deepest.w;
  for (Index c = 0; c < c_deep; ++c)
    d_deepest.data.row(c).array() += du[c] / Scalar(deep_pixels);
  for (Index c = 0; c < c_dec; ++c)
    d_last.data.row(c).array() += du[c_deep + c] / Scalar(hw_pixels);

  // Decoder blocks, reversed execution order (block 0 ran last). Gradients
  // flowing into the skip connections are kept for the encoder pass.
  std::vector<MatRM<Scalar>> skip_grads;
  skip_grads.resize(std::size_t(blocks));
  FeatureMapT<Scalar> d_out = std::move(d_last);
  for (int b = 0; b < blocks; ++b) {
    const auto& dc = cache.dec[std::size_t(b)];
    const std::string p = "dec" + std::to_string(b);
    FeatureMapT<Scalar> d2 = std::move(d_out);
    relu_backward_inplace(dc.pre2, d2);
    FeatureMapT<Scalar> da1(dc.pre1.channels(), dc.pre1.h, dc.pre1.w);
    conv3x3_backward(dc.col2, d2, params.at(p + ".conv2.weight").data, dc.pre1.channels(),
                     grads.at(p + ".conv2.weight").data, grads.at(p + ".conv2.bias").data,
                     &da1);
    relu_backward_inplace(dc.pre1, da1);
    FeatureMapT<Scalar> dconcat(dc.concat_in.channels(), dc.concat_in.h, dc.concat_in.w);
    conv3x3_backward(dc.col1, da1, params.at(p + ".conv1.weight").data,
                     dc.concat_in.channels(), grads.at(p + ".conv1.weight").data,
                     grads.at(p + ".conv1.bias").data, &dconcat);
    const Index c_skip = cache.enc[std::size_t(b)].skip.channels();
    const Index c_up = dc.concat_in.channels() - c_skip;
    FeatureMapT<Scalar> d_up(c_up, dconcat.h, dconcat.w);
    d_up.data = dconcat.data.topRows(c_up);
    skip_grads[std::size_t(b)] = dconcat.data.bottomRows(c_skip);
    d_out = upsample2_backward(d_up);
  }
  d_deepest.data += d_out.data;

  // Encoder blocks, deepest first.
  FeatureMapT<Scalar> d_pooled = std::move(d_deepest);
  for (int b = blocks - 1; b >= 0; --b) {
    const auto& ec = cache.enc[std::size_t(b)];
    const std::string p = "enc" + std::to_string(b);
    FeatureMapT<Scalar> d_skip = maxpool2_backward(d_pooled, ec.pool_argmax, ec.skip.h,
                                                   ec.skip.w);
    d_skip.data += skip_grads[std::size_t(b)];
    relu_backward_inplace(ec.pre2, d_skip);
    FeatureMapT<Scalar> da1(ec.pre1.channels(), ec.pre1.h, ec.pre1.w);
    conv3x3_backward(ec.col2, d_skip, params.at(p + ".conv2.weight").data,
                     ec.pre1.channels(), grads.at(p + ".conv2.weight").data,
                     grads.at(p + ".conv2.bias").data, &da1);
    relu_backward_inplace(ec.pre1, da1);
    if (b == 0) {
      conv3x3_backward(ec.col1, da1, params.at(p + ".conv1.weight").data,
                       ec.input.channels(), grads.at(p + ".conv1.weight").data,
                       grads.at(p + ".conv1.bias").data,
                       static_cast<FeatureMapT<Scalar>*>(nullptr));
    } else {
      FeatureMapT<Scalar> dprev(ec.input.channels(), ec.input.h, ec.input.w);
      conv3x3_backward(ec.col1, da1, params.at(p + ".conv1.weight").data,
                       ec.input.channels(), grads.at(p + ".conv1.weight").data,
                       grads.at(p + ".conv1.bias").data, &dprev);
      d_pooled = std::move(dprev);
    }
  }
}

template <typename Scalar>
Scalar smooth_l1(Scalar e, Scalar& derivative) {
  if (std::abs(e) < Scalar(1)) {
    derivative = e;
    return Scalar(0.5) * e * e;
  }
  derivative = e > 0 ? Scalar(1) : Scalar(-1);
  return std::abs(e) - Scalar(0.5);
}

}  // namespace detail

/// Mean over the batch of whd(prob_map, centers) + lambda_count *
/// smooth-L1(count - true count), with gradients for every parameter from
/// the reverse-mode chain rule. Batch items may be evaluated in parallel;
/// the reduction order is fixed, so results are bit-reproducible.
template <typename Scalar>
std::pair<Scalar, ModelParamsT<Scalar>> loss_and_grad(
    const ModelParamsT<Scalar>& params, std::span<const LabeledSampleT<Scalar>> batch,
    const WhdParamsT<Scalar>& whd_params, Scalar lambda_count) {
  detail::require(!batch.empty(), "loss_and_grad: empty batch");
  const std::size_t n = batch.size();
  std::vector<Scalar> losses(n);
  std::vector<ModelParamsT<Scalar>> grads(n);

  parallel_for(n, [&](std::size_t i) {
    const auto& sample = batch[i];
    auto cache = detail::forward_cached(params, sample.image);
    auto [whd_loss, map_grad] = whd_gradient(cache.prob_map, sample.centers, whd_params);
    Scalar count_deriv = 0;
    const Scalar count_loss =
        detail::smooth_l1(cache.count_raw - Scalar(sample.count), count_deriv);
    losses[i] = whd_loss + lambda_count * count_loss;
    grads[i] = params.zeros_like();
    detail::backward_into(params, cache, map_grad, lambda_count * count_deriv, grads[i]);
  });

  Scalar loss = 0;
  ModelParamsT<Scalar> total = params.zeros_like();
  for (std::size_t i = 0; i < n; ++i) {
    loss += losses[i];
    for (std::size_t t = 0; t < total.tensors.size(); ++t)
      total.tensors[t].data += grads[i].tensors[t].data;
  }
  loss /= Scalar(n);
  for (auto& t : total.tensors) t.data /= Scalar(n);
  return {loss, std::move(total)};
}

/// Copies every encoder-partition tensor from source into target. Decoder
/// and count-head tensors are untouched. The two encoder partitions must
/// agree exactly in names and shapes.
template <typename Scalar>
ModelParamsT<Scalar> transfer_encoder(const ModelParamsT<Scalar>& source,
                                      ModelParamsT<Scalar> target) {
  std::vector<const TensorT<Scalar>*> src_enc;
  for (const auto& t : source.tensors)
    if (t.partition == Partition::Encoder) src_enc.push_back(&t);
  std::size_t matched = 0;
  for (auto& t : target.tensors) {
    if (t.partition != Partition::Encoder) continue;
    const TensorT<Scalar>* found = nullptr;
    for (const auto* s : src_enc)
      if (s->name == t.name) {
        found = s;
        break;
      }
    if (!found || found->dims != t.dims)
      throw ShapeError("transfer_encoder: encoder partitions do not match at " + t.name);
    t.data = found->data;
    ++matched;
  }
  if (matched != src_enc.size())
    throw ShapeError("transfer_encoder: source has extra encoder tensors");
  return target;
}

}  // namespace hausloc
