#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "aranet/ops.hpp"
#include "aranet/tensor.hpp"
#include "aranet/util.hpp"

// Dose prediction network pair: a U-shaped generator with gated skip
// connections and coarse auxiliary heads, plus a conditional discriminator
// that scores dose maps against their input context. Both are templated on
// the scalar type so the full graphs can be checked against finite
// differences in double.

namespace aranet {

struct ArchConfig {
  std::int64_t in_channels = 7;
  std::int64_t base_channels = 16;
  std::int64_t depth = 4;
  std::int64_t ds_scales = 3;
  bool attention_enabled = true;
  bool residual_enabled = true;
  std::int64_t input_size = 64;

  void validate() const {
    if (in_channels < 1) throw std::invalid_argument("arch: in_channels must be >= 1");
    if (base_channels < 1) throw std::invalid_argument("arch: base_channels must be >= 1");
    if (depth < 1) throw std::invalid_argument("arch: depth must be >= 1");
    if (ds_scales < 1 || ds_scales > depth) {
      throw std::invalid_argument("arch: ds_scales must be in [1, depth], got " +
                                  std::to_string(ds_scales) + " with depth " + std::to_string(depth));
    }
    const std::int64_t div = std::int64_t(1) << depth;
    if (input_size < div || input_size % div != 0) {
      throw std::invalid_argument("arch: input_size " + std::to_string(input_size) +
                                  " must be a positive multiple of 2^depth = " + std::to_string(div));
    }
  }
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
struct Conv2dLayer {
  Tensor<T> w, b;
  std::int64_t stride = 1;
  std::int64_t pad = 0;

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

namespace detail {

// Fan-in scaled uniform init for rectifier nets; biases start at zero.
template <typename T>
Conv2dLayer<T> make_conv(std::int64_t out_ch, std::int64_t in_ch, std::int64_t k, std::int64_t stride,
                         std::int64_t pad, Prng& rng) {
  Conv2dLayer<T> layer;
  layer.w = Tensor<T>({out_ch, in_ch, k, k}, true);
  layer.b = Tensor<T>({out_ch}, true);
  layer.stride = stride;
  layer.pad = pad;
  const double bound = std::sqrt(6.0 / static_cast<double>(in_ch * k * k));
  for (auto& v : layer.w.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return layer;
}

template <typename T>
void register_conv(std::vector<NamedParam<T>>& out, const std::string& name, const Conv2dLayer<T>& c) {
  out.push_back({name + ".w", c.w});
  out.push_back({name + ".b", c.b});
}

}  // namespace detail

// Two stacked 3x3 convs; with the skip enabled the input is added back before
// the closing activation, so zeroed weights reduce the block to the identity
// on non-negative inputs.
template <typename T>
Tensor<T> residual_block(const Tensor<T>& x, const Conv2dLayer<T>& c1, const Conv2dLayer<T>& c2,
                         T slope, bool skip) {
  Tensor<T> h = c2(leaky_relu(c1(x), slope));
  if (skip) {
    if (x.dim(1) != h.dim(1)) {
      throw std::invalid_argument("residual_block: skip needs matching channels, got " +
                                  std::to_string(x.dim(1)) + " vs " + std::to_string(h.dim(1)));
    }
    h = add(x, h);
  }
  return leaky_relu(h, slope);
}

template <typename T>
struct AttentionGateParams {
  Conv2dLayer<T> d_up;   // channel-halving conv after nearest upsampling
  Conv2dLayer<T> attn1;  // 2C -> C over the concatenated features
  Conv2dLayer<T> attn2;  // C -> C, squashed to the attention map
};

// Gates an encoder skip with a mask derived from the coarser decoder feature.
// Returns the gated feature and the mask itself; with zeroed gate convs the
// mask is uniformly 0.5.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> attention_gate(const Tensor<T>& encoder_feat, const Tensor<T>& decoder_feat,
                                               const AttentionGateParams<T>& gate, T slope) {
  if (encoder_feat.rank() != 4 || decoder_feat.rank() != 4) {
    throw std::invalid_argument("attention_gate: features must be rank 4");
  }
  if (encoder_feat.dim(0) != decoder_feat.dim(0)) {
    throw std::invalid_argument("attention_gate: batch extents differ on axis 0");
  }
  if (encoder_feat.dim(2) != 2 * decoder_feat.dim(2) || encoder_feat.dim(3) != 2 * decoder_feat.dim(3)) {
    throw std::invalid_argument("attention_gate: decoder feature must sit one scale below the encoder feature, got " +
                                shape_str(decoder_feat.shape()) + " against " + shape_str(encoder_feat.shape()));
  }
  Tensor<T> up = gate.d_up(upsample_nearest2x(decoder_feat));
  if (up.dim(1) != encoder_feat.dim(1)) {
    throw std::invalid_argument("attention_gate: upsampled decoder channels " + std::to_string(up.dim(1)) +
                                " do not match encoder channels " + std::to_string(encoder_feat.dim(1)));
  }
  Tensor<T> cat = concat_channels(encoder_feat, up);
  Tensor<T> attn = sigmoid(gate.attn2(leaky_relu(gate.attn1(cat), slope)));
  return {mul(encoder_feat, attn), attn};
}

template <typename T>
class PreNet {
public:
  struct Output {
    Tensor<T> final;
    // heads[k] carries the auxiliary prediction at spatial scale S / 2^(k+1)
    std::vector<Tensor<T>> heads;
    // one map per gated decoder level, deepest first; empty when gating is off
    std::vector<Tensor<T>> attention_maps;
  };

  PreNet(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Prng rng(seed);
    const std::int64_t B = cfg_.base_channels;

    stem_ = detail::make_conv<T>(B, cfg_.in_channels, 3, 1, 1, rng);
    detail::register_conv(params_, "stem", stem_);

    for (std::int64_t l = 0; l < cfg_.depth; ++l) {
      const std::int64_t c = B << l;
      EncLevel level;
      level.c1 = detail::make_conv<T>(c, c, 3, 1, 1, rng);
      level.c2 = detail::make_conv<T>(c, c, 3, 1, 1, rng);
      level.down = detail::make_conv<T>(2 * c, c, 2, 2, 0, rng);
      detail::register_conv(params_, "enc" + std::to_string(l) + ".c1", level.c1);
      detail::register_conv(params_, "enc" + std::to_string(l) + ".c2", level.c2);
      detail::register_conv(params_, "down" + std::to_string(l), level.down);
      enc_.push_back(level);
    }

    for (std::int64_t l = cfg_.depth - 1; l >= 0; --l) {
      const std::int64_t c = B << l;
      DecLevel level;
      const std::string prefix = "dec" + std::to_string(l);
      level.up = detail::make_conv<T>(c, 2 * c, 3, 1, 1, rng);
      detail::register_conv(params_, prefix + ".up", level.up);
      if (cfg_.attention_enabled) {
        level.attn1 = detail::make_conv<T>(c, 2 * c, 3, 1, 1, rng);
        level.attn2 = detail::make_conv<T>(c, c, 3, 1, 1, rng);
        detail::register_conv(params_, prefix + ".attn1", level.attn1);
        detail::register_conv(params_, prefix + ".attn2", level.attn2);
        level.c1 = detail::make_conv<T>(c, c, 3, 1, 1, rng);
      } else if (cfg_.residual_enabled) {
        level.fuse = detail::make_conv<T>(c, 2 * c, 3, 1, 1, rng);
        detail::register_conv(params_, prefix + ".fuse", level.fuse);
        level.c1 = detail::make_conv<T>(c, c, 3, 1, 1, rng);
      } else {
        // without the skip the first block conv folds the concat back to C
        level.c1 = detail::make_conv<T>(c, 2 * c, 3, 1, 1, rng);
      }
      level.c2 = detail::make_conv<T>(c, c, 3, 1, 1, rng);
      detail::register_conv(params_, prefix + ".c1", level.c1);
      detail::register_conv(params_, prefix + ".c2", level.c2);
      dec_.push_back(level);
    }

    for (std::int64_t i = 1; i <= cfg_.ds_scales; ++i) {
      Conv2dLayer<T> head = detail::make_conv<T>(1, B << i, 1, 1, 0, rng);
      detail::register_conv(params_, "head" + std::to_string(i), head);
      heads_.push_back(head);
    }

    final_ = detail::make_conv<T>(1, B, 1, 1, 0, rng);
    detail::register_conv(params_, "final", final_);
  }

  Output forward(const Tensor<T>& x) const {
    if (!x.defined() || x.rank() != 4) {
      throw std::invalid_argument("prenet: input must be rank 4 [N,C,H,W]");
    }
    if (x.dim(1) != cfg_.in_channels) {
      throw std::invalid_argument("prenet: input channel axis 1 = " + std::to_string(x.dim(1)) +
                                  ", expected " + std::to_string(cfg_.in_channels));
    }
    const std::int64_t div = std::int64_t(1) << cfg_.depth;
    if (x.dim(2) % div != 0 || x.dim(3) % div != 0 || x.dim(2) < div || x.dim(3) < div) {
      throw std::invalid_argument("prenet: spatial extents " + shape_str(x.shape()) +
                                  " must be positive multiples of 2^depth = " + std::to_string(div));
    }
    const T slope = T(0.01);

    std::vector<Tensor<T>> skips;
    skips.reserve(static_cast<std::size_t>(cfg_.depth));
    Tensor<T> cur = stem_(x);
    for (const EncLevel& level : enc_) {
      Tensor<T> refined = residual_block(cur, level.c1, level.c2, slope, cfg_.residual_enabled);
      skips.push_back(refined);
      cur = level.down(refined);
    }

    Output out;
    // feature_at[i] holds the representation at scale S / 2^i once available
    std::vector<Tensor<T>> feature_at(static_cast<std::size_t>(cfg_.depth) + 1);
    feature_at[static_cast<std::size_t>(cfg_.depth)] = cur;

    for (std::size_t di = 0; di < dec_.size(); ++di) {
      const std::int64_t l = cfg_.depth - 1 - static_cast<std::int64_t>(di);
      const DecLevel& level = dec_[di];
      const Tensor<T>& skip = skips[static_cast<std::size_t>(l)];
      Tensor<T> fused;
      if (cfg_.attention_enabled) {
        AttentionGateParams<T> gate{level.up, level.attn1, level.attn2};
        auto [gated, attn] = attention_gate(skip, cur, gate, slope);
        out.attention_maps.push_back(attn);
        fused = gated;
      } else {
        Tensor<T> up = level.up(upsample_nearest2x(cur));
        fused = concat_channels(skip, up);
        if (cfg_.residual_enabled) fused = level.fuse(fused);
      }
      cur = residual_block(fused, level.c1, level.c2, slope, cfg_.residual_enabled);
      feature_at[static_cast<std::size_t>(l)] = cur;
    }

    for (std::int64_t i = 1; i <= cfg_.ds_scales; ++i) {
      out.heads.push_back(heads_[static_cast<std::size_t>(i - 1)](feature_at[static_cast<std::size_t>(i)]));
    }
    out.final = final_(cur);
    return out;
  }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  const ArchConfig& config() const { return cfg_; }

private:
  struct EncLevel {
    Conv2dLayer<T> c1, c2, down;
  };
  struct DecLevel {
    Conv2dLayer<T> up, attn1, attn2, fuse, c1, c2;
  };

  ArchConfig cfg_;
  Conv2dLayer<T> stem_;
  std::vector<EncLevel> enc_;
  std::vector<DecLevel> dec_;
  std::vector<Conv2dLayer<T>> heads_;
  Conv2dLayer<T> final_;
  std::vector<NamedParam<T>> params_;
};

// Conditional patch critic: the candidate dose map is stacked onto its input
// context, squeezed through four stride-2 convs, pooled, and mapped to a
// per-item score in (0,1).
template <typename T>
class AdvNet {
public:
  static constexpr std::int64_t kLevels = 4;

  AdvNet(const ArchConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Prng rng(seed);
    std::int64_t in_ch = cfg_.in_channels + 1;
    for (std::int64_t l = 0; l < kLevels; ++l) {
      const std::int64_t out_ch = cfg_.base_channels << l;
      Conv2dLayer<T> conv = detail::make_conv<T>(out_ch, in_ch, 4, 2, 1, rng);
      detail::register_conv(params_, "conv" + std::to_string(l), conv);
      convs_.push_back(conv);
      in_ch = out_ch;
    }
    fc_w_ = Tensor<T>::scalar(T(1), true);
    fc_b_ = Tensor<T>::scalar(T(0), true);
    params_.push_back({"fc.w", fc_w_});
    params_.push_back({"fc.b", fc_b_});
  }

  Tensor<T> forward(const Tensor<T>& candidate, const Tensor<T>& condition) const {
    if (!candidate.defined() || candidate.rank() != 4 || candidate.dim(1) != 1) {
      throw std::invalid_argument("advnet: candidate must be rank 4 with one channel");
    }
    if (!condition.defined() || condition.rank() != 4 || condition.dim(1) != cfg_.in_channels) {
      throw std::invalid_argument("advnet: condition channel axis 1 must be " +
                                  std::to_string(cfg_.in_channels));
    }
    if (candidate.dim(0) != condition.dim(0) || candidate.dim(2) != condition.dim(2) ||
        candidate.dim(3) != condition.dim(3)) {
      throw std::invalid_argument("advnet: candidate and condition extents differ: " +
                                  shape_str(candidate.shape()) + " vs " + shape_str(condition.shape()));
    }
    const std::int64_t div = std::int64_t(1) << kLevels;
    if (candidate.dim(2) % div != 0 || candidate.dim(3) % div != 0) {
      throw std::invalid_argument("advnet: spatial extents must be multiples of " + std::to_string(div));
    }
    const T slope = T(0.2);
    Tensor<T> cur = concat_channels(candidate, condition);
    for (const auto& conv : convs_) cur = leaky_relu(conv(cur), slope);
    return sigmoid(scalar_affine(mean_per_sample(cur), fc_w_, fc_b_));
  }

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

private:
  ArchConfig cfg_;
  std::vector<Conv2dLayer<T>> convs_;
  Tensor<T> fc_w_, fc_b_;
  std::vector<NamedParam<T>> params_;
};

}  // namespace aranet
