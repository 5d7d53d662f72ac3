#pragma once

// Stage-one network: UNet-style CNN encoder, per-position token transformer
// at the 16x-downsampled bottleneck, CNN decoder with skip concatenation.

#include "rtp/autodiff/attention.hpp"
#include "rtp/autodiff/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace rtp {

struct DoseNetConfig {
  std::array<Index, 4> channels{16, 32, 64, 128};
  /// Output widths of the decoder blocks, indexed like `channels`. Wider than
  /// the encoder: at lr 1e-5 the decoder is what limits how sharp the
  /// prescription edge gets in a few hundred steps.
  std::array<Index, 4> decoder_channels{64, 128, 256, 256};
  Index in_channels = 6;
  Index depth = 4;
  Index heads = 4;
  Index mlp_ratio = 2;
  bool skips = true;
  bool transformer = true;  // false gives ablation variant A
  /// Grid the positional embedding is laid out for; other grids resample it.
  Index ref_size = 64;

  Index model_dim() const { return channels.back(); }
  void validate() const {
    for (std::size_t i = 0; i < 4; ++i) {
      if (channels[i] <= 0 || decoder_channels[i] <= 0) {
        throw std::invalid_argument("dose net: channel counts must be positive");
      }
    }
    if (heads <= 0 || model_dim() % heads != 0) {
      throw std::invalid_argument("dose net: model dim " + std::to_string(model_dim()) + " is not divisible by " +
                                  std::to_string(heads) + " heads");
    }
    if (depth < 0 || mlp_ratio <= 0 || in_channels <= 0) throw std::invalid_argument("dose net: bad sizes");
    if (ref_size % 16 != 0) throw std::invalid_argument("dose net: reference size must be divisible by 16");
  }
};

/// Row-stochastic [h*w, h0*w0] matrix resampling a token grid bilinearly
/// (half-pixel centers, edge clamped).
template <typename Scalar>
Tensor<Scalar> bilinear_resize_matrix(Index h0, Index w0, Index h, Index w) {
  Tensor<Scalar> m({h * w, h0 * w0});
  auto axis = [](Index out_i, Index n_in, Index n_out, Index& lo, Index& hi, double& t) {
    double src = (static_cast<double>(out_i) + 0.5) * static_cast<double>(n_in) / static_cast<double>(n_out) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
    lo = static_cast<Index>(std::floor(src));
    hi = std::min(lo + 1, n_in - 1);
    t = src - static_cast<double>(lo);
  };
  auto mat = m.matrix(h * w, h0 * w0);
  for (Index y = 0; y < h; ++y) {
    Index y0, y1;
    double ty;
    axis(y, h0, h, y0, y1, ty);
    for (Index x = 0; x < w; ++x) {
      Index x0, x1;
      double tx;
      axis(x, w0, w, x0, x1, tx);
      const Index r = y * w + x;
      mat(r, y0 * w0 + x0) += static_cast<Scalar>((1 - ty) * (1 - tx));
      mat(r, y0 * w0 + x1) += static_cast<Scalar>((1 - ty) * tx);
      mat(r, y1 * w0 + x0) += static_cast<Scalar>(ty * (1 - tx));
      mat(r, y1 * w0 + x1) += static_cast<Scalar>(ty * tx);
    }
  }
  return m;
}

/// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
template <typename Scalar>
struct TransformerBlock {
  nn::LayerNorm<Scalar> ln1, ln2;
  nn::Linear<Scalar> wq, wk, wv, wo, fc1, fc2;
  Index heads = 1;

  TransformerBlock() = default;
  TransformerBlock(nn::ParameterStore<Scalar>& store, const std::string& name, Index dim, Index heads_,
                   Index mlp_ratio, Rng& rng)
      : heads(heads_) {
    ln1 = nn::LayerNorm<Scalar>(store, name + ".ln1", dim);
    wq = nn::Linear<Scalar>(store, name + ".attn.q", dim, dim, rng);
    wk = nn::Linear<Scalar>(store, name + ".attn.k", dim, dim, rng);
    wv = nn::Linear<Scalar>(store, name + ".attn.v", dim, dim, rng);
    wo = nn::Linear<Scalar>(store, name + ".attn.out", dim, dim, rng);
    ln2 = nn::LayerNorm<Scalar>(store, name + ".ln2", dim);
    fc1 = nn::Linear<Scalar>(store, name + ".mlp.fc1", dim, dim * mlp_ratio, rng);
    fc2 = nn::Linear<Scalar>(store, name + ".mlp.fc2", dim * mlp_ratio, dim, rng);
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    auto h = ln1(tape, x);
    auto a = ops::attention(tape, wq(tape, h), wk(tape, h), wv(tape, h), heads);
    auto y = ops::add(tape, x, wo(tape, a));
    auto m = fc2(tape, ops::gelu(tape, fc1(tape, ln2(tape, y))));
    return ops::add(tape, y, m);
  }
};

template <typename Scalar>
class DoseNet {
 public:
  using T = Tensor<Scalar>;

  struct Encoded {
    T features;
    std::vector<T> skips;  // pre-pool outputs, shallowest first
  };

  DoseNet(const DoseNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng = make_rng(seed, "init/dose-net");
    Index in = cfg_.in_channels;
    for (std::size_t b = 0; b < 4; ++b) {
      const Index c = cfg_.channels[b];
      const std::string name = "enc" + std::to_string(b);
      enc_[b][0] = nn::ConvBnRelu<Scalar>(store_, name + ".0", in, c, rng);
      enc_[b][1] = nn::ConvBnRelu<Scalar>(store_, name + ".1", c, c, rng);
      in = c;
    }
    if (cfg_.transformer) {
      const Index g = cfg_.ref_size / 16;
      pos_ = store_.add("pos_embed", nn::normal_init<Scalar>({g * g, cfg_.model_dim()}, 0.02, rng));
      for (Index i = 0; i < cfg_.depth; ++i) {
        blocks_.emplace_back(store_, "block" + std::to_string(i), cfg_.model_dim(), cfg_.heads, cfg_.mlp_ratio, rng);
      }
    }
    for (int b = 3; b >= 0; --b) {
      const Index c = cfg_.decoder_channels[static_cast<std::size_t>(b)];
      const Index cin = in + (cfg_.skips ? cfg_.channels[static_cast<std::size_t>(b)] : 0);
      const std::string name = "dec" + std::to_string(b);
      dec_[static_cast<std::size_t>(b)][0] = nn::ConvBnRelu<Scalar>(store_, name + ".0", cin, c, rng);
      dec_[static_cast<std::size_t>(b)][1] = nn::ConvBnRelu<Scalar>(store_, name + ".1", c, c, rng);
      in = c;
    }
    head_w_ = store_.add("head.weight", nn::uniform_init<Scalar>({1, in, 1, 1}, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    // A slightly positive bias keeps the output ReLU alive at initialization.
    head_b_ = store_.add("head.bias", T::full({1}, Scalar(0.1)));
  }

  const DoseNetConfig& config() const { return cfg_; }
  nn::ParameterStore<Scalar>& params() { return store_; }
  const nn::ParameterStore<Scalar>& params() const { return store_; }

  Encoded encode(Tape<Scalar>& tape, const T& x, bool training) {
    check_input(x);
    Encoded e;
    T h = x;
    for (auto& block : enc_) {
      h = block[1](tape, block[0](tape, h, training), training);
      e.skips.push_back(h);
      h = ops::max_pool2d(tape, h);
    }
    e.features = h;
    return e;
  }

  /// [N, C, h, w] -> [N, h*w, C], one token per bottleneck position.
  static T patchify(Tape<Scalar>& tape, const T& f) { return ops::channels_to_tokens(tape, f); }
  static T unpatchify(Tape<Scalar>& tape, const T& tokens, Index h, Index w) {
    return ops::tokens_to_channels(tape, tokens, h, w);
  }

  /// Adds the positional embedding, resampled when the grid is not the
  /// reference one.
  T add_position(Tape<Scalar>& tape, const T& tokens, Index h, Index w) const {
    const Index g = cfg_.ref_size / 16;
    if (h == g && w == g) return ops::add(tape, tokens, pos_);
    return ops::add(tape, tokens, ops::matmul(tape, bilinear_resize_matrix<Scalar>(g, g, h, w), pos_));
  }

  T transform(Tape<Scalar>& tape, const T& tokens) const {
    T t = tokens;
    for (const auto& b : blocks_) t = b(tape, t);
    return t;
  }

  T decode(Tape<Scalar>& tape, const T& f_dec, const std::vector<T>& skips, bool training) {
    if (skips.size() != 4) throw ShapeError("dose net decoder: expected 4 skip features");
    T h = f_dec;
    for (int b = 3; b >= 0; --b) {
      h = ops::upsample_nearest2d(tape, h);
      const auto& s = skips[static_cast<std::size_t>(b)];
      if (cfg_.skips) {
        if (s.dim(-1) != h.dim(-1) || s.dim(-2) != h.dim(-2) || s.dim(0) != h.dim(0)) {
          throw ShapeError("dose net decoder: skip " + shape_str(s.shape()) + " does not match " +
                           shape_str(h.shape()));
        }
        h = ops::concat(tape, {h, s}, 1);
      }
      auto& block = dec_[static_cast<std::size_t>(b)];
      h = block[1](tape, block[0](tape, h, training), training);
    }
    return ops::relu(tape, ops::conv2d(tape, h, head_w_, head_b_, 0));
  }

  /// x: [N, 6, H, W] in channel order ct, ptv, bladder, st, fhl, fhr.
  /// Returns [N, 1, H, W] dose in units of the prescription dose.
  T forward(Tape<Scalar>& tape, const T& x, bool training) {
    auto e = encode(tape, x, training);
    T f = e.features;
    if (cfg_.transformer) {
      const Index h = f.dim(2), w = f.dim(3);
      auto tokens = add_position(tape, patchify(tape, f), h, w);
      f = unpatchify(tape, transform(tape, tokens), h, w);
    }
    return decode(tape, f, e.skips, training);
  }

 private:
  void check_input(const T& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
      throw ShapeError("dose net: expected input [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                       shape_str(x.shape()));
    }
    if (x.dim(2) % 16 != 0 || x.dim(3) % 16 != 0) {
      throw ShapeError("dose net: spatial dims must be divisible by 16, got " + shape_str(x.shape()));
    }
  }

  DoseNetConfig cfg_;
  nn::ParameterStore<Scalar> store_;
  std::array<std::array<nn::ConvBnRelu<Scalar>, 2>, 4> enc_;
  std::array<std::array<nn::ConvBnRelu<Scalar>, 2>, 4> dec_;
  std::vector<TransformerBlock<Scalar>> blocks_;
  T pos_, head_w_, head_b_;
};

}  // namespace rtp
