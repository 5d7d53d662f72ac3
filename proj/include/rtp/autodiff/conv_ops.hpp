#pragma once

// Spatial primitives over [N, C, H, W] (or unbatched [C, H, W]) tensors.

#include "rtp/autodiff/ops.hpp"

#include <cmath>
#include <vector>

namespace rtp::ops {

namespace detail {

struct Spatial {
  Index batch, channels, height, width;
  bool batched;
};

inline Spatial spatial_dims(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw ShapeError(std::string(op) + ": expected [N,C,H,W] or [C,H,W], got " + shape_str(s));
}

inline Shape spatial_shape(const Spatial& d, Index c, Index h, Index w) {
  return d.batched ? Shape{d.batch, c, h, w} : Shape{c, h, w};
}

/// Unrolls 3x3-style patches of one image into a [C*k*k, Ho*Wo] matrix.
template <typename Scalar>
void im2col(const Scalar* x, Index c, Index h, Index w, Index k, Index pad, Index stride, Index ho, Index wo,
            Scalar* cols) {
  for (Index ci = 0; ci < c; ++ci) {
    const Scalar* plane = x + ci * h * w;
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        Scalar* row = cols + ((ci * k + ki) * k + kj) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + ki - pad;
          Scalar* dst = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, Scalar(0));
            continue;
          }
          const Scalar* src = plane + iy * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride + kj - pad;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* cols, Index c, Index h, Index w, Index k, Index pad, Index stride, Index ho, Index wo,
            Scalar* x) {
  for (Index ci = 0; ci < c; ++ci) {
    Scalar* plane = x + ci * h * w;
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const Scalar* row = cols + ((ci * k + ki) * k + kj) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= h) continue;
          const Scalar* src = row + oy * wo;
          Scalar* dst = plane + iy * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip) with zero padding.
/// `weight` is [C_out, C_in, k, k]; `bias` may be undefined.
template <typename Scalar>
Tensor<Scalar> conv2d(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias, Index pad, Index stride = 1) {
  const auto d = detail::spatial_dims(x.shape(), "conv2d");
  if (weight.rank() != 4 || weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: weight must be [C_out,C_in,k,k], got " + shape_str(weight.shape()));
  }
  if (weight.dim(1) != d.channels) {
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " weight " +
                     shape_str(weight.shape()));
  }
  const Index co = weight.dim(0), k = weight.dim(2);
  if (bias.defined() && bias.size() != co) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(co) +
                     " output channels");
  }
  if (stride < 1 || pad < 0 || d.height + 2 * pad < k || d.width + 2 * pad < k) {
    throw ShapeError("conv2d: input " + shape_str(x.shape()) + " too small for kernel " + std::to_string(k));
  }
  const Index ho = (d.height + 2 * pad - k) / stride + 1;
  const Index wo = (d.width + 2 * pad - k) / stride + 1;
  const Index ckk = d.channels * k * k, hw_in = d.height * d.width, hw_out = ho * wo;
  const bool direct = (k == 1 && pad == 0 && stride == 1);

  Tensor<Scalar> out(detail::spatial_shape(d, co, ho, wo));
  RowMatrix<Scalar> cols;
  if (!direct) cols.resize(ckk, hw_out);
  auto wmat = weight.matrix(co, ckk);
  for (Index n = 0; n < d.batch; ++n) {
    const Scalar* xn = x.data() + n * d.channels * hw_in;
    MatrixMap<Scalar> yn(out.data() + n * co * hw_out, co, hw_out);
    if (direct) {
      yn.noalias() = wmat * ConstMatrixMap<Scalar>(xn, ckk, hw_out);
    } else {
      detail::im2col(xn, d.channels, d.height, d.width, k, pad, stride, ho, wo, cols.data());
      yn.noalias() = wmat * cols;
    }
    if (bias.defined()) yn.colwise() += bias.values();
  }

  if (tape.needs_grad(x, weight, bias)) {
    tape.record({x, weight, bias}, out,
                [x, weight, bias, out, d, co, k, pad, stride, ho, wo, ckk, hw_in, hw_out, direct]() mutable {
                  RowMatrix<Scalar> cols_b;
                  RowMatrix<Scalar> dcols;
                  if (!direct) cols_b.resize(ckk, hw_out);
                  auto wm = weight.matrix(co, ckk);
                  for (Index n = 0; n < d.batch; ++n) {
                    const Scalar* xn = x.data() + n * d.channels * hw_in;
                    ConstMatrixMap<Scalar> gy(out.grad().data() + n * co * hw_out, co, hw_out);
                    if (bias.defined() && bias.requires_grad()) bias.grad_mut() += gy.rowwise().sum();
                    if (weight.requires_grad()) {
                      MatrixMap<Scalar> gw(weight.grad_mut().data(), co, ckk);
                      if (direct) {
                        gw.noalias() += gy * ConstMatrixMap<Scalar>(xn, ckk, hw_out).transpose();
                      } else {
                        detail::im2col(xn, d.channels, d.height, d.width, k, pad, stride, ho, wo, cols_b.data());
                        gw.noalias() += gy * cols_b.transpose();
                      }
                    }
                    if (x.requires_grad()) {
                      Scalar* gx = x.grad_mut().data() + n * d.channels * hw_in;
                      if (direct) {
                        MatrixMap<Scalar>(gx, ckk, hw_out).noalias() += wm.transpose() * gy;
                      } else {
                        dcols.noalias() = wm.transpose() * gy;
                        detail::col2im(dcols.data(), d.channels, d.height, d.width, k, pad, stride, ho, wo, gx);
                      }
                    }
                  }
                });
  }
  return out;
}

/// Per-channel batch normalization. In training mode statistics are taken over
/// batch and spatial positions (biased variance) and folded into the running
/// buffers with `momentum`; in eval mode the running buffers are used.
template <typename Scalar>
Tensor<Scalar> batch_norm2d(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                            const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var,
                            bool training, Scalar momentum = Scalar(0.1), Scalar eps = Scalar(1e-5)) {
  const auto d = detail::spatial_dims(x.shape(), "batch_norm2d");
  const Index c = d.channels, hw = d.height * d.width;
  if (gamma.size() != c || beta.size() != c || running_mean.size() != c || running_var.size() != c) {
    throw ShapeError("batch_norm2d: parameters do not match " + std::to_string(c) + " channels");
  }
  const Scalar count = static_cast<Scalar>(d.batch * hw);
  Vector<Scalar> mu(c), inv_std(c);
  if (training) {
    mu.setZero();
    Vector<Scalar> var = Vector<Scalar>::Zero(c);
    for (Index n = 0; n < d.batch; ++n) {
      auto xn = x.matrix(d.batch * c, hw).middleRows(n * c, c);
      mu += xn.rowwise().sum();
    }
    mu /= count;
    for (Index n = 0; n < d.batch; ++n) {
      auto xn = x.matrix(d.batch * c, hw).middleRows(n * c, c);
      var += (xn.colwise() - mu).array().square().rowwise().sum().matrix();
    }
    var /= count;
    inv_std = (var.array() + eps).rsqrt().matrix();
    running_mean.values() = (Scalar(1) - momentum) * running_mean.values() + momentum * mu;
    running_var.values() = (Scalar(1) - momentum) * running_var.values() + momentum * var;
  } else {
    mu = running_mean.values();
    inv_std = (running_var.values().array() + eps).rsqrt().matrix();
  }

  Tensor<Scalar> out(x.shape());
  const Vector<Scalar> scale_c = gamma.values().cwiseProduct(inv_std);
  const Vector<Scalar> shift_c = beta.values() - scale_c.cwiseProduct(mu);
  for (Index n = 0; n < d.batch; ++n) {
    auto xn = x.matrix(d.batch * c, hw).middleRows(n * c, c);
    auto yn = out.matrix(d.batch * c, hw).middleRows(n * c, c);
    yn = (xn.array().colwise() * scale_c.array()).colwise() + shift_c.array();
  }

  if (tape.needs_grad(x, gamma, beta)) {
    tape.record({x, gamma, beta}, out, [x, gamma, beta, out, d, c, hw, count, mu, inv_std, training]() mutable {
      ConstMatrixMap<Scalar> g_all(out.grad().data(), d.batch * c, hw);
      auto x_all = x.matrix(d.batch * c, hw);
      Vector<Scalar> sum_g = Vector<Scalar>::Zero(c), sum_gx = Vector<Scalar>::Zero(c);
      for (Index n = 0; n < d.batch; ++n) {
        auto gn = g_all.middleRows(n * c, c);
        auto xhat = ((x_all.middleRows(n * c, c).colwise() - mu).array().colwise() * inv_std.array());
        sum_g += gn.rowwise().sum();
        sum_gx += (gn.array() * xhat).rowwise().sum().matrix();
      }
      if (gamma.requires_grad()) gamma.grad_mut() += sum_gx;
      if (beta.requires_grad()) beta.grad_mut() += sum_g;
      if (!x.requires_grad()) return;
      MatrixMap<Scalar> gx_all(x.grad_mut().data(), d.batch * c, hw);
      const Vector<Scalar> k = gamma.values().cwiseProduct(inv_std);
      for (Index n = 0; n < d.batch; ++n) {
        auto gn = g_all.middleRows(n * c, c);
        auto gx = gx_all.middleRows(n * c, c);
        if (!training) {
          gx.array() += gn.array().colwise() * k.array();
          continue;
        }
        const auto xhat = ((x_all.middleRows(n * c, c).colwise() - mu).array().colwise() * inv_std.array()).eval();
        const Vector<Scalar> mean_g = sum_g / count;
        const Vector<Scalar> mean_gx = sum_gx / count;
        gx.array() += ((gn.array().colwise() - mean_g.array()) - xhat.colwise() * mean_gx.array()).colwise() *
                      k.array();
      }
    });
  }
  return out;
}

/// Non-overlapping max pooling with a square window.
template <typename Scalar>
Tensor<Scalar> max_pool2d(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index window = 2) {
  const auto d = detail::spatial_dims(x.shape(), "max_pool2d");
  if (d.height % window != 0 || d.width % window != 0) {
    throw ShapeError("max_pool2d: spatial dims of " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(window));
  }
  const Index ho = d.height / window, wo = d.width / window;
  Tensor<Scalar> out(detail::spatial_shape(d, d.channels, ho, wo));
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const Index planes = d.batch * d.channels;
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * d.height * d.width;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) {
        Index best = (oy * window) * d.width + ox * window;
        for (Index i = 0; i < window; ++i) {
          for (Index j = 0; j < window; ++j) {
            const Index idx = (oy * window + i) * d.width + ox * window + j;
            if (src[idx] > src[best]) best = idx;
          }
        }
        const Index o = (p * ho + oy) * wo + ox;
        out.data()[o] = src[best];
        argmax[static_cast<std::size_t>(o)] = p * d.height * d.width + best;
      }
    }
  }
  if (tape.needs_grad(x)) {
    tape.record({x}, out, [x, out, argmax = std::move(argmax)]() mutable {
      if (!x.requires_grad()) return;
      auto& gx = x.grad_mut();
      const auto& g = out.grad();
      for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += g[static_cast<Index>(o)];
    });
  }
  return out;
}

/// Nearest-neighbour upsampling by an integer factor.
template <typename Scalar>
Tensor<Scalar> upsample_nearest2d(Tape<Scalar>& tape, const Tensor<Scalar>& x, Index factor = 2) {
  const auto d = detail::spatial_dims(x.shape(), "upsample_nearest2d");
  const Index ho = d.height * factor, wo = d.width * factor;
  Tensor<Scalar> out(detail::spatial_shape(d, d.channels, ho, wo));
  const Index planes = d.batch * d.channels;
  for (Index p = 0; p < planes; ++p) {
    const Scalar* src = x.data() + p * d.height * d.width;
    Scalar* dst = out.data() + p * ho * wo;
    for (Index oy = 0; oy < ho; ++oy) {
      for (Index ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = src[(oy / factor) * d.width + ox / factor];
    }
  }
  if (tape.needs_grad(x)) {
    tape.record({x}, out, [x, out, d, planes, ho, wo, factor]() mutable {
      if (!x.requires_grad()) return;
      for (Index p = 0; p < planes; ++p) {
        Scalar* gx = x.grad_mut().data() + p * d.height * d.width;
        const Scalar* g = out.grad().data() + p * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          for (Index ox = 0; ox < wo; ++ox) gx[(oy / factor) * d.width + ox / factor] += g[oy * wo + ox];
        }
      }
    });
  }
  return out;
}

/// [N, C, h, w] feature map -> [N, h*w, C] token sequence (one token per position).
template <typename Scalar>
Tensor<Scalar> channels_to_tokens(Tape<Scalar>& tape, const Tensor<Scalar>& x) {
  const auto d = detail::spatial_dims(x.shape(), "channels_to_tokens");
  const Index hw = d.height * d.width, c = d.channels;
  Tensor<Scalar> out(d.batched ? Shape{d.batch, hw, c} : Shape{hw, c});
  for (Index n = 0; n < d.batch; ++n) {
    MatrixMap<Scalar>(out.data() + n * hw * c, hw, c) = ConstMatrixMap<Scalar>(x.data() + n * c * hw, c, hw).transpose();
  }
  if (tape.needs_grad(x)) {
    tape.record({x}, out, [x, out, d, hw, c]() mutable {
      if (!x.requires_grad()) return;
      for (Index n = 0; n < d.batch; ++n) {
        MatrixMap<Scalar>(x.grad_mut().data() + n * c * hw, c, hw) +=
            ConstMatrixMap<Scalar>(out.grad().data() + n * hw * c, hw, c).transpose();
      }
    });
  }
  return out;
}

/// Inverse of channels_to_tokens for a target grid of height x width.
template <typename Scalar>
Tensor<Scalar> tokens_to_channels(Tape<Scalar>& tape, const Tensor<Scalar>& t, Index height, Index width) {
  const bool batched = t.rank() == 3;
  if (!batched && t.rank() != 2) throw ShapeError("tokens_to_channels: expected [N,T,C] or [T,C]");
  const Index batch = batched ? t.dim(0) : 1;
  const Index tokens = t.dim(-2), c = t.dim(-1), hw = height * width;
  if (tokens != hw) {
    throw ShapeError("tokens_to_channels: " + std::to_string(tokens) + " tokens cannot fill a " +
                     std::to_string(height) + "x" + std::to_string(width) + " grid");
  }
  Tensor<Scalar> out(batched ? Shape{batch, c, height, width} : Shape{c, height, width});
  for (Index n = 0; n < batch; ++n) {
    MatrixMap<Scalar>(out.data() + n * c * hw, c, hw) = ConstMatrixMap<Scalar>(t.data() + n * hw * c, hw, c).transpose();
  }
  if (tape.needs_grad(t)) {
    tape.record({t}, out, [t, out, batch, hw, c]() mutable {
      if (!t.requires_grad()) return;
      for (Index n = 0; n < batch; ++n) {
        MatrixMap<Scalar>(t.grad_mut().data() + n * hw * c, hw, c) +=
            ConstMatrixMap<Scalar>(out.grad().data() + n * c * hw, c, hw).transpose();
      }
    });
  }
  return out;
}

}  // namespace rtp::ops
