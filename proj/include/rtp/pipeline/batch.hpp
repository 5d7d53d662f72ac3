#pragma once

// Assembles network input tensors from phantom cases.

#include "rtp/autodiff/ops.hpp"
#include "rtp/phantom/phantom.hpp"

#include <vector>

namespace rtp {

/// [N, 6, H, W] in channel order ct, ptv, bladder, st, fhl, fhr.
template <typename Scalar>
Tensor<Scalar> stage_one_input(const std::vector<const Case*>& cases) {
  if (cases.empty()) throw std::invalid_argument("stage_one_input: empty batch");
  const Index h = cases.front()->size(), hw = h * h;
  Tensor<Scalar> x({static_cast<Index>(cases.size()), 6, h, h});
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Case& c = *cases[i];
    if (c.size() != h) throw ShapeError("stage_one_input: cases of different sizes in one batch");
    Scalar* p = x.data() + static_cast<Index>(i) * 6 * hw;
    for (Index k = 0; k < hw; ++k) {
      p[k] = static_cast<Scalar>(c.ct.data()[k]);
      p[hw + k] = c.ptv.data()[k] ? Scalar(1) : Scalar(0);
      for (Index o = 0; o < static_cast<Index>(kNumOars); ++o) {
        p[(2 + o) * hw + k] = c.oars[static_cast<std::size_t>(o)].data()[k] ? Scalar(1) : Scalar(0);
      }
    }
  }
  return x;
}

/// Stored dose divided by each case's prescription, [N, 1, H, W].
template <typename Scalar>
Tensor<Scalar> dose_target(const std::vector<const Case*>& cases) {
  if (cases.empty()) throw std::invalid_argument("dose_target: empty batch");
  const Index h = cases.front()->size(), hw = h * h;
  Tensor<Scalar> y({static_cast<Index>(cases.size()), 1, h, h});
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const Case& c = *cases[i];
    const double d_p = c.meta.config.d_p;
    for (Index k = 0; k < hw; ++k) {
      y.data()[static_cast<Index>(i) * hw + k] = static_cast<Scalar>(c.dose.data()[k] / d_p);
    }
  }
  return y;
}

/// Appends a normalized dose channel: [N, 6, H, W] + [N, 1, H, W] -> [N, 7, H, W].
template <typename Scalar>
Tensor<Scalar> stage_two_input(const Tensor<Scalar>& x6, const Tensor<Scalar>& dose) {
  Tape<Scalar> tape = Tape<Scalar>::inference();
  return ops::concat(tape, {x6.detach(), dose.detach()}, 1);
}

/// Sample `sample` of an [N, 1, H, W] normalized dose tensor, in Gy.
inline Image dose_image(const Tensor<float>& y, Index sample, double d_p) {
  const Index h = y.dim(-2), w = y.dim(-1);
  Image img(h, w);
  for (Index k = 0; k < h * w; ++k) img.data()[k] = static_cast<float>(y.data()[sample * h * w + k] * d_p);
  return img;
}

}  // namespace rtp
