#pragma once

#include "rtp/autodiff/ops.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace rtp::ops {

/// Key mask for attention: nonzero entries are attendable tokens.
using TokenMask = std::vector<std::uint8_t>;

namespace detail {

struct AttentionDims {
  Index batch, tokens, model_dim, heads, head_dim;
};

template <typename Scalar>
AttentionDims attention_dims(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v, Index heads,
                             const TokenMask* mask) {
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: Q/K/V shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                     shape_str(v.shape()));
  }
  if (q.rank() != 2 && q.rank() != 3) throw ShapeError("attention: expected [N,d] or [B,N,d], got " + shape_str(q.shape()));
  AttentionDims d{};
  d.batch = q.rank() == 3 ? q.dim(0) : 1;
  d.tokens = q.dim(-2);
  d.model_dim = q.dim(-1);
  d.heads = heads;
  if (heads < 1 || d.model_dim % heads != 0) {
    throw ShapeError("attention: model dim " + std::to_string(d.model_dim) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  d.head_dim = d.model_dim / heads;
  if (d.head_dim == 0) throw ShapeError("attention: head dimension is zero");
  if (mask) {
    if (static_cast<Index>(mask->size()) != d.tokens) throw ShapeError("attention: key mask length mismatch");
    bool any = false;
    for (auto m : *mask) any = any || m != 0;
    if (!any) throw ShapeError("attention: key mask excludes every token");
  }
  return d;
}

/// Row-softmax of scaled scores for one (batch, head) slice.
template <typename Scalar>
RowMatrix<Scalar> attention_probs(const Eigen::Ref<const RowMatrix<Scalar>>& qh,
                                  const Eigen::Ref<const RowMatrix<Scalar>>& kh, const TokenMask* mask) {
  const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(qh.cols()));
  RowMatrix<Scalar> s = (qh * kh.transpose()) * inv_sqrt_d;
  for (Index r = 0; r < s.rows(); ++r) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index c = 0; c < s.cols(); ++c) {
      if (!mask || (*mask)[static_cast<std::size_t>(c)]) mx = std::max(mx, s(r, c));
    }
    Scalar z = 0;
    for (Index c = 0; c < s.cols(); ++c) {
      const bool on = !mask || (*mask)[static_cast<std::size_t>(c)];
      s(r, c) = on ? std::exp(s(r, c) - mx) : Scalar(0);
      z += s(r, c);
    }
    s.row(r) /= z;
  }
  return s;
}

}  // namespace detail

/// Multi-head scaled dot-product attention, softmax(Q_h K_h^T / sqrt(d_h)) V_h
/// per head, heads laid out as contiguous column blocks. Masked keys get
/// exactly zero weight.
template <typename Scalar>
Tensor<Scalar> attention(Tape<Scalar>& tape, const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                         Index heads = 1, const TokenMask* key_mask = nullptr) {
  const auto d = detail::attention_dims(q, k, v, heads, key_mask);
  const Index n = d.tokens, dm = d.model_dim, dh = d.head_dim;
  std::vector<RowMatrix<Scalar>> probs;
  probs.reserve(static_cast<std::size_t>(d.batch * heads));
  Tensor<Scalar> out(q.shape());
  for (Index b = 0; b < d.batch; ++b) {
    auto qb = q.matrix(d.batch * n, dm).middleRows(b * n, n);
    auto kb = k.matrix(d.batch * n, dm).middleRows(b * n, n);
    auto vb = v.matrix(d.batch * n, dm).middleRows(b * n, n);
    auto ob = out.matrix(d.batch * n, dm).middleRows(b * n, n);
    for (Index h = 0; h < heads; ++h) {
      probs.push_back(detail::attention_probs<Scalar>(qb.middleCols(h * dh, dh), kb.middleCols(h * dh, dh), key_mask));
      ob.middleCols(h * dh, dh).noalias() = probs.back() * vb.middleCols(h * dh, dh);
    }
  }
  if (tape.needs_grad(q, k, v)) {
    tape.record({q, k, v}, out, [q, k, v, out, d, probs = std::move(probs)]() mutable {
      const Index n = d.tokens, dm = d.model_dim, dh = d.head_dim;
      const Scalar inv_sqrt_d = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
      ConstMatrixMap<Scalar> g_all(out.grad().data(), d.batch * n, dm);
      for (Index b = 0; b < d.batch; ++b) {
        auto qb = q.matrix(d.batch * n, dm).middleRows(b * n, n);
        auto kb = k.matrix(d.batch * n, dm).middleRows(b * n, n);
        auto vb = v.matrix(d.batch * n, dm).middleRows(b * n, n);
        auto gb = g_all.middleRows(b * n, n);
        for (Index h = 0; h < d.heads; ++h) {
          const auto& p = probs[static_cast<std::size_t>(b * d.heads + h)];
          auto go = gb.middleCols(h * dh, dh);
          if (v.requires_grad()) {
            MatrixMap<Scalar>(v.grad_mut().data(), d.batch * n, dm).middleRows(b * n, n).middleCols(h * dh, dh).noalias() +=
                p.transpose() * go;
          }
          if (!q.requires_grad() && !k.requires_grad()) continue;
          const RowMatrix<Scalar> dp = go * vb.middleCols(h * dh, dh).transpose();
          const Vector<Scalar> row_dot = (dp.array() * p.array()).rowwise().sum().matrix();
          const RowMatrix<Scalar> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * inv_sqrt_d;
          if (q.requires_grad()) {
            MatrixMap<Scalar>(q.grad_mut().data(), d.batch * n, dm).middleRows(b * n, n).middleCols(h * dh, dh).noalias() +=
                ds * kb.middleCols(h * dh, dh);
          }
          if (k.requires_grad()) {
            MatrixMap<Scalar>(k.grad_mut().data(), d.batch * n, dm).middleRows(b * n, n).middleCols(h * dh, dh).noalias() +=
                ds.transpose() * qb.middleCols(h * dh, dh);
          }
        }
      }
    });
  }
  return out;
}

/// Attention probabilities per (batch, head) without recording; for inspection.
template <typename Scalar>
std::vector<RowMatrix<Scalar>> attention_weights(const Tensor<Scalar>& q, const Tensor<Scalar>& k, Index heads = 1,
                                                 const TokenMask* key_mask = nullptr) {
  const auto d = detail::attention_dims(q, k, k, heads, key_mask);
  std::vector<RowMatrix<Scalar>> probs;
  for (Index b = 0; b < d.batch; ++b) {
    auto qb = q.matrix(d.batch * d.tokens, d.model_dim).middleRows(b * d.tokens, d.tokens);
    auto kb = k.matrix(d.batch * d.tokens, d.model_dim).middleRows(b * d.tokens, d.tokens);
    for (Index h = 0; h < heads; ++h) {
      probs.push_back(detail::attention_probs<Scalar>(qb.middleCols(h * d.head_dim, d.head_dim),
                                                      kb.middleCols(h * d.head_dim, d.head_dim), key_mask));
    }
  }
  return probs;
}

}  // namespace rtp::ops
