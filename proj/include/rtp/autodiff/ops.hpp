#pragma once

// Differentiable tensor primitives. Every op takes the tape first, computes
// its forward value eagerly and, when any input requires grad, records a
// backward rule that accumulates into the inputs' gradient buffers.

#include "rtp/autodiff/tape.hpp"
#include "rtp/autodiff/tensor.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace rtp::ops {

namespace detail {

/// Rows of `a` that `b` is repeated over; 1 when shapes are equal.
inline Index broadcast_outer(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return 1;
  if (b.size() < a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin())) {
    return shape_numel(Shape(a.begin(), a.end() - static_cast<std::ptrdiff_t>(b.size())));
  }
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <typename Scalar, typename Derived>
void accumulate(const Tensor<Scalar>& t, const Eigen::MatrixBase<Derived>& g) {
  if (t.requires_grad()) t.grad_mut() += g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Tensor<Scalar> add(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index outer = detail::broadcast_outer(a.shape(), b.shape(), "add");
  const Index inner = b.size();
  Tensor<Scalar> out(a.shape());
  out.matrix(outer, inner) = a.matrix(outer, inner).rowwise() + b.matrix(1, inner).row(0);
  if (tape.needs_grad(a, b)) {
    tape.record({a, b}, out, [a, b, out, outer, inner]() mutable {
      const auto& g = out.grad();
      detail::accumulate(a, g);
      if (b.requires_grad()) {
        b.grad_mut().transpose() += ConstMatrixMap<Scalar>(g.data(), outer, inner).colwise().sum();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index outer = detail::broadcast_outer(a.shape(), b.shape(), "sub");
  const Index inner = b.size();
  Tensor<Scalar> out(a.shape());
  out.matrix(outer, inner) = a.matrix(outer, inner).rowwise() - b.matrix(1, inner).row(0);
  if (tape.needs_grad(a, b)) {
    tape.record({a, b}, out, [a, b, out, outer, inner]() mutable {
      const auto& g = out.grad();
      detail::accumulate(a, g);
      if (b.requires_grad()) {
        b.grad_mut().transpose() -= ConstMatrixMap<Scalar>(g.data(), outer, inner).colwise().sum();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Index outer = detail::broadcast_outer(a.shape(), b.shape(), "mul");
  const Index inner = b.size();
  Tensor<Scalar> out(a.shape());
  out.matrix(outer, inner).array() =
      a.matrix(outer, inner).array().rowwise() * b.matrix(1, inner).array().row(0);
  if (tape.needs_grad(a, b)) {
    tape.record({a, b}, out, [a, b, out, outer, inner]() mutable {
      ConstMatrixMap<Scalar> g(out.grad().data(), outer, inner);
      if (a.requires_grad()) {
        MatrixMap<Scalar>(a.grad_mut().data(), outer, inner).array() +=
            g.array().rowwise() * b.matrix(1, inner).array().row(0);
      }
      if (b.requires_grad()) {
        b.grad_mut().transpose() += (g.array() * a.matrix(outer, inner).array()).colwise().sum().matrix();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> add_scalar(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape(), (a.values().array() + s).matrix());
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out]() mutable { detail::accumulate(a, out.grad()); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(Tape<Scalar>& tape, const Tensor<Scalar>& a, Scalar s) {
  Tensor<Scalar> out(a.shape(), a.values() * s);
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out, s]() mutable { detail::accumulate(a, out.grad() * s); });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), a.values().cwiseMax(Scalar(0)));
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out]() mutable {
      if (!a.requires_grad()) return;
      a.grad_mut().array() += (a.values().array() > Scalar(0)).select(out.grad().array(), Scalar(0));
    });
  }
  return out;
}

/// Exact (erf-based) GELU.
template <typename Scalar>
Tensor<Scalar> gelu(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  const Scalar inv_sqrt2 = Scalar(1) / std::sqrt(Scalar(2));
  Tensor<Scalar> out(a.shape());
  for (Index i = 0; i < a.size(); ++i) {
    const Scalar x = a.values()[i];
    out.values()[i] = Scalar(0.5) * x * (Scalar(1) + std::erf(x * inv_sqrt2));
  }
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out, inv_sqrt2]() mutable {
      if (!a.requires_grad()) return;
      const Scalar inv_sqrt2pi = Scalar(1) / std::sqrt(Scalar(2) * std::numbers::pi_v<Scalar>);
      auto& ga = a.grad_mut();
      const auto& g = out.grad();
      for (Index i = 0; i < a.size(); ++i) {
        const Scalar x = a.values()[i];
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * inv_sqrt2));
        const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * inv_sqrt2pi;
        ga[i] += g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <typename Scalar>
Tensor<Scalar> sum(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  Tensor<Scalar> out = Tensor<Scalar>::scalar(a.values().sum());
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out]() mutable {
      if (a.requires_grad()) a.grad_mut().array() += out.grad()[0];
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  return scale(tape, sum(tape, a), Scalar(1) / static_cast<Scalar>(a.size()));
}

template <typename Scalar>
Tensor<Scalar> reshape(Tape<Scalar>& tape, const Tensor<Scalar>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<Scalar> out(std::move(shape), a.values());
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out]() mutable { detail::accumulate(a, out.grad()); });
  }
  return out;
}

/// C = A * B for A [m, k] and B [k, n].
template <typename Scalar>
Tensor<Scalar> matmul(Tape<Scalar>& tape, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Scalar> out({m, n});
  out.matrix(m, n).noalias() = a.matrix(m, k) * b.matrix(k, n);
  if (tape.needs_grad(a, b)) {
    tape.record({a, b}, out, [a, b, out, m, k, n]() mutable {
      ConstMatrixMap<Scalar> g(out.grad().data(), m, n);
      if (a.requires_grad()) {
        MatrixMap<Scalar>(a.grad_mut().data(), m, k).noalias() += g * b.matrix(k, n).transpose();
      }
      if (b.requires_grad()) {
        MatrixMap<Scalar>(b.grad_mut().data(), k, n).noalias() += a.matrix(m, k).transpose() * g;
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> transpose(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const Index m = a.dim(0), n = a.dim(1);
  Tensor<Scalar> out({n, m});
  out.matrix(n, m) = a.matrix(m, n).transpose();
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out, m, n]() mutable {
      if (!a.requires_grad()) return;
      MatrixMap<Scalar>(a.grad_mut().data(), m, n) += ConstMatrixMap<Scalar>(out.grad().data(), n, m).transpose();
    });
  }
  return out;
}

/// Concatenates along `axis`; all other dimensions must agree.
template <typename Scalar>
Tensor<Scalar> concat(Tape<Scalar>& tape, const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  const auto ax = static_cast<std::size_t>(axis);
  if (ax >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == ref[i];
    if (!ok) throw ShapeError("concat: incompatible shapes " + shape_str(ref) + " and " + shape_str(s));
    out_shape[ax] += s[ax];
  }
  const Index outer = shape_numel(Shape(ref.begin(), ref.begin() + axis));
  const Index inner = shape_numel(Shape(ref.begin() + axis + 1, ref.end()));
  const Index out_row = out_shape[ax] * inner;
  Tensor<Scalar> out(out_shape);
  Index offset = 0;
  for (const auto& p : parts) {
    const Index w = p.dim(axis) * inner;
    out.matrix(outer, out_row).middleCols(offset, w) = p.matrix(outer, w);
    offset += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || tape.needs_grad(p);
  if (any) {
    tape.record(parts, out, [parts, out, outer, inner, out_row, axis]() mutable {
      ConstMatrixMap<Scalar> g(out.grad().data(), outer, out_row);
      Index off = 0;
      for (auto& p : parts) {
        const Index w = p.dim(axis) * inner;
        if (p.requires_grad()) MatrixMap<Scalar>(p.grad_mut().data(), outer, w) += g.middleCols(off, w);
        off += w;
      }
    });
  }
  return out;
}

/// Sub-range [start, start + length) along `axis`.
template <typename Scalar>
Tensor<Scalar> slice(Tape<Scalar>& tape, const Tensor<Scalar>& a, Index axis, Index start, Index length) {
  const Shape& s = a.shape();
  const auto ax = static_cast<std::size_t>(axis);
  if (ax >= s.size() || start < 0 || length <= 0 || start + length > s[ax]) {
    throw ShapeError("slice: range out of bounds for " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[ax] = length;
  const Index outer = shape_numel(Shape(s.begin(), s.begin() + axis));
  const Index inner = shape_numel(Shape(s.begin() + axis + 1, s.end()));
  const Index row = s[ax] * inner;
  Tensor<Scalar> out(out_shape);
  out.matrix(outer, length * inner) = a.matrix(outer, row).middleCols(start * inner, length * inner);
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out, outer, inner, row, start, length]() mutable {
      if (!a.requires_grad()) return;
      MatrixMap<Scalar>(a.grad_mut().data(), outer, row).middleCols(start * inner, length * inner) +=
          ConstMatrixMap<Scalar>(out.grad().data(), outer, length * inner);
    });
  }
  return out;
}

/// Softmax over the last dimension.
template <typename Scalar>
Tensor<Scalar> softmax(Tape<Scalar>& tape, const Tensor<Scalar>& a) {
  const Index inner = a.dim(-1);
  const Index outer = a.size() / inner;
  Tensor<Scalar> out(a.shape());
  auto x = a.matrix(outer, inner);
  auto y = out.matrix(outer, inner);
  for (Index r = 0; r < outer; ++r) {
    y.row(r) = (x.row(r).array() - x.row(r).maxCoeff()).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  if (tape.needs_grad(a)) {
    tape.record({a}, out, [a, out, outer, inner]() mutable {
      if (!a.requires_grad()) return;
      ConstMatrixMap<Scalar> g(out.grad().data(), outer, inner);
      auto yv = out.matrix(outer, inner);
      MatrixMap<Scalar> ga(a.grad_mut().data(), outer, inner);
      for (Index r = 0; r < outer; ++r) {
        const Scalar dot = g.row(r).dot(yv.row(r));
        ga.row(r).array() += yv.row(r).array() * (g.row(r).array() - dot);
      }
    });
  }
  return out;
}

/// Normalizes over the last dimension, then applies per-feature gamma/beta.
template <typename Scalar>
Tensor<Scalar> layer_norm(Tape<Scalar>& tape, const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  const Index d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + " do not match " + shape_str(x.shape()));
  }
  const Index rows = x.size() / d;
  Tensor<Scalar> out(x.shape());
  RowMatrix<Scalar> xhat(rows, d);
  Vector<Scalar> inv_std(rows);
  auto xv = x.matrix(rows, d);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = xv.row(r).mean();
    const Scalar var = (xv.row(r).array() - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std[r];
  }
  out.matrix(rows, d) = (xhat.array().rowwise() * gamma.matrix(1, d).array().row(0)).rowwise() +
                        beta.matrix(1, d).array().row(0);
  if (tape.needs_grad(x, gamma, beta)) {
    tape.record({x, gamma, beta}, out, [x, gamma, beta, out, xhat, inv_std, rows, d]() mutable {
      ConstMatrixMap<Scalar> g(out.grad().data(), rows, d);
      if (gamma.requires_grad()) gamma.grad_mut().transpose() += (g.array() * xhat.array()).colwise().sum().matrix();
      if (beta.requires_grad()) beta.grad_mut().transpose() += g.colwise().sum();
      if (!x.requires_grad()) return;
      MatrixMap<Scalar> gx(x.grad_mut().data(), rows, d);
      for (Index r = 0; r < rows; ++r) {
        const auto dxhat = (g.row(r).array() * gamma.matrix(1, d).array().row(0)).eval();
        const Scalar m1 = dxhat.mean();
        const Scalar m2 = (dxhat * xhat.row(r).array()).mean();
        gx.row(r).array() += inv_std[r] * (dxhat - m1 - xhat.row(r).array() * m2);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean Huber loss over elements, residual r = target - pred.
template <typename Scalar>
Tensor<Scalar> huber_loss(Tape<Scalar>& tape, const Tensor<Scalar>& pred, const Tensor<Scalar>& target,
                          Scalar delta) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("huber_loss: incompatible shapes " + shape_str(pred.shape()) + " and " +
                     shape_str(target.shape()));
  }
  if (!(delta > Scalar(0))) throw std::invalid_argument("huber_loss: delta must be positive");
  const auto r = (target.values() - pred.values()).array().eval();
  const auto ar = r.abs().eval();
  const Scalar total = (ar < delta).select(Scalar(0.5) * r.square(), delta * (ar - Scalar(0.5) * delta)).sum();
  const Scalar n = static_cast<Scalar>(pred.size());
  Tensor<Scalar> out = Tensor<Scalar>::scalar(total / n);
  if (tape.needs_grad(pred, target)) {
    tape.record({pred, target}, out, [pred, target, out, r, ar, delta, n]() mutable {
      const Scalar g = out.grad()[0] / n;
      const Vector<Scalar> dr = ((ar < delta).select(r, delta * r.sign()) * g).matrix();
      if (target.requires_grad()) target.grad_mut() += dr;
      if (pred.requires_grad()) pred.grad_mut() -= dr;
    });
  }
  return out;
}

/// Sum of absolute differences.
template <typename Scalar>
Tensor<Scalar> l1_loss(Tape<Scalar>& tape, const Tensor<Scalar>& pred, const Tensor<Scalar>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: incompatible shapes " + shape_str(pred.shape()) + " and " +
                     shape_str(target.shape()));
  }
  const auto diff = (pred.values() - target.values()).array().eval();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(diff.abs().sum());
  if (tape.needs_grad(pred, target)) {
    tape.record({pred, target}, out, [pred, target, out, diff]() mutable {
      const Vector<Scalar> s = (diff.sign() * out.grad()[0]).matrix();
      if (pred.requires_grad()) pred.grad_mut() += s;
      if (target.requires_grad()) target.grad_mut() -= s;
    });
  }
  return out;
}

}  // namespace rtp::ops
