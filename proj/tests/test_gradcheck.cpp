// Finite-difference checks for every differentiable primitive at double
// precision. Losses contract outputs with fixed random weights so no
// gradient component is trivially symmetric.

#include "rtp/autodiff/attention.hpp"
#include "rtp/autodiff/conv_ops.hpp"
#include "rtp/autodiff/gradcheck.hpp"
#include "rtp/autodiff/ops.hpp"
#include "rtp/util/rng.hpp"

#include <gtest/gtest.h>

using namespace rtp;
using T = Tensor<double>;
using Fn = std::function<T(Tape<double>&)>;

namespace {

T random(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  T t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = uniform(rng, lo, hi);
  return t;
}

/// sum(y * w) for a fixed random w shaped like y.
T contract(Tape<double>& tape, const T& y, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(tape, ops::mul(tape, y, random(y.shape(), rng)));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST(Gradcheck, LinearMapIsExact) {
  Rng rng(1);
  T a = random({3, 4}, rng), b = random({4, 2}, rng);
  auto r = gradcheck([&](Tape<double>& t) { return contract(t, ops::matmul(t, a, b), 9); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(Gradcheck, MatmulSumAgainstFiniteDifferences) {
  Rng rng(2);
  T a = random({4, 3}, rng), b = random({3, 5}, rng);
  auto r = gradcheck([&](Tape<double>& t) { return ops::sum(t, ops::matmul(t, a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, ElementwiseWithBroadcast) {
  Rng rng(3);
  T a = random({2, 3, 4}, rng), b = random({3, 4}, rng), c = random({2, 3, 4}, rng);
  auto r = gradcheck(
      [&](Tape<double>& t) {
        auto y = ops::mul(t, ops::add(t, a, b), ops::sub(t, c, b));
        y = ops::add_scalar(t, ops::scale(t, y, 1.7), 0.3);
        return contract(t, y, 4);
      },
      {a, b, c});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, ReluAndGelu) {
  Rng rng(4);
  T a = random({4, 8, 8}, rng, -2, 2);
  auto r1 = gradcheck([&](Tape<double>& t) { return contract(t, ops::relu(t, a), 5); }, {a});
  auto r2 = gradcheck([&](Tape<double>& t) { return contract(t, ops::gelu(t, a), 6); }, {a});
  EXPECT_LT(r1.max_rel_error, kTol);
  EXPECT_LT(r2.max_rel_error, kTol);
}

TEST(Gradcheck, LayoutOps) {
  Rng rng(5);
  T a = random({2, 3, 4, 4}, rng), b = random({2, 2, 4, 4}, rng), m = random({6, 5}, rng);
  auto r = gradcheck(
      [&](Tape<double>& t) {
        auto c = ops::concat(t, {a, b}, 1);
        auto s = ops::slice(t, c, 1, 1, 3);
        auto tok = ops::channels_to_tokens(t, s);
        auto back = ops::tokens_to_channels(t, ops::scale(t, tok, 2.0), 4, 4);
        auto flat = ops::reshape(t, back, {2 * 3 * 16});
        auto tr = ops::transpose(t, m);
        return ops::add(t, contract(t, flat, 7), contract(t, tr, 8));
      },
      {a, b, m});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, SoftmaxAndLayerNorm) {
  Rng rng(6);
  T a = random({3, 5}, rng, -2, 2), g = random({5}, rng, 0.5, 1.5), bt = random({5}, rng);
  auto r1 = gradcheck([&](Tape<double>& t) { return contract(t, ops::softmax(t, a), 10); }, {a});
  auto r2 = gradcheck([&](Tape<double>& t) { return contract(t, ops::layer_norm(t, a, g, bt), 11); }, {a, g, bt});
  EXPECT_LT(r1.max_rel_error, kTol);
  EXPECT_LT(r2.max_rel_error, kTol);
}

TEST(Gradcheck, Conv2dStride1And2) {
  Rng rng(7);
  T x = random({2, 3, 8, 8}, rng), w = random({4, 3, 3, 3}, rng), b = random({4}, rng);
  for (Index stride : {1, 2}) {
    auto r = gradcheck([&](Tape<double>& t) { return contract(t, ops::conv2d(t, x, w, b, 1, stride), 12); }, {x, w, b});
    EXPECT_LT(r.max_rel_error, kTol) << "stride " << stride;
  }
  T w1 = random({2, 3, 1, 1}, rng);
  auto r = gradcheck([&](Tape<double>& t) { return contract(t, ops::conv2d(t, x, w1, T{}, 0), 13); }, {x, w1});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, ConvReluComposite) {
  Rng rng(8);
  T x = random({1, 4, 8, 8}, rng), w = random({4, 4, 3, 3}, rng, -0.5, 0.5), b = random({4}, rng, -0.2, 0.2);
  auto r = gradcheck(
      [&](Tape<double>& t) { return contract(t, ops::relu(t, ops::conv2d(t, x, w, b, 1)), 14); }, {x, w, b});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, BatchNormTrainAndEval) {
  Rng rng(9);
  T x = random({3, 4, 4, 4}, rng, -1, 3), g = random({4}, rng, 0.5, 1.5), b = random({4}, rng);
  for (bool training : {true, false}) {
    T rm = random({4}, rng), rv = random({4}, rng, 0.5, 2.0);
    auto r = gradcheck(
        [&](Tape<double>& t) { return contract(t, ops::batch_norm2d(t, x, g, b, rm, rv, training), 15); }, {x, g, b});
    EXPECT_LT(r.max_rel_error, kTol) << "training " << training;
  }
}

TEST(Gradcheck, PoolingAndUpsampling) {
  Rng rng(10);
  T x = random({2, 3, 8, 8}, rng);
  auto r1 = gradcheck([&](Tape<double>& t) { return contract(t, ops::max_pool2d(t, x), 16); }, {x});
  auto r2 = gradcheck([&](Tape<double>& t) { return contract(t, ops::upsample_nearest2d(t, x), 17); }, {x});
  EXPECT_LT(r1.max_rel_error, kTol);
  EXPECT_LT(r2.max_rel_error, kTol);
}

TEST(Gradcheck, AttentionBlock) {
  Rng rng(11);
  T q = random({2, 6, 8}, rng), k = random({2, 6, 8}, rng), v = random({2, 6, 8}, rng);
  auto r = gradcheck([&](Tape<double>& t) { return contract(t, ops::attention(t, q, k, v, 2), 18); }, {q, k, v});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, MaskedAttentionWithSharedValueInput) {
  Rng rng(12);
  T x = random({5, 4}, rng), wq = random({4, 4}, rng), wk = random({4, 4}, rng);
  ops::TokenMask mask{1, 1, 0, 1, 0};
  auto r = gradcheck(
      [&](Tape<double>& t) {
        auto q = ops::matmul(t, x, wq);
        auto k = ops::matmul(t, x, wk);
        return contract(t, ops::add(t, x, ops::attention(t, q, k, x, 1, &mask)), 19);
      },
      {x, wq, wk});
  EXPECT_LT(r.max_rel_error, kTol);
}

TEST(Gradcheck, Losses) {
  Rng rng(13);
  T p = random({4, 8}, rng), y = random({4, 8}, rng);
  auto r1 = gradcheck([&](Tape<double>& t) { return ops::huber_loss(t, p, y, 0.5); }, {p, y});
  auto r2 = gradcheck([&](Tape<double>& t) { return ops::l1_loss(t, p, y); }, {p, y});
  EXPECT_LT(r1.max_rel_error, kTol);
  EXPECT_LT(r2.max_rel_error, kTol);
}

TEST(Gradcheck, RandomShapesUpTo4x8x8) {
  // Property: conv/bn/relu/pool chain passes on randomly drawn shapes.
  Rng shape_rng(14);
  for (int trial = 0; trial < 5; ++trial) {
    const Index c = 1 + static_cast<Index>(shape_rng() % 4);
    const Index h = 2 * (1 + static_cast<Index>(shape_rng() % 4));
    const Index w = 2 * (1 + static_cast<Index>(shape_rng() % 4));
    Rng rng(100 + static_cast<std::uint64_t>(trial));
    T x = random({2, c, h, w}, rng), k = random({c, c, 3, 3}, rng), g = random({c}, rng, 0.5, 1.5),
      b = random({c}, rng);
    T rm({c}), rv = T::full({c}, 1.0);
    auto r = gradcheck(
        [&](Tape<double>& t) {
          auto y = ops::conv2d(t, x, k, T{}, 1);
          y = ops::relu(t, ops::batch_norm2d(t, y, g, b, rm, rv, true));
          return contract(t, ops::max_pool2d(t, y), 20 + static_cast<std::uint64_t>(trial));
        },
        {x, k, g, b});
    EXPECT_LT(r.max_rel_error, kTol) << "shape " << c << "x" << h << "x" << w;
  }
}
