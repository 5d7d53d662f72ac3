#pragma once

#include "rtp/autodiff/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace rtp {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moment estimates for a list of parameters.
template <typename Scalar>
struct AdamState {
  AdamOptions options;
  std::vector<Vector<Scalar>> m;
  std::vector<Vector<Scalar>> v;
  std::int64_t t = 0;

  AdamState() = default;
  AdamState(const std::vector<Tensor<Scalar>>& params, AdamOptions opts) : options(opts) {
    for (const auto& p : params) {
      m.push_back(Vector<Scalar>::Zero(p.size()));
      v.push_back(Vector<Scalar>::Zero(p.size()));
    }
  }
};

/// One bias-corrected Adam update applied in place to `params`.
template <typename Scalar>
void adam_step(std::vector<Tensor<Scalar>>& params, const std::vector<Vector<Scalar>>& grads, AdamState<Scalar>& state) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: parameter, gradient and state counts differ");
  }
  state.t += 1;
  const auto& o = state.options;
  const Scalar b1 = static_cast<Scalar>(o.beta1), b2 = static_cast<Scalar>(o.beta2);
  const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(o.beta1, static_cast<double>(state.t)));
  const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(o.beta2, static_cast<double>(state.t)));
  const Scalar lr = static_cast<Scalar>(o.lr), eps = static_cast<Scalar>(o.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].values();
    const auto& g = grads[i];
    if (g.size() != p.size() || state.m[i].size() != p.size()) {
      throw std::invalid_argument("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
    state.m[i] = b1 * state.m[i] + (Scalar(1) - b1) * g;
    state.v[i] = b2 * state.v[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
    p.array() -= lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + eps);
  }
}

/// Adam bound to a fixed parameter list; missing gradients count as zero.
template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<Tensor<Scalar>> params, AdamOptions options)
      : params_(std::move(params)), state_(params_, options) {}

  void step() {
    std::vector<Vector<Scalar>> grads;
    grads.reserve(params_.size());
    for (const auto& p : params_) grads.push_back(p.has_grad() ? p.grad() : Vector<Scalar>::Zero(p.size()));
    adam_step(params_, grads, state_);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const AdamState<Scalar>& state() const { return state_; }
  std::int64_t steps() const { return state_.t; }

 private:
  std::vector<Tensor<Scalar>> params_;
  AdamState<Scalar> state_;
};

}  // namespace rtp
