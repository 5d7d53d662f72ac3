#pragma once

// Small layer building blocks shared by both networks. Each layer registers
// its tensors in a ParameterStore under a dotted prefix so checkpoints have
// stable, ordered names.

#include "rtp/autodiff/checkpoint.hpp"
#include "rtp/autodiff/conv_ops.hpp"
#include "rtp/autodiff/ops.hpp"
#include "rtp/util/rng.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace rtp::nn {

template <typename Scalar>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<Scalar> tensor;
    bool trainable;
  };

  Tensor<Scalar> add(const std::string& name, Tensor<Scalar> t, bool trainable = true) {
    for (const auto& e : entries_) {
      if (e.name == name) throw std::logic_error("duplicate parameter name " + name);
    }
    t.set_requires_grad(trainable);
    entries_.push_back({name, t, trainable});
    return t;
  }

  std::vector<Tensor<Scalar>> trainable() const {
    std::vector<Tensor<Scalar>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  /// Trainable tensors whose name starts with `prefix`.
  std::vector<Tensor<Scalar>> trainable(const std::string& prefix) const {
    std::vector<Tensor<Scalar>> out;
    for (const auto& e : entries_) {
      if (e.trainable && e.name.rfind(prefix, 0) == 0) out.push_back(e.tensor);
    }
    return out;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  Index trainable_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.trainable ? e.tensor.size() : 0;
    return n;
  }

  void set_trainable(bool on) {
    for (auto& e : entries_) {
      if (e.trainable) e.tensor.set_requires_grad(on);
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::vector<NamedArray> state() const {
    std::vector<NamedArray> out;
    for (const auto& e : entries_) out.push_back(to_named_array(e.name, e.tensor));
    return out;
  }

  void load_state(const std::vector<NamedArray>& arrays) {
    std::map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) by_name[a.name] = &a;
    for (auto& e : entries_) {
      auto it = by_name.find(e.name);
      if (it == by_name.end()) throw FormatError("checkpoint is missing tensor '" + e.name + "'");
      assign_from(e.tensor, *it->second);
    }
    if (by_name.size() != entries_.size()) throw FormatError("checkpoint has tensors this network does not define");
  }

 private:
  std::vector<Entry> entries_;
};

template <typename Scalar>
Tensor<Scalar> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = static_cast<Scalar>(stddev * normal(rng));
  return t;
}

/// U(-bound, bound); with bound = 1/sqrt(fan_in) this is the customary
/// default for linear and convolution layers.
template <typename Scalar>
Tensor<Scalar> uniform_init(Shape shape, double bound, Rng& rng) {
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.values()[i] = static_cast<Scalar>(uniform(rng, -bound, bound));
  return t;
}

/// y = x W + b over the last dimension; W is [in, out]. Weight and bias
/// start at U(-1/sqrt(in), 1/sqrt(in)).
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight, bias;
  Index in = 0, out = 0;

  Linear() = default;
  Linear(ParameterStore<Scalar>& store, const std::string& name, Index in_features, Index out_features, Rng& rng)
      : in(in_features), out(out_features) {
    const double b = 1.0 / std::sqrt(static_cast<double>(in_features));
    weight = store.add(name + ".weight", uniform_init<Scalar>({in_features, out_features}, b, rng));
    bias = store.add(name + ".bias", uniform_init<Scalar>({out_features}, b, rng));
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    Shape out_shape = x.shape();
    out_shape.back() = out;
    auto x2 = x.rank() == 2 ? x : ops::reshape(tape, x, {x.size() / in, in});
    auto y = ops::add(tape, ops::matmul(tape, x2, weight), bias);
    return x.rank() == 2 ? y : ops::reshape(tape, y, out_shape);
  }
};

template <typename Scalar>
struct LayerNorm {
  Tensor<Scalar> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParameterStore<Scalar>& store, const std::string& name, Index dim) {
    gamma = store.add(name + ".gamma", Tensor<Scalar>::full({dim}, Scalar(1)));
    beta = store.add(name + ".beta", Tensor<Scalar>({dim}));
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x) const {
    return ops::layer_norm(tape, x, gamma, beta);
  }
};

/// 3x3 convolution (no bias; BN supplies the shift), batch norm, ReLU.
template <typename Scalar>
struct ConvBnRelu {
  Tensor<Scalar> weight, gamma, beta, running_mean, running_var;

  ConvBnRelu() = default;
  ConvBnRelu(ParameterStore<Scalar>& store, const std::string& name, Index in_ch, Index out_ch, Rng& rng) {
    const double fan_in = static_cast<double>(in_ch * 9);
    weight = store.add(name + ".conv.weight", uniform_init<Scalar>({out_ch, in_ch, 3, 3}, 1.0 / std::sqrt(fan_in), rng));
    gamma = store.add(name + ".bn.gamma", Tensor<Scalar>::full({out_ch}, Scalar(1)));
    beta = store.add(name + ".bn.beta", Tensor<Scalar>({out_ch}));
    running_mean = store.add(name + ".bn.running_mean", Tensor<Scalar>({out_ch}), false);
    running_var = store.add(name + ".bn.running_var", Tensor<Scalar>::full({out_ch}, Scalar(1)), false);
  }

  Tensor<Scalar> operator()(Tape<Scalar>& tape, const Tensor<Scalar>& x, bool training) {
    auto y = ops::conv2d(tape, x, weight, Tensor<Scalar>{}, 1, 1);
    y = ops::batch_norm2d(tape, y, gamma, beta, running_mean, running_var, training);
    return ops::relu(tape, y);
  }
};

}  // namespace rtp::nn
