#pragma once

#include "rtp/autodiff/tensor.hpp"

#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

namespace rtp {

/// Ordered record of differentiable operations for one forward pass.
///
/// Operations are appended in execution order, so the list is already
/// topologically sorted; backward() replays it once in reverse. A tape must
/// be reset() before it can be reused for another pass.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void()>;

  Tape() = default;
  explicit Tape(bool recording) : recording_(recording) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  /// A tape that records nothing; ops run forward only.
  static Tape inference() { return Tape(false); }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// True when an op over these inputs must be recorded.
  template <typename... Ts>
  bool needs_grad(const Ts&... inputs) const {
    if (!recording_) return false;
    return (... || (inputs.defined() && inputs.requires_grad()));
  }

  void record(std::vector<Tensor<Scalar>> inputs, Tensor<Scalar> output, BackwardFn backward) {
    if (consumed_) throw std::logic_error("tape already consumed by backward(); call reset() first");
    output.set_requires_grad(true);
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Populates gradients of every recorded tensor reachable from `loss`.
  /// Leaf gradients accumulate across passes until cleared by the caller.
  void backward(const Tensor<Scalar>& loss) {
    if (consumed_) throw std::logic_error("backward() called twice on the same tape without reset()");
    if (loss.size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
    }
    for (auto& e : entries_) {
      for (auto& in : e.inputs) {
        if (in.defined() && in.requires_grad()) in.grad_mut();
      }
    }
    Tensor<Scalar> root = loss;
    root.grad_mut().setConstant(Scalar(1));
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output.has_grad()) it->backward();
    }
    consumed_ = true;
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  struct Entry {
    std::vector<Tensor<Scalar>> inputs;
    Tensor<Scalar> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries_;
  bool recording_ = true;
  bool consumed_ = false;
};

}  // namespace rtp
