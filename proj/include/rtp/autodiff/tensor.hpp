#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rtp {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-d array with an optional gradient slot.
///
/// Copies share storage: a Tensor is a handle, so the tape and the owning
/// network module refer to the same values. Use clone() for a deep copy.
template <typename Scalar>
class Tensor {
 public:
  using scalar_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->value = Vector<Scalar>::Zero(shape_numel(impl_->shape));
    impl_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, Vector<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), requires_grad) {
    if (values.size() != impl_->value.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(impl_->shape));
    }
    impl_->value = std::move(values);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values, bool requires_grad = false)
      : Tensor(std::move(shape), requires_grad) {
    if (static_cast<Index>(values.size()) != impl_->value.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(impl_->shape));
    }
    std::copy(values.begin(), values.end(), impl_->value.data());
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, Scalar v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    t.values().setConstant(v);
    return t;
  }

  static Tensor scalar(Scalar v, bool requires_grad = false) {
    return full({1}, v, requires_grad);
  }

  bool defined() const { return static_cast<bool>(impl_); }

  const Shape& shape() const { return impl_->shape; }
  Index rank() const { return static_cast<Index>(impl_->shape.size()); }
  Index dim(Index i) const {
    if (i < 0) i += rank();
    return impl_->shape.at(static_cast<std::size_t>(i));
  }
  Index size() const { return impl_->value.size(); }

  Vector<Scalar>& values() { return impl_->value; }
  const Vector<Scalar>& values() const { return impl_->value; }
  Scalar* data() { return impl_->value.data(); }
  const Scalar* data() const { return impl_->value.data(); }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->value[0];
  }

  /// View as a rows x cols row-major matrix; rows * cols must equal size().
  MatrixMap<Scalar> matrix(Index rows, Index cols) {
    return MatrixMap<Scalar>(data(), rows, cols);
  }
  ConstMatrixMap<Scalar> matrix(Index rows, Index cols) const {
    return ConstMatrixMap<Scalar>(data(), rows, cols);
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return impl_->has_grad; }
  const Vector<Scalar>& grad() const {
    if (!impl_->has_grad) throw std::logic_error("tensor has no gradient");
    return impl_->grad;
  }
  /// Gradient buffer, allocated (zeroed) on first access. Gradients are
  /// not part of the tensor's value, so a const handle may accumulate.
  Vector<Scalar>& grad_mut() const {
    if (!impl_->has_grad) {
      impl_->grad = Vector<Scalar>::Zero(size());
      impl_->has_grad = true;
    }
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_->has_grad) impl_->grad.setZero();
  }
  void clear_grad() {
    impl_->grad.resize(0);
    impl_->has_grad = false;
  }

  Tensor clone() const {
    Tensor t(impl_->shape, impl_->value, impl_->requires_grad);
    return t;
  }
  Tensor detach() const { return Tensor(impl_->shape, impl_->value, false); }

  bool is_same(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    Vector<Scalar> value;
    Vector<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Converts a tensor between scalar types; the result does not require grad.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  return Tensor<To>(t.shape(), t.values().template cast<To>());
}

}  // namespace rtp
