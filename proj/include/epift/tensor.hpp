#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "epift/error.hpp"

namespace epift {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major n-d array. Storage is an Eigen column vector so elementwise
// work can use array expressions directly.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
  using value_type = Scalar;

  Tensor() : shape_{}, data_(Storage::Zero(1)) {}
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Scalar fill);
  Tensor(Shape shape, Storage data);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor scalar(Scalar v) { return Tensor(Shape{}, v); }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return static_cast<Index>(data_.size()); }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<const Scalar> span() const { return {data_.data(), static_cast<std::size_t>(data_.size())}; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }
  // Scalar value of a single-element tensor.
  Scalar item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const { return data_.allFinite(); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

 private:
  Shape shape_;
  Storage data_;
};

// Row-major strides for a shape.
std::vector<Index> strides_of(const Shape& shape);

// Standard broadcasting of two shapes (trailing-axis alignment).
Shape broadcast_shapes(const Shape& a, const Shape& b);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace epift
