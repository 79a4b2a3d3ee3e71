#include "epift/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace epift {

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<Index> strides_of(const Shape& shape) {
  std::vector<Index> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const Index db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcast-compatible");
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {
void check_extents(const Shape& shape) {
  for (Index d : shape)
    if (d <= 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
}
}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_ = Storage::Zero(numel(shape_));
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_ = Storage::Constant(numel(shape_), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (numel(shape_) != data_.size())
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) + " values");
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values) : shape_(std::move(shape)) {
  check_extents(shape_);
  if (numel(shape_) != static_cast<Index>(values.size()))
    throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(values.size()) + " values");
  data_.resize(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), data_.data());
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  if (numel(shape) != size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace epift
