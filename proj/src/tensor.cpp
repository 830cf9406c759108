#include "skipnet/tensor.hpp"

#include <sstream>

namespace skipnet {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) {
    throw ShapeError(std::string(what) + ": shape " + to_string(a) + " does not match " +
                     to_string(b));
  }
}

template <class Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(Storage::Constant(shape_numel(shape_), fill)) {}

template <class Scalar>
Tensor<Scalar>::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape " + to_string(shape_));
  }
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::randn(Shape shape, std::mt19937_64& rng, Scalar stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::from(Shape shape, std::initializer_list<Scalar> values) {
  Storage data(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar v : values) data[i++] = v;
  return Tensor(std::move(shape), std::move(data));
}

template <class Scalar>
Index Tensor<Scalar>::dim(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <class Scalar>
Scalar& Tensor<Scalar>::at(Index n, Index c, Index h, Index w) {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

template <class Scalar>
Scalar Tensor<Scalar>::at(Index n, Index c, Index h, Index w) const {
  return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
}

template <class Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

template <class Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  if (a.empty()) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

template class Tensor<float>;
template class Tensor<double>;
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace skipnet
