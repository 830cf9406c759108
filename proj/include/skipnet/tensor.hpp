#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace skipnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised for any tensor/matrix dimension disagreement.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(const Shape& shape);
Index shape_numel(const Shape& shape);

/// Dense row-major N-d array. Value type: copies are deep, moves are cheap.
template <class Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = Scalar(0));
  Tensor(Shape shape, Storage data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), Scalar(1)); }
  static Tensor randn(Shape shape, std::mt19937_64& rng, Scalar stddev = Scalar(1));
  static Tensor uniform(Shape shape, std::mt19937_64& rng, Scalar lo, Scalar hi);
  static Tensor from(Shape shape, std::initializer_list<Scalar> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Index dim(int axis) const;
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  Storage& array() { return data_; }
  const Storage& array() const { return data_; }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// NCHW element access; only valid for rank-4 tensors.
  Scalar& at(Index n, Index c, Index h, Index w);
  Scalar at(Index n, Index c, Index h, Index w) const;

  Tensor reshaped(Shape shape) const;

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

 private:
  Shape shape_;
  Storage data_;
};

template <class Scalar>
Scalar max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

/// Fails with ShapeError naming `what` if the shapes differ.
void require_same_shape(const Shape& a, const Shape& b, const char* what);

}  // namespace skipnet
