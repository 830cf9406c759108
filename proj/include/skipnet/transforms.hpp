#pragma once

#include "skipnet/ops.hpp"
#include "skipnet/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace skipnet {

/// Skip-connection matrix families. `zero` is the no-skip control and
/// `diagonal` is the {0,1} diagonal produced by idempotent diagonalization.
enum class TransformKind {
  identity,
  idempotent_mr,
  idempotent_cmr,
  orthogonal_tp,
  orthogonal_random,
  periodic,
  zero,
  diagonal,
};

std::string_view to_string(TransformKind kind);
TransformKind parse_transform_kind(std::string_view name);

bool is_orthogonal_kind(TransformKind kind);
bool is_idempotent_kind(TransformKind kind);

struct TransformParams {
  int branches = 0;        // B, for merge-and-run families
  std::uint64_t seed = 0;  // random and periodic families
  int period = 0;          // N, periodic family
};

/// Immutable square channel-mixing matrix tagged with how it was built.
/// Construction checks the defining identity of the kind.
class StructuredTransform {
 public:
  StructuredTransform(TransformKind kind, Eigen::MatrixXd matrix, TransformParams params = {});

  TransformKind kind() const { return kind_; }
  const TransformParams& params() const { return params_; }
  const Eigen::MatrixXd& matrix() const { return matrix_; }
  Index size() const { return matrix_.rows(); }

 private:
  TransformKind kind_;
  Eigen::MatrixXd matrix_;
  TransformParams params_;
};

inline constexpr double kIdempotentTol = 1e-10;
inline constexpr double kOrthogonalTol = 1e-10;
inline constexpr double kPeriodicTol = 1e-8;
inline constexpr double kRankRelTol = 1e-8;

StructuredTransform make_identity(Index channels);
StructuredTransform make_zero(Index channels);
StructuredTransform make_idempotent_mr(Index channels, int branches);
StructuredTransform make_idempotent_cmr(Index channels, int branches);
StructuredTransform make_orthogonal_tp(Index channels);
StructuredTransform make_orthogonal_random(Index channels, std::uint64_t seed);
StructuredTransform make_periodic(Index channels, int period, std::uint64_t seed);
StructuredTransform make_diagonal(const Eigen::VectorXd& diagonal);

/// The 2x2 Kronecker factor of the Orthogonal-TP family.
Eigen::Matrix2d tp_factor();

template <class A, class B>
Eigen::Matrix<typename A::Scalar, Eigen::Dynamic, Eigen::Dynamic> kronecker(
    const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  Eigen::Matrix<typename A::Scalar, Eigen::Dynamic, Eigen::Dynamic> out(a.rows() * b.rows(),
                                                                       a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < a.cols(); ++j) {
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
    }
  }
  return out;
}

template <class Derived>
void require_square(const Eigen::MatrixBase<Derived>& m, const char* what) {
  if (m.rows() != m.cols()) {
    throw ShapeError(std::string(what) + ": matrix must be square, got " + std::to_string(m.rows()) +
                     "x" + std::to_string(m.cols()));
  }
}

template <class Derived>
typename Derived::PlainObject matrix_power(const Eigen::MatrixBase<Derived>& m, int k) {
  require_square(m, "matrix_power");
  if (k < 0) throw std::invalid_argument("matrix_power: negative exponent");
  typename Derived::PlainObject out = Derived::PlainObject::Identity(m.rows(), m.cols());
  for (int i = 0; i < k; ++i) out = (out * m).eval();
  return out;
}

template <class Derived>
bool is_idempotent(const Eigen::MatrixBase<Derived>& p, double tol = kIdempotentTol) {
  require_square(p, "is_idempotent");
  return ((p * p).eval() - p).cwiseAbs().maxCoeff() <= tol;
}

template <class Derived>
bool is_orthogonal(const Eigen::MatrixBase<Derived>& q, double tol = kOrthogonalTol) {
  require_square(q, "is_orthogonal");
  const auto eye = Derived::PlainObject::Identity(q.rows(), q.cols());
  return ((q.transpose() * q).eval() - eye).cwiseAbs().maxCoeff() <= tol;
}

/// P^{N+1} = P.
template <class Derived>
bool is_periodic(const Eigen::MatrixBase<Derived>& p, int period, double tol = kPeriodicTol) {
  require_square(p, "is_periodic");
  return (matrix_power(p, period + 1) - p).cwiseAbs().maxCoeff() <= tol;
}

/// Singular values above rel_tol * sigma_max.
Index rank(const Eigen::MatrixXd& m, double rel_tol = kRankRelTol);

/// P = U_inv * diag(lambda) * U with lambda over {0, 1}.
struct Diagonalization {
  Eigen::MatrixXd u;
  Eigen::MatrixXd u_inv;
  Eigen::VectorXd lambda;
  Index unit_count() const { return static_cast<Index>((lambda.array() == 1.0).count()); }
};

Diagonalization diagonalize_idempotent(const Eigen::MatrixXd& p);

template <class Scalar>
Tensor<Scalar> apply_transform(const StructuredTransform& t, const Tensor<Scalar>& x) {
  if (x.rank() < 2 || x.dim(1) != t.size()) {
    throw ShapeError("apply_transform: " + std::to_string(t.size()) + "-channel transform applied to " +
                     to_string(x.shape()));
  }
  return kernels::channel_mix<Scalar>(t.matrix().template cast<Scalar>(), x);
}

}  // namespace skipnet
