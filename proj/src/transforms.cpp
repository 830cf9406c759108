#include "skipnet/transforms.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <random>

namespace skipnet {

namespace {

constexpr std::array<std::pair<TransformKind, std::string_view>, 8> kKindNames{{
    {TransformKind::identity, "identity"},
    {TransformKind::idempotent_mr, "idempotent_mr"},
    {TransformKind::idempotent_cmr, "idempotent_cmr"},
    {TransformKind::orthogonal_tp, "orthogonal_tp"},
    {TransformKind::orthogonal_random, "orthogonal_random"},
    {TransformKind::periodic, "periodic"},
    {TransformKind::zero, "zero"},
    {TransformKind::diagonal, "diagonal"},
}};

bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

int log2_exact(Index n) {
  int k = 0;
  while ((Index{1} << k) < n) ++k;
  return k;
}

void require_channels(Index channels, const char* what) {
  if (channels < 1) throw std::invalid_argument(std::string(what) + ": channel count must be positive");
}

void require_power_of_two(Index channels, const char* what) {
  if (!is_power_of_two(channels)) {
    throw std::invalid_argument(std::string(what) + ": channel count " + std::to_string(channels) +
                                " is not a power of 2");
  }
}

Eigen::MatrixXd merge_and_run(Index channels, int branches, const char* what) {
  require_channels(channels, what);
  if (branches < 1 || channels % branches != 0) {
    throw std::invalid_argument(std::string(what) + ": branch count " + std::to_string(branches) +
                                " does not divide " + std::to_string(channels) + " channels");
  }
  const Index block = channels / branches;
  const Eigen::MatrixXd ones = Eigen::MatrixXd::Constant(branches, branches, 1.0 / branches);
  return kronecker(ones, Eigen::MatrixXd::Identity(block, block));
}

Eigen::MatrixXd random_orthogonal_dense(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd g(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) g(i, j) = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Index j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

double max_dev(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).cwiseAbs().maxCoeff();
}

}  // namespace

std::string_view to_string(TransformKind kind) {
  for (const auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "unknown";
}

TransformKind parse_transform_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw std::invalid_argument("unknown transform kind '" + std::string(name) + "'");
}

bool is_orthogonal_kind(TransformKind kind) {
  return kind == TransformKind::identity || kind == TransformKind::orthogonal_tp ||
         kind == TransformKind::orthogonal_random;
}

bool is_idempotent_kind(TransformKind kind) {
  return kind == TransformKind::identity || kind == TransformKind::idempotent_mr ||
         kind == TransformKind::idempotent_cmr || kind == TransformKind::zero ||
         kind == TransformKind::diagonal;
}

StructuredTransform::StructuredTransform(TransformKind kind, Eigen::MatrixXd matrix, TransformParams params)
    : kind_(kind), matrix_(std::move(matrix)), params_(params) {
  require_square(matrix_, "StructuredTransform");
  if (matrix_.rows() == 0) throw ShapeError("StructuredTransform: empty matrix");
  const std::string label(to_string(kind_));
  if (is_idempotent_kind(kind_) && !is_idempotent(matrix_, kIdempotentTol)) {
    throw std::invalid_argument(label + " transform is not idempotent");
  }
  if (is_orthogonal_kind(kind_) && !is_orthogonal(matrix_, kOrthogonalTol)) {
    throw std::invalid_argument(label + " transform is not orthogonal");
  }
  if (kind_ == TransformKind::periodic && !is_periodic(matrix_, params_.period, kPeriodicTol)) {
    throw std::invalid_argument("periodic transform violates P^(N+1) = P");
  }
  if (kind_ == TransformKind::diagonal && !matrix_.isDiagonal(0.0)) {
    throw std::invalid_argument("diagonal transform has off-diagonal entries");
  }
}

StructuredTransform make_identity(Index channels) {
  require_channels(channels, "make_identity");
  return {TransformKind::identity, Eigen::MatrixXd::Identity(channels, channels)};
}

StructuredTransform make_zero(Index channels) {
  require_channels(channels, "make_zero");
  return {TransformKind::zero, Eigen::MatrixXd::Zero(channels, channels)};
}

StructuredTransform make_idempotent_mr(Index channels, int branches) {
  return {TransformKind::idempotent_mr, merge_and_run(channels, branches, "make_idempotent_mr"),
          TransformParams{.branches = branches}};
}

StructuredTransform make_idempotent_cmr(Index channels, int branches) {
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(channels, channels) -
                      merge_and_run(channels, branches, "make_idempotent_cmr");
  return {TransformKind::idempotent_cmr, std::move(p), TransformParams{.branches = branches}};
}

Eigen::Matrix2d tp_factor() {
  Eigen::Matrix2d m;
  m << 1.0, -1.0, 1.0, 1.0;
  return m / std::numbers::sqrt2;
}

StructuredTransform make_orthogonal_tp(Index channels) {
  require_power_of_two(channels, "make_orthogonal_tp");
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(1, 1);
  for (int i = 0; i < log2_exact(channels); ++i) p = kronecker(p, tp_factor());
  return {TransformKind::orthogonal_tp, std::move(p)};
}

StructuredTransform make_orthogonal_random(Index channels, std::uint64_t seed) {
  require_power_of_two(channels, "make_orthogonal_random");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::bernoulli_distribution reflect(0.5);
  Eigen::MatrixXd p = Eigen::MatrixXd::Identity(1, 1);
  for (int i = 0; i < log2_exact(channels); ++i) {
    const double t = angle(rng);
    Eigen::Matrix2d f;
    f << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
    if (reflect(rng)) f.col(1) *= -1.0;
    p = kronecker(p, f);
  }
  return {TransformKind::orthogonal_random, std::move(p), TransformParams{.seed = seed}};
}

StructuredTransform make_periodic(Index channels, int period, std::uint64_t seed) {
  if (channels < 2) throw std::invalid_argument("make_periodic: need at least 2 channels");
  if (period < 1) throw std::invalid_argument("make_periodic: period must be at least 1");
  std::mt19937_64 rng(seed);

  // Eigenvalues: 0, +1, -1 (N even), or a pair exp(+-2*pi*i*k/N) as a rotation block.
  Eigen::MatrixXd core = Eigen::MatrixXd::Zero(channels, channels);
  std::bernoulli_distribution coin(0.5);
  Index i = 0;
  bool unit_seen = false;
  while (i < channels) {
    const bool rotation_ok = period >= 3 && channels - i >= 2;
    if (rotation_ok && coin(rng)) {
      std::uniform_int_distribution<int> turn(1, period - 1);
      const double t = 2.0 * std::numbers::pi * turn(rng) / period;
      core.block<2, 2>(i, i) << std::cos(t), -std::sin(t), std::sin(t), std::cos(t);
      unit_seen = true;
      i += 2;
      continue;
    }
    std::vector<double> choices{0.0, 1.0};
    if (period % 2 == 0) choices.push_back(-1.0);
    std::uniform_int_distribution<std::size_t> pick(unit_seen ? 0 : 1, choices.size() - 1);
    core(i, i) = choices[pick(rng)];
    unit_seen = unit_seen || core(i, i) != 0.0;
    ++i;
  }
  const Eigen::MatrixXd basis = random_orthogonal_dense(channels, rng);
  Eigen::MatrixXd p = basis.transpose() * core * basis;
  return {TransformKind::periodic, std::move(p), TransformParams{.seed = seed, .period = period}};
}

StructuredTransform make_diagonal(const Eigen::VectorXd& diagonal) {
  Eigen::MatrixXd p = diagonal.asDiagonal();
  return {TransformKind::diagonal, std::move(p)};
}

Index rank(const Eigen::MatrixXd& m, double rel_tol) {
  if (m.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const Eigen::VectorXd& s = svd.singularValues();
  const double top = s.size() ? s[0] : 0.0;
  if (top == 0.0) return 0;
  return static_cast<Index>((s.array() > rel_tol * top).count());
}

Diagonalization diagonalize_idempotent(const Eigen::MatrixXd& p) {
  require_square(p, "diagonalize_idempotent");
  if (!is_idempotent(p, 1e-8)) throw std::invalid_argument("diagonalize_idempotent: matrix is not idempotent");
  const Index n = p.rows();
  Diagonalization d;

  const bool symmetric = (p - p.transpose()).cwiseAbs().maxCoeff() <= 1e-12;
  if (symmetric) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(p);
    if (eig.info() != Eigen::Success) throw std::runtime_error("diagonalize_idempotent: eigensolver failed");
    d.lambda = eig.eigenvalues();
    d.u_inv = eig.eigenvectors();
    d.u = d.u_inv.transpose();
  } else {
    // Range of P followed by range of I - P (= kernel of P).
    const Index r = rank(p);
    const Eigen::MatrixXd comp = Eigen::MatrixXd::Identity(n, n) - p;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_range(p);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_kernel(comp);
    const Eigen::MatrixXd q_range = qr_range.householderQ();
    const Eigen::MatrixXd q_kernel = qr_kernel.householderQ();
    d.u_inv.resize(n, n);
    d.u_inv << q_range.leftCols(r), q_kernel.leftCols(n - r);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(d.u_inv);
    if (!lu.isInvertible()) throw std::runtime_error("diagonalize_idempotent: eigenbasis is singular");
    d.u = lu.inverse();
    d.lambda = Eigen::VectorXd::Zero(n);
    d.lambda.head(r).setOnes();
  }

  for (Index i = 0; i < n; ++i) {
    const double v = d.lambda[i];
    if (std::abs(v) <= 1e-8) {
      d.lambda[i] = 0.0;
    } else if (std::abs(v - 1.0) <= 1e-8) {
      d.lambda[i] = 1.0;
    } else {
      throw std::runtime_error("diagonalize_idempotent: eigenvalue " + std::to_string(v) + " is not 0 or 1");
    }
  }
  if (max_dev(d.u_inv * d.lambda.asDiagonal() * d.u, p) > 1e-8) {
    throw std::runtime_error("diagonalize_idempotent: reconstruction exceeds tolerance");
  }
  return d;
}

}  // namespace skipnet
