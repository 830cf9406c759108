#include "skipnet/equivalence.hpp"

#include <sstream>

namespace skipnet {

namespace {

Eigen::MatrixXd compose(const Eigen::MatrixXd& outer, const std::optional<Eigen::MatrixXd>& inner) {
  return inner ? Eigen::MatrixXd(outer * *inner) : outer;
}

Eigen::MatrixXd compose(const std::optional<Eigen::MatrixXd>& outer, const Eigen::MatrixXd& inner) {
  return outer ? Eigen::MatrixXd(*outer * inner) : inner;
}

/// The skip shared by every block of a stage, or an error.
template <class Scalar>
const StructuredTransform& shared_skip(const Stage<Scalar>& st, std::size_t s) {
  if (st.blocks.empty()) throw std::invalid_argument("stage " + std::to_string(s) + " has no blocks");
  const auto& first = *st.blocks.front().skip;
  for (const auto& b : st.blocks) {
    if (b.skip->size() != st.width) {
      throw std::invalid_argument("stage " + std::to_string(s) + ": skip size differs from the stage width");
    }
    if (b.skip != st.blocks.front().skip && b.skip->matrix() != first.matrix()) {
      throw std::invalid_argument("stage " + std::to_string(s) +
                                  ": blocks use different skip matrices; conversion needs one shared matrix");
    }
  }
  return first;
}

template <class Scalar>
Tensor<Scalar> random_inputs(const NetworkSpec& spec, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<Scalar>::randn({n, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}, rng);
}

template <class Scalar>
void require_compatible(const Network<Scalar>& a, const Network<Scalar>& b) {
  if (a.spec.input_shape != b.spec.input_shape || a.spec.num_classes != b.spec.num_classes) {
    throw ShapeError("networks differ in input shape or class count");
  }
}

}  // namespace

template <class Scalar>
Network<Scalar> convert_orthogonal_to_identity(const Network<Scalar>& net) {
  Network<Scalar> out = net;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    auto& st = out.stages[s];
    const auto& skip = shared_skip(st, s);
    if (skip.kind() == TransformKind::identity) continue;
    const Eigen::MatrixXd& q = skip.matrix();
    if (!is_orthogonal(q, 1e-9)) {
      throw std::invalid_argument("stage " + std::to_string(s) + ": skip '" + std::string(to_string(skip.kind())) +
                                  "' is not orthogonal");
    }
    const int l = static_cast<int>(st.blocks.size());
    auto identity = std::make_shared<const StructuredTransform>(make_identity(st.width));
    for (int i = 1; i <= l; ++i) {
      auto& b = st.blocks[static_cast<std::size_t>(i - 1)];
      const Eigen::MatrixXd t2 = matrix_power(q, l - i);
      const Eigen::MatrixXd t1 = matrix_power(q, l + 1 - i).transpose();
      b.post_mix = compose(t2, b.post_mix);
      b.pre_mix = compose(b.pre_mix, t1);
      b.skip = identity;
    }
    st.input_mix = compose(matrix_power(q, l), st.input_mix);
  }
  return out;
}

template <class Scalar>
Network<Scalar> convert_idempotent_to_diagonal(const Network<Scalar>& net) {
  Network<Scalar> out = net;
  for (std::size_t s = 0; s < out.stages.size(); ++s) {
    auto& st = out.stages[s];
    const auto& skip = shared_skip(st, s);
    if (skip.kind() == TransformKind::identity) continue;
    if (!is_idempotent(skip.matrix(), 1e-8)) {
      throw std::invalid_argument("stage " + std::to_string(s) + ": skip '" + std::string(to_string(skip.kind())) +
                                  "' is not idempotent");
    }
    const Diagonalization d = diagonalize_idempotent(skip.matrix());
    auto diag = std::make_shared<const StructuredTransform>(make_diagonal(d.lambda));
    for (auto& b : st.blocks) {
      b.post_mix = compose(d.u, b.post_mix);
      b.pre_mix = compose(b.pre_mix, d.u_inv);
      b.skip = diag;
    }
    st.input_mix = compose(d.u, st.input_mix);
    st.output_mix = compose(st.output_mix, d.u_inv);
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> effective_stem(const Network<Scalar>& net) {
  if (net.stages.empty() || !net.stages.front().input_mix) return net.stem;
  const Eigen::MatrixXd& m = *net.stages.front().input_mix;
  const Index o = net.stem.dim(0), per = net.stem.size() / o;
  using RowMajor = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMajor> w(net.stem.data(), o, per);
  Tensor<Scalar> out(net.stem.shape());
  Eigen::Map<RowMajor> dst(out.data(), o, per);
  dst = m.template cast<Scalar>() * w;
  return out;
}

template <class Scalar>
EquivalenceResult verify_equivalence(const Network<Scalar>& a, const Network<Scalar>& b, int num_inputs,
                                     std::uint64_t seed, double tol) {
  require_compatible(a, b);
  if (num_inputs < 1) throw std::invalid_argument("verify_equivalence: num_inputs must be positive");
  const Tensor<Scalar> x = random_inputs<Scalar>(a.spec, num_inputs, seed);
  EquivalenceResult r;
  r.max_deviation = static_cast<double>(max_abs_diff(predict(a, x), predict(b, x)));
  r.passed = r.max_deviation <= tol;
  return r;
}

template <class Scalar>
double gradient_deviation(const Network<Scalar>& a, const Network<Scalar>& b, int num_inputs, std::uint64_t seed) {
  require_compatible(a, b);
  const Tensor<Scalar> x = random_inputs<Scalar>(a.spec, num_inputs, seed);
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  const Tensor<Scalar> w = Tensor<Scalar>::randn({num_inputs, a.spec.num_classes}, rng);
  auto input_grad = [&](const Network<Scalar>& net) {
    Graph<Scalar> g;
    ForwardContext<Scalar> ctx(g, Mode::eval, false);
    Var in = g.leaf(x, true, "input");
    g.backward(weighted_sum(g, forward(ctx, net, in), w));
    return g.grad(in);
  };
  return static_cast<double>(max_abs_diff(input_grad(a), input_grad(b)));
}

template <class Scalar>
void randomize_batch_norm(Network<Scalar>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto* bn : net.batch_norm_layers()) {
    const Shape s = bn->gamma.shape();
    bn->gamma = Tensor<Scalar>::uniform(s, rng, Scalar(0.5), Scalar(1.5));
    bn->beta = Tensor<Scalar>::uniform(s, rng, Scalar(-0.5), Scalar(0.5));
    bn->running_mean = Tensor<Scalar>::uniform(s, rng, Scalar(-0.5), Scalar(0.5));
    bn->running_var = Tensor<Scalar>::uniform(s, rng, Scalar(0.5), Scalar(2.0));
  }
}

template <class Scalar>
MixingReport mixing_interaction_report(const Block<Scalar>& block, double tol) {
  const Index groups = block.branch.groups;
  const Index width = block.skip->size();
  if (groups < 2) throw std::invalid_argument("mixing_interaction_report: block has a single branch");
  const Index per = width / groups;
  MixingReport r;
  r.branches = groups;
  r.pattern = Eigen::MatrixXi::Zero(groups, groups);
  auto scan = [&](const Eigen::MatrixXd& m, bool into_pattern) {
    bool off = false;
    for (Index a = 0; a < groups; ++a) {
      for (Index b = 0; b < groups; ++b) {
        const bool nz = m.block(a * per, b * per, per, per).cwiseAbs().maxCoeff() > tol;
        if (into_pattern && nz) r.pattern(a, b) = 1;
        off = off || (nz && a != b);
      }
    }
    return off;
  };
  if (block.pre_mix) r.cross_branch_mixing = scan(*block.pre_mix, true) || r.cross_branch_mixing;
  if (block.post_mix) r.cross_branch_mixing = scan(*block.post_mix, true) || r.cross_branch_mixing;
  if (!block.pre_mix && !block.post_mix) r.pattern.setIdentity();
  r.skip_mixing = scan(block.skip->matrix(), false);
  return r;
}

std::string MixingReport::text() const {
  std::ostringstream os;
  os << branches << " branches, cross-branch mixing " << (cross_branch_mixing ? "present" : "absent")
     << ", skip couples branches " << (skip_mixing ? "yes" : "no") << '\n';
  for (Index a = 0; a < pattern.rows(); ++a) {
    os << "  ";
    for (Index b = 0; b < pattern.cols(); ++b) os << (pattern(a, b) ? '#' : '.');
    os << '\n';
  }
  return os.str();
}

#define SKIPNET_INSTANTIATE_EQUIVALENCE(S)                                                                  \
  template Network<S> convert_orthogonal_to_identity(const Network<S>&);                                    \
  template Network<S> convert_idempotent_to_diagonal(const Network<S>&);                                    \
  template Tensor<S> effective_stem(const Network<S>&);                                                     \
  template EquivalenceResult verify_equivalence(const Network<S>&, const Network<S>&, int, std::uint64_t,   \
                                                double);                                                    \
  template double gradient_deviation(const Network<S>&, const Network<S>&, int, std::uint64_t);             \
  template void randomize_batch_norm(Network<S>&, std::uint64_t);                                           \
  template MixingReport mixing_interaction_report(const Block<S>&, double);

SKIPNET_INSTANTIATE_EQUIVALENCE(float)
SKIPNET_INSTANTIATE_EQUIVALENCE(double)

}  // namespace skipnet
