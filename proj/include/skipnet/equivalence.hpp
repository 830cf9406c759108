#pragma once

#include "skipnet/network.hpp"

#include <cstdint>

namespace skipnet {

/// Rewrites every stage with a shared orthogonal skip Q (L blocks) into
/// identity skips. Block i (1-based) gets post-mix Q^{L-i} and pre-mix
/// Q^{i-L-1} = (Q^{L+1-i})^T; the stage input is premultiplied by Q^L.
/// Identity stages are left untouched. Trainable weights are not modified.
/// Throws std::invalid_argument for non-orthogonal or per-block distinct skips.
template <class Scalar>
Network<Scalar> convert_orthogonal_to_identity(const Network<Scalar>& net);

/// Rewrites every stage with a shared idempotent skip P = U^{-1} diag(l) U
/// into diagonal skips diag(l): input mix U, pre-mix U^{-1}, post-mix U,
/// output mix U^{-1}. Identity stages are left untouched.
template <class Scalar>
Network<Scalar> convert_idempotent_to_diagonal(const Network<Scalar>& net);

/// Stem kernel with the first stage's input mix folded in (W0 = M W0^q).
template <class Scalar>
Tensor<Scalar> effective_stem(const Network<Scalar>& net);

struct EquivalenceResult {
  double max_deviation = 0;
  bool passed = false;
};

/// Eval-mode logits of both networks on `num_inputs` seeded N(0,1) inputs.
template <class Scalar>
EquivalenceResult verify_equivalence(const Network<Scalar>& a, const Network<Scalar>& b, int num_inputs,
                                     std::uint64_t seed, double tol);

/// Max deviation between d(<w, logits>)/d(input) of the two networks, with
/// seeded inputs and probe weights w.
template <class Scalar>
double gradient_deviation(const Network<Scalar>& a, const Network<Scalar>& b, int num_inputs, std::uint64_t seed);

/// Random BN affine parameters and running statistics, so eval-mode checks
/// do not run through the trivial gamma = 1, mean = 0, var = 1 state.
template <class Scalar>
void randomize_batch_norm(Network<Scalar>& net, std::uint64_t seed);

struct MixingReport {
  Index branches = 0;
  bool cross_branch_mixing = false;  // pre/post mixes couple different branches
  bool skip_mixing = false;          // the skip matrix couples different branches
  /// pattern(a, b) = 1 when pre- or post-mix has a nonzero entry from branch b into branch a.
  Eigen::MatrixXi pattern;
  std::string text() const;
};

/// Requires a grouped (multi-branch or depthwise) block.
template <class Scalar>
MixingReport mixing_interaction_report(const Block<Scalar>& block, double tol = 1e-12);

}  // namespace skipnet
