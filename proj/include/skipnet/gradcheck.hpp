#pragma once

#include "skipnet/network.hpp"

#include <string>
#include <vector>

namespace skipnet {

inline constexpr double kGradcheckStep = 1e-3;

struct TensorGradcheck {
  std::string name;
  double relative_error = 0;  // ||fd - analytic|| / max(||fd||, ||analytic||)
  double analytic_norm = 0;
  Index entries = 0;
  Index kink_skipped = 0;  // probes that moved some ReLU input across zero
};

struct GradcheckResult {
  std::vector<TensorGradcheck> tensors;
  double max_relative_error = 0;
  std::string worst;
};

/// Central differences over every entry of the given leaves, replaying the
/// tape for each probe. `loss` must be a scalar node of `g`. A probe whose
/// +-step flips the sign of any ReLU input straddles a kink where the
/// difference quotient is not a derivative; such entries are excluded from
/// the comparison and counted in `kink_skipped`.
GradcheckResult gradcheck_graph(Graph<double>& g, Var loss, const std::vector<std::pair<std::string, Var>>& leaves,
                                double step = kGradcheckStep);

/// Builds the network in 64-bit, runs a train-mode forward on `batch` seeded
/// random inputs with random labels and checks every parameter plus the input.
GradcheckResult gradcheck_network(const NetworkSpec& spec, std::uint64_t seed, int batch = 2,
                                  double step = kGradcheckStep);

}  // namespace skipnet
