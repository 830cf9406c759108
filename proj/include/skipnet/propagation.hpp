#pragma once

#include "skipnet/network.hpp"

#include <optional>
#include <string>
#include <vector>

namespace skipnet {

/// Features and gradients recorded across blocks m..n-1 of one stage, in eval
/// mode and 64-bit. x[k] is x_{m+k} (block input), branch[k] is x'_{m+k+1},
/// grad[k] is dL/dx_{m+k} for the probe loss L = <probe, x_n>.
struct PropagationTrace {
  std::size_t stage = 0;
  int m = 0;
  int n = 0;
  std::vector<Block<double>> blocks;  // blocks m..n-1
  std::vector<Tensor<double>> x;
  std::vector<Tensor<double>> branch;
  std::vector<Tensor<double>> grad;
  Tensor<double> probe;

  int length() const { return n - m; }
  const Eigen::MatrixXd& skip(int i) const { return blocks[static_cast<std::size_t>(i - m)].skip->matrix(); }
  /// True when every block in range shares one skip matrix.
  bool shared_skip() const;
};

/// Probe defaults to all ones, i.e. L = sum(x_n).
PropagationTrace capture_trace(const Network<double>& net, const Tensor<double>& input, std::size_t stage, int m,
                               int n, const std::optional<Tensor<double>>& probe = std::nullopt);

/// max |x_{i+1} - P x_i - x'_{i+1}| over the trace.
double replay_deviation(const PropagationTrace& trace);

/// P_{to-1} ... P_{from}; identity when from == to.
Eigen::MatrixXd skip_product(const PropagationTrace& trace, int from, int to);

struct ExpansionCheck {
  double deviation = 0;            // worst over every start m' in [m, n)
  std::vector<double> per_start;   // indexed by m' - m
  std::optional<double> collapsed; // idempotent shared P only: P^k replaced by P
};

/// x_n = P^{n-m'} x_{m'} + sum_i P^{n-i-1} x'_{i+1}, checked for all m'.
ExpansionCheck verify_forward_expansion(const PropagationTrace& trace);

/// dL/dx_{m'} = (P^{n-m'})^T g_n + sum_i (dx'_{i+1}/dx_{m'})^T (P^{n-i-1})^T g_n,
/// branch terms from vector-Jacobian products on a fresh graph, for all m'.
ExpansionCheck verify_backward_expansion(const PropagationTrace& trace);

/// ||P^k x|| / ||x||. Throws std::invalid_argument for k < 1 or x = 0.
double skip_path_gain(const Eigen::MatrixXd& p, int k, const Eigen::VectorXd& x);
/// ||(P^k)^T g|| / ||g||.
double gradient_skip_gain(const Eigen::MatrixXd& p, int k, const Eigen::VectorXd& g);

struct NullSpaceSplit {
  Eigen::VectorXd column;  // P v
  Eigen::VectorXd null;    // (I - P) v
  bool orthogonal = false; // P symmetric: the split is orthogonal
  /// Squared-norm shares; only meaningful when `orthogonal`.
  double column_fraction = 0;
  double null_fraction = 0;
};

NullSpaceSplit null_space_components(const Eigen::MatrixXd& p, const Eigen::VectorXd& v);

/// Null-space share of a feature tensor, summed over all (n, h, w) positions.
/// Nullopt unless P is a symmetric idempotent.
std::optional<double> null_space_fraction(const Eigen::MatrixXd& p, const Tensor<double>& x);

struct FlowReport {
  std::size_t stage = 0;
  int m = 0;
  int n = 0;
  std::string skip_kind;
  double skip_gain = 0;                 // ||P^{n-m} x_m|| / ||x_m||
  double gradient_gain = 0;             // ||(P^{n-m})^T g_n|| / ||g_n||
  std::vector<double> term_norms;       // skip term then one per branch term
  std::optional<double> input_null_fraction;
  std::vector<std::optional<double>> branch_null_fractions;
  double replay_deviation = 0;
  ExpansionCheck forward;
  ExpansionCheck backward;

  std::string text() const;
  std::string csv() const;  // metric,index,value
};

FlowReport analyze_flow(const PropagationTrace& trace);

}  // namespace skipnet
