#pragma once

#include "skipnet/autodiff.hpp"
#include "skipnet/ops.hpp"
#include "skipnet/transforms.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace skipnet {

enum class BranchMode { single, multi, depthwise };
enum class Mode { train, eval };

std::string_view to_string(BranchMode mode);
BranchMode parse_branch_mode(std::string_view name);

/// How each stage's skip matrix is built. `branches == 0` means "B equals
/// the stage width" (P_MR with every entry 1/R).
struct TransformSpec {
  TransformKind kind = TransformKind::identity;
  int branches = 0;
  int period = 1;
  std::uint64_t seed = 0;
  /// Orthogonal-Random only: draw a fresh matrix for every block.
  bool per_block = true;
};

struct NetworkSpec {
  int blocks_per_stage = 3;
  std::vector<Index> stage_widths{8, 16, 32};
  BranchMode branch_mode = BranchMode::single;
  int branches = 1;  // multi mode only
  TransformSpec transform;
  int num_classes = 10;
  std::array<Index, 3> input_shape{3, 32, 32};
  std::optional<int> depth_label;

  /// Two convolutions per block plus the stem and the head: 6K + 2 for three stages.
  int depth() const { return 2 * blocks_per_stage * static_cast<int>(stage_widths.size()) + 2; }
  /// Convolution groups inside a branch at the given width.
  Index groups(Index width) const;
  /// Number of branches reported for the given width.
  Index branch_count(Index width) const;
  /// Throws std::invalid_argument naming the violated constraint.
  void validate() const;
};

/// Which B a merge-and-run transform uses at a given stage width.
int resolve_branches(const TransformSpec& t, Index width);

template <class Scalar>
struct BatchNormParams {
  Tensor<Scalar> gamma, beta;
  Tensor<Scalar> running_mean, running_var;

  static BatchNormParams init(Index channels);
  kernels::ChannelStats<Scalar> running() const;
};

/// The regular connection: BN -> conv3x3 -> BN -> ReLU -> conv3x3.
/// Multi-branch and depthwise modes use grouped convolutions: branch b owns the
/// contiguous channel group b, and the branch outputs sum into the full width.
template <class Scalar>
struct Branch {
  BatchNormParams<Scalar> bn1;
  Tensor<Scalar> conv1;
  BatchNormParams<Scalar> bn2;
  Tensor<Scalar> conv2;
  Index groups = 1;
  Index count = 1;
};

/// y = skip * x + post_mix * F(pre_mix * x)
template <class Scalar>
struct Block {
  std::shared_ptr<const StructuredTransform> skip;
  Branch<Scalar> branch;
  std::optional<Eigen::MatrixXd> pre_mix;
  std::optional<Eigen::MatrixXd> post_mix;
};

template <class Scalar>
struct Stage {
  Index width = 0;
  std::vector<Block<Scalar>> blocks;
  /// Fixed change of basis applied to the stage input / output (set by conversions).
  std::optional<Eigen::MatrixXd> input_mix;
  std::optional<Eigen::MatrixXd> output_mix;
};

/// BN -> ReLU -> stride-2 conv3x3 between stages.
template <class Scalar>
struct Transition {
  BatchNormParams<Scalar> bn;
  Tensor<Scalar> conv;
};

template <class Scalar>
struct Head {
  BatchNormParams<Scalar> bn;
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;
};

template <class Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar>* tensor;
  bool decay;  // weight decay applies
};

template <class Scalar>
struct Network {
  NetworkSpec spec;
  Tensor<Scalar> stem;
  std::vector<Stage<Scalar>> stages;
  std::vector<Transition<Scalar>> transitions;
  Head<Scalar> head;

  /// Trainable tensors in a fixed order.
  std::vector<NamedTensor<Scalar>> parameters();
  /// Running statistics, in forward traversal order of their BN layers.
  std::vector<NamedTensor<Scalar>> buffers();
  std::vector<BatchNormParams<Scalar>*> batch_norm_layers();

  Index parameter_count() const;
  /// Entries of fixed skip and mix matrices (not trained).
  Index fixed_parameter_count() const;

  template <class Other>
  Network<Other> cast() const;
};

Index he_fan_in(const Shape& kernel_shape);

template <class Scalar>
Block<Scalar> build_block(Index width, const NetworkSpec& spec,
                          std::shared_ptr<const StructuredTransform> skip, std::mt19937_64& rng);

/// Builds the skip matrix for a stage (or a block, for per-block random kinds).
std::shared_ptr<const StructuredTransform> build_transform(const TransformSpec& t, Index width,
                                                           std::uint64_t seed);

template <class Scalar>
Network<Scalar> build_network(const NetworkSpec& spec, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward pass

template <class Scalar>
class ForwardContext {
 public:
  ForwardContext(Graph<Scalar>& graph, Mode mode, bool track_params = false)
      : graph_(graph), mode_(mode), track_params_(track_params) {}

  Graph<Scalar>& graph() { return graph_; }
  Mode mode() const { return mode_; }

  /// Leaf for a parameter tensor, created on first use.
  Var param(const Tensor<Scalar>& t);
  std::optional<Var> bound(const Tensor<Scalar>& t) const;

  /// Batch statistics of every train-mode BN, in traversal order.
  std::vector<kernels::ChannelStats<Scalar>>& batch_stats() { return batch_stats_; }

 private:
  Graph<Scalar>& graph_;
  Mode mode_;
  bool track_params_;
  std::unordered_map<const Tensor<Scalar>*, Var> bound_;
  std::vector<kernels::ChannelStats<Scalar>> batch_stats_;
};

template <class Scalar>
struct BlockOutput {
  Var output;
  Var branch;  // F(x, W) including any wraps
};

template <class Scalar>
Var batch_norm_layer(ForwardContext<Scalar>& ctx, const BatchNormParams<Scalar>& bn, Var x);
template <class Scalar>
Var branch_forward(ForwardContext<Scalar>& ctx, const Block<Scalar>& block, Var x);
template <class Scalar>
BlockOutput<Scalar> block_forward(ForwardContext<Scalar>& ctx, const Block<Scalar>& block, Var x);
template <class Scalar>
Var stage_forward(ForwardContext<Scalar>& ctx, const Stage<Scalar>& stage, Var x);
template <class Scalar>
Var transition_forward(ForwardContext<Scalar>& ctx, const Transition<Scalar>& t, Var x);
template <class Scalar>
Var head_forward(ForwardContext<Scalar>& ctx, const Head<Scalar>& head, Var x);

/// Stem plus every stage and transition before `stage`, then the stage's input mix.
template <class Scalar>
Var stage_input(ForwardContext<Scalar>& ctx, const Network<Scalar>& net, Var x, std::size_t stage);

template <class Scalar>
Var forward(ForwardContext<Scalar>& ctx, const Network<Scalar>& net, Var x);

/// Eval-mode logits without gradient tracking.
template <class Scalar>
Tensor<Scalar> predict(const Network<Scalar>& net, const Tensor<Scalar>& batch);

inline constexpr double kRunningStatsMomentum = 0.9;

/// running <- momentum * running + (1 - momentum) * batch (unbiased variance).
template <class Scalar>
void commit_running_stats(Network<Scalar>& net, const std::vector<kernels::ChannelStats<Scalar>>& stats,
                          double momentum = kRunningStatsMomentum);

void require_input_shape(const NetworkSpec& spec, const Shape& batch_shape);

// ---------------------------------------------------------------------------

struct NetworkSummary {
  std::vector<std::string> layers;
  Index parameter_count = 0;
  Index fixed_parameter_count = 0;
  std::vector<Index> stage_ranks;
  std::vector<Index> stage_widths;
  std::string text;
};

template <class Scalar>
NetworkSummary describe(const Network<Scalar>& net);

}  // namespace skipnet
