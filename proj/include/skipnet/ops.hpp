#pragma once

#include "skipnet/autodiff.hpp"
#include "skipnet/tensor.hpp"

#include <span>
#include <vector>

namespace skipnet {

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

inline constexpr double kBatchNormEpsilon = 1e-5;

/// Output spatial extent of a convolution along one axis.
Index conv_output_size(Index in, Index kernel, Index stride, Index padding);

// Graph-free kernels. Every graph op below is a thin wrapper over these, and
// tests use them directly when no gradient is needed.
namespace kernels {

template <class Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Conv2dOptions& opt);
template <class Scalar>
Tensor<Scalar> conv2d_grad_input(const Tensor<Scalar>& grad_output, const Tensor<Scalar>& kernel,
                                 const Shape& input_shape, const Conv2dOptions& opt);
template <class Scalar>
Tensor<Scalar> conv2d_grad_kernel(const Tensor<Scalar>& grad_output, const Tensor<Scalar>& input,
                                  const Shape& kernel_shape, const Conv2dOptions& opt);

/// out[n,:,h,w] = mix * in[n,:,h,w] for every position.
template <class Scalar>
Tensor<Scalar> channel_mix(const Matrix<Scalar>& mix, const Tensor<Scalar>& input);

template <class Scalar>
struct ChannelStats {
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> var;  // biased
  Index count = 0;  // samples per channel
};

/// Per-channel statistics over every axis except 1.
template <class Scalar>
ChannelStats<Scalar> channel_stats(const Tensor<Scalar>& input);

template <class Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, const ChannelStats<Scalar>& stats,
                          double eps);

template <class Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input);
template <class Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input);
template <class Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                     const Tensor<Scalar>& bias);
template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits);

}  // namespace kernels

// Recording ops. Fixed (non-differentiable) operands are taken by value.

template <class Scalar>
Var conv2d(Graph<Scalar>& g, Var input, Var kernel, Conv2dOptions opt = {});

/// Training-mode batch normalization using batch statistics.
template <class Scalar>
Var batch_norm_train(Graph<Scalar>& g, Var input, Var gamma, Var beta,
                     double eps = kBatchNormEpsilon);

/// Inference-mode batch normalization with fixed statistics.
template <class Scalar>
Var batch_norm_eval(Graph<Scalar>& g, Var input, Var gamma, Var beta,
                    kernels::ChannelStats<Scalar> stats, double eps = kBatchNormEpsilon);

template <class Scalar>
Var relu(Graph<Scalar>& g, Var input);

template <class Scalar>
Var add(Graph<Scalar>& g, Var a, Var b);

template <class Scalar>
Var global_avg_pool(Graph<Scalar>& g, Var input);

template <class Scalar>
Var dense(Graph<Scalar>& g, Var input, Var weight, Var bias);

/// Mean cross-entropy of softmax(logits) against integer labels.
template <class Scalar>
Var softmax_cross_entropy(Graph<Scalar>& g, Var logits, std::vector<int> labels);

/// Fixed 1x1 channel mixing (a skip transform or a conversion wrap).
/// The backward pass applies mix^T.
template <class Scalar>
Var channel_mix(Graph<Scalar>& g, Var input, Matrix<Scalar> mix);

template <class Scalar>
Var sum(Graph<Scalar>& g, Var input);

/// sum(input * weights) for a constant weights tensor.
template <class Scalar>
Var weighted_sum(Graph<Scalar>& g, Var input, Tensor<Scalar> weights);

}  // namespace skipnet
