#pragma once

#include "skipnet/tensor.hpp"

#include <span>
#include <vector>

namespace skipnet {

struct SgdHyper {
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// SGD with Nesterov momentum:
///   d = g + wd*p;  v <- mu*v - lr*d;  p <- p + mu*v - lr*d
/// Weight decay is applied per parameter only where `decay[i]` is set.
template <class Scalar>
class SgdNesterov {
 public:
  explicit SgdNesterov(SgdHyper hyper) : hyper_(hyper) {}

  const SgdHyper& hyper() const { return hyper_; }
  void set_learning_rate(double lr) { hyper_.learning_rate = lr; }

  /// Velocity buffers are created zero-filled on the first step.
  void step(std::span<Tensor<Scalar>* const> params, std::span<const Tensor<Scalar>* const> grads,
            std::span<const bool> decay);

  const std::vector<Tensor<Scalar>>& velocity() const { return velocity_; }

 private:
  SgdHyper hyper_;
  std::vector<Tensor<Scalar>> velocity_;
};

}  // namespace skipnet
