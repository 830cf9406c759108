#include "skipnet/optim.hpp"

namespace skipnet {

template <class Scalar>
void SgdNesterov<Scalar>::step(std::span<Tensor<Scalar>* const> params,
                               std::span<const Tensor<Scalar>* const> grads,
                               std::span<const bool> decay) {
  if (params.size() != grads.size() || params.size() != decay.size()) {
    throw ShapeError("sgd step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " + std::to_string(decay.size()) +
                     " decay flags");
  }
  if (velocity_.empty()) {
    for (const Tensor<Scalar>* p : params) velocity_.push_back(Tensor<Scalar>::zeros(p->shape()));
  }
  if (velocity_.size() != params.size()) {
    throw ShapeError("sgd step: parameter list changed size between steps");
  }
  const auto lr = static_cast<Scalar>(hyper_.learning_rate);
  const auto mu = static_cast<Scalar>(hyper_.momentum);
  const auto wd = static_cast<Scalar>(hyper_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<Scalar>& p = *params[i];
    const Tensor<Scalar>& g = *grads[i];
    Tensor<Scalar>& v = velocity_[i];
    require_same_shape(p.shape(), g.shape(), "sgd step gradient");
    require_same_shape(p.shape(), v.shape(), "sgd step velocity");
    typename Tensor<Scalar>::Storage d = g.array();
    if (decay[i]) d += wd * p.array();
    v.array() = mu * v.array() - lr * d;
    p.array() += mu * v.array() - lr * d;
  }
}

template class SgdNesterov<float>;
template class SgdNesterov<double>;

}  // namespace skipnet
