#include "skipnet/autodiff.hpp"

namespace skipnet {

template <class Scalar>
auto Graph<Scalar>::node(Var v) const -> const Node& {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("Var " + std::to_string(v.id) + " does not belong to this graph");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

template <class Scalar>
auto Graph<Scalar>::node(Var v) -> Node& {
  return const_cast<Node&>(static_cast<const Graph&>(*this).node(v));
}

template <class Scalar>
std::vector<const Tensor<Scalar>*> Graph<Scalar>::input_values(const Node& n) const {
  std::vector<const TensorT*> values;
  values.reserve(n.inputs.size());
  for (int id : n.inputs) values.push_back(&nodes_[static_cast<std::size_t>(id)].value);
  return values;
}

template <class Scalar>
Var Graph<Scalar>::leaf(TensorT value, bool requires_grad, std::string name) {
  Node n;
  n.name = std::move(name);
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class Scalar>
Var Graph<Scalar>::apply(Op op, std::vector<Var> inputs) {
  Node n;
  n.name = std::move(op.name);
  n.is_leaf = false;
  for (Var v : inputs) {
    const Node& in = node(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || in.requires_grad;
  }
  const auto values = input_values(n);
  n.value = op.forward(Inputs(values));
  n.forward = std::move(op.forward);
  n.backward = std::move(op.backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <class Scalar>
const Tensor<Scalar>& Graph<Scalar>::value(Var v) const {
  return node(v).value;
}

template <class Scalar>
bool Graph<Scalar>::requires_grad(Var v) const {
  return node(v).requires_grad;
}

template <class Scalar>
const std::string& Graph<Scalar>::name(Var v) const {
  return node(v).name;
}

template <class Scalar>
const Tensor<Scalar>& Graph<Scalar>::grad(Var v) const {
  const Node& n = node(v);
  if (!n.requires_grad) {
    throw std::logic_error("node '" + n.name + "' does not track gradients");
  }
  if (n.grad.empty()) {
    const_cast<Node&>(n).grad = TensorT::zeros(n.value.shape());
  }
  return n.grad;
}

template <class Scalar>
void Graph<Scalar>::zero_grad() {
  for (Node& n : nodes_) n.grad = TensorT();
}

template <class Scalar>
void Graph<Scalar>::backward(Var loss) {
  if (node(loss).value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     to_string(node(loss).value.shape()));
  }
  backward(loss, TensorT::ones(node(loss).value.shape()));
}

template <class Scalar>
void Graph<Scalar>::backward(Var output, const TensorT& cotangent) {
  Node& out = node(output);
  require_same_shape(out.value.shape(), cotangent.shape(), "backward cotangent");
  if (!out.requires_grad) {
    throw std::logic_error("backward: output does not depend on any tracked tensor");
  }
  zero_grad();
  out.grad = cotangent;

  for (int id = output.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.is_leaf || !n.requires_grad || n.grad.empty()) continue;

    std::vector<TensorT*> grads(n.inputs.size(), nullptr);
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      Node& in = nodes_[static_cast<std::size_t>(n.inputs[k])];
      if (!in.requires_grad) continue;
      if (in.grad.empty()) in.grad = TensorT::zeros(in.value.shape());
      grads[k] = &in.grad;
    }
    const auto values = input_values(n);
    n.backward(Inputs(values), n.value, n.grad, std::span<TensorT* const>(grads));
  }
}

template <class Scalar>
void Graph<Scalar>::set_value(Var v, TensorT value) {
  Node& n = node(v);
  if (!n.is_leaf) throw std::logic_error("set_value: node '" + n.name + "' is not a leaf");
  require_same_shape(n.value.shape(), value.shape(), "set_value");
  n.value = std::move(value);
}

template <class Scalar>
void Graph<Scalar>::replay() {
  for (Node& n : nodes_) {
    if (n.is_leaf) continue;
    const auto values = input_values(n);
    n.value = n.forward(Inputs(values));
  }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace skipnet
