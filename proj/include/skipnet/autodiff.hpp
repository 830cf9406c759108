#pragma once

#include "skipnet/tensor.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace skipnet {

/// Handle to a node of a Graph. Only meaningful for the graph that issued it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Operations are recorded in execution order, which is
/// also a topological order; backward walks the tape in reverse.
///
/// Every recorded op keeps its forward function so the tape can be replayed
/// after leaf values change (finite-difference checks rely on this).
template <class Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;
  using Inputs = std::span<const TensorT* const>;
  using ForwardFn = std::function<TensorT(Inputs)>;
  /// grads[i] is null when input i does not need a gradient; otherwise the
  /// function must accumulate (+=) into it.
  using BackwardFn =
      std::function<void(Inputs inputs, const TensorT& output, const TensorT& grad_output,
                         std::span<TensorT* const> grads)>;

  struct Op {
    std::string name;
    ForwardFn forward;
    BackwardFn backward;
  };

  Var leaf(TensorT value, bool requires_grad = false, std::string name = {});
  Var apply(Op op, std::vector<Var> inputs);

  const TensorT& value(Var v) const;
  bool requires_grad(Var v) const;
  const std::string& name(Var v) const;

  /// Gradient of the last backward() loss. Zero tensor for nodes the loss
  /// does not depend on; throws for nodes that do not track gradients.
  const TensorT& grad(Var v) const;

  /// Seeds d(loss)/d(loss) = 1 and propagates. Loss must hold one element.
  void backward(Var loss);
  /// Same, with an explicit cotangent for a non-scalar output.
  void backward(Var output, const TensorT& cotangent);

  void set_value(Var leaf, TensorT value);
  /// Recomputes every recorded op from current leaf values.
  void replay();
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::string name;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<int> inputs;
    ForwardFn forward;
    BackwardFn backward;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  std::vector<const TensorT*> input_values(const Node& n) const;

  std::vector<Node> nodes_;
};

}  // namespace skipnet
