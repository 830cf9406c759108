#include "skipnet/gradcheck.hpp"

#include <cmath>

namespace skipnet {

namespace {

std::vector<int> relu_nodes(const Graph<double>& g) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (g.name(Var{static_cast<int>(i)}) == "relu") ids.push_back(static_cast<int>(i));
  return ids;
}

using ActivationMask = std::vector<std::vector<bool>>;

ActivationMask activation_mask(const Graph<double>& g, const std::vector<int>& ids) {
  ActivationMask mask;
  for (int id : ids) {
    const Tensor<double>& v = g.value(Var{id});
    std::vector<bool> m(static_cast<std::size_t>(v.size()));
    for (Index i = 0; i < v.size(); ++i) m[static_cast<std::size_t>(i)] = v[i] > 0;
    mask.push_back(std::move(m));
  }
  return mask;
}

}  // namespace

GradcheckResult gradcheck_graph(Graph<double>& g, Var loss, const std::vector<std::pair<std::string, Var>>& leaves,
                                double step) {
  g.backward(loss);
  std::vector<Tensor<double>> analytic;
  for (const auto& [_, v] : leaves) analytic.push_back(g.grad(v));

  const std::vector<int> relus = relu_nodes(g);
  const ActivationMask base = activation_mask(g, relus);

  GradcheckResult result;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    const Var v = leaves[k].second;
    Tensor<double> value = g.value(v);
    Tensor<double> fd(value.shape());
    Index skipped = 0;
    for (Index i = 0; i < value.size(); ++i) {
      const double saved = value[i];
      value[i] = saved + step;
      g.set_value(v, value);
      g.replay();
      const double up = g.value(loss)[0];
      bool kink = activation_mask(g, relus) != base;
      value[i] = saved - step;
      g.set_value(v, value);
      g.replay();
      const double down = g.value(loss)[0];
      kink = kink || activation_mask(g, relus) != base;
      value[i] = saved;
      if (kink) {
        fd[i] = analytic[k][i];
        ++skipped;
      } else {
        fd[i] = (up - down) / (2 * step);
      }
    }
    g.set_value(v, value);
    g.replay();

    TensorGradcheck t;
    t.name = leaves[k].first;
    t.entries = value.size();
    t.kink_skipped = skipped;
    t.analytic_norm = analytic[k].array().matrix().norm();
    const double fd_norm = fd.array().matrix().norm();
    const double diff = (fd.array() - analytic[k].array()).matrix().norm();
    const double scale = std::max({fd_norm, t.analytic_norm, 1e-8});
    t.relative_error = diff / scale;
    if (t.relative_error >= result.max_relative_error) {
      result.max_relative_error = t.relative_error;
      result.worst = t.name;
    }
    result.tensors.push_back(t);
  }
  return result;
}

GradcheckResult gradcheck_network(const NetworkSpec& spec, std::uint64_t seed, int batch, double step) {
  Network<double> net = build_network<double>(spec, seed);
  std::mt19937_64 rng(seed ^ 0x2545f4914f6cdd1dULL);
  const Tensor<double> x =
      Tensor<double>::randn({batch, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}, rng);
  std::uniform_int_distribution<int> label(0, spec.num_classes - 1);
  std::vector<int> labels;
  for (int i = 0; i < batch; ++i) labels.push_back(label(rng));

  Graph<double> g;
  ForwardContext<double> ctx(g, Mode::train, true);
  Var in = g.leaf(x, true, "input");
  Var loss = softmax_cross_entropy(g, forward(ctx, net, in), labels);

  std::vector<std::pair<std::string, Var>> leaves{{"input", in}};
  for (auto& p : net.parameters()) leaves.emplace_back(p.name, *ctx.bound(*p.tensor));
  return gradcheck_graph(g, loss, leaves, step);
}

}  // namespace skipnet
