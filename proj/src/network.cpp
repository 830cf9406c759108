#include "skipnet/network.hpp"

#include <cmath>
#include <sstream>

namespace skipnet {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t transform_seed(const TransformSpec& t, std::uint64_t net_seed, std::size_t stage,
                             std::size_t block) {
  const std::uint64_t base = t.seed ? t.seed : net_seed;
  return splitmix64(base ^ splitmix64(stage * 1009 + block + 1));
}

bool is_power_of_two(Index n) { return n > 0 && (n & (n - 1)) == 0; }

template <class Scalar>
Tensor<Scalar> he_normal(Shape shape, std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(he_fan_in(shape)));
  return Tensor<Scalar>::randn(std::move(shape), rng, static_cast<Scalar>(stddev));
}

template <class Scalar>
void push_bn(std::vector<NamedTensor<Scalar>>& out, const std::string& prefix, BatchNormParams<Scalar>& bn) {
  out.push_back({prefix + ".gamma", &bn.gamma, false});
  out.push_back({prefix + ".beta", &bn.beta, false});
}

template <class Scalar>
void push_bn_buffers(std::vector<NamedTensor<Scalar>>& out, const std::string& prefix,
                     BatchNormParams<Scalar>& bn) {
  out.push_back({prefix + ".running_mean", &bn.running_mean, false});
  out.push_back({prefix + ".running_var", &bn.running_var, false});
}

std::string stage_name(std::size_t s) { return "stage" + std::to_string(s); }
std::string block_name(std::size_t s, std::size_t b) {
  return stage_name(s) + ".block" + std::to_string(b);
}

template <class To, class From>
BatchNormParams<To> cast_bn(const BatchNormParams<From>& bn) {
  return {bn.gamma.template cast<To>(), bn.beta.template cast<To>(), bn.running_mean.template cast<To>(),
          bn.running_var.template cast<To>()};
}

template <class Scalar>
Var maybe_mix(ForwardContext<Scalar>& ctx, Var x, const std::optional<Eigen::MatrixXd>& mix) {
  if (!mix) return x;
  return channel_mix(ctx.graph(), x, Matrix<Scalar>(mix->template cast<Scalar>()));
}

}  // namespace

std::string_view to_string(BranchMode mode) {
  switch (mode) {
    case BranchMode::single: return "single";
    case BranchMode::multi: return "multi";
    case BranchMode::depthwise: return "depthwise";
  }
  return "unknown";
}

BranchMode parse_branch_mode(std::string_view name) {
  if (name == "single") return BranchMode::single;
  if (name == "multi") return BranchMode::multi;
  if (name == "depthwise") return BranchMode::depthwise;
  throw std::invalid_argument("unknown branch mode '" + std::string(name) + "'");
}

Index NetworkSpec::groups(Index width) const {
  switch (branch_mode) {
    case BranchMode::single: return 1;
    case BranchMode::multi: return branches;
    case BranchMode::depthwise: return width;
  }
  return 1;
}

Index NetworkSpec::branch_count(Index width) const { return groups(width); }

int resolve_branches(const TransformSpec& t, Index width) {
  return t.branches == 0 ? static_cast<int>(width) : t.branches;
}

void NetworkSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid network spec: " + what); };
  if (blocks_per_stage < 1) fail("blocks_per_stage must be positive");
  if (stage_widths.empty()) fail("stage_widths must not be empty");
  if (num_classes < 1) fail("num_classes must be positive");
  for (Index d : input_shape)
    if (d < 1) fail("input_shape entries must be positive");
  if (depth_label && *depth_label != depth()) {
    fail("depth_label " + std::to_string(*depth_label) + " != 6K+2 = " + std::to_string(depth()) +
         " for K = " + std::to_string(blocks_per_stage));
  }
  if (branch_mode == BranchMode::multi && branches < 2) fail("multi branch mode needs branches >= 2");
  if (transform.kind == TransformKind::diagonal) {
    fail("diagonal skips are produced by conversion, not built from a spec");
  }
  for (Index w : stage_widths) {
    const std::string at = " (stage width " + std::to_string(w) + ")";
    if (w < 1) fail("stage widths must be positive");
    if (branch_mode == BranchMode::multi && w % branches != 0) {
      fail("branch count " + std::to_string(branches) + " does not divide width" + at);
    }
    switch (transform.kind) {
      case TransformKind::orthogonal_tp:
      case TransformKind::orthogonal_random:
        if (!is_power_of_two(w)) fail("orthogonal Kronecker transforms need a power-of-2 width" + at);
        break;
      case TransformKind::idempotent_mr:
      case TransformKind::idempotent_cmr: {
        const int b = resolve_branches(transform, w);
        if (b < 1 || w % b != 0) fail("transform branch count B = " + std::to_string(b) + " does not divide width" + at);
        break;
      }
      case TransformKind::periodic:
        if (w < 2) fail("periodic transform needs width >= 2" + at);
        if (transform.period < 1) fail("periodic transform needs period >= 1");
        break;
      default:
        break;
    }
  }
}

void require_input_shape(const NetworkSpec& spec, const Shape& s) {
  if (s.size() != 4 || s[1] != spec.input_shape[0] || s[2] != spec.input_shape[1] ||
      s[3] != spec.input_shape[2]) {
    throw ShapeError("network input " + to_string(s) + " does not match Nx" +
                     to_string({spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]}));
  }
}

Index he_fan_in(const Shape& kernel_shape) {
  Index fan_in = 1;
  for (std::size_t i = 1; i < kernel_shape.size(); ++i) fan_in *= kernel_shape[i];
  return fan_in;
}

template <class Scalar>
BatchNormParams<Scalar> BatchNormParams<Scalar>::init(Index channels) {
  return {Tensor<Scalar>::ones({channels}), Tensor<Scalar>::zeros({channels}), Tensor<Scalar>::zeros({channels}),
          Tensor<Scalar>::ones({channels})};
}

template <class Scalar>
kernels::ChannelStats<Scalar> BatchNormParams<Scalar>::running() const {
  return {running_mean.array(), running_var.array(), 0};
}

std::shared_ptr<const StructuredTransform> build_transform(const TransformSpec& t, Index width,
                                                           std::uint64_t seed) {
  switch (t.kind) {
    case TransformKind::identity: return std::make_shared<const StructuredTransform>(make_identity(width));
    case TransformKind::zero: return std::make_shared<const StructuredTransform>(make_zero(width));
    case TransformKind::idempotent_mr:
      return std::make_shared<const StructuredTransform>(make_idempotent_mr(width, resolve_branches(t, width)));
    case TransformKind::idempotent_cmr:
      return std::make_shared<const StructuredTransform>(make_idempotent_cmr(width, resolve_branches(t, width)));
    case TransformKind::orthogonal_tp: return std::make_shared<const StructuredTransform>(make_orthogonal_tp(width));
    case TransformKind::orthogonal_random:
      return std::make_shared<const StructuredTransform>(make_orthogonal_random(width, seed));
    case TransformKind::periodic:
      return std::make_shared<const StructuredTransform>(make_periodic(width, t.period, seed));
    case TransformKind::diagonal: break;
  }
  throw std::invalid_argument("build_transform: cannot build a '" + std::string(to_string(t.kind)) +
                              "' transform from a spec");
}

template <class Scalar>
Block<Scalar> build_block(Index width, const NetworkSpec& spec, std::shared_ptr<const StructuredTransform> skip,
                          std::mt19937_64& rng) {
  if (!skip || skip->size() != width) {
    throw std::invalid_argument("build_block: skip transform size does not match width " + std::to_string(width));
  }
  const Index groups = spec.groups(width);
  if (width % groups != 0) {
    throw std::invalid_argument("build_block: width " + std::to_string(width) + " not divisible into " +
                                std::to_string(groups) + " branches");
  }
  Block<Scalar> b;
  b.skip = std::move(skip);
  b.branch.groups = groups;
  b.branch.count = spec.branch_count(width);
  b.branch.bn1 = BatchNormParams<Scalar>::init(width);
  b.branch.conv1 = he_normal<Scalar>({width, width / groups, 3, 3}, rng);
  b.branch.bn2 = BatchNormParams<Scalar>::init(width);
  b.branch.conv2 = he_normal<Scalar>({width, width / groups, 3, 3}, rng);
  return b;
}

template <class Scalar>
Network<Scalar> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Network<Scalar> net;
  net.spec = spec;
  const auto& widths = spec.stage_widths;
  net.stem = he_normal<Scalar>({widths[0], spec.input_shape[0], 3, 3}, rng);
  for (std::size_t s = 0; s < widths.size(); ++s) {
    if (s > 0) {
      Transition<Scalar> t;
      t.bn = BatchNormParams<Scalar>::init(widths[s - 1]);
      t.conv = he_normal<Scalar>({widths[s], widths[s - 1], 3, 3}, rng);
      net.transitions.push_back(std::move(t));
    }
    Stage<Scalar> stage;
    stage.width = widths[s];
    std::shared_ptr<const StructuredTransform> shared =
        build_transform(spec.transform, widths[s], transform_seed(spec.transform, seed, s, 0));
    const bool fresh_per_block = spec.transform.kind == TransformKind::orthogonal_random && spec.transform.per_block;
    for (int b = 0; b < spec.blocks_per_stage; ++b) {
      auto skip = (fresh_per_block && b > 0)
                      ? build_transform(spec.transform, widths[s], transform_seed(spec.transform, seed, s, b))
                      : shared;
      stage.blocks.push_back(build_block<Scalar>(widths[s], spec, std::move(skip), rng));
    }
    net.stages.push_back(std::move(stage));
  }
  net.head.bn = BatchNormParams<Scalar>::init(widths.back());
  net.head.weight = he_normal<Scalar>({spec.num_classes, widths.back()}, rng);
  net.head.bias = Tensor<Scalar>::zeros({spec.num_classes});
  return net;
}

template <class Scalar>
std::vector<NamedTensor<Scalar>> Network<Scalar>::parameters() {
  std::vector<NamedTensor<Scalar>> out;
  out.push_back({"stem.weight", &stem, true});
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (s > 0) {
      auto& t = transitions[s - 1];
      const std::string p = "transition" + std::to_string(s);
      push_bn(out, p + ".bn", t.bn);
      out.push_back({p + ".conv.weight", &t.conv, true});
    }
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      auto& br = stages[s].blocks[b].branch;
      const std::string p = block_name(s, b);
      push_bn(out, p + ".bn1", br.bn1);
      out.push_back({p + ".conv1.weight", &br.conv1, true});
      push_bn(out, p + ".bn2", br.bn2);
      out.push_back({p + ".conv2.weight", &br.conv2, true});
    }
  }
  push_bn(out, "head.bn", head.bn);
  out.push_back({"head.dense.weight", &head.weight, true});
  out.push_back({"head.dense.bias", &head.bias, false});
  return out;
}

template <class Scalar>
std::vector<BatchNormParams<Scalar>*> Network<Scalar>::batch_norm_layers() {
  std::vector<BatchNormParams<Scalar>*> out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (auto& b : stages[s].blocks) {
      out.push_back(&b.branch.bn1);
      out.push_back(&b.branch.bn2);
    }
    if (s + 1 < stages.size()) out.push_back(&transitions[s].bn);
  }
  out.push_back(&head.bn);
  return out;
}

template <class Scalar>
std::vector<NamedTensor<Scalar>> Network<Scalar>::buffers() {
  std::vector<NamedTensor<Scalar>> out;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].blocks.size(); ++b) {
      auto& br = stages[s].blocks[b].branch;
      push_bn_buffers(out, block_name(s, b) + ".bn1", br.bn1);
      push_bn_buffers(out, block_name(s, b) + ".bn2", br.bn2);
    }
    if (s + 1 < stages.size()) push_bn_buffers(out, "transition" + std::to_string(s + 1) + ".bn", transitions[s].bn);
  }
  push_bn_buffers(out, "head.bn", head.bn);
  return out;
}

template <class Scalar>
Index Network<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto& p : const_cast<Network*>(this)->parameters()) n += p.tensor->size();
  return n;
}

template <class Scalar>
Index Network<Scalar>::fixed_parameter_count() const {
  Index n = 0;
  auto add = [&n](const std::optional<Eigen::MatrixXd>& m) {
    if (m) n += m->size();
  };
  for (const auto& st : stages) {
    add(st.input_mix);
    add(st.output_mix);
    const StructuredTransform* last = nullptr;
    for (const auto& b : st.blocks) {
      if (b.skip.get() != last) n += b.skip->matrix().size();
      last = b.skip.get();
      add(b.pre_mix);
      add(b.post_mix);
    }
  }
  return n;
}

template <class Scalar>
template <class Other>
Network<Other> Network<Scalar>::cast() const {
  Network<Other> out;
  out.spec = spec;
  out.stem = stem.template cast<Other>();
  for (const auto& st : stages) {
    Stage<Other> s;
    s.width = st.width;
    s.input_mix = st.input_mix;
    s.output_mix = st.output_mix;
    for (const auto& b : st.blocks) {
      Block<Other> nb;
      nb.skip = b.skip;
      nb.pre_mix = b.pre_mix;
      nb.post_mix = b.post_mix;
      nb.branch.bn1 = cast_bn<Other>(b.branch.bn1);
      nb.branch.conv1 = b.branch.conv1.template cast<Other>();
      nb.branch.bn2 = cast_bn<Other>(b.branch.bn2);
      nb.branch.conv2 = b.branch.conv2.template cast<Other>();
      nb.branch.groups = b.branch.groups;
      nb.branch.count = b.branch.count;
      s.blocks.push_back(std::move(nb));
    }
    out.stages.push_back(std::move(s));
  }
  for (const auto& t : transitions) out.transitions.push_back({cast_bn<Other>(t.bn), t.conv.template cast<Other>()});
  out.head.bn = cast_bn<Other>(head.bn);
  out.head.weight = head.weight.template cast<Other>();
  out.head.bias = head.bias.template cast<Other>();
  return out;
}

// ---------------------------------------------------------------------------

template <class Scalar>
Var ForwardContext<Scalar>::param(const Tensor<Scalar>& t) {
  if (auto it = bound_.find(&t); it != bound_.end()) return it->second;
  Var v = graph_.leaf(t, track_params_);
  bound_.emplace(&t, v);
  return v;
}

template <class Scalar>
std::optional<Var> ForwardContext<Scalar>::bound(const Tensor<Scalar>& t) const {
  if (auto it = bound_.find(&t); it != bound_.end()) return it->second;
  return std::nullopt;
}

template <class Scalar>
Var batch_norm_layer(ForwardContext<Scalar>& ctx, const BatchNormParams<Scalar>& bn, Var x) {
  Var gamma = ctx.param(bn.gamma);
  Var beta = ctx.param(bn.beta);
  if (ctx.mode() == Mode::train) {
    ctx.batch_stats().push_back(kernels::channel_stats(ctx.graph().value(x)));
    return batch_norm_train(ctx.graph(), x, gamma, beta);
  }
  return batch_norm_eval(ctx.graph(), x, gamma, beta, bn.running());
}

template <class Scalar>
Var branch_forward(ForwardContext<Scalar>& ctx, const Block<Scalar>& block, Var x) {
  auto& g = ctx.graph();
  const Branch<Scalar>& br = block.branch;
  const Conv2dOptions conv{.stride = 1, .padding = 1, .groups = br.groups};
  Var h = maybe_mix(ctx, x, block.pre_mix);
  h = batch_norm_layer(ctx, br.bn1, h);
  h = conv2d(g, h, ctx.param(br.conv1), conv);
  h = batch_norm_layer(ctx, br.bn2, h);
  h = relu(g, h);
  h = conv2d(g, h, ctx.param(br.conv2), conv);
  return maybe_mix(ctx, h, block.post_mix);
}

template <class Scalar>
BlockOutput<Scalar> block_forward(ForwardContext<Scalar>& ctx, const Block<Scalar>& block, Var x) {
  Var f = branch_forward(ctx, block, x);
  switch (block.skip->kind()) {
    case TransformKind::zero: return {f, f};
    case TransformKind::identity: return {add(ctx.graph(), x, f), f};
    default: break;
  }
  Var skip = channel_mix(ctx.graph(), x, Matrix<Scalar>(block.skip->matrix().template cast<Scalar>()));
  return {add(ctx.graph(), skip, f), f};
}

template <class Scalar>
Var stage_forward(ForwardContext<Scalar>& ctx, const Stage<Scalar>& stage, Var x) {
  x = maybe_mix(ctx, x, stage.input_mix);
  for (const auto& b : stage.blocks) x = block_forward(ctx, b, x).output;
  return maybe_mix(ctx, x, stage.output_mix);
}

template <class Scalar>
Var transition_forward(ForwardContext<Scalar>& ctx, const Transition<Scalar>& t, Var x) {
  Var h = batch_norm_layer(ctx, t.bn, x);
  h = relu(ctx.graph(), h);
  return conv2d(ctx.graph(), h, ctx.param(t.conv), Conv2dOptions{.stride = 2, .padding = 1, .groups = 1});
}

template <class Scalar>
Var head_forward(ForwardContext<Scalar>& ctx, const Head<Scalar>& head, Var x) {
  Var h = batch_norm_layer(ctx, head.bn, x);
  h = relu(ctx.graph(), h);
  h = global_avg_pool(ctx.graph(), h);
  return dense(ctx.graph(), h, ctx.param(head.weight), ctx.param(head.bias));
}

template <class Scalar>
Var stage_input(ForwardContext<Scalar>& ctx, const Network<Scalar>& net, Var x, std::size_t stage) {
  if (stage >= net.stages.size()) throw std::out_of_range("stage index " + std::to_string(stage) + " out of range");
  require_input_shape(net.spec, ctx.graph().value(x).shape());
  Var h = conv2d(ctx.graph(), x, ctx.param(net.stem), Conv2dOptions{.stride = 1, .padding = 1, .groups = 1});
  for (std::size_t s = 0; s < stage; ++s) {
    h = stage_forward(ctx, net.stages[s], h);
    h = transition_forward(ctx, net.transitions[s], h);
  }
  return maybe_mix(ctx, h, net.stages[stage].input_mix);
}

template <class Scalar>
Var forward(ForwardContext<Scalar>& ctx, const Network<Scalar>& net, Var x) {
  require_input_shape(net.spec, ctx.graph().value(x).shape());
  Var h = conv2d(ctx.graph(), x, ctx.param(net.stem), Conv2dOptions{.stride = 1, .padding = 1, .groups = 1});
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    if (s > 0) h = transition_forward(ctx, net.transitions[s - 1], h);
    h = stage_forward(ctx, net.stages[s], h);
  }
  return head_forward(ctx, net.head, h);
}

template <class Scalar>
Tensor<Scalar> predict(const Network<Scalar>& net, const Tensor<Scalar>& batch) {
  Graph<Scalar> g;
  ForwardContext<Scalar> ctx(g, Mode::eval, false);
  Var logits = forward(ctx, net, g.leaf(batch));
  return g.value(logits);
}

template <class Scalar>
void commit_running_stats(Network<Scalar>& net, const std::vector<kernels::ChannelStats<Scalar>>& stats,
                          double momentum) {
  auto layers = net.batch_norm_layers();
  if (layers.size() != stats.size()) {
    throw std::logic_error("commit_running_stats: " + std::to_string(stats.size()) + " batch statistics for " +
                           std::to_string(layers.size()) + " BN layers");
  }
  const auto mu = static_cast<Scalar>(momentum);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& st = stats[i];
    const Scalar correction =
        st.count > 1 ? static_cast<Scalar>(st.count) / static_cast<Scalar>(st.count - 1) : Scalar(1);
    layers[i]->running_mean.array() = mu * layers[i]->running_mean.array() + (Scalar(1) - mu) * st.mean;
    layers[i]->running_var.array() = mu * layers[i]->running_var.array() + (Scalar(1) - mu) * st.var * correction;
  }
}

// ---------------------------------------------------------------------------

template <class Scalar>
NetworkSummary describe(const Network<Scalar>& net) {
  NetworkSummary sum;
  sum.parameter_count = net.parameter_count();
  sum.fixed_parameter_count = net.fixed_parameter_count();
  const auto& spec = net.spec;
  std::ostringstream os;
  auto line = [&](const std::string& s) {
    sum.layers.push_back(s);
    os << "  " << s << '\n';
  };
  os << "network depth " << spec.depth() << ", K = " << spec.blocks_per_stage << ", branch mode "
     << to_string(spec.branch_mode) << ", transform " << to_string(spec.transform.kind) << '\n';
  line("stem conv3x3 " + std::to_string(spec.input_shape[0]) + "->" + std::to_string(spec.stage_widths[0]));
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    const auto& st = net.stages[s];
    if (s > 0) {
      line("transition" + std::to_string(s) + " bn-relu-conv3x3/2 " + std::to_string(net.stages[s - 1].width) +
           "->" + std::to_string(st.width));
    }
    const Index r = st.blocks.empty() ? 0 : rank(st.blocks.front().skip->matrix());
    sum.stage_ranks.push_back(r);
    sum.stage_widths.push_back(st.width);
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const auto& blk = st.blocks[b];
      std::string l = block_name(s, b) + " width " + std::to_string(st.width) + " branches " +
                      std::to_string(blk.branch.count) + " skip " + std::string(to_string(blk.skip->kind())) +
                      " rank " + std::to_string(rank(blk.skip->matrix()));
      if (blk.pre_mix || blk.post_mix) l += " wrapped";
      line(l);
    }
  }
  line("head bn-relu-gap-dense " + std::to_string(spec.stage_widths.back()) + "->" +
       std::to_string(spec.num_classes));
  os << "trainable parameters " << sum.parameter_count << ", fixed matrix entries " << sum.fixed_parameter_count
     << '\n';
  sum.text = os.str();
  return sum;
}

#define SKIPNET_INSTANTIATE_NETWORK(S)                                                                     \
  template struct BatchNormParams<S>;                                                                      \
  template struct Network<S>;                                                                              \
  template class ForwardContext<S>;                                                                        \
  template Block<S> build_block(Index, const NetworkSpec&, std::shared_ptr<const StructuredTransform>,     \
                                std::mt19937_64&);                                                         \
  template Network<S> build_network(const NetworkSpec&, std::uint64_t);                                    \
  template Var batch_norm_layer(ForwardContext<S>&, const BatchNormParams<S>&, Var);                       \
  template Var branch_forward(ForwardContext<S>&, const Block<S>&, Var);                                   \
  template BlockOutput<S> block_forward(ForwardContext<S>&, const Block<S>&, Var);                         \
  template Var stage_forward(ForwardContext<S>&, const Stage<S>&, Var);                                    \
  template Var transition_forward(ForwardContext<S>&, const Transition<S>&, Var);                          \
  template Var head_forward(ForwardContext<S>&, const Head<S>&, Var);                                      \
  template Var stage_input(ForwardContext<S>&, const Network<S>&, Var, std::size_t);                       \
  template Var forward(ForwardContext<S>&, const Network<S>&, Var);                                        \
  template Tensor<S> predict(const Network<S>&, const Tensor<S>&);                                         \
  template void commit_running_stats(Network<S>&, const std::vector<kernels::ChannelStats<S>>&, double);   \
  template NetworkSummary describe(const Network<S>&);

SKIPNET_INSTANTIATE_NETWORK(float)
SKIPNET_INSTANTIATE_NETWORK(double)

template Network<double> Network<float>::cast<double>() const;
template Network<float> Network<double>::cast<float>() const;
template Network<double> Network<double>::cast<double>() const;
template Network<float> Network<float>::cast<float>() const;

}  // namespace skipnet
