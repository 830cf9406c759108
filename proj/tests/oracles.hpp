#pragma once

// Second implementations used as test oracles. Plain loops over std::vector,
// no library kernels, so a bug would have to be made twice to go unnoticed.

#include "skipnet/network.hpp"

#include <cmath>
#include <vector>

namespace oracle {

using skipnet::Index;

struct Feature {
  Index n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;
  double& at(Index a, Index b, Index y, Index x) { return v[static_cast<std::size_t>(((a * c + b) * h + y) * w + x)]; }
  double at(Index a, Index b, Index y, Index x) const {
    return v[static_cast<std::size_t>(((a * c + b) * h + y) * w + x)];
  }
};

inline Feature from_tensor(const skipnet::Tensor<double>& t) {
  Feature f{t.dim(0), t.dim(1), t.dim(2), t.dim(3), {}};
  f.v.assign(t.data(), t.data() + t.size());
  return f;
}

inline skipnet::Tensor<double> to_tensor(const Feature& f) {
  skipnet::Tensor<double> t({f.n, f.c, f.h, f.w});
  for (std::size_t i = 0; i < f.v.size(); ++i) t[static_cast<Index>(i)] = f.v[i];
  return t;
}

/// Direct nested-loop grouped convolution.
inline Feature conv(const Feature& x, const skipnet::Tensor<double>& k, Index stride, Index pad, Index groups) {
  const Index o = k.dim(0), ipg = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const Index opg = o / groups;
  Feature y{x.n, o, (x.h + 2 * pad - kh) / stride + 1, (x.w + 2 * pad - kw) / stride + 1, {}};
  y.v.assign(static_cast<std::size_t>(y.n * y.c * y.h * y.w), 0.0);
  for (Index a = 0; a < x.n; ++a)
    for (Index oc = 0; oc < o; ++oc) {
      const Index g = oc / opg;
      for (Index oy = 0; oy < y.h; ++oy)
        for (Index ox = 0; ox < y.w; ++ox) {
          double s = 0;
          for (Index ic = 0; ic < ipg; ++ic)
            for (Index dy = 0; dy < kh; ++dy)
              for (Index dx = 0; dx < kw; ++dx) {
                const Index iy = oy * stride - pad + dy, ix = ox * stride - pad + dx;
                if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
                s += x.at(a, g * ipg + ic, iy, ix) * k[((oc * ipg + ic) * kh + dy) * kw + dx];
              }
          y.at(a, oc, oy, ox) = s;
        }
    }
  return y;
}

inline Feature bn_eval(const Feature& x, const skipnet::BatchNormParams<double>& bn, double eps = 1e-5) {
  Feature y = x;
  for (Index a = 0; a < x.n; ++a)
    for (Index c = 0; c < x.c; ++c)
      for (Index i = 0; i < x.h; ++i)
        for (Index j = 0; j < x.w; ++j)
          y.at(a, c, i, j) = bn.gamma[c] * (x.at(a, c, i, j) - bn.running_mean[c]) / std::sqrt(bn.running_var[c] + eps) +
                             bn.beta[c];
  return y;
}

inline Feature relu(Feature x) {
  for (double& v : x.v) v = v > 0 ? v : 0;
  return x;
}

inline Feature mix(const Feature& x, const Eigen::MatrixXd& m) {
  Feature y = x;
  for (Index a = 0; a < x.n; ++a)
    for (Index i = 0; i < x.h; ++i)
      for (Index j = 0; j < x.w; ++j)
        for (Index r = 0; r < x.c; ++r) {
          double s = 0;
          for (Index c = 0; c < x.c; ++c) s += m(r, c) * x.at(a, c, i, j);
          y.at(a, r, i, j) = s;
        }
  return y;
}

inline Feature plus(Feature a, const Feature& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
  return a;
}

inline Feature block(const skipnet::Block<double>& b, const Feature& x) {
  Feature h = b.pre_mix ? mix(x, *b.pre_mix) : x;
  const auto& br = b.branch;
  h = bn_eval(h, br.bn1);
  h = conv(h, br.conv1, 1, 1, br.groups);
  h = relu(bn_eval(h, br.bn2));
  h = conv(h, br.conv2, 1, 1, br.groups);
  if (b.post_mix) h = mix(h, *b.post_mix);
  return plus(mix(x, b.skip->matrix()), h);
}

/// Eval-mode logits, N x K.
inline std::vector<std::vector<double>> forward(const skipnet::Network<double>& net,
                                                const skipnet::Tensor<double>& input) {
  Feature h = conv(from_tensor(input), net.stem, 1, 1, 1);
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    if (s > 0) {
      const auto& t = net.transitions[s - 1];
      h = conv(relu(bn_eval(h, t.bn)), t.conv, 2, 1, 1);
    }
    const auto& st = net.stages[s];
    if (st.input_mix) h = mix(h, *st.input_mix);
    for (const auto& b : st.blocks) h = block(b, h);
    if (st.output_mix) h = mix(h, *st.output_mix);
  }
  h = relu(bn_eval(h, net.head.bn));
  const Index k = net.head.weight.dim(0);
  std::vector<std::vector<double>> logits(static_cast<std::size_t>(h.n), std::vector<double>(static_cast<std::size_t>(k)));
  for (Index a = 0; a < h.n; ++a) {
    std::vector<double> pooled(static_cast<std::size_t>(h.c));
    for (Index c = 0; c < h.c; ++c) {
      double s = 0;
      for (Index i = 0; i < h.h; ++i)
        for (Index j = 0; j < h.w; ++j) s += h.at(a, c, i, j);
      pooled[static_cast<std::size_t>(c)] = s / static_cast<double>(h.h * h.w);
    }
    for (Index r = 0; r < k; ++r) {
      double s = net.head.bias[r];
      for (Index c = 0; c < h.c; ++c) s += net.head.weight[r * h.c + c] * pooled[static_cast<std::size_t>(c)];
      logits[static_cast<std::size_t>(a)][static_cast<std::size_t>(r)] = s;
    }
  }
  return logits;
}

/// Trainable parameters of the architecture, counted from the layer list.
inline Index parameter_count(const skipnet::NetworkSpec& spec) {
  const auto& w = spec.stage_widths;
  Index n = w[0] * spec.input_shape[0] * 9;  // stem
  for (std::size_t s = 0; s < w.size(); ++s) {
    if (s > 0) n += 2 * w[s - 1] + w[s] * w[s - 1] * 9;  // transition BN + conv
    const Index groups = spec.groups(w[s]);
    const Index per_block = 2 * (2 * w[s]) + 2 * (w[s] * (w[s] / groups) * 9);
    n += spec.blocks_per_stage * per_block;
  }
  n += 2 * w.back() + spec.num_classes * w.back() + spec.num_classes;  // head BN + dense
  return n;
}

}  // namespace oracle
