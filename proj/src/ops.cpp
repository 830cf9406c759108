#include "skipnet/ops.hpp"

#include <cmath>

namespace skipnet {

namespace {

template <class Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

struct ConvGeometry {
  Index n, c, h, w;
  Index o, kh, kw;
  Index ho, wo;
  Index groups, cg, og, k;
  Index stride, pad;
  Index out_plane() const { return ho * wo; }
  Index cols() const { return n * ho * wo; }
};

ConvGeometry conv_geometry(const Shape& in, const Shape& kernel, const Conv2dOptions& opt) {
  if (in.size() != 4) throw ShapeError("conv2d: input must be NCHW, got " + to_string(in));
  if (kernel.size() != 4) throw ShapeError("conv2d: kernel must be OIHW, got " + to_string(kernel));
  if (opt.stride < 1 || opt.padding < 0 || opt.groups < 1) {
    throw ShapeError("conv2d: stride and groups must be positive and padding non-negative");
  }
  ConvGeometry g{};
  g.n = in[0];
  g.c = in[1];
  g.h = in[2];
  g.w = in[3];
  g.o = kernel[0];
  g.kh = kernel[2];
  g.kw = kernel[3];
  g.groups = opt.groups;
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (g.c % g.groups != 0) {
    throw ShapeError("conv2d: input channels " + std::to_string(g.c) + " not divisible by groups " +
                     std::to_string(g.groups));
  }
  if (g.o % g.groups != 0) {
    throw ShapeError("conv2d: output channels " + std::to_string(g.o) +
                     " not divisible by groups " + std::to_string(g.groups));
  }
  g.cg = g.c / g.groups;
  g.og = g.o / g.groups;
  if (kernel[1] != g.cg) {
    throw ShapeError("conv2d: kernel input-channel dimension " + std::to_string(kernel[1]) +
                     " must equal input channels / groups = " + std::to_string(g.cg));
  }
  g.ho = conv_output_size(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_size(g.w, g.kw, g.stride, g.pad);
  g.k = g.cg * g.kh * g.kw;
  return g;
}

// cols is (cg*kh*kw) x (n*ho*wo), row-major.
template <class Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Index group, RowMat<Scalar>& cols) {
  cols.resize(g.k, g.cols());
  const Index plane = g.out_plane();
  for (Index c = 0; c < g.cg; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        Scalar* dst = cols.data() + ((c * g.kh + i) * g.kw + j) * g.cols();
        for (Index n = 0; n < g.n; ++n) {
          const Scalar* src = x + (n * g.c + group * g.cg + c) * g.h * g.w;
          for (Index oh = 0; oh < g.ho; ++oh) {
            Scalar* d = dst + n * plane + oh * g.wo;
            const Index ih = oh * g.stride - g.pad + i;
            if (ih < 0 || ih >= g.h) {
              std::fill(d, d + g.wo, Scalar(0));
              continue;
            }
            const Scalar* row = src + ih * g.w;
            for (Index ow = 0; ow < g.wo; ++ow) {
              const Index iw = ow * g.stride - g.pad + j;
              d[ow] = (iw >= 0 && iw < g.w) ? row[iw] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

template <class Scalar>
void col2im_add(const RowMat<Scalar>& cols, const ConvGeometry& g, Index group, Scalar* x) {
  const Index plane = g.out_plane();
  for (Index c = 0; c < g.cg; ++c) {
    for (Index i = 0; i < g.kh; ++i) {
      for (Index j = 0; j < g.kw; ++j) {
        const Scalar* src = cols.data() + ((c * g.kh + i) * g.kw + j) * g.cols();
        for (Index n = 0; n < g.n; ++n) {
          Scalar* dst = x + (n * g.c + group * g.cg + c) * g.h * g.w;
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh * g.stride - g.pad + i;
            if (ih < 0 || ih >= g.h) continue;
            const Scalar* s = src + n * plane + oh * g.wo;
            Scalar* row = dst + ih * g.w;
            for (Index ow = 0; ow < g.wo; ++ow) {
              const Index iw = ow * g.stride - g.pad + j;
              if (iw >= 0 && iw < g.w) row[iw] += s[ow];
            }
          }
        }
      }
    }
  }
}

// Gathers channels [group*og, (group+1)*og) of an NCHW output-shaped tensor
// into an og x (n*ho*wo) matrix.
template <class Scalar>
void gather_output(const Scalar* y, const ConvGeometry& g, Index group, RowMat<Scalar>& out) {
  out.resize(g.og, g.cols());
  const Index plane = g.out_plane();
  for (Index o = 0; o < g.og; ++o) {
    for (Index n = 0; n < g.n; ++n) {
      const Scalar* src = y + (n * g.o + group * g.og + o) * plane;
      std::copy(src, src + plane, out.data() + o * g.cols() + n * plane);
    }
  }
}

template <class Scalar>
void scatter_output(const RowMat<Scalar>& in, const ConvGeometry& g, Index group, Scalar* y) {
  const Index plane = g.out_plane();
  for (Index o = 0; o < g.og; ++o) {
    for (Index n = 0; n < g.n; ++n) {
      const Scalar* src = in.data() + o * g.cols() + n * plane;
      std::copy(src, src + plane, y + (n * g.o + group * g.og + o) * plane);
    }
  }
}

struct NcsLayout {
  Index n, c, s;
};

NcsLayout ncs_layout(const Shape& shape, const char* what) {
  if (shape.size() < 2) {
    throw ShapeError(std::string(what) + ": expected at least 2 dimensions, got " + to_string(shape));
  }
  NcsLayout l{shape[0], shape[1], 1};
  for (std::size_t i = 2; i < shape.size(); ++i) l.s *= shape[i];
  return l;
}

template <class Scalar>
void check_channel_params(const Tensor<Scalar>& p, Index channels, const char* what) {
  if (p.rank() != 1 || p.dim(0) != channels) {
    throw ShapeError(std::string(what) + ": expected length " + std::to_string(channels) +
                     ", got shape " + to_string(p.shape()));
  }
}

template <class Scalar>
void accumulate(Tensor<Scalar>* into, const Tensor<Scalar>& value) {
  if (into) into->array() += value.array();
}

}  // namespace

Index conv_output_size(Index in, Index kernel, Index stride, Index padding) {
  const Index span = in + 2 * padding - kernel;
  if (span < 0) {
    throw ShapeError("conv2d: kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                     std::to_string(in + 2 * padding));
  }
  return span / stride + 1;
}

namespace kernels {

template <class Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Conv2dOptions& opt) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), opt);
  Tensor<Scalar> out({g.n, g.o, g.ho, g.wo});
  RowMat<Scalar> cols;
  RowMat<Scalar> result;
  for (Index grp = 0; grp < g.groups; ++grp) {
    im2col(input.data(), g, grp, cols);
    Eigen::Map<const RowMat<Scalar>> w(kernel.data() + grp * g.og * g.k, g.og, g.k);
    result.noalias() = w * cols;
    scatter_output(result, g, grp, out.data());
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> conv2d_grad_input(const Tensor<Scalar>& grad_output, const Tensor<Scalar>& kernel,
                                 const Shape& input_shape, const Conv2dOptions& opt) {
  const ConvGeometry g = conv_geometry(input_shape, kernel.shape(), opt);
  require_same_shape(grad_output.shape(), {g.n, g.o, g.ho, g.wo}, "conv2d grad_output");
  Tensor<Scalar> grad(input_shape);
  RowMat<Scalar> gy;
  RowMat<Scalar> cols;
  for (Index grp = 0; grp < g.groups; ++grp) {
    gather_output(grad_output.data(), g, grp, gy);
    Eigen::Map<const RowMat<Scalar>> w(kernel.data() + grp * g.og * g.k, g.og, g.k);
    cols.noalias() = w.transpose() * gy;
    col2im_add(cols, g, grp, grad.data());
  }
  return grad;
}

template <class Scalar>
Tensor<Scalar> conv2d_grad_kernel(const Tensor<Scalar>& grad_output, const Tensor<Scalar>& input,
                                  const Shape& kernel_shape, const Conv2dOptions& opt) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel_shape, opt);
  require_same_shape(grad_output.shape(), {g.n, g.o, g.ho, g.wo}, "conv2d grad_output");
  Tensor<Scalar> grad(kernel_shape);
  RowMat<Scalar> gy;
  RowMat<Scalar> cols;
  for (Index grp = 0; grp < g.groups; ++grp) {
    im2col(input.data(), g, grp, cols);
    gather_output(grad_output.data(), g, grp, gy);
    Eigen::Map<RowMat<Scalar>> gw(grad.data() + grp * g.og * g.k, g.og, g.k);
    gw.noalias() = gy * cols.transpose();
  }
  return grad;
}

template <class Scalar>
Tensor<Scalar> channel_mix(const Matrix<Scalar>& mix, const Tensor<Scalar>& input) {
  const NcsLayout l = ncs_layout(input.shape(), "channel_mix");
  if (mix.rows() != mix.cols() || mix.cols() != l.c) {
    throw ShapeError("channel_mix: matrix is " + std::to_string(mix.rows()) + "x" +
                     std::to_string(mix.cols()) + " but input has " + std::to_string(l.c) +
                     " channels");
  }
  Tensor<Scalar> out(input.shape());
  for (Index n = 0; n < l.n; ++n) {
    Eigen::Map<const RowMat<Scalar>> x(input.data() + n * l.c * l.s, l.c, l.s);
    Eigen::Map<RowMat<Scalar>> y(out.data() + n * l.c * l.s, l.c, l.s);
    y.noalias() = mix * x;
  }
  return out;
}

template <class Scalar>
ChannelStats<Scalar> channel_stats(const Tensor<Scalar>& input) {
  const NcsLayout l = ncs_layout(input.shape(), "batch_norm");
  if (l.n == 0) throw ShapeError("batch_norm: zero batch size");
  ChannelStats<Scalar> st{ArrayX<Scalar>::Zero(l.c), ArrayX<Scalar>::Zero(l.c), l.n * l.s};
  const Scalar count = static_cast<Scalar>(l.n * l.s);
  for (Index c = 0; c < l.c; ++c) {
    Scalar acc = 0;
    for (Index n = 0; n < l.n; ++n) {
      acc += Eigen::Map<const ArrayX<Scalar>>(input.data() + (n * l.c + c) * l.s, l.s).sum();
    }
    const Scalar mean = acc / count;
    Scalar sq = 0;
    for (Index n = 0; n < l.n; ++n) {
      sq += (Eigen::Map<const ArrayX<Scalar>>(input.data() + (n * l.c + c) * l.s, l.s) - mean)
                .square()
                .sum();
    }
    st.mean[c] = mean;
    st.var[c] = sq / count;
  }
  return st;
}

template <class Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& input, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, const ChannelStats<Scalar>& stats,
                          double eps) {
  const NcsLayout l = ncs_layout(input.shape(), "batch_norm");
  if (l.n == 0) throw ShapeError("batch_norm: zero batch size");
  check_channel_params(gamma, l.c, "batch_norm gamma");
  check_channel_params(beta, l.c, "batch_norm beta");
  if (stats.mean.size() != l.c || stats.var.size() != l.c) {
    throw ShapeError("batch_norm: statistics length does not match channel count");
  }
  Tensor<Scalar> out(input.shape());
  for (Index c = 0; c < l.c; ++c) {
    const Scalar inv = Scalar(1) / std::sqrt(stats.var[c] + static_cast<Scalar>(eps));
    const Scalar scale = gamma[c] * inv;
    const Scalar shift = beta[c] - stats.mean[c] * scale;
    for (Index n = 0; n < l.n; ++n) {
      const Index off = (n * l.c + c) * l.s;
      Eigen::Map<ArrayX<Scalar>>(out.data() + off, l.s) =
          Eigen::Map<const ArrayX<Scalar>>(input.data() + off, l.s) * scale + shift;
    }
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& input) {
  return Tensor<Scalar>(input.shape(), input.array().max(Scalar(0)));
}

template <class Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& input) {
  if (input.rank() != 4) throw ShapeError("global_avg_pool: expected NCHW, got " + to_string(input.shape()));
  const Index n = input.dim(0), c = input.dim(1), s = input.dim(2) * input.dim(3);
  Tensor<Scalar> out({n, c});
  for (Index i = 0; i < n * c; ++i) {
    out[i] = Eigen::Map<const ArrayX<Scalar>>(input.data() + i * s, s).mean();
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> dense(const Tensor<Scalar>& input, const Tensor<Scalar>& weight,
                     const Tensor<Scalar>& bias) {
  if (input.rank() != 2 || weight.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("dense: expected input NC, weight KC, bias K");
  }
  if (weight.dim(1) != input.dim(1) || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("dense: input " + to_string(input.shape()) + ", weight " +
                     to_string(weight.shape()) + ", bias " + to_string(bias.shape()) +
                     " are incompatible");
  }
  const Index n = input.dim(0), c = input.dim(1), k = weight.dim(0);
  Tensor<Scalar> out({n, k});
  Eigen::Map<const RowMat<Scalar>> x(input.data(), n, c);
  Eigen::Map<const RowMat<Scalar>> w(weight.data(), k, c);
  Eigen::Map<RowMat<Scalar>> y(out.data(), n, k);
  y.noalias() = x * w.transpose();
  y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(), k);
  return out;
}

template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected NK logits, got " + to_string(logits.shape()));
  const Index n = logits.dim(0), k = logits.dim(1);
  Tensor<Scalar> out(logits.shape());
  for (Index i = 0; i < n; ++i) {
    Eigen::Map<const ArrayX<Scalar>> z(logits.data() + i * k, k);
    Eigen::Map<ArrayX<Scalar>> p(out.data() + i * k, k);
    p = (z - z.maxCoeff()).exp();
    p /= p.sum();
  }
  return out;
}

}  // namespace kernels

template <class Scalar>
Var conv2d(Graph<Scalar>& g, Var input, Var kernel, Conv2dOptions opt) {
  conv_geometry(g.value(input).shape(), g.value(kernel).shape(), opt);
  typename Graph<Scalar>::Op op;
  op.name = "conv2d";
  op.forward = [opt](auto in) { return kernels::conv2d(*in[0], *in[1], opt); };
  op.backward = [opt](auto in, const auto&, const auto& gy, auto grads) {
    if (grads[0]) accumulate(grads[0], kernels::conv2d_grad_input(gy, *in[1], in[0]->shape(), opt));
    if (grads[1]) accumulate(grads[1], kernels::conv2d_grad_kernel(gy, *in[0], in[1]->shape(), opt));
  };
  return g.apply(std::move(op), {input, kernel});
}

template <class Scalar>
Var batch_norm_train(Graph<Scalar>& g, Var input, Var gamma, Var beta, double eps) {
  typename Graph<Scalar>::Op op;
  op.name = "batch_norm_train";
  op.forward = [eps](auto in) {
    return kernels::batch_norm(*in[0], *in[1], *in[2], kernels::channel_stats(*in[0]), eps);
  };
  op.backward = [eps](auto in, const auto&, const Tensor<Scalar>& gy, auto grads) {
    const Tensor<Scalar>& x = *in[0];
    const Tensor<Scalar>& gamma_t = *in[1];
    const auto st = kernels::channel_stats(x);
    const NcsLayout l = ncs_layout(x.shape(), "batch_norm");
    const Scalar count = static_cast<Scalar>(l.n * l.s);
    for (Index c = 0; c < l.c; ++c) {
      const Scalar inv = Scalar(1) / std::sqrt(st.var[c] + static_cast<Scalar>(eps));
      Scalar sum_g = 0, sum_gx = 0;
      for (Index n = 0; n < l.n; ++n) {
        const Index off = (n * l.c + c) * l.s;
        Eigen::Map<const ArrayX<Scalar>> xs(x.data() + off, l.s);
        Eigen::Map<const ArrayX<Scalar>> gs(gy.data() + off, l.s);
        sum_g += gs.sum();
        sum_gx += (gs * (xs - st.mean[c])).sum();
      }
      const Scalar sum_gxhat = sum_gx * inv;
      if (grads[1]) (*grads[1])[c] += sum_gxhat;
      if (grads[2]) (*grads[2])[c] += sum_g;
      if (grads[0]) {
        const Scalar k = gamma_t[c] * inv / count;
        for (Index n = 0; n < l.n; ++n) {
          const Index off = (n * l.c + c) * l.s;
          Eigen::Map<const ArrayX<Scalar>> xs(x.data() + off, l.s);
          Eigen::Map<const ArrayX<Scalar>> gs(gy.data() + off, l.s);
          Eigen::Map<ArrayX<Scalar>> gx(grads[0]->data() + off, l.s);
          gx += k * (count * gs - sum_g - (xs - st.mean[c]) * inv * sum_gxhat);
        }
      }
    }
  };
  return g.apply(std::move(op), {input, gamma, beta});
}

template <class Scalar>
Var batch_norm_eval(Graph<Scalar>& g, Var input, Var gamma, Var beta,
                    kernels::ChannelStats<Scalar> stats, double eps) {
  typename Graph<Scalar>::Op op;
  op.name = "batch_norm_eval";
  op.forward = [stats, eps](auto in) { return kernels::batch_norm(*in[0], *in[1], *in[2], stats, eps); };
  op.backward = [stats, eps](auto in, const auto&, const Tensor<Scalar>& gy, auto grads) {
    const Tensor<Scalar>& x = *in[0];
    const Tensor<Scalar>& gamma_t = *in[1];
    const NcsLayout l = ncs_layout(x.shape(), "batch_norm");
    for (Index c = 0; c < l.c; ++c) {
      const Scalar inv = Scalar(1) / std::sqrt(stats.var[c] + static_cast<Scalar>(eps));
      for (Index n = 0; n < l.n; ++n) {
        const Index off = (n * l.c + c) * l.s;
        Eigen::Map<const ArrayX<Scalar>> xs(x.data() + off, l.s);
        Eigen::Map<const ArrayX<Scalar>> gs(gy.data() + off, l.s);
        if (grads[0]) Eigen::Map<ArrayX<Scalar>>(grads[0]->data() + off, l.s) += gs * (gamma_t[c] * inv);
        if (grads[1]) (*grads[1])[c] += (gs * (xs - stats.mean[c])).sum() * inv;
        if (grads[2]) (*grads[2])[c] += gs.sum();
      }
    }
  };
  return g.apply(std::move(op), {input, gamma, beta});
}

template <class Scalar>
Var relu(Graph<Scalar>& g, Var input) {
  typename Graph<Scalar>::Op op;
  op.name = "relu";
  op.forward = [](auto in) { return kernels::relu(*in[0]); };
  // Subgradient at exactly zero is 0.
  op.backward = [](auto in, const auto&, const Tensor<Scalar>& gy, auto grads) {
    if (grads[0]) grads[0]->array() += (in[0]->array() > Scalar(0)).select(gy.array(), Scalar(0));
  };
  return g.apply(std::move(op), {input});
}

template <class Scalar>
Var add(Graph<Scalar>& g, Var a, Var b) {
  require_same_shape(g.value(a).shape(), g.value(b).shape(), "add");
  typename Graph<Scalar>::Op op;
  op.name = "add";
  op.forward = [](auto in) { return Tensor<Scalar>(in[0]->shape(), in[0]->array() + in[1]->array()); };
  op.backward = [](auto, const auto&, const Tensor<Scalar>& gy, auto grads) {
    accumulate(grads[0], gy);
    accumulate(grads[1], gy);
  };
  return g.apply(std::move(op), {a, b});
}

template <class Scalar>
Var global_avg_pool(Graph<Scalar>& g, Var input) {
  typename Graph<Scalar>::Op op;
  op.name = "global_avg_pool";
  op.forward = [](auto in) { return kernels::global_avg_pool(*in[0]); };
  op.backward = [](auto in, const auto&, const Tensor<Scalar>& gy, auto grads) {
    if (!grads[0]) return;
    const Index s = in[0]->dim(2) * in[0]->dim(3);
    for (Index i = 0; i < gy.size(); ++i) {
      Eigen::Map<ArrayX<Scalar>>(grads[0]->data() + i * s, s) += gy[i] / static_cast<Scalar>(s);
    }
  };
  return g.apply(std::move(op), {input});
}

template <class Scalar>
Var dense(Graph<Scalar>& g, Var input, Var weight, Var bias) {
  kernels::dense(g.value(input), g.value(weight), g.value(bias));  // validates shapes
  typename Graph<Scalar>::Op op;
  op.name = "dense";
  op.forward = [](auto in) { return kernels::dense(*in[0], *in[1], *in[2]); };
  op.backward = [](auto in, const auto&, const Tensor<Scalar>& gy, auto grads) {
    const Index n = in[0]->dim(0), c = in[0]->dim(1), k = in[1]->dim(0);
    Eigen::Map<const RowMat<Scalar>> x(in[0]->data(), n, c);
    Eigen::Map<const RowMat<Scalar>> w(in[1]->data(), k, c);
    Eigen::Map<const RowMat<Scalar>> gyv(gy.data(), n, k);
    if (grads[0]) Eigen::Map<RowMat<Scalar>>(grads[0]->data(), n, c).noalias() += gyv * w;
    if (grads[1]) Eigen::Map<RowMat<Scalar>>(grads[1]->data(), k, c).noalias() += gyv.transpose() * x;
    if (grads[2]) {
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(grads[2]->data(), k) += gyv.colwise().sum();
    }
  };
  return g.apply(std::move(op), {input, weight, bias});
}

template <class Scalar>
Var softmax_cross_entropy(Graph<Scalar>& g, Var logits, std::vector<int> labels) {
  const Tensor<Scalar>& z = g.value(logits);
  if (z.rank() != 2 || z.dim(0) != static_cast<Index>(labels.size())) {
    throw ShapeError("softmax_cross_entropy: logits " + to_string(z.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  for (int y : labels) {
    if (y < 0 || y >= z.dim(1)) {
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(z.dim(1)) + ")");
    }
  }
  typename Graph<Scalar>::Op op;
  op.name = "softmax_cross_entropy";
  op.forward = [labels](auto in) {
    const Tensor<Scalar>& logit = *in[0];
    const Index n = logit.dim(0), k = logit.dim(1);
    Scalar loss = 0;
    for (Index i = 0; i < n; ++i) {
      Eigen::Map<const ArrayX<Scalar>> row(logit.data() + i * k, k);
      const Scalar mx = row.maxCoeff();
      loss += std::log((row - mx).exp().sum()) + mx - row[labels[static_cast<std::size_t>(i)]];
    }
    return Tensor<Scalar>({1}, ArrayX<Scalar>::Constant(1, loss / static_cast<Scalar>(n)));
  };
  op.backward = [labels](auto in, const auto&, const Tensor<Scalar>& gy, auto grads) {
    if (!grads[0]) return;
    Tensor<Scalar> p = kernels::softmax(*in[0]);
    const Index n = p.dim(0), k = p.dim(1);
    for (Index i = 0; i < n; ++i) p[i * k + labels[static_cast<std::size_t>(i)]] -= Scalar(1);
    grads[0]->array() += p.array() * (gy[0] / static_cast<Scalar>(n));
  };
  return g.apply(std::move(op), {logits});
}

template <class Scalar>
Var channel_mix(Graph<Scalar>& g, Var input, Matrix<Scalar> mix) {
  const NcsLayout l = ncs_layout(g.value(input).shape(), "channel_mix");
  if (mix.rows() != l.c || mix.cols() != l.c) {
    throw ShapeError("channel_mix: " + std::to_string(mix.rows()) + "x" + std::to_string(mix.cols()) +
                     " matrix applied to " + std::to_string(l.c) + " channels");
  }
  Matrix<Scalar> mix_t = mix.transpose();
  typename Graph<Scalar>::Op op;
  op.name = "channel_mix";
  op.forward = [mix = std::move(mix)](auto in) { return kernels::channel_mix(mix, *in[0]); };
  op.backward = [mix_t = std::move(mix_t)](auto, const auto&, const Tensor<Scalar>& gy, auto grads) {
    if (grads[0]) accumulate(grads[0], kernels::channel_mix(mix_t, gy));
  };
  return g.apply(std::move(op), {input});
}

template <class Scalar>
Var sum(Graph<Scalar>& g, Var input) {
  typename Graph<Scalar>::Op op;
  op.name = "sum";
  op.forward = [](auto in) { return Tensor<Scalar>({1}, ArrayX<Scalar>::Constant(1, in[0]->array().sum())); };
  op.backward = [](auto, const auto&, const Tensor<Scalar>& gy, auto grads) {
    if (grads[0]) grads[0]->array() += gy[0];
  };
  return g.apply(std::move(op), {input});
}

template <class Scalar>
Var weighted_sum(Graph<Scalar>& g, Var input, Tensor<Scalar> weights) {
  require_same_shape(g.value(input).shape(), weights.shape(), "weighted_sum");
  typename Graph<Scalar>::Op op;
  op.name = "weighted_sum";
  op.forward = [weights](auto in) {
    return Tensor<Scalar>({1}, ArrayX<Scalar>::Constant(1, (in[0]->array() * weights.array()).sum()));
  };
  op.backward = [weights](auto, const auto&, const Tensor<Scalar>& gy, auto grads) {
    if (grads[0]) grads[0]->array() += weights.array() * gy[0];
  };
  return g.apply(std::move(op), {input});
}

#define SKIPNET_INSTANTIATE_OPS(S)                                                                    \
  namespace kernels {                                                                                 \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Conv2dOptions&);                \
  template Tensor<S> conv2d_grad_input(const Tensor<S>&, const Tensor<S>&, const Shape&,              \
                                       const Conv2dOptions&);                                         \
  template Tensor<S> conv2d_grad_kernel(const Tensor<S>&, const Tensor<S>&, const Shape&,             \
                                        const Conv2dOptions&);                                        \
  template Tensor<S> channel_mix(const Matrix<S>&, const Tensor<S>&);                                 \
  template ChannelStats<S> channel_stats(const Tensor<S>&);                                           \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,                 \
                                const ChannelStats<S>&, double);                                      \
  template Tensor<S> relu(const Tensor<S>&);                                                          \
  template Tensor<S> global_avg_pool(const Tensor<S>&);                                               \
  template Tensor<S> dense(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);                     \
  template Tensor<S> softmax(const Tensor<S>&);                                                       \
  }                                                                                                   \
  template Var conv2d(Graph<S>&, Var, Var, Conv2dOptions);                                            \
  template Var batch_norm_train(Graph<S>&, Var, Var, Var, double);                                    \
  template Var batch_norm_eval(Graph<S>&, Var, Var, Var, kernels::ChannelStats<S>, double);           \
  template Var relu(Graph<S>&, Var);                                                                  \
  template Var add(Graph<S>&, Var, Var);                                                              \
  template Var global_avg_pool(Graph<S>&, Var);                                                       \
  template Var dense(Graph<S>&, Var, Var, Var);                                                       \
  template Var softmax_cross_entropy(Graph<S>&, Var, std::vector<int>);                               \
  template Var channel_mix(Graph<S>&, Var, Matrix<S>);                                                \
  template Var sum(Graph<S>&, Var);                                                                   \
  template Var weighted_sum(Graph<S>&, Var, Tensor<S>);

SKIPNET_INSTANTIATE_OPS(float)
SKIPNET_INSTANTIATE_OPS(double)

}  // namespace skipnet
