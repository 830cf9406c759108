#include "skipnet/propagation.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace skipnet {

namespace {

double norm(const Tensor<double>& t) { return t.array().matrix().norm(); }

Tensor<double> mix(const Eigen::MatrixXd& p, const Tensor<double>& x) { return kernels::channel_mix<double>(p, x); }

double max_dev(const Tensor<double>& a, const Tensor<double>& b) { return max_abs_diff(a, b); }

}  // namespace

bool PropagationTrace::shared_skip() const {
  for (const auto& b : blocks)
    if (b.skip != blocks.front().skip && b.skip->matrix() != blocks.front().skip->matrix()) return false;
  return true;
}

PropagationTrace capture_trace(const Network<double>& net, const Tensor<double>& input, std::size_t stage, int m,
                               int n, const std::optional<Tensor<double>>& probe) {
  if (stage >= net.stages.size()) {
    throw std::out_of_range("capture_trace: stage " + std::to_string(stage) + " out of range");
  }
  const auto& st = net.stages[stage];
  const int k = static_cast<int>(st.blocks.size());
  if (m < 0 || n > k || m >= n) {
    throw std::out_of_range("capture_trace: need 0 <= m < n <= " + std::to_string(k) + ", got m = " +
                            std::to_string(m) + ", n = " + std::to_string(n));
  }

  PropagationTrace t;
  t.stage = stage;
  t.m = m;
  t.n = n;
  t.blocks.assign(st.blocks.begin() + m, st.blocks.begin() + n);

  Graph<double> g;
  ForwardContext<double> ctx(g, Mode::eval, false);
  Var h = stage_input(ctx, net, g.leaf(input), stage);
  for (int i = 0; i < m; ++i) h = block_forward(ctx, st.blocks[static_cast<std::size_t>(i)], h).output;

  std::vector<Var> xs{g.leaf(g.value(h), true, "x_m")};
  std::vector<Var> branches;
  for (int i = m; i < n; ++i) {
    const auto out = block_forward(ctx, st.blocks[static_cast<std::size_t>(i)], xs.back());
    branches.push_back(out.branch);
    xs.push_back(out.output);
  }
  const Tensor<double>& xn = g.value(xs.back());
  if (probe) require_same_shape(probe->shape(), xn.shape(), "capture_trace probe");
  t.probe = probe ? *probe : Tensor<double>::ones(xn.shape());
  g.backward(weighted_sum(g, xs.back(), t.probe));

  for (Var v : xs) {
    t.x.push_back(g.value(v));
    t.grad.push_back(g.grad(v));
  }
  for (Var v : branches) t.branch.push_back(g.value(v));
  return t;
}

double replay_deviation(const PropagationTrace& t) {
  double dev = 0;
  for (int i = 0; i < t.length(); ++i) {
    const auto k = static_cast<std::size_t>(i);
    Tensor<double> rhs = mix(t.blocks[k].skip->matrix(), t.x[k]);
    rhs.array() += t.branch[k].array();
    dev = std::max(dev, max_dev(rhs, t.x[k + 1]));
  }
  return dev;
}

Eigen::MatrixXd skip_product(const PropagationTrace& t, int from, int to) {
  if (from < t.m || to > t.n || from > to) throw std::out_of_range("skip_product: range outside the trace");
  const Index r = t.blocks.front().skip->size();
  Eigen::MatrixXd prod = Eigen::MatrixXd::Identity(r, r);
  for (int i = from; i < to; ++i) prod = t.skip(i) * prod;
  return prod;
}

ExpansionCheck verify_forward_expansion(const PropagationTrace& t) {
  ExpansionCheck check;
  const Tensor<double>& xn = t.x.back();
  const bool collapse = t.shared_skip() && is_idempotent(t.skip(t.m), 1e-9);
  double collapsed = 0;
  for (int start = t.m; start < t.n; ++start) {
    Tensor<double> rhs = mix(skip_product(t, start, t.n), t.x[static_cast<std::size_t>(start - t.m)]);
    for (int i = start; i < t.n; ++i) {
      rhs.array() += mix(skip_product(t, i + 1, t.n), t.branch[static_cast<std::size_t>(i - t.m)]).array();
    }
    const double dev = max_dev(rhs, xn);
    check.per_start.push_back(dev);
    check.deviation = std::max(check.deviation, dev);

    if (collapse) {
      // P^k = P for k >= 1: the whole run of skips acts like one.
      const Eigen::MatrixXd& p = t.skip(t.m);
      Tensor<double> c = mix(p, t.x[static_cast<std::size_t>(start - t.m)]);
      for (int i = start; i < t.n; ++i) {
        const Tensor<double>& b = t.branch[static_cast<std::size_t>(i - t.m)];
        if (i + 1 == t.n) {
          c.array() += b.array();
        } else {
          c.array() += mix(p, b).array();
        }
      }
      collapsed = std::max(collapsed, max_dev(c, xn));
    }
  }
  if (collapse) check.collapsed = collapsed;
  return check;
}

ExpansionCheck verify_backward_expansion(const PropagationTrace& t) {
  ExpansionCheck check;
  const Tensor<double>& gn = t.grad.back();
  for (int start = t.m; start < t.n; ++start) {
    const auto s = static_cast<std::size_t>(start - t.m);
    Tensor<double> rhs = mix(skip_product(t, start, t.n).transpose(), gn);

    Graph<double> g;
    ForwardContext<double> ctx(g, Mode::eval, false);
    Var x0 = g.leaf(t.x[s], true, "x_start");
    Var x = x0;
    std::optional<Var> loss;
    for (int i = start; i < t.n; ++i) {
      const auto out = block_forward(ctx, t.blocks[static_cast<std::size_t>(i - t.m)], x);
      const Tensor<double> w = mix(skip_product(t, i + 1, t.n).transpose(), gn);
      Var term = weighted_sum(g, out.branch, w);
      loss = loss ? add(g, *loss, term) : term;
      x = out.output;
    }
    g.backward(*loss);
    rhs.array() += g.grad(x0).array();

    const double dev = max_dev(rhs, t.grad[s]);
    check.per_start.push_back(dev);
    check.deviation = std::max(check.deviation, dev);
  }
  return check;
}

double skip_path_gain(const Eigen::MatrixXd& p, int k, const Eigen::VectorXd& x) {
  if (k < 1) throw std::invalid_argument("skip_path_gain: k must be at least 1");
  const double nx = x.norm();
  if (nx == 0) throw std::invalid_argument("skip_path_gain: zero input vector");
  return (matrix_power(p, k) * x).norm() / nx;
}

double gradient_skip_gain(const Eigen::MatrixXd& p, int k, const Eigen::VectorXd& g) {
  if (k < 1) throw std::invalid_argument("gradient_skip_gain: k must be at least 1");
  const double ng = g.norm();
  if (ng == 0) throw std::invalid_argument("gradient_skip_gain: zero gradient vector");
  return (matrix_power(p, k).transpose() * g).norm() / ng;
}

NullSpaceSplit null_space_components(const Eigen::MatrixXd& p, const Eigen::VectorXd& v) {
  require_square(p, "null_space_components");
  if (p.rows() != v.size()) throw ShapeError("null_space_components: vector length does not match P");
  if (!is_idempotent(p, 1e-8)) throw std::invalid_argument("null_space_components: P is not idempotent");
  NullSpaceSplit s;
  s.column = p * v;
  s.null = v - s.column;
  s.orthogonal = (p - p.transpose()).cwiseAbs().maxCoeff() <= 1e-10;
  const double total = v.squaredNorm();
  if (s.orthogonal && total > 0) {
    s.column_fraction = s.column.squaredNorm() / total;
    s.null_fraction = s.null.squaredNorm() / total;
  }
  return s;
}

std::optional<double> null_space_fraction(const Eigen::MatrixXd& p, const Tensor<double>& x) {
  if (!is_idempotent(p, 1e-8) || (p - p.transpose()).cwiseAbs().maxCoeff() > 1e-10) return std::nullopt;
  const double total = x.array().square().sum();
  if (total == 0) return std::nullopt;
  Tensor<double> null = x;
  null.array() -= mix(p, x).array();
  return null.array().square().sum() / total;
}

FlowReport analyze_flow(const PropagationTrace& t) {
  FlowReport r;
  r.stage = t.stage;
  r.m = t.m;
  r.n = t.n;
  r.skip_kind = t.shared_skip() ? std::string(to_string(t.blocks.front().skip->kind())) : "per-block";
  const Eigen::MatrixXd full = skip_product(t, t.m, t.n);
  const Tensor<double>& xm = t.x.front();
  const Tensor<double>& gn = t.grad.back();
  const Tensor<double> skip_term = mix(full, xm);
  r.skip_gain = norm(xm) > 0 ? norm(skip_term) / norm(xm) : std::numeric_limits<double>::quiet_NaN();
  r.gradient_gain = norm(gn) > 0 ? norm(mix(full.transpose(), gn)) / norm(gn) : std::numeric_limits<double>::quiet_NaN();
  r.term_norms.push_back(norm(skip_term));
  for (int i = t.m; i < t.n; ++i) {
    r.term_norms.push_back(norm(mix(skip_product(t, i + 1, t.n), t.branch[static_cast<std::size_t>(i - t.m)])));
  }
  if (t.shared_skip()) {
    const Eigen::MatrixXd& p = t.skip(t.m);
    r.input_null_fraction = null_space_fraction(p, xm);
    for (const auto& b : t.branch) r.branch_null_fractions.push_back(null_space_fraction(p, b));
  }
  r.replay_deviation = replay_deviation(t);
  r.forward = verify_forward_expansion(t);
  r.backward = verify_backward_expansion(t);
  return r;
}

namespace {

std::string opt(const std::optional<double>& v) {
  if (!v) return "n/a";
  std::ostringstream os;
  os << std::setprecision(6) << *v;
  return os.str();
}

}  // namespace

std::string FlowReport::text() const {
  std::ostringstream os;
  os << std::setprecision(6);
  os << "stage " << stage << ", blocks [" << m << ", " << n << "), skip " << skip_kind << '\n';
  os << "  skip-path gain        " << skip_gain << '\n';
  os << "  gradient skip gain    " << gradient_gain << '\n';
  os << "  input null fraction   " << opt(input_null_fraction) << '\n';
  os << "  replay deviation      " << std::scientific << replay_deviation << std::defaultfloat << '\n';
  os << "  forward expansion     " << std::scientific << forward.deviation;
  if (forward.collapsed) os << " (collapsed " << *forward.collapsed << ")";
  os << '\n' << "  backward expansion    " << backward.deviation << std::defaultfloat << '\n';
  os << "  term  norm          null-fraction\n";
  for (std::size_t i = 0; i < term_norms.size(); ++i) {
    os << "  " << std::setw(4) << (i == 0 ? std::string("skip") : "x'" + std::to_string(m + static_cast<int>(i)))
       << "  " << std::setw(14) << term_norms[i] << "  "
       << (i == 0 ? opt(input_null_fraction) : opt(i - 1 < branch_null_fractions.size()
                                                       ? branch_null_fractions[i - 1]
                                                       : std::nullopt))
       << '\n';
  }
  return os.str();
}

std::string FlowReport::csv() const {
  std::ostringstream os;
  os << std::setprecision(12);
  os << "metric,index,value\n";
  os << "skip_gain,," << skip_gain << '\n';
  os << "gradient_gain,," << gradient_gain << '\n';
  if (input_null_fraction) os << "input_null_fraction,," << *input_null_fraction << '\n';
  os << "replay_deviation,," << replay_deviation << '\n';
  os << "forward_deviation,," << forward.deviation << '\n';
  if (forward.collapsed) os << "forward_collapsed_deviation,," << *forward.collapsed << '\n';
  os << "backward_deviation,," << backward.deviation << '\n';
  for (std::size_t i = 0; i < term_norms.size(); ++i) os << "term_norm," << i << ',' << term_norms[i] << '\n';
  for (std::size_t i = 0; i < branch_null_fractions.size(); ++i)
    if (branch_null_fractions[i]) os << "branch_null_fraction," << i << ',' << *branch_null_fractions[i] << '\n';
  return os.str();
}

}  // namespace skipnet
