// Acceptance run. One line per criterion:
//   PASS criterion N: <what> (<measured> vs <tolerance>, <seconds> s of <limit> s)
// --algebraic runs criteria 1-5 and the report half of 8.
// --training needs CIFAR-10 binaries in SKIPNET_DATA_DIR and exits 77 (skipped) otherwise.

#include "skipnet/dataset.hpp"
#include "skipnet/equivalence.hpp"
#include "skipnet/gradcheck.hpp"
#include "skipnet/propagation.hpp"
#include "skipnet/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>

using namespace skipnet;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr int kSkipped = 77;

struct Outcome {
  bool passed = true;
  std::string detail;
};

bool report(const std::string& id, const std::string& what, double limit_seconds,
            const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool in_time = secs <= limit_seconds;
  const bool ok = o.passed && in_time;
  std::printf("%s criterion %s: %s (%s; %.1f s of %.0f s)\n", ok ? "PASS" : "FAIL", id.c_str(), what.c_str(),
              o.detail.c_str(), secs, limit_seconds);
  std::fflush(stdout);
  return ok;
}

std::string fmt(const char* f, double a, double b) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

VectorXd random_vector(Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  return VectorXd::NullaryExpr(n, [&] { return d(rng); });
}

double power_residual(const MatrixXd& p, int k) { return (matrix_power(p, k) - p).cwiseAbs().maxCoeff(); }

double orthogonality_residual(const MatrixXd& q) {
  return (q.transpose() * q - MatrixXd::Identity(q.rows(), q.cols())).cwiseAbs().maxCoeff();
}

// ---------------------------------------------------------------------------

Outcome transforms_hold() {
  constexpr double kTol = 1e-9;
  double worst = 0;
  int failures = 0;
  for (Index r : {2, 4, 8, 16, 32}) {
    for (Index b : {Index{1}, Index{2}, Index{4}, r}) {
      if (b > r) continue;
      const auto mr = make_idempotent_mr(r, static_cast<int>(b));
      const auto cmr = make_idempotent_cmr(r, static_cast<int>(b));
      worst = std::max({worst, power_residual(mr.matrix(), 2), power_residual(cmr.matrix(), 2),
                        (mr.matrix() + cmr.matrix() - MatrixXd::Identity(r, r)).cwiseAbs().maxCoeff()});
      failures += rank(mr.matrix()) != r / b;
      failures += rank(cmr.matrix()) != r - r / b;
    }
    const auto tp = make_orthogonal_tp(r);
    worst = std::max(worst, orthogonality_residual(tp.matrix()));
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      worst = std::max(worst, orthogonality_residual(make_orthogonal_random(r, seed).matrix()));
      for (int n : {1, 2, 3, 4, 6}) {
        // Periodicity is a power identity, so it is held to the power tolerance of the kind.
        const double res = power_residual(make_periodic(r, n, seed).matrix(), n + 1);
        failures += res > kPeriodicTol;
      }
    }
    worst = std::max(worst, orthogonality_residual(matrix_power(tp.matrix(), 7)));
    failures += rank(tp.matrix()) != r;
  }
  return {worst <= kTol && failures == 0, fmt("max residual %.2e vs %.0e", worst, kTol) +
                                              ", rank/periodicity failures " + std::to_string(failures)};
}

struct KindCase {
  TransformKind kind;
  int branches = 0;
  int period = 1;
};

const std::vector<KindCase> kAllKinds{
    {TransformKind::identity},      {TransformKind::idempotent_mr, 2}, {TransformKind::idempotent_cmr, 4},
    {TransformKind::orthogonal_tp}, {TransformKind::orthogonal_random}, {TransformKind::periodic, 0, 3},
    {TransformKind::zero},
};

Outcome expansions_hold() {
  constexpr double kTol = 1e-8;
  double worst = 0;
  int traces = 0;
  for (const auto& k : kAllKinds)
    for (Index width : {4, 16})
      for (int blocks : {3, 6})
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
          NetworkSpec s;
          s.blocks_per_stage = blocks;
          s.stage_widths = {width};
          s.input_shape = {3, 4, 4};
          s.transform = {.kind = k.kind, .branches = k.branches, .period = k.period, .seed = seed};
          auto net = build_network<double>(s, seed);
          randomize_batch_norm(net, seed + 1);
          std::mt19937_64 rng(seed + 100);
          const auto x = Tensor<double>::randn({2, 3, 4, 4}, rng);
          const auto t = capture_trace(net, x, 0, 0, blocks);
          const auto f = verify_forward_expansion(t);
          worst = std::max({worst, f.deviation, verify_backward_expansion(t).deviation, f.collapsed.value_or(0.0)});
          ++traces;
        }
  return {worst <= kTol, fmt("max deviation %.2e vs %.0e", worst, kTol) + " over " + std::to_string(traces) +
                             " stages, forward and backward, every start block"};
}

Outcome conversions_hold() {
  constexpr double kOutputTol = 1e-8;
  constexpr double kGradTol = 1e-7;
  struct Case {
    TransformKind kind;
    bool orthogonal;
  };
  const std::vector<Case> cases{{TransformKind::identity, true},      {TransformKind::orthogonal_tp, true},
                                {TransformKind::orthogonal_random, true}, {TransformKind::idempotent_mr, false},
                                {TransformKind::idempotent_cmr, false},   {TransformKind::zero, false}};
  double out = 0, grad = 0;
  for (const auto& c : cases)
    for (Index w : {4, 8})
      for (int L : {1, 2, 4}) {
        NetworkSpec s;
        s.blocks_per_stage = L;
        s.stage_widths = {w, 2 * w};
        s.input_shape = {3, 6, 6};
        const auto seed = static_cast<std::uint64_t>(w * 10 + L);
        s.transform = {.kind = c.kind, .branches = 2, .seed = seed, .per_block = false};
        auto net = build_network<double>(s, seed);
        randomize_batch_norm(net, seed + 7);
        const auto conv = c.orthogonal ? convert_orthogonal_to_identity(net) : convert_idempotent_to_diagonal(net);
        out = std::max(out, verify_equivalence(net, conv, 32, seed + 1, kOutputTol).max_deviation);
        grad = std::max(grad, gradient_deviation(net, conv, 4, seed + 2));
      }
  return {out <= kOutputTol && grad <= kGradTol,
          fmt("output %.2e vs %.0e", out, kOutputTol) + fmt(", gradient %.2e vs %.0e", grad, kGradTol)};
}

Tensor<double> randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(std::move(s), rng);
}

Outcome gradients_hold() {
  constexpr double kTol = 1e-3;
  using Leaves = std::vector<std::pair<std::string, Var>>;
  using Builder = std::function<Var(Graph<double>&, Leaves&, std::uint64_t)>;
  const std::vector<std::pair<std::string, Builder>> ops{
      {"conv2d",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({2, 4, 5, 5}, s), true), k = g.leaf(randn({6, 2, 3, 3}, s + 1), true);
         l = {{"x", x}, {"k", k}};
         return conv2d(g, x, k, {.stride = 2, .padding = 1, .groups = 2});
       }},
      {"batch_norm_train",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({3, 2, 3, 3}, s), true), ga = g.leaf(randn({2}, s + 1), true),
             be = g.leaf(randn({2}, s + 2), true);
         l = {{"x", x}, {"gamma", ga}, {"beta", be}};
         return batch_norm_train(g, x, ga, be);
       }},
      {"batch_norm_eval",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({2, 2, 3, 3}, s), true), ga = g.leaf(randn({2}, s + 1), true),
             be = g.leaf(randn({2}, s + 2), true);
         kernels::ChannelStats<double> st;
         st.mean = Eigen::Array2d(0.3, -0.2);
         st.var = Eigen::Array2d(1.5, 0.7);
         l = {{"x", x}, {"gamma", ga}, {"beta", be}};
         return batch_norm_eval(g, x, ga, be, st);
       }},
      {"relu",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({4, 5}, s), true);
         l = {{"x", x}};
         return relu(g, x);
       }},
      {"add",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var a = g.leaf(randn({3, 4}, s), true), b = g.leaf(randn({3, 4}, s + 1), true);
         l = {{"a", a}, {"b", b}};
         return add(g, a, b);
       }},
      {"global_avg_pool",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({2, 3, 4, 4}, s), true);
         l = {{"x", x}};
         return global_avg_pool(g, x);
       }},
      {"dense",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({3, 4}, s), true), w = g.leaf(randn({5, 4}, s + 1), true),
             b = g.leaf(randn({5}, s + 2), true);
         l = {{"x", x}, {"w", w}, {"b", b}};
         return dense(g, x, w, b);
       }},
      {"softmax_cross_entropy",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({4, 5}, s), true);
         l = {{"logits", x}};
         return softmax_cross_entropy(g, x, {0, 4, 2, 2});
       }},
      {"channel_mix",
       [](Graph<double>& g, Leaves& l, std::uint64_t s) {
         Var x = g.leaf(randn({2, 3, 2, 2}, s), true);
         l = {{"x", x}};
         return channel_mix(g, x, Matrix<double>(randn({3, 3}, s + 1).array().reshaped(3, 3).matrix()));
       }},
  };
  double worst = 0;
  std::string worst_name;
  auto note = [&](double e, const std::string& name) {
    if (e > worst) worst = e, worst_name = name;
  };
  for (const auto& [name, build] : ops)
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Graph<double> g;
      Leaves leaves;
      Var out = build(g, leaves, seed);
      Var loss = g.value(out).size() == 1 ? out : weighted_sum(g, out, randn(g.value(out).shape(), seed + 1000));
      note(gradcheck_graph(g, loss, leaves).max_relative_error, name);
    }
  for (auto kind : {TransformKind::orthogonal_tp, TransformKind::idempotent_cmr, TransformKind::identity}) {
    NetworkSpec spec;
    spec.blocks_per_stage = 2;
    spec.stage_widths = {8};
    spec.input_shape = {3, 6, 6};
    spec.transform = {.kind = kind, .branches = 2};
    for (std::uint64_t seed = 1; seed <= 2; ++seed) {
      const auto r = gradcheck_network(spec, seed);
      note(r.max_relative_error, "network " + std::string(to_string(kind)) + " " + r.worst);
    }
  }
  return {worst <= kTol, fmt("max relative error %.2e vs %.0e", worst, kTol) +
                             (worst_name.empty() ? "" : " at " + worst_name)};
}

Outcome norms_hold() {
  constexpr double kTol = 1e-9;
  std::mt19937_64 rng(5);
  double worst = 0;
  for (Index r : {4, 16, 32}) {
    const std::vector<MatrixXd> orth{make_orthogonal_tp(r).matrix(), make_orthogonal_random(r, 3).matrix()};
    for (const auto& q : orth)
      for (int k = 1; k <= 16; ++k) {
        const VectorXd x = random_vector(r, rng), g = random_vector(r, rng);
        worst = std::max({worst, std::abs(skip_path_gain(q, k, x) - 1), std::abs(gradient_skip_gain(q, k, g) - 1)});
      }
    for (const auto& p : {make_idempotent_mr(r, 2).matrix(), make_idempotent_cmr(r, 4).matrix()}) {
      const VectorXd v = random_vector(r, rng);
      const VectorXd in_column = p * v;
      const VectorXd in_null = v - in_column;
      for (int k = 1; k <= 16; ++k) {
        worst = std::max(worst, std::abs(skip_path_gain(p, k, in_column) - 1));
        worst = std::max(worst, (matrix_power(p, k) * in_null).norm() / in_null.norm());
      }
    }
  }
  return {worst <= kTol, fmt("max |gain - target| %.2e vs %.0e", worst, kTol)};
}

Outcome mixing_reported() {
  NetworkSpec s;
  s.blocks_per_stage = 2;
  s.stage_widths = {8};
  s.input_shape = {3, 6, 6};
  s.branch_mode = BranchMode::multi;
  s.branches = 4;
  s.transform.per_block = false;
  std::string bad;
  auto build = [&](TransformKind kind) {
    s.transform.kind = kind;
    s.transform.branches = 4;
    return build_network<double>(s, 2);
  };
  const auto plain = build(TransformKind::identity);
  if (mixing_interaction_report(plain.stages[0].blocks[0]).cross_branch_mixing) bad += " identity";
  const auto tp = convert_orthogonal_to_identity(build(TransformKind::orthogonal_tp));
  const auto rnd = convert_orthogonal_to_identity(build(TransformKind::orthogonal_random));
  const auto mr = convert_idempotent_to_diagonal(build(TransformKind::idempotent_mr));
  const auto cmr = convert_idempotent_to_diagonal(build(TransformKind::idempotent_cmr));
  for (const auto& [name, net] : {std::pair<const char*, const Network<double>*>{"tp", &tp},
                                  {"random", &rnd}, {"mr", &mr}, {"cmr", &cmr}}) {
    for (const auto& b : net->stages[0].blocks)
      if (!mixing_interaction_report(b).cross_branch_mixing) bad += std::string(" ") + name;
  }
  return {bad.empty(), bad.empty() ? "converted TP/random/MR/CMR blocks mix across branches, identity blocks do not"
                                   : "wrong verdict for:" + bad};
}

// ---------------------------------------------------------------------------

TrainConfig desk(TransformKind kind, std::uint64_t seed) {
  TrainConfig c;  // 20 epochs, 2000/1000 images, batch 64, lr 0.1
  c.seed = seed;
  c.network.blocks_per_stage = 3;
  c.network.stage_widths = {8, 16, 32};
  c.network.transform = {.kind = kind, .branches = 4, .seed = seed, .per_block = false};
  c.network.depth_label = 20;
  return c;
}

double mean_accuracy(const TrainConfig& base, const std::vector<std::uint64_t>& seeds, const Dataset& tr,
                     const Dataset& te) {
  std::vector<double> acc;
  for (auto seed : seeds) {
    TrainConfig c = base;
    c.seed = seed;
    c.network.transform.seed = seed;
    acc.push_back(train(c, tr, te).metrics.back().test_accuracy);
  }
  return summarize(acc).mean;
}

int run_training() {
  const char* env = std::getenv("SKIPNET_DATA_DIR");
  if (!env || !std::filesystem::exists(std::filesystem::path(env) / "test_batch.bin")) {
    std::printf("SKIP criterion 6: SKIPNET_DATA_DIR does not hold CIFAR-10 binaries\n");
    std::printf("SKIP criterion 7: SKIPNET_DATA_DIR does not hold CIFAR-10 binaries\n");
    std::printf("SKIP criterion 8b: SKIPNET_DATA_DIR does not hold CIFAR-10 binaries\n");
    return kSkipped;
  }
  auto [tr, te] = load_cifar10(env);
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  bool ok = true;

  ok &= report("6", "desk-scale parity of identity, CMR and TP against no skip", 1800, [&] {
    std::map<std::string, double> acc;
    for (auto kind : {TransformKind::identity, TransformKind::idempotent_cmr, TransformKind::orthogonal_tp,
                      TransformKind::zero})
      acc[std::string(to_string(kind))] = mean_accuracy(desk(kind, 1), seeds, tr, te);
    const double lo = std::min({acc["identity"], acc["idempotent_cmr"], acc["orthogonal_tp"]});
    const double hi = std::max({acc["identity"], acc["idempotent_cmr"], acc["orthogonal_tp"]});
    std::string detail;
    for (const auto& [k, v] : acc) detail += k + " " + std::to_string(100 * v).substr(0, 5) + "% ";
    detail += fmt("spread %.2f pt vs 5, margin over control %.2f pt vs 2", 100 * (hi - lo), 100 * (lo - acc["zero"]));
    return Outcome{hi - lo <= 0.05 && lo - acc["zero"] >= 0.02, detail};
  });

  ok &= report("7", "rank sweep: rank 0 worst and accuracy non-decreasing in rank", 1800, [&] {
    auto rows = rank_sweep(desk(TransformKind::idempotent_mr, 1), {0, 4, 2, 1}, seeds, tr, te);
    std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) { return a.rank < b.rank; });
    int rising = 0;
    bool zero_worst = rows.front().rank == 0;
    std::string detail;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      detail += "r" + std::to_string(rows[i].rank) + " " + std::to_string(100 * rows[i].accuracy.mean).substr(0, 5) +
                "% ";
      if (i > 0) {
        rising += rows[i].accuracy.mean >= rows[i - 1].accuracy.mean;
        zero_worst &= rows[i].accuracy.mean > rows.front().accuracy.mean;
      }
    }
    detail += "non-decreasing pairs " + std::to_string(rising) + " of " + std::to_string(rows.size() - 1) + " vs 3";
    return Outcome{zero_worst && rising >= 3, detail};
  });

  ok &= report("8b", "4-branch MR within 1 pt of 4-branch identity", 1800, [&] {
    auto mr = desk(TransformKind::idempotent_mr, 1);
    mr.network.branch_mode = BranchMode::multi;
    mr.network.branches = 4;
    auto id = mr;
    id.network.transform.kind = TransformKind::identity;
    const double a = mean_accuracy(mr, seeds, tr, te), b = mean_accuracy(id, seeds, tr, te);
    return Outcome{a >= b - 0.01, fmt("MR %.2f%% vs identity %.2f%%", 100 * a, 100 * b)};
  });
  return ok ? 0 : 1;
}

int run_algebraic() {
  bool ok = true;
  ok &= report("1", "transform invariants for R in {2..32}, B in {1,2,4,R}", 10, transforms_hold);
  ok &= report("2", "forward and backward expansions, all kinds, widths 4/16, K 3/6, 5 seeds", 60, expansions_hold);
  ok &= report("3", "orthogonal and idempotent conversions, widths 4/8, L 1/2/4, 32 inputs", 60, conversions_hold);
  ok &= report("4", "finite-difference gradients for every op and 2-block networks", 120, gradients_hold);
  ok &= report("5", "skip-path and gradient gains for k <= 16", 10, norms_hold);
  ok &= report("8a", "mixing interaction report on 4-branch blocks", 10, mixing_reported);
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  const std::string mode = argc > 1 ? argv[1] : "--algebraic";
  if (mode == "--algebraic") return run_algebraic();
  if (mode == "--training") return run_training();
  std::fprintf(stderr, "usage: acceptance [--algebraic | --training]\n");
  return 1;
}
