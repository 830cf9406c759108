#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "oracles.hpp"
#include "skipnet/equivalence.hpp"
#include "skipnet/network.hpp"

#include <numeric>

using namespace skipnet;

namespace {

NetworkSpec small_spec(TransformKind kind = TransformKind::identity) {
  NetworkSpec s;
  s.blocks_per_stage = 2;
  s.stage_widths = {4, 8};
  s.input_shape = {3, 8, 8};
  s.transform.kind = kind;
  return s;
}

Tensor<double> randn(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return Tensor<double>::randn(std::move(s), rng);
}

double max_logit_gap(const Tensor<double>& a, const std::vector<std::vector<double>>& b) {
  double d = 0;
  const Index k = a.dim(1);
  for (Index n = 0; n < a.dim(0); ++n)
    for (Index j = 0; j < k; ++j)
      d = std::max(d, std::abs(a[n * k + j] - b[static_cast<std::size_t>(n)][static_cast<std::size_t>(j)]));
  return d;
}

}  // namespace

TEST_SUITE("build block") {
  TEST_CASE("single branch identity block of width 16") {
    NetworkSpec spec;
    std::mt19937_64 rng(1);
    auto b = build_block<double>(16, spec, build_transform(spec.transform, 16, 0), rng);
    CHECK(b.skip->kind() == TransformKind::identity);
    CHECK(b.branch.groups == 1);
    CHECK(b.branch.count == 1);
    CHECK(b.branch.conv1.shape() == Shape{16, 16, 3, 3});
    CHECK(b.branch.conv2.shape() == Shape{16, 16, 3, 3});
    CHECK((b.branch.bn1.gamma.array() == 1.0).all());
    CHECK((b.branch.bn1.beta.array() == 0.0).all());
    CHECK_FALSE(b.pre_mix);
    CHECK_FALSE(b.post_mix);
  }

  TEST_CASE("four branches at width 32 with MR(B=4)") {
    NetworkSpec spec;
    spec.branch_mode = BranchMode::multi;
    spec.branches = 4;
    spec.transform = {.kind = TransformKind::idempotent_mr, .branches = 4};
    std::mt19937_64 rng(2);
    auto b = build_block<double>(32, spec, build_transform(spec.transform, 32, 0), rng);
    CHECK(b.branch.count == 4);
    CHECK(b.branch.groups == 4);
    CHECK(b.branch.conv1.shape() == Shape{32, 8, 3, 3});
    CHECK(rank(b.skip->matrix()) == 8);
  }

  TEST_CASE("depthwise at width 64 uses one channel per group") {
    NetworkSpec spec;
    spec.branch_mode = BranchMode::depthwise;
    std::mt19937_64 rng(3);
    auto b = build_block<double>(64, spec, build_transform(spec.transform, 64, 0), rng);
    CHECK(b.branch.groups == 64);
    CHECK(b.branch.conv1.shape() == Shape{64, 1, 3, 3});
  }

  TEST_CASE("He initialization has variance 2 / fan_in") {
    NetworkSpec spec;
    std::mt19937_64 rng(4);
    auto b = build_block<double>(64, spec, build_transform(spec.transform, 64, 0), rng);
    const auto& w = b.branch.conv1.array();
    const double var = (w - w.mean()).square().mean();
    CHECK(var == doctest::Approx(2.0 / (64 * 9)).epsilon(0.05));
    CHECK(he_fan_in({8, 4, 3, 3}) == 36);
  }
}

TEST_SUITE("build network") {
  TEST_CASE("K=9 identity single branch at 16,32,64 is depth 56") {
    NetworkSpec s;
    s.blocks_per_stage = 9;
    s.stage_widths = {16, 32, 64};
    s.depth_label = 56;
    const auto net = build_network<double>(s, 1);
    CHECK(net.stages.size() == 3);
    for (const auto& st : net.stages) CHECK(st.blocks.size() == 9);
    CHECK(net.transitions.size() == 2);
  }

  TEST_CASE("K=3 at 8,16,32 with orthogonal TP builds a depth 20 network") {
    NetworkSpec s;
    s.transform.kind = TransformKind::orthogonal_tp;
    s.depth_label = 20;
    const auto net = build_network<double>(s, 1);
    CHECK(net.spec.depth() == 20);
    CHECK(net.head.weight.shape() == Shape{10, 32});
  }

  TEST_CASE("violated constraints are named") {
    auto message = [](const NetworkSpec& s) {
      try {
        s.validate();
      } catch (const std::invalid_argument& e) {
        return std::string(e.what());
      }
      return std::string();
    };
    NetworkSpec s;
    s.stage_widths = {16, 32, 64};
    s.branch_mode = BranchMode::multi;
    s.branches = 4;
    s.transform.kind = TransformKind::orthogonal_tp;
    CHECK(message(s).empty());
    s.stage_widths = {12, 24, 48};
    CHECK(message(s).find("power-of-2") != std::string::npos);
    CHECK_THROWS_AS(build_network<double>(s, 0), std::invalid_argument);

    NetworkSpec m;
    m.branch_mode = BranchMode::multi;
    m.branches = 3;
    CHECK(message(m).find("does not divide") != std::string::npos);

    NetworkSpec d;
    d.depth_label = 56;
    CHECK(message(d).find("6K+2") != std::string::npos);

    NetworkSpec i;
    i.transform = {.kind = TransformKind::idempotent_mr, .branches = 3};
    CHECK(message(i).find("B = 3") != std::string::npos);
  }

  TEST_CASE("same seed same weights, different seed different weights") {
    auto a = build_network<double>(small_spec(), 5), b = build_network<double>(small_spec(), 5),
         c = build_network<double>(small_spec(), 6);
    CHECK(max_abs_diff(a.stem, b.stem) == 0.0);
    CHECK(max_abs_diff(a.stem, c.stem) > 0.0);
  }

  TEST_CASE("blocks in a stage share one skip instance") {
    for (auto kind : {TransformKind::identity, TransformKind::idempotent_cmr, TransformKind::orthogonal_tp,
                      TransformKind::periodic}) {
      auto s = small_spec(kind);
      s.transform.branches = 2;
      s.transform.period = 3;
      const auto net = build_network<double>(s, 1);
      for (const auto& st : net.stages)
        for (const auto& b : st.blocks) CHECK(b.skip.get() == st.blocks.front().skip.get());
    }
  }

  TEST_CASE("orthogonal random draws per block unless shared") {
    auto s = small_spec(TransformKind::orthogonal_random);
    auto net = build_network<double>(s, 1);
    CHECK(net.stages[0].blocks[0].skip->matrix() != net.stages[0].blocks[1].skip->matrix());
    s.transform.per_block = false;
    net = build_network<double>(s, 1);
    CHECK(net.stages[0].blocks[0].skip.get() == net.stages[0].blocks[1].skip.get());
  }
}

TEST_SUITE("forward") {
  TEST_CASE("matches the straight-line oracle for every kind and branch mode") {
    for (auto kind : {TransformKind::identity, TransformKind::idempotent_mr, TransformKind::orthogonal_tp,
                      TransformKind::orthogonal_random, TransformKind::periodic})
      for (auto mode : {BranchMode::single, BranchMode::multi, BranchMode::depthwise}) {
        auto s = small_spec(kind);
        s.branch_mode = mode;
        s.branches = 2;
        s.transform.branches = 2;
        s.transform.period = 2;
        auto net = build_network<double>(s, 11);
        randomize_batch_norm(net, 12);
        const auto x = randn({3, 3, 8, 8}, 13);
        CAPTURE(to_string(kind));
        CAPTURE(to_string(mode));
        CHECK(max_logit_gap(predict(net, x), oracle::forward(net, x)) <= 1e-10);
      }
  }

  TEST_CASE("zero branches reduce to stem, transitions and head") {
    auto net = build_network<double>(small_spec(), 3);
    randomize_batch_norm(net, 4);
    for (auto& st : net.stages)
      for (auto& b : st.blocks) b.branch.conv2.array().setZero();
    const auto x = randn({2, 3, 8, 8}, 5);
    // Oracle without any block: identity skips and F == 0 make them no-ops.
    auto bare = net;
    for (auto& st : bare.stages) st.blocks.clear();
    CHECK(max_logit_gap(predict(net, x), oracle::forward(bare, x)) <= 1e-12);
  }

  TEST_CASE("repeated input gives identical rows in eval mode") {
    auto net = build_network<double>(small_spec(TransformKind::orthogonal_tp), 3);
    const auto one = randn({1, 3, 8, 8}, 6);
    Tensor<double> batch({4, 3, 8, 8});
    for (Index n = 0; n < 4; ++n) batch.array().segment(n * one.size(), one.size()) = one.array();
    const auto y = predict(net, batch);
    for (Index n = 1; n < 4; ++n) CHECK((y.array().segment(n * 10, 10) == y.array().head(10)).all());
  }

  TEST_CASE("eval output does not depend on batch composition") {
    auto net = build_network<double>(small_spec(), 3);
    randomize_batch_norm(net, 1);
    const auto a = randn({2, 3, 8, 8}, 7);
    const auto first = predict(net, a.reshaped({2, 3, 8, 8}));
    Tensor<double> single({1, 3, 8, 8}, a.array().head(3 * 64));
    CHECK(max_abs_diff(Tensor<double>({1, 10}, first.array().head(10)), predict(net, single)) <= 1e-13);
  }

  TEST_CASE("wrong input shape is rejected") {
    auto net = build_network<double>(small_spec(), 3);
    CHECK_THROWS_AS(predict(net, Tensor<double>({1, 3, 9, 8})), ShapeError);
    CHECK_THROWS_AS(predict(net, Tensor<double>({1, 1, 8, 8})), ShapeError);
  }

  TEST_CASE("zeroed branches make a stage apply P^n") {
    for (auto kind : {TransformKind::idempotent_cmr, TransformKind::orthogonal_tp, TransformKind::periodic}) {
      auto s = small_spec(kind);
      s.blocks_per_stage = 4;
      s.transform.branches = 2;
      s.transform.period = 3;
      auto net = build_network<double>(s, 2);
      for (auto& b : net.stages[1].blocks) b.branch.conv2.array().setZero();
      const auto x = randn({2, 8, 4, 4}, 9);
      Graph<double> g;
      ForwardContext<double> ctx(g, Mode::eval);
      Var y = stage_forward(ctx, net.stages[1], g.leaf(x));
      const auto p4 = matrix_power(net.stages[1].blocks[0].skip->matrix(), 4);
      CHECK(max_abs_diff(g.value(y), kernels::channel_mix<double>(p4, x)) <= 1e-9);
    }
  }

  TEST_CASE("depthwise blocks are channel-permutation equivariant") {
    NetworkSpec s;
    s.branch_mode = BranchMode::depthwise;
    const Index w = 6;
    std::mt19937_64 rng(21);
    auto b = build_block<double>(w, s, build_transform(s.transform, w, 0), rng);
    for (auto* bn : {&b.branch.bn1, &b.branch.bn2}) {
      bn->gamma = Tensor<double>::uniform({w}, rng, 0.5, 1.5);
      bn->beta = Tensor<double>::randn({w}, rng);
      bn->running_mean = Tensor<double>::randn({w}, rng);
      bn->running_var = Tensor<double>::uniform({w}, rng, 0.5, 2.0);
    }
    std::vector<Index> perm(static_cast<std::size_t>(w));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permute_channels = [&](const Tensor<double>& t, Index per) {
      Tensor<double> out(t.shape());
      const Index outer = t.size() / (w * per);
      for (Index o = 0; o < outer; ++o)
        for (Index c = 0; c < w; ++c)
          out.array().segment((o * w + c) * per, per) = t.array().segment((o * w + perm[c]) * per, per);
      return out;
    };
    auto pb = b;
    pb.branch.conv1 = permute_channels(b.branch.conv1, 9);
    pb.branch.conv2 = permute_channels(b.branch.conv2, 9);
    for (auto [src, dst] : {std::pair{&b.branch.bn1, &pb.branch.bn1}, std::pair{&b.branch.bn2, &pb.branch.bn2}}) {
      dst->gamma = permute_channels(src->gamma, 1);
      dst->beta = permute_channels(src->beta, 1);
      dst->running_mean = permute_channels(src->running_mean, 1);
      dst->running_var = permute_channels(src->running_var, 1);
    }
    const auto x = randn({2, w, 5, 5}, 22);
    auto run = [](const Block<double>& blk, const Tensor<double>& in) {
      Graph<double> g;
      ForwardContext<double> ctx(g, Mode::eval);
      return g.value(block_forward(ctx, blk, g.leaf(in)).output);
    };
    CHECK(max_abs_diff(run(pb, permute_channels(x, 25)), permute_channels(run(b, x), 25)) <= 1e-13);
  }
}

TEST_SUITE("describe") {
  TEST_CASE("parameter count of the depth 56 identity network matches the layer sum") {
    NetworkSpec s;
    s.blocks_per_stage = 9;
    s.stage_widths = {16, 32, 64};
    const auto net = build_network<float>(s, 0);
    CHECK(describe(net).parameter_count == oracle::parameter_count(s));
  }

  TEST_CASE("parameter count for grouped modes") {
    for (auto mode : {BranchMode::multi, BranchMode::depthwise}) {
      auto s = small_spec();
      s.branch_mode = mode;
      s.branches = 4;
      const auto net = build_network<float>(s, 0);
      CHECK(describe(net).parameter_count == oracle::parameter_count(s));
    }
  }

  TEST_CASE("MR(B=4) at width 32 reports rank 8, identity reports full rank") {
    NetworkSpec s;
    s.stage_widths = {32, 32, 32};
    s.transform = {.kind = TransformKind::idempotent_mr, .branches = 4};
    CHECK(describe(build_network<float>(s, 0)).stage_ranks == std::vector<Index>{8, 8, 8});
    NetworkSpec id;
    CHECK(describe(build_network<float>(id, 0)).stage_ranks == std::vector<Index>{8, 16, 32});
  }

  TEST_CASE("summary is deterministic and lists every layer") {
    const auto a = describe(build_network<float>(small_spec(), 1));
    const auto b = describe(build_network<float>(small_spec(), 2));
    CHECK(a.text == b.text);
    CHECK(a.layers.size() == 1 + 4 + 1 + 1);  // stem, 4 blocks, transition, head
    CHECK(a.fixed_parameter_count == 16 + 64);  // a stage-shared skip counts once
  }

  TEST_CASE("float and double networks agree after casting") {
    const auto d = build_network<double>(small_spec(TransformKind::orthogonal_tp), 4);
    const auto f = d.cast<float>();
    const auto x = randn({2, 3, 8, 8}, 5);
    const auto yf = predict(f, x.cast<float>()).cast<double>();
    CHECK(max_abs_diff(yf, predict(d, x)) <= 1e-4);
  }
}
