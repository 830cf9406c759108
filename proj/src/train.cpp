#include "skipnet/train.hpp"

#include "skipnet/optim.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <memory>
#include <sstream>

namespace skipnet {

namespace {

std::uint64_t epoch_seed(std::uint64_t seed, int epoch) {
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch) + 1;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("invalid train config: " + what); };
  if (epochs < 0) fail("epochs must be non-negative");
  if (batch_size < 1) fail("batch_size must be positive");
  if (!(learning_rate > 0)) fail("learning_rate must be positive");
  if (momentum < 0 || momentum >= 1) fail("momentum must lie in [0, 1)");
  if (weight_decay < 0) fail("weight_decay must be non-negative");
  double prev = 0.0;
  for (double m : milestones) {
    if (!(m > prev) || !(m < 1.0)) fail("milestones must be strictly increasing inside (0, 1)");
    prev = m;
  }
  network.validate();
}

double learning_rate_at(const TrainConfig& config, int epoch) {
  double lr = config.learning_rate;
  for (double m : config.milestones) {
    if (static_cast<double>(epoch) >= m * config.epochs) lr /= 10.0;
  }
  return lr;
}

std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  os << std::setprecision(8);
  for (const auto& r : rows) {
    os << r.epoch << ',' << r.learning_rate << ',' << r.train_loss << ',' << r.train_accuracy << ','
       << r.test_accuracy << ',' << std::fixed << std::setprecision(3) << r.seconds << std::defaultfloat
       << std::setprecision(8) << '\n';
  }
  return os.str();
}

template <class Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax_rows: expected NK logits, got " + to_string(logits.shape()));
  const Index n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Index best = 0;
    for (Index j = 1; j < k; ++j)
      if (logits[i * k + j] > logits[i * k + best]) best = j;
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

template std::vector<int> argmax_rows(const Tensor<float>&);
template std::vector<int> argmax_rows(const Tensor<double>&);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size()) throw ShapeError("accuracy: prediction/label count mismatch");
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate(const Network<float>& net, const Dataset& data, int batch_size) {
  if (data.size() == 0) return 0.0;
  std::mt19937_64 unused(0);
  std::vector<int> predictions;
  predictions.reserve(data.labels.size());
  for (Index start = 0; start < data.size(); start += batch_size) {
    const Index end = std::min<Index>(start + batch_size, data.size());
    std::vector<Index> idx(static_cast<std::size_t>(end - start));
    std::iota(idx.begin(), idx.end(), start);
    const auto p = argmax_rows(predict(net, make_batch(data, idx, false, unused)));
    predictions.insert(predictions.end(), p.begin(), p.end());
  }
  return accuracy(predictions, data.labels);
}

std::pair<double, Index> train_step(Network<float>& net, SgdNesterov<float>& opt, const Tensor<float>& batch,
                                    const std::vector<int>& labels) {
  Graph<float> g;
  ForwardContext<float> ctx(g, Mode::train, true);
  Var logits = forward(ctx, net, g.leaf(batch));
  Var loss = softmax_cross_entropy(g, logits, labels);
  const double loss_value = g.value(loss)[0];
  if (!std::isfinite(loss_value)) return {loss_value, 0};
  g.backward(loss);

  const auto predictions = argmax_rows(g.value(logits));
  Index correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];

  commit_running_stats(net, ctx.batch_stats());
  auto params = net.parameters();
  std::vector<Tensor<float>*> ptrs;
  std::vector<const Tensor<float>*> grads;
  std::vector<char> decay_storage;
  for (auto& p : params) {
    const auto v = ctx.bound(*p.tensor);
    if (!v) throw std::logic_error("train_step: parameter " + p.name + " not used by forward");
    ptrs.push_back(p.tensor);
    grads.push_back(&g.grad(*v));
    decay_storage.push_back(p.decay);
  }
  std::unique_ptr<bool[]> decay(new bool[decay_storage.size()]);
  for (std::size_t i = 0; i < decay_storage.size(); ++i) decay[i] = decay_storage[i];
  opt.step(ptrs, grads, std::span<const bool>(decay.get(), decay_storage.size()));
  return {loss_value, correct};
}

TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const EpochCallback& on_epoch) {
  config.validate();
  Dataset train_data = train_set.head(config.train_subset);
  Dataset test_data = test_set.head(config.test_subset);
  train_data.norm = compute_channel_norm(train_data.images);
  test_data.norm = train_data.norm;

  TrainResult result{{}, build_network<float>(config.network, config.seed), train_data.norm};
  SgdNesterov<float> opt(SgdHyper{config.learning_rate, config.momentum, config.weight_decay});

  std::vector<Index> order(static_cast<std::size_t>(train_data.size()));
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = learning_rate_at(config, epoch);
    opt.set_learning_rate(lr);
    std::mt19937_64 rng(epoch_seed(config.seed, epoch));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0;
    Index correct = 0;
    for (std::size_t at = 0; at < order.size(); at += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), at + static_cast<std::size_t>(config.batch_size));
      std::span<const Index> idx(order.data() + at, end - at);
      std::vector<int> labels;
      for (Index i : idx) labels.push_back(train_data.labels[static_cast<std::size_t>(i)]);
      const Tensor<float> batch = make_batch(train_data, idx, config.augment, rng);
      const auto [loss, ok] = train_step(result.network, opt, batch, labels);
      if (!std::isfinite(loss)) {
        throw NumericalError("training diverged: non-finite loss in epoch " + std::to_string(epoch + 1));
      }
      loss_sum += loss * static_cast<double>(idx.size());
      correct += ok;
    }

    MetricsRecord rec;
    rec.epoch = epoch + 1;
    rec.learning_rate = lr;
    rec.train_loss = train_data.size() ? loss_sum / static_cast<double>(train_data.size()) : 0.0;
    rec.train_accuracy = train_data.size() ? static_cast<double>(correct) / static_cast<double>(train_data.size()) : 0.0;
    rec.test_accuracy = evaluate(result.network, test_data);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.metrics.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

RepeatSummary summarize(const std::vector<double>& accuracies) {
  RepeatSummary s;
  s.test_accuracies = accuracies;
  if (accuracies.empty()) return s;
  const double n = static_cast<double>(accuracies.size());
  s.mean = std::accumulate(accuracies.begin(), accuracies.end(), 0.0) / n;
  if (accuracies.size() > 1) {
    double sq = 0;
    for (double a : accuracies) sq += (a - s.mean) * (a - s.mean);
    s.stddev = std::sqrt(sq / (n - 1));
  }
  return s;
}

std::string RepeatSummary::formatted() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << mean * 100 << "±" << stddev * 100;
  return os.str();
}

std::vector<SweepRow> rank_sweep(const TrainConfig& base, const std::vector<int>& branch_values,
                                 const std::vector<std::uint64_t>& seeds, const Dataset& train_set,
                                 const Dataset& test_set) {
  if (seeds.empty()) throw std::invalid_argument("rank_sweep: at least one seed required");
  const Index final_width = base.network.stage_widths.back();

  auto run = [&](TransformSpec t) {
    std::vector<double> accs;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      cfg.network.transform = t;
      const auto result = train(cfg, train_set, test_set);
      accs.push_back(result.metrics.empty() ? evaluate(result.network, test_set.head(cfg.test_subset))
                                            : result.metrics.back().test_accuracy);
    }
    return summarize(accs);
  };

  std::vector<SweepRow> rows;
  {
    SweepRow control;
    control.label = "no_skip";
    control.branches = -1;
    control.rank = 0;
    control.accuracy = run(TransformSpec{.kind = TransformKind::zero});
    rows.push_back(control);
  }
  for (int b : branch_values) {
    TransformSpec t{.kind = TransformKind::idempotent_mr, .branches = b};
    SweepRow row;
    row.branches = b;
    const int resolved = resolve_branches(t, final_width);
    row.label = b == 0 ? "mr_B=width" : "mr_B=" + std::to_string(b);
    row.rank = final_width / resolved;
    row.rank_fraction = static_cast<double>(row.rank) / static_cast<double>(final_width);
    row.accuracy = run(t);
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "label,branches,rank,rank_fraction,mean_test_acc,std_test_acc,runs\n";
  for (const auto& r : rows) {
    os << r.label << ',' << r.branches << ',' << r.rank << ',' << r.rank_fraction << ',' << r.accuracy.mean << ','
       << r.accuracy.stddev << ',' << r.accuracy.test_accuracies.size() << '\n';
  }
  return os.str();
}

}  // namespace skipnet
