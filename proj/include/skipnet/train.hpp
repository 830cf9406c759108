#pragma once

#include "skipnet/dataset.hpp"
#include "skipnet/network.hpp"
#include "skipnet/optim.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace skipnet {

/// Non-finite loss or another numerical breakdown.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  int epochs = 20;
  int batch_size = 64;
  double learning_rate = 0.1;
  /// LR is divided by 10 once the epoch index reaches each fraction of `epochs`.
  std::vector<double> milestones{0.5, 0.75};
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
  bool augment = true;
  Index train_subset = 2000;  // <= 0: whole split
  Index test_subset = 1000;
  bool deterministic = true;
  NetworkSpec network;

  void validate() const;
};

/// Learning rate in effect during `epoch` (0-based).
double learning_rate_at(const TrainConfig& config, int epoch);

struct MetricsRecord {
  int epoch = 0;  // 1-based
  double learning_rate = 0;
  double train_loss = 0;
  double train_accuracy = 0;
  double test_accuracy = 0;
  double seconds = 0;
};

inline constexpr const char* kMetricsHeader = "epoch,lr,train_loss,train_acc,test_acc,seconds";
std::string metrics_csv(const std::vector<MetricsRecord>& rows);

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  Network<float> network;
  ChannelNorm norm;  // computed on the training subset
};

using EpochCallback = std::function<void(const MetricsRecord&)>;

/// Mini-batch SGD/Nesterov. Train and test sets are truncated to the configured
/// subset sizes. The final short batch of an epoch is kept.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const Dataset& test_set,
                  const EpochCallback& on_epoch = {});

/// Index of the largest logit per row, lowest index on ties.
template <class Scalar>
std::vector<int> argmax_rows(const Tensor<Scalar>& logits);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

double evaluate(const Network<float>& net, const Dataset& data, int batch_size = 250);

/// One optimizer step on a batch; returns (loss, correct predictions).
std::pair<double, Index> train_step(Network<float>& net, SgdNesterov<float>& opt, const Tensor<float>& batch,
                                    const std::vector<int>& labels);

struct RepeatSummary {
  std::vector<double> test_accuracies;
  double mean = 0;
  double stddev = 0;  // sample standard deviation
  std::string formatted() const;  // "a±b" in percent
};

RepeatSummary summarize(const std::vector<double>& accuracies);

struct SweepRow {
  std::string label;
  int branches = -1;  // -1 for the no-skip control, 0 for B = width
  Index rank = 0;     // at the final stage width
  double rank_fraction = 0;
  RepeatSummary accuracy;
};

/// Idempotent-MR rank sweep plus a no-skip (P = 0) control. `seeds` are the
/// training seeds averaged per row.
std::vector<SweepRow> rank_sweep(const TrainConfig& base, const std::vector<int>& branch_values,
                                 const std::vector<std::uint64_t>& seeds, const Dataset& train_set,
                                 const Dataset& test_set);

std::string sweep_csv(const std::vector<SweepRow>& rows);

}  // namespace skipnet
