// skipnet: train, evaluate, convert, verify, analyze, sweep and gradcheck.
//
// Exit codes: 0 ok, 1 usage or config error, 2 data error, 3 numerical failure.

#include "skipnet/checkpoint.hpp"
#include "skipnet/config.hpp"
#include "skipnet/equivalence.hpp"
#include "skipnet/gradcheck.hpp"
#include "skipnet/propagation.hpp"
#include "skipnet/train.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace skipnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

/// A check that ran but did not pass (verification, gradcheck).
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string data_dir;
  std::string output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<Index> train_subset;
  std::optional<Index> test_subset;
  std::optional<int> repeats;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (const char* env = std::getenv("SKIPNET_DATA_DIR"); env && *env) cfg.data_dir = env;
  if (!c.data_dir.empty()) cfg.data_dir = c.data_dir;
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (c.seed) cfg.train.seed = *c.seed;
  if (c.epochs) cfg.train.epochs = *c.epochs;
  if (c.train_subset) cfg.train.train_subset = *c.train_subset;
  if (c.test_subset) cfg.train.test_subset = *c.test_subset;
  if (c.repeats) cfg.repeats = *c.repeats;
  if (cfg.repeats < 1) throw ConfigError("repeats must be at least 1");
  try {
    cfg.train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

std::pair<Dataset, Dataset> load_data(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty()) {
    throw DataError("no CIFAR-10 directory: pass --data-dir, set SKIPNET_DATA_DIR or data_dir in the config");
  }
  return load_cifar10(cfg.data_dir);
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw DataError("cannot write " + file.string());
  out << text;
}

void print_epoch(const MetricsRecord& r) {
  std::cout << "epoch " << std::setw(3) << r.epoch << "  lr " << std::setw(7) << r.learning_rate << "  loss "
            << std::fixed << std::setprecision(4) << r.train_loss << "  train " << r.train_accuracy << "  test "
            << r.test_accuracy << "  " << std::setprecision(1) << r.seconds << "s" << std::defaultfloat
            << std::endl;
}

void add_common(CLI::App* cmd, Common& c, bool training) {
  cmd->add_option("-c,--config", c.config, "JSON experiment config");
  cmd->add_option("--data-dir", c.data_dir, "CIFAR-10 binary directory (overrides SKIPNET_DATA_DIR)");
  cmd->add_option("-o,--output-dir", c.output_dir, "Directory for CSV and checkpoint output");
  cmd->add_option("--seed", c.seed, "Override the config seed");
  if (training) {
    cmd->add_option("--epochs", c.epochs, "Override the epoch count");
    cmd->add_option("--train-subset", c.train_subset, "Training images used (<= 0: all)");
    cmd->add_option("--test-subset", c.test_subset, "Test images used (<= 0: all)");
  }
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  const auto [train_set, test_set] = load_data(cfg);
  fs::create_directories(cfg.output_dir);
  std::cout << describe(build_network<float>(cfg.train.network, cfg.train.seed)).text;

  std::vector<double> finals;
  std::ostringstream summary;
  summary << "run,seed,test_acc\n";
  for (int r = 0; r < cfg.repeats; ++r) {
    TrainConfig tc = cfg.train;
    tc.seed = cfg.train.seed + static_cast<std::uint64_t>(r);
    if (cfg.repeats > 1) std::cout << "run " << r + 1 << "/" << cfg.repeats << " seed " << tc.seed << '\n';
    const TrainResult result = train(tc, train_set, test_set, print_epoch);
    const std::string suffix = cfg.repeats > 1 ? "_r" + std::to_string(r + 1) : "";
    write_text(cfg.output_dir / ("metrics" + suffix + ".csv"), metrics_csv(result.metrics));
    save_checkpoint(cfg.output_dir / ("model" + suffix + ".ckpt"), result.network, result.norm);
    const double acc = result.metrics.empty() ? 0.0 : result.metrics.back().test_accuracy;
    finals.push_back(acc);
    summary << r + 1 << ',' << tc.seed << ',' << acc << '\n';
  }
  if (cfg.repeats > 1) {
    const RepeatSummary s = summarize(finals);
    summary << "mean+-std,," << s.formatted() << '\n';
    write_text(cfg.output_dir / "summary.csv", summary.str());
    std::cout << "test accuracy (%) over " << cfg.repeats << " runs: " << s.formatted() << '\n';
  }
  return kExitOk;
}

int cmd_init(const Common& c, const std::string& out) {
  const ExperimentConfig cfg = load_config(c);
  const Network<float> net = build_network<float>(cfg.train.network, cfg.train.seed);
  save_checkpoint(out, net);
  std::cout << describe(net).text << "wrote " << out << '\n';
  return kExitOk;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint) {
  ExperimentConfig cfg = load_config(c);
  const Network<float> net = load_checkpoint<float>(checkpoint);
  auto [train_set, test_set] = load_data(cfg);
  Dataset test = test_set.head(cfg.train.test_subset);
  if (auto norm = read_checkpoint_norm(checkpoint)) {
    test.norm = *norm;
  } else {
    test.norm = compute_channel_norm(train_set.head(cfg.train.train_subset).images);
  }
  const double acc = evaluate(net, test);
  std::cout << "test_images " << test.size() << "\naccuracy " << std::setprecision(6) << acc << '\n';
  return kExitOk;
}

int cmd_convert(const std::string& in, const std::string& kind, const std::string& out) {
  const Network<double> net = load_checkpoint<double>(in);
  Network<double> converted;
  if (kind == "identity") {
    converted = convert_orthogonal_to_identity(net);
  } else if (kind == "diagonal") {
    converted = convert_idempotent_to_diagonal(net);
  } else {
    throw ConfigError("convert: --to must be 'identity' or 'diagonal', got '" + kind + "'");
  }
  save_checkpoint(out, converted, read_checkpoint_norm(in));
  std::cout << describe(converted).text << "wrote " << out << '\n';
  return kExitOk;
}

int cmd_verify(const std::string& a, const std::string& b, int inputs, std::uint64_t seed, double tol) {
  const Network<double> na = load_checkpoint<double>(a);
  const Network<double> nb = load_checkpoint<double>(b);
  const EquivalenceResult r = verify_equivalence(na, nb, inputs, seed, tol);
  std::cout << "inputs " << inputs << "\nmax_deviation " << std::scientific << std::setprecision(3)
            << r.max_deviation << "\ntolerance " << tol << '\n'
            << (r.passed ? "PASS" : "FAIL") << '\n';
  if (!r.passed) throw CheckFailed("networks differ beyond tolerance");
  return kExitOk;
}

int cmd_analyze(const std::string& checkpoint, std::size_t stage, int m, int n, int inputs, std::uint64_t seed,
                const std::string& csv) {
  const Network<double> net = load_checkpoint<double>(checkpoint);
  if (stage >= net.stages.size()) throw ConfigError("analyze: stage " + std::to_string(stage) + " out of range");
  if (n < 0) n = static_cast<int>(net.stages[stage].blocks.size());
  std::mt19937_64 rng(seed);
  const auto& s = net.spec.input_shape;
  const Tensor<double> x = Tensor<double>::randn({inputs, s[0], s[1], s[2]}, rng);
  const FlowReport report = analyze_flow(capture_trace(net, x, stage, m, n));
  std::cout << report.text();
  if (!csv.empty()) write_text(csv, report.csv());
  return kExitOk;
}

int cmd_sweep(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  const auto [train_set, test_set] = load_data(cfg);
  const auto rows = rank_sweep(cfg.train, cfg.sweep.branches, cfg.sweep.seeds, train_set, test_set);
  const std::string table = sweep_csv(rows);
  write_text(cfg.output_dir / "sweep.csv", table);
  std::cout << table;
  return kExitOk;
}

struct GradcheckArgs {
  Index width = 8;
  int blocks = 2;
  Index image = 8;
  std::string transform = "orthogonal_tp";
  std::string branch_mode = "single";
  int branches = 1;
  int batch = 2;
  double tol = 1e-3;
};

int cmd_gradcheck(const Common& c, const GradcheckArgs& a) {
  NetworkSpec spec;
  std::uint64_t seed = c.seed.value_or(1);
  if (!c.config.empty()) {
    spec = load_config(c).train.network;
  } else {
    spec.blocks_per_stage = a.blocks;
    spec.stage_widths = {a.width};
    spec.branch_mode = parse_branch_mode(a.branch_mode);
    spec.branches = a.branches;
    spec.transform.kind = parse_transform_kind(a.transform);
    spec.input_shape = {3, a.image, a.image};
    spec.validate();
  }
  const GradcheckResult r = gradcheck_network(spec, seed, a.batch);
  std::cout << std::scientific << std::setprecision(3);
  std::cout << std::left << std::setw(32) << "tensor" << std::setw(12) << "rel_error" << "kink-skipped/entries\n";
  for (const auto& t : r.tensors) {
    std::cout << std::setw(32) << t.name << std::setw(12) << t.relative_error << t.kink_skipped << '/' << t.entries
              << '\n';
  }
  std::cout << "max_relative_error " << r.max_relative_error << " (" << r.worst << ")\n"
            << (r.max_relative_error <= a.tol ? "PASS" : "FAIL") << '\n';
  if (r.max_relative_error > a.tol) throw CheckFailed("gradient check failed");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skip-connections as general linear transformations"};
  app.require_subcommand(1);

  Common train_opts, eval_opts, sweep_opts, init_opts, grad_opts;
  auto* train_cmd = app.add_subcommand("train", "Train a network; writes metrics CSV and checkpoint");
  add_common(train_cmd, train_opts, true);
  train_cmd->add_option("--repeats", train_opts.repeats, "Independent runs with seeds seed, seed+1, ...");

  auto* init_cmd = app.add_subcommand("init", "Write a freshly initialized checkpoint");
  add_common(init_cmd, init_opts, false);
  std::string init_out;
  init_cmd->add_option("--out", init_out, "Checkpoint path")->required();

  auto* eval_cmd = app.add_subcommand("evaluate", "Test accuracy of a checkpoint");
  add_common(eval_cmd, eval_opts, true);
  std::string eval_ckpt;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();

  auto* convert_cmd = app.add_subcommand("convert", "Rewrite orthogonal or idempotent skips");
  std::string conv_in, conv_out, conv_to;
  convert_cmd->add_option("--in", conv_in, "Input checkpoint")->required();
  convert_cmd->add_option("--out", conv_out, "Output checkpoint")->required();
  convert_cmd->add_option("--to", conv_to, "identity (orthogonal skips) or diagonal (idempotent skips)")->required();

  auto* verify_cmd = app.add_subcommand("verify", "Max output deviation between two checkpoints");
  std::string ver_a, ver_b;
  int ver_inputs = 32;
  std::uint64_t ver_seed = 0;
  double ver_tol = 1e-8;
  verify_cmd->add_option("a", ver_a, "First checkpoint")->required();
  verify_cmd->add_option("b", ver_b, "Second checkpoint")->required();
  verify_cmd->add_option("--inputs", ver_inputs, "Random inputs")->capture_default_str();
  verify_cmd->add_option("--seed", ver_seed, "Input seed")->capture_default_str();
  verify_cmd->add_option("--tol", ver_tol, "Pass threshold")->capture_default_str();

  auto* analyze_cmd = app.add_subcommand("analyze", "Propagation report for blocks [m, n) of a stage");
  std::string an_ckpt, an_csv;
  std::size_t an_stage = 0;
  int an_m = 0, an_n = -1, an_inputs = 2;
  std::uint64_t an_seed = 0;
  analyze_cmd->add_option("--checkpoint", an_ckpt, "Checkpoint path")->required();
  analyze_cmd->add_option("--stage", an_stage, "Stage index")->capture_default_str();
  analyze_cmd->add_option("-m", an_m, "First block")->capture_default_str();
  analyze_cmd->add_option("-n", an_n, "End block (default: stage length)");
  analyze_cmd->add_option("--inputs", an_inputs, "Random inputs")->capture_default_str();
  analyze_cmd->add_option("--seed", an_seed, "Input seed")->capture_default_str();
  analyze_cmd->add_option("--csv", an_csv, "Also write the report as CSV");

  auto* sweep_cmd = app.add_subcommand("sweep", "Idempotent-MR rank sweep with a no-skip control");
  add_common(sweep_cmd, sweep_opts, true);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of a whole network");
  add_common(grad_cmd, grad_opts, false);
  GradcheckArgs ga;
  grad_cmd->add_option("--width", ga.width)->capture_default_str();
  grad_cmd->add_option("--blocks", ga.blocks)->capture_default_str();
  grad_cmd->add_option("--image", ga.image, "Input height and width")->capture_default_str();
  grad_cmd->add_option("--transform", ga.transform)->capture_default_str();
  grad_cmd->add_option("--branch-mode", ga.branch_mode)->capture_default_str();
  grad_cmd->add_option("--branches", ga.branches)->capture_default_str();
  grad_cmd->add_option("--batch", ga.batch)->capture_default_str();
  grad_cmd->add_option("--tol", ga.tol)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_opts);
    if (*init_cmd) return cmd_init(init_opts, init_out);
    if (*eval_cmd) return cmd_evaluate(eval_opts, eval_ckpt);
    if (*convert_cmd) return cmd_convert(conv_in, conv_to, conv_out);
    if (*verify_cmd) return cmd_verify(ver_a, ver_b, ver_inputs, ver_seed, ver_tol);
    if (*analyze_cmd) return cmd_analyze(an_ckpt, an_stage, an_m, an_n, an_inputs, an_seed, an_csv);
    if (*sweep_cmd) return cmd_sweep(sweep_opts);
    if (*grad_cmd) return cmd_gradcheck(grad_opts, ga);
  } catch (const CheckFailed& e) {
    std::cerr << "skipnet: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "skipnet: numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const DataError& e) {
    std::cerr << "skipnet: data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ConfigError& e) {
    std::cerr << "skipnet: config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "skipnet: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
