#include "skipnet/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace skipnet {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw ConfigError(where.empty() ? what : where + ": " + what);
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) fail(where, "expected an object");
}

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> known) {
  std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) fail(where, "unknown key '" + key + "'");
  }
}

std::string join(const std::string& where, const std::string& key) { return where.empty() ? key : where + "." + key; }

template <class T>
T get(const json& j, const std::string& where, const std::string& key) {
  const json& v = j.at(key);
  const std::string at = join(where, key);
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) fail(at, "expected a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) fail(at, "expected an integer");
    if (std::is_unsigned_v<T> && !v.is_number_unsigned()) fail(at, "expected a non-negative integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) fail(at, "expected a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) fail(at, "expected a string");
  }
  return v.get<T>();
}

template <class T>
void read(const json& j, const std::string& where, const std::string& key, T& out) {
  if (j.contains(key)) out = get<T>(j, where, key);
}

template <class T>
std::vector<T> read_array(const json& j, const std::string& at) {
  if (!j.is_array()) fail(at, "expected an array");
  std::vector<T> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    json wrap = json::object();
    wrap["v"] = j[i];
    out.push_back(get<T>(wrap, at + "[" + std::to_string(i) + "]", "v"));
  }
  return out;
}

/// B may be a positive integer or the string "width".
int read_branch_count(const json& v, const std::string& at) {
  if (v.is_string()) {
    if (v.get<std::string>() != "width") fail(at, "expected a positive integer or \"width\"");
    return 0;
  }
  if (!v.is_number_integer() || v.get<long long>() < 1) fail(at, "expected a positive integer or \"width\"");
  return v.get<int>();
}

json branch_count_json(int b) { return b == 0 ? json("width") : json(b); }

template <class E, class Parse>
E read_enum(const json& j, const std::string& where, const std::string& key, Parse parse) {
  const std::string s = get<std::string>(j, where, key);
  try {
    return parse(s);
  } catch (const std::invalid_argument& e) {
    fail(join(where, key), e.what());
  }
}

}  // namespace

json to_json(const TransformSpec& t) {
  return {{"kind", std::string(to_string(t.kind))},
          {"B", branch_count_json(t.branches)},
          {"period", t.period},
          {"seed", t.seed},
          {"per_block", t.per_block}};
}

json to_json(const NetworkSpec& spec) {
  json j = {{"blocks_per_stage", spec.blocks_per_stage},
            {"stage_widths", spec.stage_widths},
            {"branch_mode", std::string(to_string(spec.branch_mode))},
            {"branches", spec.branches},
            {"transform", to_json(spec.transform)},
            {"num_classes", spec.num_classes},
            {"input_shape", spec.input_shape}};
  if (spec.depth_label) j["depth_label"] = *spec.depth_label;
  return j;
}

json to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  json sweep_b = json::array();
  for (int b : c.sweep.branches) sweep_b.push_back(branch_count_json(b));
  return {{"network", to_json(t.network)},
          {"training",
           {{"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"learning_rate", t.learning_rate},
            {"milestones", t.milestones},
            {"momentum", t.momentum},
            {"weight_decay", t.weight_decay},
            {"augment", t.augment},
            {"train_subset", t.train_subset},
            {"test_subset", t.test_subset}}},
          {"seed", t.seed},
          {"deterministic", t.deterministic},
          {"data_dir", c.data_dir.string()},
          {"output_dir", c.output_dir.string()},
          {"checkpoint", c.checkpoint.string()},
          {"repeats", c.repeats},
          {"sweep", {{"B", sweep_b}, {"seeds", c.sweep.seeds}}}};
}

TransformSpec transform_spec_from_json(const json& j, const std::string& where) {
  require_object(j, where);
  reject_unknown(j, where, {"kind", "B", "period", "seed", "per_block"});
  TransformSpec t;
  if (j.contains("kind")) t.kind = read_enum<TransformKind>(j, where, "kind", parse_transform_kind);
  if (j.contains("B")) t.branches = read_branch_count(j.at("B"), join(where, "B"));
  read(j, where, "period", t.period);
  read(j, where, "seed", t.seed);
  read(j, where, "per_block", t.per_block);
  return t;
}

NetworkSpec network_spec_from_json(const json& j, const std::string& where) {
  require_object(j, where);
  reject_unknown(j, where,
                 {"blocks_per_stage", "stage_widths", "branch_mode", "branches", "transform", "num_classes",
                  "input_shape", "depth_label"});
  NetworkSpec s;
  read(j, where, "blocks_per_stage", s.blocks_per_stage);
  if (j.contains("stage_widths")) s.stage_widths = read_array<Index>(j.at("stage_widths"), join(where, "stage_widths"));
  if (j.contains("branch_mode")) s.branch_mode = read_enum<BranchMode>(j, where, "branch_mode", parse_branch_mode);
  read(j, where, "branches", s.branches);
  if (j.contains("transform")) s.transform = transform_spec_from_json(j.at("transform"), join(where, "transform"));
  read(j, where, "num_classes", s.num_classes);
  if (j.contains("input_shape")) {
    const auto shape = read_array<Index>(j.at("input_shape"), join(where, "input_shape"));
    if (shape.size() != 3) fail(join(where, "input_shape"), "expected [C, H, W]");
    s.input_shape = {shape[0], shape[1], shape[2]};
  }
  if (j.contains("depth_label")) s.depth_label = get<int>(j, where, "depth_label");
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    fail(where, e.what());
  }
  return s;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  require_object(j, "config");
  reject_unknown(j, "",
                 {"network", "training", "seed", "deterministic", "data_dir", "output_dir", "checkpoint", "repeats",
                  "sweep"});
  ExperimentConfig c;
  TrainConfig& t = c.train;
  if (j.contains("network")) t.network = network_spec_from_json(j.at("network"), "network");
  if (j.contains("training")) {
    const json& tj = j.at("training");
    require_object(tj, "training");
    reject_unknown(tj, "training",
                   {"epochs", "batch_size", "learning_rate", "milestones", "momentum", "weight_decay", "augment",
                    "train_subset", "test_subset"});
    read(tj, "training", "epochs", t.epochs);
    read(tj, "training", "batch_size", t.batch_size);
    read(tj, "training", "learning_rate", t.learning_rate);
    if (tj.contains("milestones")) t.milestones = read_array<double>(tj.at("milestones"), "training.milestones");
    read(tj, "training", "momentum", t.momentum);
    read(tj, "training", "weight_decay", t.weight_decay);
    read(tj, "training", "augment", t.augment);
    read(tj, "training", "train_subset", t.train_subset);
    read(tj, "training", "test_subset", t.test_subset);
  }
  read(j, "", "seed", t.seed);
  read(j, "", "deterministic", t.deterministic);
  if (j.contains("data_dir")) c.data_dir = get<std::string>(j, "", "data_dir");
  if (j.contains("output_dir")) c.output_dir = get<std::string>(j, "", "output_dir");
  if (j.contains("checkpoint")) c.checkpoint = get<std::string>(j, "", "checkpoint");
  read(j, "", "repeats", c.repeats);
  if (c.repeats < 1) fail("repeats", "must be at least 1");
  if (j.contains("sweep")) {
    const json& sj = j.at("sweep");
    require_object(sj, "sweep");
    reject_unknown(sj, "sweep", {"B", "seeds"});
    if (sj.contains("B")) {
      const json& b = sj.at("B");
      if (!b.is_array()) fail("sweep.B", "expected an array");
      c.sweep.branches.clear();
      for (std::size_t i = 0; i < b.size(); ++i)
        c.sweep.branches.push_back(read_branch_count(b[i], "sweep.B[" + std::to_string(i) + "]"));
    }
    if (sj.contains("seeds")) c.sweep.seeds = read_array<std::uint64_t>(sj.at("seeds"), "sweep.seeds");
    if (c.sweep.seeds.empty()) fail("sweep.seeds", "must not be empty");
  }
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    fail("", e.what());
  }
  return c;
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return experiment_config_from_json(j);
}

ExperimentConfig load_experiment_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_experiment_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
}

}  // namespace skipnet
