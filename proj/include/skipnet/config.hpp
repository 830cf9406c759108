#pragma once

#include "skipnet/network.hpp"
#include "skipnet/train.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace skipnet {

/// Malformed config: bad JSON, unknown key, wrong type or invalid value.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SweepConfig {
  std::vector<int> branches{0, 4, 2, 1};  // 0 stands for "width"
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

/// Everything a CLI command may read from a config file.
struct ExperimentConfig {
  TrainConfig train;
  std::filesystem::path data_dir;
  std::filesystem::path output_dir = "out";
  std::filesystem::path checkpoint;
  int repeats = 1;
  SweepConfig sweep;
};

nlohmann::json to_json(const TransformSpec& t);
nlohmann::json to_json(const NetworkSpec& spec);
nlohmann::json to_json(const ExperimentConfig& config);

/// Strict readers: every key must be known and correctly typed. `where`
/// prefixes error messages (e.g. "network.transform").
TransformSpec transform_spec_from_json(const nlohmann::json& j, const std::string& where = "transform");
NetworkSpec network_spec_from_json(const nlohmann::json& j, const std::string& where = "network");
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::filesystem::path& file);

}  // namespace skipnet
