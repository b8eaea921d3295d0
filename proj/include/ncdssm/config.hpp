#pragma once

#include "ncdssm/data.hpp"
#include "ncdssm/model.hpp"

#include <json.hpp>

#include <string>

namespace ncdssm::config {

using Json = nlohmann::ordered_json;

struct SplitSpec {
  std::string name;
  int count = 0;
};

struct DataConfig {
  std::string manifest;          // path to a dataset manifest
  std::string split = "train";
  double context_seconds = 5.0;
  double horizon_seconds = 10.0;
};

/// One JSON document configures everything; defaults are filled in and the
/// resolved copy is echoed into the output directory.
struct RunConfig {
  model::ModelConfig model;
  model::TrainConfig train;
  data::GeneratorConfig generator;
  std::vector<SplitSpec> splits;  // generate: sequences per split
  DataConfig data;
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";
};

/// Parses and validates; error messages name the offending key.
RunConfig parse_run_config(const Json& j);
RunConfig load_run_config(const std::string& path);

/// The fully-resolved document (defaults included).
Json to_json(const RunConfig& cfg);

/// Model-config snapshot for checkpoints.
Json model_config_to_json(const model::ModelConfig& cfg);
model::ModelConfig model_config_from_json(const Json& j);

}  // namespace ncdssm::config
