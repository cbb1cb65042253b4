#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "ddvae/data.hpp"
#include "ddvae/seqmodel.hpp"
#include "ddvae/trainer.hpp"

namespace ddvae {

enum class DatasetKind { Synthetic, Mnist };

struct DatasetConfig {
  DatasetKind kind = DatasetKind::Synthetic;
  SyntheticSpec synthetic;
  std::filesystem::path mnist_dir = "data/mnist";  // relative paths resolve against the config file
  double threshold = 0.3;
  std::size_t train_limit = 10000;
  std::size_t test_limit = 2000;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  ModelSpec model;
  TrainConfig train;
  std::filesystem::path output_dir = "runs/experiment";
};

/// Parses one JSON document. Unknown keys, wrong types and invalid values
/// raise ConfigError naming the offending key; malformed JSON raises
/// ConfigError with the parse location. `base_dir` anchors relative paths.
ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully resolved JSON form (every field present).
std::string to_json(const ExperimentConfig& cfg);

/// Overrides the training seed and the initialization seed together.
void apply_seed(ExperimentConfig& cfg, std::uint64_t seed);

struct LoadedData {
  Dataset train;
  std::optional<Dataset> test;
};

LoadedData load_data(const DatasetConfig& cfg);

}  // namespace ddvae
