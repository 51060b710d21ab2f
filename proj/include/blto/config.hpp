#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "blto/attack.hpp"
#include "blto/common.hpp"
#include "blto/evaluation.hpp"
#include "blto/poisoning.hpp"
#include "blto/victim.hpp"

namespace blto {

/// Environment variable consulted for the CIFAR-10 root when the config
/// leaves `dataset.root` empty.
inline constexpr const char* kDataRootEnv = "BLTO_DATA_ROOT";

struct DatasetSpec {
  std::string kind = "synthetic";  // synthetic | cifar10
  std::string root;                // cifar10 only
  int64_t num_classes = 4;
  int64_t per_class = 200;
  int64_t test_per_class = 50;
  int64_t image_size = 16;
  uint64_t seed = 7;

  nlohmann::json to_json() const;
};

struct AttackSpec {
  AttackKind kind = AttackKind::kBlto;
  int64_t target_class = 1;
  double poisoning_rate = 0.05;
  double epsilon = 8.0 / 255.0;
  AblationMode mode = AblationMode::kFull;
  BltoConfig blto;  // epsilon, seed and normalization are filled from the enclosing config
  PatchSpec patch{-1, 0};  // size < 0 selects the size-scaled default
  /// Trigger used to score the "none" arm: "blto" (the generator this config
  /// would train) or "identity".
  std::string none_trigger = "blto";

  nlohmann::json to_json() const;
};

struct EvaluationSpec {
  KnnConfig knn;
  int64_t centroid_cap = 512;
  int64_t triggered_train_count = 256;
  uint64_t view_seed = 0;

  nlohmann::json to_json() const;
};

struct ExperimentConfig {
  uint64_t seed = 0;
  std::filesystem::path output_dir = "runs";
  int64_t threads = 1;
  int64_t parallelism = 1;
  DatasetSpec dataset;
  std::optional<DatasetSpec> extra;  // second source for mixed-data victims
  AttackSpec attack;
  std::vector<VictimConfig> victims{VictimConfig{}};
  EvaluationSpec evaluation;

  /// Canonical form with every default filled in; keys sorted.
  nlohmann::json to_json() const;
  /// SHA-1 of the canonical dump.
  std::string hash() const;

  /// Normalization statistics for the primary dataset.
  NormStats norm() const;
  /// Attack hyperparameters with epsilon, seed and normalization resolved.
  BltoConfig blto() const;
  /// Patch actually pasted (default scaled to the image size).
  PatchSpec patch() const;
  /// CIFAR-10 root: `dataset.root` or the environment variable.
  std::filesystem::path data_root() const;

  /// Checks value ranges and cross-field constraints; throws ConfigError
  /// naming the offending dotted field.
  void validate() const;
};

/// Parses a config document. Unknown keys and type mismatches raise
/// ConfigError with the dotted field path.
ExperimentConfig parse_config(const nlohmann::json& doc);

/// Sets `key.path=value` in `doc`. The value is parsed as JSON when possible
/// and taken as a string otherwise; intermediate objects are created.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Reads a JSON config file, applies overrides in order, parses and validates.
ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides = {});

/// Hex SHA-1 of the canonical dump of `value`.
std::string json_hash(const nlohmann::json& value);

}  // namespace blto
