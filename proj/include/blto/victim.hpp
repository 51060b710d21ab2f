#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "blto/augment.hpp"
#include "blto/dataset.hpp"
#include "blto/evaluation.hpp"
#include "blto/models.hpp"
#include "blto/objectives.hpp"

namespace blto {

struct VictimConfig {
  ClObjectiveConfig method{ClMethod::kSimClr, 0.2, 0.99, false};
  std::string arch = "tiny-conv";
  int64_t embed_dim = 64;
  int64_t epochs = 100;
  int64_t batch_size = 64;
  double base_lr = 0.06;
  double final_lr = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  bool include_blur = false;
  double mix_ratio = 1.0;  // fraction of the training set taken from the primary data
  uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static VictimConfig from_json(const nlohmann::json& j);
};

struct VictimResult {
  EncoderStack stack;
  std::vector<MetricsRecord> records;
  std::vector<double> epoch_loss;
};

struct VictimHooks {
  /// Evaluated after every epoch (1-based); its record is appended.
  std::function<MetricsRecord(const EncoderStack&, int64_t epoch)> monitor;
  /// Called after each epoch with the mean training loss and the record (if any).
  std::function<void(int64_t epoch, double loss, const MetricsRecord* record)> on_epoch;
};

/// Trains an encoder with the configured CL method on `data` using the
/// victim augmentations. The dataset is the only input from the attacker.
VictimResult train_victim(const LabeledImageSet& data, const VictimConfig& cfg, const NormStats& norm,
                          const VictimHooks& hooks = {});

/// Subsets of `primary` and `extra`, concatenated in that order, such that
/// the primary share equals `ratio` and the output is as large as the inputs
/// allow. Rows are chosen uniformly (seeded) and keep their relative order.
/// Extra labels are offset by the primary class count.
LabeledImageSet mix_datasets(const LabeledImageSet& primary, const LabeledImageSet& extra, double ratio,
                             uint64_t seed);

}  // namespace blto
