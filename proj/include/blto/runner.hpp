#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "blto/config.hpp"

namespace blto {

struct RunOptions {
  /// Recompute stages even when a complete output with the same hash exists.
  bool force = false;
  /// Progress lines (stage start/finish, per-epoch metrics).
  std::function<void(const std::string&)> log;
};

/// Train/test data of one experiment, with the attacker's reference split.
struct ExperimentData {
  LabeledImageSet train;
  LabeledImageSet test;
  ReferenceSplit split;
  std::optional<LabeledImageSet> extra;
};

ExperimentData load_experiment_data(const ExperimentConfig& cfg);

/// Stage orchestration. Each stage writes into a directory named after the
/// hash of the config sections it depends on, so later stages reuse earlier
/// outputs. Every stage directory holds a `stage.json` with the full hash;
/// a directory whose recorded hash differs is never reused or overwritten.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, RunOptions opts = {});

  const ExperimentConfig& config() const { return cfg_; }
  std::string run_id() const;

  std::string trigger_hash() const;
  std::string poison_hash() const;
  std::string victim_hash(size_t i) const;

  std::filesystem::path trigger_dir() const;
  std::filesystem::path poison_dir() const;
  std::filesystem::path victim_dir(size_t i) const;

  /// Runs BLTO (generator.ckpt, trace.jsonl, timing.jsonl, preview/).
  std::filesystem::path optimize_trigger();
  /// Writes the backdoored dataset export; runs the trigger stage if needed.
  std::filesystem::path poison();
  /// Trains every configured victim on the poisoned export (encoder.ckpt,
  /// metrics.jsonl, loss.jsonl, summary.json). Runs earlier stages if needed.
  std::vector<std::filesystem::path> pretrain();
  /// Re-scores a trained victim and writes eval.json next to it; optionally
  /// exports embeddings of the clean training set plus triggered test rows.
  nlohmann::json evaluate(size_t victim_index, const std::optional<std::filesystem::path>& embeddings = {});

 private:
  const ExperimentData& data();
  /// Test-time trigger of this config's attack arm.
  std::function<torch::Tensor(const torch::Tensor&)> trigger_fn();
  MonitorData monitor_data(const PoisonedSet& poisoned);
  void log(const std::string& line) const;

  ExperimentConfig cfg_;
  RunOptions opts_;
  std::optional<ExperimentData> data_;
};

/// Runs trigger, poison and pretrain for each ablation mode (attack forced to
/// blto) and writes `ablation.csv` (mode,method,BA,ASR) under the output dir.
std::filesystem::path run_ablation(const ExperimentConfig& cfg, const std::vector<AblationMode>& modes,
                                   const RunOptions& opts = {});

/// Reads a JSONL file into a list of objects.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& file);

}  // namespace blto
