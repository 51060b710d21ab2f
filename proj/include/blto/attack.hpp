#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "blto/augment.hpp"
#include "blto/dataset.hpp"
#include "blto/models.hpp"
#include "blto/objectives.hpp"

namespace blto {

/// Hyperparameters of the bi-level trigger optimization.
struct BltoConfig {
  int64_t iterations = 200;  // N
  int64_t inner_steps = 5;   // K
  int64_t outer_steps = 5;   // J
  double inner_lr = 0.03;    // base rate of the cosine schedule
  double inner_momentum = 0.9;
  double inner_weight_decay = 5e-4;
  double outer_lr = 1e-3;
  int64_t reinit_every = 20;  // 0 disables re-initialization
  ClObjectiveConfig inner_method;
  int64_t batch_size = 64;
  double epsilon = 8.0 / 255.0;
  uint64_t seed = 0;
  std::string surrogate_arch = "tiny-conv";
  int64_t embed_dim = 64;
  GeneratorConfig generator;
  NormStats norm = synthetic_norm();

  void validate() const;
  nlohmann::json to_json() const;
  static BltoConfig from_json(const nlohmann::json& j);
};

enum class AblationMode { kFull, kNoInner, kNoOuter };

std::string to_string(AblationMode m);
AblationMode ablation_mode_from_string(const std::string& s);

/// no_inner: K = 0 (outer only, frozen random surrogate);
/// no_outer: J = 0 (unoptimized generator).
BltoConfig ablation_mode(BltoConfig cfg, AblationMode mode);

struct BltoIterationRecord {
  int64_t iteration = 0;
  std::optional<double> inner_loss;        // mean over the K inner steps
  std::optional<double> outer_similarity;  // mean over the J outer steps
  bool reinitialized = false;
  double wall_clock_s = 0.0;

  /// Deterministic fields only (no wall clock).
  nlohmann::json to_json() const;
};

struct BltoTrace {
  std::vector<BltoIterationRecord> records;
  int64_t inner_updates = 0;
  int64_t outer_updates = 0;
  int64_t reinit_count = 0;
};

/// Surrogate CL trainer: momentum SGD with a cosine schedule that restarts at
/// every re-initialization.
class SurrogateTrainer {
 public:
  SurrogateTrainer(EncoderStack stack, const BltoConfig& cfg, int64_t lifetime_steps);

  /// One update on `batch` (raw images in [0, 1]); returns the CL loss.
  /// The stack is left in train mode.
  double step(const torch::Tensor& batch, const AugmentationPipeline& pipeline, uint64_t seed);

  double current_lr() const;
  EncoderStack& stack() { return learner_.stack(); }
  const EncoderStack& stack() const { return learner_.stack(); }
  int64_t steps_taken() const { return step_; }

 private:
  ContrastiveLearner learner_;
  torch::optim::SGD opt_;
  double base_lr_;
  int64_t lifetime_steps_;
  int64_t step_ = 0;
};

/// Outer-loop optimizer over the generator parameters only.
class GeneratorTrainer {
 public:
  GeneratorTrainer(GeneratorParams gen, const BltoConfig& cfg);

  /// Mean cosine S(f(t1(proj(g(x)))), f(t2(x_r))) under the frozen surrogate.
  torch::Tensor similarity(const EncoderStack& surrogate, const torch::Tensor& clean_batch,
                           const torch::Tensor& reference_batch, const AugmentationPipeline& pipeline,
                           uint64_t seed) const;

  /// One ascent step on the similarity; returns its value before the step.
  /// The surrogate is evaluated in eval mode and its parameters, buffers and
  /// gradients are not modified.
  double step(const EncoderStack& surrogate, const torch::Tensor& clean_batch, const torch::Tensor& reference_batch,
              const AugmentationPipeline& pipeline, uint64_t seed);

  GeneratorParams& generator() { return gen_; }
  const GeneratorParams& generator() const { return gen_; }

 private:
  GeneratorParams gen_;
  double epsilon_;
  torch::optim::Adam opt_;
};

struct BltoResult {
  GeneratorParams generator;
  EncoderStack surrogate;  // surrogate state after the last iteration
  BltoTrace trace;
  std::string initial_generator_checksum;
};

struct BltoHooks {
  /// Called after every iteration with the record just appended.
  std::function<void(const BltoIterationRecord&)> on_iteration;
  /// Observes inner (is_inner = true) and outer updates: checksums of the
  /// generator and the surrogate right after the update.
  std::function<void(bool is_inner, const GeneratorParams&, const EncoderStack&)> on_update;
};

/// Number of images the inner loop draws per step: min(batch_size, |D_b|).
int64_t effective_batch(int64_t batch_size, int64_t dataset_size);

/// Runs N iterations of {rebuild D_b from current g; K inner steps; J outer
/// steps}, re-initializing the surrogate every `reinit_every` iterations.
BltoResult run_blto(const ReferenceSplit& data, const BltoConfig& cfg, const BltoHooks& hooks = {});

/// Uniform sample of `count` distinct indices from [0, n) (all of them when
/// count >= n), deterministic in `seed`.
torch::Tensor sample_indices(int64_t n, int64_t count, uint64_t seed);

/// `count` indices from [0, n), with replacement once count exceeds n.
torch::Tensor sample_indices_with_replacement(int64_t n, int64_t count, uint64_t seed);

}  // namespace blto
