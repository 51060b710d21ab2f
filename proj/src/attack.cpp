#include "blto/attack.hpp"

#include <chrono>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include "blto/common.hpp"
#include "blto/poisoning.hpp"

namespace blto {

namespace {

// RNG stream tags
constexpr uint64_t kStreamGenerator = 1;
constexpr uint64_t kStreamSurrogate = 2;
constexpr uint64_t kStreamInnerBatch = 3;
constexpr uint64_t kStreamInnerViews = 4;
constexpr uint64_t kStreamOuterClean = 5;
constexpr uint64_t kStreamOuterRef = 6;
constexpr uint64_t kStreamOuterViews = 7;

nlohmann::json objective_to_json(const ClObjectiveConfig& c) {
  return {{"method", to_string(c.method)},
          {"temperature", c.temperature},
          {"ema_momentum", c.ema_momentum},
          {"simsiam_halved", c.simsiam_halved}};
}

ClObjectiveConfig objective_from_json(const nlohmann::json& j) {
  ClObjectiveConfig c;
  c.method = cl_method_from_string(j.value("method", std::string("simsiam")));
  c.temperature = j.value("temperature", c.temperature);
  c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
  c.simsiam_halved = j.value("simsiam_halved", c.simsiam_halved);
  return c;
}

}  // namespace

void BltoConfig::validate() const {
  if (iterations < 0 || inner_steps < 0 || outer_steps < 0) throw ArgumentError("N, K, J must be >= 0");
  if (!(inner_lr > 0.0) || !(outer_lr > 0.0)) throw ArgumentError("learning rates must be > 0");
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ArgumentError("epsilon must lie in (0, 1]");
  if (reinit_every < 0) throw ArgumentError("reinit_every must be >= 0");
  if (batch_size < 2) throw ArgumentError("batch_size must be >= 2");
  inner_method.validate();
}

nlohmann::json BltoConfig::to_json() const {
  return {{"N", iterations},
          {"K", inner_steps},
          {"J", outer_steps},
          {"inner_lr", inner_lr},
          {"inner_momentum", inner_momentum},
          {"inner_weight_decay", inner_weight_decay},
          {"outer_lr", outer_lr},
          {"reinit_every", reinit_every},
          {"inner_method", objective_to_json(inner_method)},
          {"batch_size", batch_size},
          {"epsilon", epsilon},
          {"seed", seed},
          {"surrogate_arch", surrogate_arch},
          {"embed_dim", embed_dim},
          {"generator",
           {{"base_channels", generator.base_channels},
            {"residual_blocks", generator.residual_blocks},
            {"output_init_scale", generator.output_init_scale}}},
          {"norm", {{"mean", norm.mean}, {"std", norm.std}}}};
}

BltoConfig BltoConfig::from_json(const nlohmann::json& j) {
  BltoConfig c;
  c.iterations = j.value("N", c.iterations);
  c.inner_steps = j.value("K", c.inner_steps);
  c.outer_steps = j.value("J", c.outer_steps);
  c.inner_lr = j.value("inner_lr", c.inner_lr);
  c.inner_momentum = j.value("inner_momentum", c.inner_momentum);
  c.inner_weight_decay = j.value("inner_weight_decay", c.inner_weight_decay);
  c.outer_lr = j.value("outer_lr", c.outer_lr);
  c.reinit_every = j.value("reinit_every", c.reinit_every);
  if (j.contains("inner_method")) c.inner_method = objective_from_json(j.at("inner_method"));
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.seed = j.value("seed", c.seed);
  c.surrogate_arch = j.value("surrogate_arch", c.surrogate_arch);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  if (j.contains("generator")) {
    const auto& g = j.at("generator");
    c.generator.base_channels = g.value("base_channels", c.generator.base_channels);
    c.generator.residual_blocks = g.value("residual_blocks", c.generator.residual_blocks);
    c.generator.output_init_scale = g.value("output_init_scale", c.generator.output_init_scale);
  }
  if (j.contains("norm")) {
    c.norm.mean = j.at("norm").at("mean").get<std::vector<float>>();
    c.norm.std = j.at("norm").at("std").get<std::vector<float>>();
  }
  return c;
}

std::string to_string(AblationMode m) {
  switch (m) {
    case AblationMode::kFull: return "full";
    case AblationMode::kNoInner: return "no_inner";
    case AblationMode::kNoOuter: return "no_outer";
  }
  return "?";
}

AblationMode ablation_mode_from_string(const std::string& s) {
  if (s == "full") return AblationMode::kFull;
  if (s == "no_inner") return AblationMode::kNoInner;
  if (s == "no_outer") return AblationMode::kNoOuter;
  throw ArgumentError("unknown ablation mode '" + s + "' (expected full, no_inner or no_outer)");
}

BltoConfig ablation_mode(BltoConfig cfg, AblationMode mode) {
  if (mode == AblationMode::kNoInner) cfg.inner_steps = 0;
  if (mode == AblationMode::kNoOuter) cfg.outer_steps = 0;
  return cfg;
}

nlohmann::json BltoIterationRecord::to_json() const {
  nlohmann::json j;
  j["iteration"] = iteration;
  j["inner_loss"] = inner_loss ? nlohmann::json(*inner_loss) : nlohmann::json(nullptr);
  j["outer_similarity"] = outer_similarity ? nlohmann::json(*outer_similarity) : nlohmann::json(nullptr);
  j["reinitialized"] = reinitialized;
  return j;
}

// ---------------------------------------------------------------------------

torch::Tensor sample_indices(int64_t n, int64_t count, uint64_t seed) {
  count = std::min(count, n);
  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (int64_t i = 0; i < count; ++i) {
    const int64_t j = std::uniform_int_distribution<int64_t>(i, n - 1)(rng);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return torch::tensor(idx, torch::kInt64);
}

torch::Tensor sample_indices_with_replacement(int64_t n, int64_t count, uint64_t seed) {
  if (count <= n) return sample_indices(n, count, seed);
  std::mt19937_64 rng(seed);
  std::vector<int64_t> idx(count);
  for (auto& i : idx) i = std::uniform_int_distribution<int64_t>(0, n - 1)(rng);
  return torch::tensor(idx, torch::kInt64);
}

int64_t effective_batch(int64_t batch_size, int64_t dataset_size) { return std::min(batch_size, dataset_size); }

SurrogateTrainer::SurrogateTrainer(EncoderStack stack, const BltoConfig& cfg, int64_t lifetime_steps)
    : learner_(std::move(stack), cfg.inner_method),
      opt_(learner_.trainable_parameters(),
           torch::optim::SGDOptions(cfg.inner_lr).momentum(cfg.inner_momentum).weight_decay(cfg.inner_weight_decay)),
      base_lr_(cfg.inner_lr),
      lifetime_steps_(std::max<int64_t>(lifetime_steps, 1)) {}

double SurrogateTrainer::current_lr() const {
  const double t = std::min(1.0, static_cast<double>(step_) / static_cast<double>(lifetime_steps_));
  return base_lr_ * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

double SurrogateTrainer::step(const torch::Tensor& batch, const AugmentationPipeline& pipeline, uint64_t seed) {
  learner_.stack().train(true);
  auto views = sample_views(pipeline, batch, seed);
  auto loss = learner_.loss(views);
  const double value = loss.item<double>();
  if (!std::isfinite(value)) {
    throw DivergenceError("surrogate CL loss is not finite",
                          nlohmann::json{{"stage", "inner"}, {"step", step_}, {"loss", nullptr}}.dump());
  }
  opt_.zero_grad();
  loss.backward();
  for (auto& group : opt_.param_groups()) {
    static_cast<torch::optim::SGDOptions&>(group.options()).lr(current_lr());
  }
  opt_.step();
  learner_.after_step();
  ++step_;
  return value;
}

GeneratorTrainer::GeneratorTrainer(GeneratorParams gen, const BltoConfig& cfg)
    : gen_(std::move(gen)), epsilon_(cfg.epsilon), opt_(gen_.parameters(), torch::optim::AdamOptions(cfg.outer_lr)) {}

torch::Tensor GeneratorTrainer::similarity(const EncoderStack& surrogate, const torch::Tensor& clean_batch,
                                           const torch::Tensor& reference_batch, const AugmentationPipeline& pipeline,
                                           uint64_t seed) const {
  std::mt19937_64 rng(seed);
  auto triggered = project_linf(clean_batch, generate(gen_, clean_batch), epsilon_);
  auto v1 = augment(pipeline, triggered, rng);
  auto v2 = augment(pipeline, reference_batch, rng);
  return blto::cosine_similarity(encode(surrogate, v1), encode(surrogate, v2)).mean();
}

double GeneratorTrainer::step(const EncoderStack& surrogate, const torch::Tensor& clean_batch,
                              const torch::Tensor& reference_batch, const AugmentationPipeline& pipeline,
                              uint64_t seed) {
  const bool was_training = surrogate.encoder->is_training();
  surrogate.encoder.ptr()->eval();
  auto s = similarity(surrogate, clean_batch, reference_batch, pipeline, seed);
  const double value = s.item<double>();
  if (!std::isfinite(value)) {
    surrogate.encoder.ptr()->train(was_training);
    throw DivergenceError("outer similarity is not finite",
                          nlohmann::json{{"stage", "outer"}, {"similarity", nullptr}}.dump());
  }
  auto params = gen_.parameters();
  auto grads = torch::autograd::grad({-s}, params);
  surrogate.encoder.ptr()->train(was_training);
  for (size_t i = 0; i < params.size(); ++i) params[i].mutable_grad() = grads[i];
  opt_.step();
  return value;
}

BltoResult run_blto(const ReferenceSplit& data, const BltoConfig& cfg, const BltoHooks& hooks) {
  cfg.validate();
  const auto& clean = data.clean_pool;
  const auto& refs = data.reference_set;
  if (clean.size() < 2) throw ArgumentError("run_blto: clean pool needs at least 2 images");
  if (cfg.outer_steps > 0 && refs.size() == 0) throw ArgumentError("run_blto: outer steps need reference data");
  const int64_t image_size = clean.height();
  const auto pipeline = attacker_pipeline(image_size, cfg.norm);

  BltoResult result{init_generator(cfg.generator, cfg.epsilon, derive_seed(cfg.seed, kStreamGenerator)),
                    EncoderStack{}, BltoTrace{}, ""};
  result.initial_generator_checksum = result.generator.checksum();
  GeneratorTrainer outer(result.generator, cfg);

  const int64_t lifetime = (cfg.reinit_every > 0 ? cfg.reinit_every : std::max<int64_t>(cfg.iterations, 1)) *
                           std::max<int64_t>(cfg.inner_steps, 1);
  auto make_surrogate = [&](int64_t generation) {
    return std::make_unique<SurrogateTrainer>(
        init_encoder(cfg.surrogate_arch, cfg.embed_dim, derive_seed(cfg.seed, kStreamSurrogate, generation)), cfg,
        lifetime);
  };
  auto inner = make_surrogate(0);
  auto& trace = result.trace;

  for (int64_t it = 0; it < cfg.iterations; ++it) {
    const auto t0 = std::chrono::steady_clock::now();
    BltoIterationRecord rec;
    rec.iteration = it;
    if (it > 0 && cfg.reinit_every > 0 && it % cfg.reinit_every == 0) {
      inner = make_surrogate(++trace.reinit_count);
      rec.reinitialized = true;
    }

    if (cfg.inner_steps > 0) {
      // D_b = D ∪ g(x_r) under the current generator.
      torch::Tensor backdoored = clean.images;
      if (refs.size() > 0) {
        backdoored = torch::cat({clean.images, apply_trigger(outer.generator(), refs.images, cfg.epsilon)}, 0);
      }
      const int64_t n = backdoored.size(0);
      double total = 0.0;
      for (int64_t k = 0; k < cfg.inner_steps; ++k) {
        const uint64_t step_id = static_cast<uint64_t>(it * cfg.inner_steps + k);
        auto idx = sample_indices(n, effective_batch(cfg.batch_size, n), derive_seed(cfg.seed, kStreamInnerBatch, step_id));
        total += inner->step(backdoored.index_select(0, idx), pipeline,
                             derive_seed(cfg.seed, kStreamInnerViews, step_id));
        ++trace.inner_updates;
        if (hooks.on_update) hooks.on_update(true, outer.generator(), inner->stack());
      }
      rec.inner_loss = total / static_cast<double>(cfg.inner_steps);
    }

    if (cfg.outer_steps > 0) {
      const int64_t count = effective_batch(cfg.batch_size, clean.size());
      double total = 0.0;
      for (int64_t j = 0; j < cfg.outer_steps; ++j) {
        const uint64_t step_id = static_cast<uint64_t>(it * cfg.outer_steps + j);
        auto ci = sample_indices(clean.size(), count, derive_seed(cfg.seed, kStreamOuterClean, step_id));
        auto ri = sample_indices_with_replacement(refs.size(), count, derive_seed(cfg.seed, kStreamOuterRef, step_id));
        total += outer.step(inner->stack(), clean.images.index_select(0, ci), refs.images.index_select(0, ri),
                            pipeline, derive_seed(cfg.seed, kStreamOuterViews, step_id));
        ++trace.outer_updates;
        if (hooks.on_update) hooks.on_update(false, outer.generator(), inner->stack());
      }
      rec.outer_similarity = total / static_cast<double>(cfg.outer_steps);
    }

    rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    trace.records.push_back(rec);
    if (hooks.on_iteration) hooks.on_iteration(rec);
  }
  result.generator = outer.generator();
  result.surrogate = inner->stack();
  return result;
}

}  // namespace blto
