#include "blto/victim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "blto/common.hpp"

namespace blto {

namespace {

constexpr uint64_t kStreamInit = 11;
constexpr uint64_t kStreamShuffle = 12;
constexpr uint64_t kStreamViews = 13;
constexpr uint64_t kStreamMixPrimary = 14;
constexpr uint64_t kStreamMixExtra = 15;

std::vector<int64_t> permutation(int64_t n, uint64_t seed) {
  std::vector<int64_t> p(n);
  for (int64_t i = 0; i < n; ++i) p[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// Sorted subset of `count` rows out of n.
torch::Tensor ordered_subset(int64_t n, int64_t count, uint64_t seed) {
  auto p = permutation(n, seed);
  p.resize(count);
  std::sort(p.begin(), p.end());
  return torch::tensor(p, torch::kInt64);
}

}  // namespace

void VictimConfig::validate() const {
  method.validate();
  if (embed_dim < 8) throw ArgumentError("victim embed_dim must be >= 8");
  if (epochs < 1) throw ArgumentError("victim epochs must be >= 1");
  if (batch_size < 2) throw ArgumentError("victim batch_size must be >= 2");
  if (!(base_lr > 0.0) || final_lr < 0.0) throw ArgumentError("victim learning rates must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ArgumentError("victim momentum must lie in [0, 1)");
  if (weight_decay < 0.0) throw ArgumentError("victim weight_decay must be >= 0");
  if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw ArgumentError("victim mix_ratio must lie in [0, 1]");
}

nlohmann::json VictimConfig::to_json() const {
  return {{"method", to_string(method.method)},
          {"temperature", method.temperature},
          {"ema_momentum", method.ema_momentum},
          {"simsiam_halved", method.simsiam_halved},
          {"arch", arch},
          {"embed_dim", embed_dim},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"base_lr", base_lr},
          {"final_lr", final_lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"include_blur", include_blur},
          {"mix_ratio", mix_ratio},
          {"seed", seed}};
}

VictimConfig VictimConfig::from_json(const nlohmann::json& j) {
  VictimConfig c;
  c.method.method = cl_method_from_string(j.value("method", to_string(c.method.method)));
  c.method.temperature = j.value("temperature", c.method.temperature);
  c.method.ema_momentum = j.value("ema_momentum", c.method.ema_momentum);
  c.method.simsiam_halved = j.value("simsiam_halved", c.method.simsiam_halved);
  c.arch = j.value("arch", c.arch);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.final_lr = j.value("final_lr", c.final_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.include_blur = j.value("include_blur", c.include_blur);
  c.mix_ratio = j.value("mix_ratio", c.mix_ratio);
  c.seed = j.value("seed", c.seed);
  return c;
}

VictimResult train_victim(const LabeledImageSet& data, const VictimConfig& cfg, const NormStats& norm,
                          const VictimHooks& hooks) {
  cfg.validate();
  data.validate();
  if (data.size() < 2) throw ArgumentError("train_victim: need at least 2 images");
  const auto pipeline = victim_pipeline(data.height(), cfg.include_blur, norm);

  ContrastiveLearner learner(init_encoder(cfg.arch, cfg.embed_dim, derive_seed(cfg.seed, kStreamInit)), cfg.method);
  torch::optim::SGD opt(learner.trainable_parameters(),
                        torch::optim::SGDOptions(cfg.base_lr).momentum(cfg.momentum).weight_decay(cfg.weight_decay));

  const int64_t n = data.size();
  const int64_t batch = std::min(cfg.batch_size, n);
  const int64_t per_epoch = n / batch;  // trailing partial batch dropped
  const int64_t total_steps = std::max<int64_t>(per_epoch * cfg.epochs, 1);

  VictimResult result;
  int64_t step = 0;
  for (int64_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    learner.stack().train(true);
    auto order = permutation(n, derive_seed(cfg.seed, kStreamShuffle, epoch));
    double total = 0.0;
    for (int64_t b = 0; b < per_epoch; ++b) {
      std::vector<int64_t> rows(order.begin() + b * batch, order.begin() + (b + 1) * batch);
      auto x = data.images.index_select(0, torch::tensor(rows, torch::kInt64));
      auto views = sample_views(pipeline, x, derive_seed(cfg.seed, kStreamViews, step));
      auto loss = learner.loss(views);
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        nlohmann::json rec{{"stage", "victim"}, {"epoch", epoch}, {"step", step}, {"loss", nullptr}};
        throw DivergenceError("victim CL loss is not finite at epoch " + std::to_string(epoch), rec.dump());
      }
      const double t = static_cast<double>(step) / static_cast<double>(total_steps);
      const double lr = cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
      for (auto& group : opt.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
      opt.zero_grad();
      loss.backward();
      opt.step();
      learner.after_step();
      total += value;
      ++step;
    }
    const double mean_loss = per_epoch > 0 ? total / static_cast<double>(per_epoch) : 0.0;
    result.epoch_loss.push_back(mean_loss);
    const MetricsRecord* rec = nullptr;
    if (hooks.monitor) {
      result.records.push_back(hooks.monitor(learner.stack(), epoch));
      rec = &result.records.back();
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch, mean_loss, rec);
  }
  learner.stack().train(false);
  result.stack = learner.stack();
  return result;
}

LabeledImageSet mix_datasets(const LabeledImageSet& primary, const LabeledImageSet& extra, double ratio,
                             uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ArgumentError("mix ratio must lie in [0, 1]");
  if (primary.size() == 0) throw ArgumentError("mix_datasets: primary set is empty");
  if (ratio < 1.0 && (extra.size() == 0 || extra.images.sizes().slice(1) != primary.images.sizes().slice(1))) {
    throw ArgumentError("mix_datasets: extra set is empty or has a different image shape");
  }
  // Largest total T with round(ratio*T) <= |primary| and T - round(ratio*T) <= |extra|.
  int64_t total = primary.size();
  if (ratio < 1.0) {
    const double by_extra = static_cast<double>(extra.size()) / (1.0 - ratio);
    const double by_primary = ratio > 0.0 ? static_cast<double>(primary.size()) / ratio : by_extra;
    total = static_cast<int64_t>(std::floor(std::min(by_primary, by_extra))) + 1;
    auto fits = [&](int64_t t) {
      const int64_t np = std::llround(ratio * static_cast<double>(t));
      return np <= primary.size() && t - np <= extra.size();
    };
    while (total > 0 && !fits(total)) --total;
  }
  const int64_t np = std::llround(ratio * static_cast<double>(total));
  const int64_t ne = total - np;

  auto pi = ordered_subset(primary.size(), np, derive_seed(seed, kStreamMixPrimary));
  LabeledImageSet out = primary.select(pi);
  if (ne > 0) {
    auto ei = ordered_subset(extra.size(), ne, derive_seed(seed, kStreamMixExtra));
    auto e = extra.select(ei);
    out.images = torch::cat({out.images, e.images}, 0);
    out.labels = torch::cat({out.labels, e.labels + primary.num_classes()}, 0);
    for (const auto& name : extra.class_names) out.class_names.push_back("extra:" + name);
  }
  return out;
}

}  // namespace blto
