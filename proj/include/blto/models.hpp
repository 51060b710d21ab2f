#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace blto {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Backbone f, projector p and prediction head h. Module handles are shared;
/// use clone() for an independent copy.
struct EncoderStack {
  std::string arch_tag;
  int64_t embed_dim = 0;
  torch::nn::Sequential encoder{nullptr};
  torch::nn::Sequential projector{nullptr};
  torch::nn::Sequential predictor{nullptr};

  std::vector<torch::Tensor> encoder_parameters() const;
  std::vector<torch::Tensor> head_parameters() const;  // projector + predictor
  std::vector<torch::Tensor> parameters() const;       // encoder, projector, predictor

  /// Parameters and buffers of all three parts with stable dotted names.
  NamedTensors named_state() const;
  void load_named_state(const NamedTensors& state);

  std::string checksum() const;
  EncoderStack clone() const;
  void train(bool on = true);
  void to(torch::Dtype dtype);
};

const std::vector<std::string>& supported_archs();

/// Fresh stack with fan-in scaled initialization; deterministic in `seed`.
/// `tiny-conv` is four conv layers and a global pool (widths d/4, d/2, d, d);
/// `resnet18-style` is the CIFAR ResNet-18 with stage widths d/8..d.
EncoderStack init_encoder(const std::string& arch_tag, int64_t embed_dim, uint64_t seed);

/// Backbone features [B, d].
torch::Tensor encode(const EncoderStack& stack, const torch::Tensor& batch);

struct Projection {
  torch::Tensor z;  // detached projector output
  torch::Tensor p;  // predictor output, carries gradients
};

Projection project_and_predict(const EncoderStack& stack, const torch::Tensor& embeddings);

EncoderStack reinit_encoder(const EncoderStack& stack, uint64_t seed);

// ---------------------------------------------------------------------------

struct GeneratorConfig {
  int64_t base_channels = 32;
  int64_t residual_blocks = 4;
  /// Scale applied to the initial weights of the output 1x1 conv. Small
  /// values start the generator near the identity map.
  double output_init_scale = 0.1;
};

/// Encoder-decoder trigger generator: 7x7 stem, two stride-2 down convs,
/// residual blocks, two stride-2 transposed convs, 1x1 output conv. Instance
/// norm throughout. The output is clip(x + amplitude * tanh(residual), 0, 1):
/// every pixel moves by less than `amplitude` and gradients never vanish at
/// the budget boundary.
class TriggerGeneratorImpl : public torch::nn::Cloneable<TriggerGeneratorImpl> {
 public:
  explicit TriggerGeneratorImpl(GeneratorConfig cfg = {});
  void reset() override;
  torch::Tensor forward(const torch::Tensor& x, double amplitude);

  const GeneratorConfig& config() const { return cfg_; }

 private:
  GeneratorConfig cfg_;
  torch::nn::Sequential body_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(TriggerGenerator);

struct GeneratorParams {
  TriggerGenerator net{nullptr};
  double epsilon = 8.0 / 255.0;

  std::vector<torch::Tensor> parameters() const;
  NamedTensors named_state() const;
  void load_named_state(const NamedTensors& state);
  std::string checksum() const;
  GeneratorParams clone() const;
};

GeneratorParams init_generator(const GeneratorConfig& cfg, double epsilon, uint64_t seed);

/// Generator output in [0, 1] with amplitude `params.epsilon`, same shape as
/// `batch`. H and W must be divisible by 4.
torch::Tensor generate(const GeneratorParams& params, const torch::Tensor& batch);

// ---------------------------------------------------------------------------
// Checkpoints

void save_encoder(const EncoderStack& stack, const std::filesystem::path& file,
                  const nlohmann::json& meta = nlohmann::json::object());
EncoderStack load_encoder(const std::filesystem::path& file, nlohmann::json* meta = nullptr);

void save_generator(const GeneratorParams& gen, const std::filesystem::path& file,
                    const nlohmann::json& meta = nlohmann::json::object());
GeneratorParams load_generator(const std::filesystem::path& file, nlohmann::json* meta = nullptr);

}  // namespace blto
