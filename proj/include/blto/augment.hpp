#pragma once

#include <torch/torch.h>

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

namespace blto {

/// Per-channel normalization constants.
struct NormStats {
  std::vector<float> mean;
  std::vector<float> std;
};

NormStats cifar10_norm();
NormStats synthetic_norm();

enum class AugKind { kRandomResizedCrop, kHorizontalFlip, kColorJitter, kGrayscale, kGaussianBlur, kNormalize };

std::string to_string(AugKind kind);

/// One stochastic op. `params` meaning by kind:
///   crop:   {scale_lo, scale_hi, ratio_lo, ratio_hi}
///   jitter: {brightness, contrast, saturation, hue}
///   blur:   {kernel_size, sigma_lo, sigma_hi}
///   flip, grayscale, normalize: {}
struct AugOp {
  AugKind kind;
  double probability = 1.0;
  std::vector<double> params;
};

/// Ordered augmentation ops ending with Normalize.
struct AugmentationPipeline {
  std::vector<AugOp> ops;
  NormStats normalize;
  int64_t image_size = 32;

  void validate() const;
  const AugOp* find(AugKind kind) const;
  AugOp* find(AugKind kind);
  nlohmann::json to_json() const;
  static AugmentationPipeline from_json(const nlohmann::json& j);
};

/// Random-crop, flip, jitter, grayscale, blur(kernel = size/20*2+1), normalize.
AugmentationPipeline attacker_pipeline(int64_t image_size, NormStats norm = cifar10_norm());

/// Same as the attacker pipeline without the blur unless `include_blur`.
AugmentationPipeline victim_pipeline(int64_t image_size, bool include_blur = false,
                                     NormStats norm = cifar10_norm());

/// Random draws applied to one sample.
struct SampleDraw {
  int64_t top = 0, left = 0, height = 0, width = 0;
  bool flip = false;
  bool jitter = false;
  float brightness = 1.0f, contrast = 1.0f, saturation = 1.0f, hue = 0.0f;
  bool grayscale = false;
  bool blur = false;
  float sigma = 0.0f;
};

struct ViewPair {
  torch::Tensor view1;
  torch::Tensor view2;
  uint64_t seed = 0;
  std::vector<SampleDraw> draws1;
  std::vector<SampleDraw> draws2;
};

/// Draws per-sample parameters for `batch_size` images of `height` x `width`.
std::vector<SampleDraw> draw_params(const AugmentationPipeline& pipeline, int64_t batch_size,
                                    int64_t height, int64_t width, std::mt19937_64& rng);

/// Applies fixed draws. Differentiable w.r.t. `batch`.
torch::Tensor apply_draws(const AugmentationPipeline& pipeline, const torch::Tensor& batch,
                          const std::vector<SampleDraw>& draws);

/// One stochastic view of `batch`.
torch::Tensor augment(const AugmentationPipeline& pipeline, const torch::Tensor& batch,
                      std::mt19937_64& rng, std::vector<SampleDraw>* record = nullptr);

/// Two independent views; deterministic in (pipeline, batch, seed).
ViewPair sample_views(const AugmentationPipeline& pipeline, const torch::Tensor& batch, uint64_t seed);

torch::Tensor normalize(const torch::Tensor& batch, const NormStats& stats);
torch::Tensor denormalize(const torch::Tensor& batch, const NormStats& stats);

// Individual pixel maps, exposed for testing.
torch::Tensor rgb_to_grayscale(const torch::Tensor& batch);
torch::Tensor rgb_to_hsv(const torch::Tensor& batch);
torch::Tensor hsv_to_rgb(const torch::Tensor& batch);
torch::Tensor gaussian_kernel1d(int64_t kernel_size, double sigma, torch::Dtype dtype);

}  // namespace blto
