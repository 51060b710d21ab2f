#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "blto/dataset.hpp"
#include "blto/models.hpp"

namespace blto {

enum class AttackKind { kBlto, kPatch, kNone };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);

/// Which rows of a backdoored dataset carry the trigger.
struct PoisonManifest {
  std::vector<int64_t> poisoned_indices;
  int64_t target_class = 0;
  double epsilon = 0.0;
  double poisoning_rate = 0.0;
  AttackKind attack_kind = AttackKind::kNone;
};

/// clip(perturbed, original - eps, original + eps), then clip to [0, 1].
/// Differentiable w.r.t. `perturbed` inside the box.
torch::Tensor project_linf(const torch::Tensor& original, const torch::Tensor& perturbed, double epsilon);

/// Triggered images: project_linf(x, g(x), eps), evaluated in chunks.
torch::Tensor apply_trigger(const GeneratorParams& gen, const torch::Tensor& batch, double epsilon,
                            int64_t chunk = 256);

/// apply_trigger rounded to the 8-bit grid when `batch` lies on it; the
/// rounded result still satisfies the eps bound.
torch::Tensor apply_trigger_8bit(const GeneratorParams& gen, const torch::Tensor& batch, double epsilon);

/// |apply_trigger(x) - x|, the input-dependent trigger image.
torch::Tensor trigger_difference(const GeneratorParams& gen, const torch::Tensor& batch, double epsilon);

struct PoisonedSet {
  LabeledImageSet data;
  PoisonManifest manifest;
};

/// D ∪ project(g(x_r)) in original index order. Poisoned pixels are rounded
/// to the 8-bit grid so the set survives image export unchanged.
PoisonedSet poison_with_generator(const GeneratorParams& gen, const ReferenceSplit& split, double epsilon);

struct PatchSpec {
  int64_t size = 5;
  /// Distance of the patch from the lower-right corner.
  int64_t margin = 0;
};

/// Default patch for a given image side: 5x5 at 32 px, scaled linearly.
PatchSpec default_patch_for(int64_t image_size);

/// Checkerboard patch values [C, size, size] (top-left cell white).
torch::Tensor checkerboard(int64_t channels, int64_t size);

/// Pastes the patch onto every image of `batch` (lower-right corner).
torch::Tensor paste_patch(const torch::Tensor& batch, const PatchSpec& spec);

PoisonedSet poison_with_patch(const ReferenceSplit& split, const PatchSpec& spec);

/// The unmodified dataset reassembled from a split, attack kind "none".
PoisonedSet no_poison(const ReferenceSplit& split);

/// Writes images + manifest (index, label, filename, poisoned, attack_kind, eps, P).
void export_poisoned(const PoisonedSet& set, const std::filesystem::path& dir, const std::string& config_hash = "");

PoisonedSet import_poisoned(const std::filesystem::path& dir, std::string* config_hash = nullptr);

}  // namespace blto
