#include "blto/poisoning.hpp"

#include <cmath>

#include "blto/common.hpp"

namespace blto {

using torch::indexing::Slice;

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::kBlto: return "blto";
    case AttackKind::kPatch: return "patch";
    case AttackKind::kNone: return "none";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "blto") return AttackKind::kBlto;
  if (s == "patch") return AttackKind::kPatch;
  if (s == "none") return AttackKind::kNone;
  throw ArgumentError("unknown attack kind '" + s + "' (expected blto, patch or none)");
}

torch::Tensor project_linf(const torch::Tensor& original, const torch::Tensor& perturbed, double epsilon) {
  if (!original.sizes().equals(perturbed.sizes())) throw ArgumentError("project_linf: shape mismatch");
  if (!(epsilon >= 0.0)) throw ArgumentError("project_linf: epsilon must be >= 0");
  auto lo = original - epsilon;
  auto hi = original + epsilon;
  return torch::min(torch::max(perturbed, lo), hi).clamp(0.0, 1.0);
}

torch::Tensor apply_trigger(const GeneratorParams& gen, const torch::Tensor& batch, double epsilon, int64_t chunk) {
  torch::NoGradGuard guard;
  gen.net.ptr()->eval();
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < batch.size(0); i += chunk) {
    auto x = batch.slice(0, i, std::min(i + chunk, batch.size(0)));
    out.push_back(project_linf(x, generate(gen, x), epsilon));
  }
  if (out.empty()) return batch.clone();
  return torch::cat(out, 0);
}

torch::Tensor trigger_difference(const GeneratorParams& gen, const torch::Tensor& batch, double epsilon) {
  return (apply_trigger(gen, batch, epsilon) - batch).abs();
}

namespace {

PoisonedSet assemble(const ReferenceSplit& split, const torch::Tensor& reference_images, AttackKind kind,
                     double epsilon) {
  const int64_t n = split.total_size();
  const auto& pool = split.clean_pool;
  LabeledImageSet out;
  auto first = pool.size() > 0 ? pool : split.reference_set;
  out.images = torch::empty({n, first.channels(), first.height(), first.width()}, torch::kFloat32);
  out.labels = torch::empty({n}, torch::kInt64);
  out.class_names = first.class_names;
  out.split = first.split;
  if (pool.size() > 0) {
    out.images.index_copy_(0, split.clean_indices, pool.images);
    out.labels.index_copy_(0, split.clean_indices, pool.labels);
  }
  if (split.reference_set.size() > 0) {
    out.images.index_copy_(0, split.reference_indices, reference_images);
    out.labels.index_copy_(0, split.reference_indices, split.reference_set.labels);
  }
  PoisonedSet ps;
  ps.data = std::move(out);
  ps.manifest.target_class = split.target_class;
  ps.manifest.epsilon = epsilon;
  ps.manifest.poisoning_rate = n > 0 ? static_cast<double>(split.reference_set.size()) / static_cast<double>(n) : 0.0;
  ps.manifest.attack_kind = kind;
  if (kind != AttackKind::kNone) {
    auto idx = split.reference_indices.contiguous();
    ps.manifest.poisoned_indices.assign(idx.data_ptr<int64_t>(), idx.data_ptr<int64_t>() + idx.numel());
  }
  return ps;
}

}  // namespace

torch::Tensor apply_trigger_8bit(const GeneratorParams& gen, const torch::Tensor& batch, double epsilon) {
  auto triggered = apply_trigger(gen, batch, epsilon);
  auto orig_levels = batch.mul(255.0f).round();
  if (!orig_levels.div(255.0f).equal(batch)) return triggered;
  // Clamp in integer levels so the result is exactly representable after
  // image export.
  const double budget = std::floor(epsilon * 255.0 + 1e-6);
  auto levels = triggered.mul(255.0f).round();
  levels = torch::min(torch::max(levels, orig_levels - budget), orig_levels + budget).clamp(0.0, 255.0);
  return levels.div(255.0f);
}

PoisonedSet poison_with_generator(const GeneratorParams& gen, const ReferenceSplit& split, double epsilon) {
  torch::Tensor refs = split.reference_set.images;
  if (split.reference_set.size() > 0) refs = apply_trigger_8bit(gen, refs, epsilon);
  return assemble(split, refs, AttackKind::kBlto, epsilon);
}

PatchSpec default_patch_for(int64_t image_size) {
  PatchSpec s;
  s.size = std::max<int64_t>(1, static_cast<int64_t>(std::lround(5.0 * static_cast<double>(image_size) / 32.0)));
  return s;
}

torch::Tensor checkerboard(int64_t channels, int64_t size) {
  auto idx = torch::arange(size, torch::kInt64);
  auto board = ((idx.view({-1, 1}) + idx.view({1, -1})) % 2 == 0).to(torch::kFloat32);
  return board.unsqueeze(0).expand({channels, size, size}).contiguous();
}

torch::Tensor paste_patch(const torch::Tensor& batch, const PatchSpec& spec) {
  if (spec.size < 0 || spec.margin < 0) throw ArgumentError("patch size and margin must be >= 0");
  const int64_t h = batch.size(2), w = batch.size(3);
  if (spec.size + spec.margin > h || spec.size + spec.margin > w) {
    throw ArgumentError("patch of size " + std::to_string(spec.size) + " does not fit a " + std::to_string(h) + "x" +
                        std::to_string(w) + " image");
  }
  auto out = batch.clone();
  if (spec.size == 0 || batch.size(0) == 0) return out;
  const int64_t y0 = h - spec.margin - spec.size, x0 = w - spec.margin - spec.size;
  out.index_put_({Slice(), Slice(), Slice(y0, y0 + spec.size), Slice(x0, x0 + spec.size)},
                 checkerboard(batch.size(1), spec.size).to(batch.dtype()).unsqueeze(0));
  return out;
}

PoisonedSet poison_with_patch(const ReferenceSplit& split, const PatchSpec& spec) {
  return assemble(split, paste_patch(split.reference_set.images, spec), AttackKind::kPatch, 0.0);
}

PoisonedSet no_poison(const ReferenceSplit& split) {
  return assemble(split, split.reference_set.images, AttackKind::kNone, 0.0);
}

void export_poisoned(const PoisonedSet& set, const std::filesystem::path& dir, const std::string& config_hash) {
  ImageDirHeader h;
  h.class_names = set.data.class_names;
  h.split = set.data.split;
  h.attack_kind = to_string(set.manifest.attack_kind);
  h.epsilon = set.manifest.epsilon;
  h.poisoning_rate = set.manifest.poisoning_rate;
  h.target_class = set.manifest.target_class;
  h.config_hash = config_hash;
  std::vector<bool> flags(set.data.size(), false);
  for (auto i : set.manifest.poisoned_indices) flags[i] = true;
  export_image_dir(set.data, dir, h, flags);
}

PoisonedSet import_poisoned(const std::filesystem::path& dir, std::string* config_hash) {
  auto d = import_image_dir(dir);
  if (d.header.attack_kind.empty() && !d.rows.empty()) {
    throw IngestionError((dir / "manifest.tsv").string(), "manifest has no poisoning columns");
  }
  PoisonedSet ps;
  ps.data = std::move(d.data);
  ps.manifest.target_class = d.header.target_class;
  ps.manifest.epsilon = d.header.epsilon;
  ps.manifest.poisoning_rate = d.header.poisoning_rate;
  ps.manifest.attack_kind = d.header.attack_kind.empty() ? AttackKind::kNone : attack_kind_from_string(d.header.attack_kind);
  for (const auto& r : d.rows) {
    if (r.poisoned) ps.manifest.poisoned_indices.push_back(r.index);
  }
  if (config_hash != nullptr) *config_hash = d.header.config_hash;
  return ps;
}

}  // namespace blto
