#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace blto {

enum class Split { kTrain, kTest };

std::string to_string(Split split);
Split split_from_string(const std::string& s);

/// Images as float32 [N, C, H, W] in [0, 1] with int64 labels in
/// [0, class_names.size()).
struct LabeledImageSet {
  torch::Tensor images;
  torch::Tensor labels;
  std::vector<std::string> class_names;
  Split split = Split::kTrain;

  int64_t size() const { return labels.defined() ? labels.size(0) : 0; }
  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
  int64_t channels() const { return images.size(1); }
  int64_t height() const { return images.size(2); }
  int64_t width() const { return images.size(3); }

  /// Rows at `indices` (int64 tensor), in the given order.
  LabeledImageSet select(const torch::Tensor& indices) const;

  /// Throws ArgumentError when shapes, ranges, or labels are inconsistent.
  void validate() const;
};

/// Clean pool D and single-class reference set x_r, both carrying their
/// source indices into the dataset they were split from.
struct ReferenceSplit {
  LabeledImageSet clean_pool;
  LabeledImageSet reference_set;
  torch::Tensor clean_indices;
  torch::Tensor reference_indices;
  int64_t target_class = 0;
  std::string target_name;

  int64_t total_size() const { return clean_pool.size() + reference_set.size(); }
};

/// Reads the CIFAR-10 binary batches (data_batch_1..5.bin or test_batch.bin)
/// from `root` or `root/cifar-10-batches-bin`.
LabeledImageSet load_cifar10(const std::filesystem::path& root, Split split);

/// Class names in canonical CIFAR-10 order.
const std::vector<std::string>& cifar10_class_names();

/// Deterministic synthetic set: each class has its own shape, foreground hue
/// and stripe frequency. Background colour, stripe orientation, position,
/// size and brightness vary per sample, and pixels receive noise. Pixel
/// values lie on the 8-bit grid.
LabeledImageSet make_synthetic_set(int64_t num_classes, int64_t per_class, int64_t image_size,
                                   uint64_t seed, Split split = Split::kTrain);

/// Moves the first `reference_count` images of `target_class` (by ascending
/// index) into the reference set.
ReferenceSplit split_reference(const LabeledImageSet& data, int64_t target_class,
                               int64_t reference_count);

/// round(rate * dataset_size).
int64_t reference_count_for_rate(double rate, int64_t dataset_size);

/// Rounds every pixel to the nearest multiple of 1/255.
torch::Tensor quantize_8bit(const torch::Tensor& images);

// ---------------------------------------------------------------------------
// Image-directory export. Images are binary PPM (P6, 3 channels) or PGM
// (P5, 1 channel); `manifest.tsv` lists one row per image.

/// One manifest row. `poisoned` and `attack_kind` are only emitted when the
/// manifest carries poisoning columns.
struct ManifestRow {
  int64_t index = 0;
  int64_t label = 0;
  std::string filename;
  bool poisoned = false;
};

struct ImageDirHeader {
  std::vector<std::string> class_names;
  Split split = Split::kTrain;
  // Poisoning metadata; `attack_kind` empty for plain exports.
  std::string attack_kind;
  double epsilon = 0.0;
  double poisoning_rate = 0.0;
  int64_t target_class = -1;
  std::string config_hash;
};

void export_image_dir(const LabeledImageSet& data, const std::filesystem::path& dir,
                      const ImageDirHeader& header, const std::vector<bool>& poisoned = {});

struct ImageDir {
  LabeledImageSet data;
  ImageDirHeader header;
  std::vector<ManifestRow> rows;
};

ImageDir import_image_dir(const std::filesystem::path& dir);

}  // namespace blto
