#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "blto/augment.hpp"
#include "blto/dataset.hpp"
#include "blto/models.hpp"

namespace blto {

/// One per-epoch monitor row.
struct MetricsRecord {
  int64_t epoch = 0;
  double ba = 0.0;
  double asr = 0.0;              // target-class test images excluded
  double asr_incl_target = 0.0;  // every triggered test image counted
  double s_n = 0.0;
  double alignment = 0.0;
  double uniformity = 0.0;

  nlohmann::json to_json() const;
  static MetricsRecord from_json(const nlohmann::json& j);
};

struct KnnConfig {
  int64_t k = 200;
  double temperature = 0.1;
};

/// Weighted kNN vote: for each query take the k most cosine-similar memory
/// rows (ties broken by lower index), weight each by exp(sim / tau), and
/// return the class with the largest total (ties to the lower label).
/// k larger than the memory is clamped.
torch::Tensor knn_predict(const torch::Tensor& memory_features, const torch::Tensor& memory_labels,
                          const torch::Tensor& query_features, int64_t num_classes, const KnnConfig& cfg);

/// Number of knn_predict calls whose k had to be clamped.
uint64_t knn_clamp_count();

/// Backbone features of `images` (normalized with `norm` first), computed in
/// eval mode without gradients. The stack's train/eval mode is restored.
torch::Tensor embed(const EncoderStack& stack, const torch::Tensor& images, const NormStats& norm,
                    int64_t chunk = 256);

/// Labeled memory bank for the kNN monitor.
struct FeatureBank {
  torch::Tensor features;
  torch::Tensor labels;
  int64_t num_classes = 0;
};

FeatureBank build_bank(const EncoderStack& stack, const LabeledImageSet& memory, const NormStats& norm);

/// Fraction of predictions equal to labels.
double accuracy(const torch::Tensor& predictions, const torch::Tensor& labels);

struct AsrResult {
  double excluding_target = 0.0;
  double including_target = 0.0;
};

/// Fraction of `predictions` equal to `target`, with and without the rows
/// whose ground-truth label is `target`.
AsrResult attack_success(const torch::Tensor& predictions, const torch::Tensor& true_labels, int64_t target);

double compute_ba(const EncoderStack& stack, const LabeledImageSet& clean_test, const FeatureBank& bank,
                  const NormStats& norm, const KnnConfig& knn);

/// `triggered_test` holds triggered images with their original labels.
AsrResult compute_asr(const EncoderStack& stack, const LabeledImageSet& triggered_test, const FeatureBank& bank,
                      int64_t target, const NormStats& norm, const KnnConfig& knn);

struct CentroidTable {
  torch::Tensor class_centroids;  // [K, d]
  torch::Tensor backdoor_centroid;  // [d]
  int64_t target = 0;
};

/// Per-class mean embeddings (first `per_class_cap` rows of each class) and
/// the mean embedding of the triggered rows.
CentroidTable build_centroids(const EncoderStack& stack, const LabeledImageSet& train_set,
                              const torch::Tensor& triggered_images, int64_t target, const NormStats& norm,
                              int64_t per_class_cap = 512);

/// S(C_bd, C_target) / mean_k S(C_bd, C_k) with S = cosine.
double normalized_similarity(const CentroidTable& table);

double normalized_similarity(const EncoderStack& stack, const LabeledImageSet& train_set,
                             const torch::Tensor& triggered_images, int64_t target, const NormStats& norm,
                             int64_t per_class_cap = 512);

/// Everything the per-epoch monitor reads.
struct MonitorData {
  LabeledImageSet memory;          // clean training set (kNN memory, centroids)
  LabeledImageSet test;            // clean test set
  LabeledImageSet triggered_test;  // triggered test images, original labels
  torch::Tensor triggered_train;   // triggered training images for C_bd
  torch::Tensor backdoored;        // poisoned training images for alignment/uniformity
  int64_t target = 0;
  NormStats norm;
  KnnConfig knn;
  AugmentationPipeline view_pipeline;  // views for the alignment monitor
  uint64_t view_seed = 0;
  int64_t centroid_cap = 512;
};

MetricsRecord monitor_epoch(const EncoderStack& stack, const MonitorData& data, int64_t epoch);

/// Alignment and uniformity of `images` under fixed augmented views.
std::pair<double, double> alignment_uniformity(const EncoderStack& stack, const torch::Tensor& images,
                                               const AugmentationPipeline& pipeline, uint64_t seed);

/// Writes a TSV with columns id, label, poisoned, e0..e{d-1}, pca0, pca1.
/// `poisoned` is 0 for clean rows, 1 for poisoned training rows and 2 for
/// test-time triggered rows, which follow the dataset rows.
void export_embeddings(const EncoderStack& stack, const NormStats& norm, const LabeledImageSet& data,
                       const std::vector<bool>& poisoned, const LabeledImageSet& triggered,
                       const std::filesystem::path& path);

/// Top-2 principal component scores of the rows of `x` (double precision).
torch::Tensor pca2(const torch::Tensor& x);

}  // namespace blto
