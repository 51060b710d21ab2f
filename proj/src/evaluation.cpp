#include "blto/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>

#include "blto/common.hpp"
#include "blto/objectives.hpp"

namespace blto {

namespace F = torch::nn::functional;

namespace {
std::atomic<uint64_t> g_knn_clamps{0};
}

nlohmann::json MetricsRecord::to_json() const {
  return {{"epoch", epoch},         {"BA", ba},           {"ASR", asr},
          {"ASR_incl_target", asr_incl_target}, {"S_N", s_n}, {"alignment", alignment},
          {"uniformity", uniformity}};
}

MetricsRecord MetricsRecord::from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int64_t>();
  r.ba = j.at("BA").get<double>();
  r.asr = j.at("ASR").get<double>();
  r.asr_incl_target = j.value("ASR_incl_target", r.asr);
  r.s_n = j.at("S_N").get<double>();
  r.alignment = j.at("alignment").get<double>();
  r.uniformity = j.at("uniformity").get<double>();
  return r;
}

torch::Tensor knn_predict(const torch::Tensor& memory_features, const torch::Tensor& memory_labels,
                          const torch::Tensor& query_features, int64_t num_classes, const KnnConfig& cfg) {
  const int64_t m = memory_features.size(0);
  if (m == 0) throw ArgumentError("knn_predict: empty memory");
  if (memory_labels.size(0) != m) throw ArgumentError("knn_predict: label count != memory size");
  if (cfg.k < 1) throw ArgumentError("knn_predict: k must be >= 1");
  if (!(cfg.temperature > 0.0)) throw ArgumentError("knn_predict: temperature must be > 0");
  int64_t k = cfg.k;
  if (k > m) {
    ++g_knn_clamps;
    k = m;
  }
  auto mem = F::normalize(memory_features.to(torch::kFloat64), F::NormalizeFuncOptions().dim(1));
  auto qry = F::normalize(query_features.to(torch::kFloat64), F::NormalizeFuncOptions().dim(1));
  auto sims = torch::mm(qry, mem.t()).contiguous();
  auto labels = memory_labels.to(torch::kInt64).contiguous();
  const int64_t* lb = labels.data_ptr<int64_t>();
  const int64_t q = sims.size(0);
  auto out = torch::empty({q}, torch::kInt64);
  int64_t* pred = out.data_ptr<int64_t>();
  std::vector<int64_t> order(m);
  std::vector<double> votes(num_classes);
  for (int64_t i = 0; i < q; ++i) {
    const double* row = sims.data_ptr<double>() + i * m;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [row](int64_t a, int64_t b) {
      return row[a] > row[b] || (row[a] == row[b] && a < b);
    });
    std::fill(votes.begin(), votes.end(), 0.0);
    for (int64_t j = 0; j < k; ++j) {
      const int64_t label = lb[order[j]];
      if (label < 0 || label >= num_classes) throw ArgumentError("knn_predict: memory label out of range");
      votes[label] += std::exp(row[order[j]] / cfg.temperature);
    }
    pred[i] = std::max_element(votes.begin(), votes.end()) - votes.begin();
  }
  return out;
}

uint64_t knn_clamp_count() { return g_knn_clamps.load(); }

torch::Tensor embed(const EncoderStack& stack, const torch::Tensor& images, const NormStats& norm, int64_t chunk) {
  torch::NoGradGuard guard;
  const bool was_training = stack.encoder->is_training();
  stack.encoder.ptr()->eval();
  std::vector<torch::Tensor> out;
  for (int64_t i = 0; i < images.size(0); i += chunk) {
    auto x = images.slice(0, i, std::min(i + chunk, images.size(0)));
    out.push_back(encode(stack, normalize(x, norm)));
  }
  stack.encoder.ptr()->train(was_training);
  if (out.empty()) return torch::empty({0, stack.embed_dim});
  return torch::cat(out, 0);
}

FeatureBank build_bank(const EncoderStack& stack, const LabeledImageSet& memory, const NormStats& norm) {
  if (memory.size() == 0) throw ArgumentError("kNN memory is empty");
  return {embed(stack, memory.images, norm), memory.labels, memory.num_classes()};
}

double accuracy(const torch::Tensor& predictions, const torch::Tensor& labels) {
  if (labels.numel() == 0) throw ArgumentError("accuracy of an empty set");
  return predictions.eq(labels).sum().item<double>() / static_cast<double>(labels.numel());
}

AsrResult attack_success(const torch::Tensor& predictions, const torch::Tensor& true_labels, int64_t target) {
  if (predictions.numel() == 0) throw ArgumentError("attack success of an empty set");
  AsrResult r;
  auto hit = predictions.eq(target);
  r.including_target = hit.sum().item<double>() / static_cast<double>(predictions.numel());
  auto keep = true_labels.ne(target);
  const double kept = keep.sum().item<double>();
  r.excluding_target = kept > 0 ? hit.logical_and(keep).sum().item<double>() / kept : 0.0;
  return r;
}

double compute_ba(const EncoderStack& stack, const LabeledImageSet& clean_test, const FeatureBank& bank,
                  const NormStats& norm, const KnnConfig& knn) {
  if (clean_test.size() == 0) throw ArgumentError("compute_ba: empty test set");
  auto pred = knn_predict(bank.features, bank.labels, embed(stack, clean_test.images, norm), bank.num_classes, knn);
  return accuracy(pred, clean_test.labels);
}

AsrResult compute_asr(const EncoderStack& stack, const LabeledImageSet& triggered_test, const FeatureBank& bank,
                      int64_t target, const NormStats& norm, const KnnConfig& knn) {
  if (triggered_test.size() == 0) throw ArgumentError("compute_asr: empty test set");
  auto pred =
      knn_predict(bank.features, bank.labels, embed(stack, triggered_test.images, norm), bank.num_classes, knn);
  return attack_success(pred, triggered_test.labels, target);
}

CentroidTable build_centroids(const EncoderStack& stack, const LabeledImageSet& train_set,
                              const torch::Tensor& triggered_images, int64_t target, const NormStats& norm,
                              int64_t per_class_cap) {
  if (triggered_images.size(0) == 0) throw ArgumentError("normalized similarity needs triggered samples");
  const int64_t k = train_set.num_classes();
  auto labels = train_set.labels.contiguous();
  const int64_t* lb = labels.data_ptr<int64_t>();
  std::vector<std::vector<int64_t>> rows(k);
  for (int64_t i = 0; i < train_set.size(); ++i) {
    if (static_cast<int64_t>(rows[lb[i]].size()) < per_class_cap) rows[lb[i]].push_back(i);
  }
  CentroidTable t;
  t.target = target;
  std::vector<torch::Tensor> cents;
  for (int64_t c = 0; c < k; ++c) {
    if (rows[c].empty()) throw ArgumentError("class " + std::to_string(c) + " has no samples for its centroid");
    auto feats = embed(stack, train_set.images.index_select(0, torch::tensor(rows[c], torch::kInt64)), norm);
    cents.push_back(feats.to(torch::kFloat64).mean(0));
  }
  t.class_centroids = torch::stack(cents);
  t.backdoor_centroid = embed(stack, triggered_images, norm).to(torch::kFloat64).mean(0);
  return t;
}

double normalized_similarity(const CentroidTable& table) {
  const int64_t k = table.class_centroids.size(0);
  if (table.target < 0 || table.target >= k) throw ArgumentError("target outside centroid table");
  auto bd = table.backdoor_centroid.to(torch::kFloat64).view({1, -1});
  auto cents = table.class_centroids.to(torch::kFloat64);
  if (bd.norm().item<double>() == 0.0 || cents.norm(2, 1).min().item<double>() == 0.0) {
    throw ArgumentError("normalized similarity: zero-norm centroid");
  }
  auto sims = blto::cosine_similarity(bd.expand({k, -1}), cents);
  const double avg = sims.mean().item<double>();
  return sims[table.target].item<double>() / avg;
}

double normalized_similarity(const EncoderStack& stack, const LabeledImageSet& train_set,
                             const torch::Tensor& triggered_images, int64_t target, const NormStats& norm,
                             int64_t per_class_cap) {
  return normalized_similarity(build_centroids(stack, train_set, triggered_images, target, norm, per_class_cap));
}

std::pair<double, double> alignment_uniformity(const EncoderStack& stack, const torch::Tensor& images,
                                               const AugmentationPipeline& pipeline, uint64_t seed) {
  if (images.size(0) < 2) throw ArgumentError("alignment/uniformity need at least 2 backdoored images");
  torch::NoGradGuard guard;
  const bool was_training = stack.encoder->is_training();
  stack.encoder.ptr()->eval();
  auto views = sample_views(pipeline, images, seed);
  auto f1 = encode(stack, views.view1).to(torch::kFloat64);
  auto f2 = encode(stack, views.view2).to(torch::kFloat64);
  stack.encoder.ptr()->train(was_training);
  const double align = alignment_loss(f1, f2).item<double>();
  const double unif = uniformity_loss(torch::cat({f1, f2}, 0)).item<double>();
  return {align, unif};
}

MetricsRecord monitor_epoch(const EncoderStack& stack, const MonitorData& data, int64_t epoch) {
  MetricsRecord r;
  r.epoch = epoch;
  auto bank = build_bank(stack, data.memory, data.norm);
  r.ba = compute_ba(stack, data.test, bank, data.norm, data.knn);
  auto asr = compute_asr(stack, data.triggered_test, bank, data.target, data.norm, data.knn);
  r.asr = asr.excluding_target;
  r.asr_incl_target = asr.including_target;
  r.s_n = normalized_similarity(stack, data.memory, data.triggered_train, data.target, data.norm, data.centroid_cap);
  if (data.backdoored.defined() && data.backdoored.size(0) >= 2) {
    auto [a, u] = alignment_uniformity(stack, data.backdoored, data.view_pipeline, data.view_seed);
    r.alignment = a;
    r.uniformity = u;
  }
  return r;
}

torch::Tensor pca2(const torch::Tensor& x) {
  auto xd = x.to(torch::kFloat64);
  auto centered = xd - xd.mean(0, true);
  const int64_t n = xd.size(0);
  auto cov = torch::mm(centered.t(), centered) / std::max<int64_t>(n - 1, 1);
  auto [evals, evecs] = torch::linalg_eigh(cov);
  const int64_t d = evecs.size(1);
  const int64_t ncomp = std::min<int64_t>(2, d);
  auto comps = evecs.index_select(1, torch::arange(d - 1, d - 1 - ncomp, -1, torch::kInt64)).clone();
  for (int64_t c = 0; c < ncomp; ++c) {
    auto col = comps.select(1, c);
    const auto arg = col.abs().argmax().item<int64_t>();
    if (col[arg].item<double>() < 0) col.neg_();
  }
  auto scores = torch::mm(centered, comps);
  if (ncomp < 2) scores = torch::cat({scores, torch::zeros({n, 2 - ncomp}, scores.options())}, 1);
  return scores - scores.mean(0, true);
}

void export_embeddings(const EncoderStack& stack, const NormStats& norm, const LabeledImageSet& data,
                       const std::vector<bool>& poisoned, const LabeledImageSet& triggered,
                       const std::filesystem::path& path) {
  if (!poisoned.empty() && static_cast<int64_t>(poisoned.size()) != data.size()) {
    throw ArgumentError("poisoned flag count differs from dataset size");
  }
  auto feats = embed(stack, data.images, norm);
  torch::Tensor all = feats;
  if (triggered.size() > 0) all = torch::cat({feats, embed(stack, triggered.images, norm)}, 0);
  auto all64 = all.to(torch::kFloat64).contiguous();
  auto pcs = pca2(all64).contiguous();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write embeddings to " + path.string());
  const int64_t d = all64.size(1);
  out << "# poisoned: 0 clean, 1 poisoned training sample, 2 test-time triggered\n";
  out << "id\tlabel\tpoisoned";
  for (int64_t j = 0; j < d; ++j) out << "\te" << j;
  out << "\tpca0\tpca1\n";
  auto lab_data = data.labels.contiguous();
  auto lab_trig = triggered.size() > 0 ? triggered.labels.contiguous() : torch::empty({0}, torch::kInt64);
  const double* e = all64.data_ptr<double>();
  const double* p = pcs.data_ptr<double>();
  char buf[40];
  const int64_t rows = all64.size(0);
  for (int64_t i = 0; i < rows; ++i) {
    const bool is_trig = i >= data.size();
    const int64_t label = is_trig ? lab_trig.data_ptr<int64_t>()[i - data.size()] : lab_data.data_ptr<int64_t>()[i];
    const int flag = is_trig ? 2 : (!poisoned.empty() && poisoned[i] ? 1 : 0);
    out << i << "\t" << label << "\t" << flag;
    for (int64_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "\t%.9g", e[i * d + j]);
      out << buf;
    }
    for (int64_t j = 0; j < 2; ++j) {
      std::snprintf(buf, sizeof(buf), "\t%.17g", p[i * 2 + j]);
      out << buf;
    }
    out << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace blto
