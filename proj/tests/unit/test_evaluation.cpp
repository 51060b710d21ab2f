#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <sstream>

#include "blto/common.hpp"
#include "blto/evaluation.hpp"
#include "support.hpp"

using namespace blto;

namespace {

// Exhaustive weighted kNN over double-precision cosine similarities.
std::vector<int64_t> knn_oracle(const torch::Tensor& mem, const torch::Tensor& labels, const torch::Tensor& query,
                                int64_t classes, int64_t k, double tau) {
  auto m = mem.to(torch::kDouble), q = query.to(torch::kDouble);
  m = m / m.norm(2, 1, true);
  q = q / q.norm(2, 1, true);
  const int64_t n = m.size(0);
  k = std::min(k, n);
  std::vector<int64_t> out;
  for (int64_t i = 0; i < q.size(0); ++i) {
    std::vector<std::pair<double, int64_t>> sims;
    for (int64_t j = 0; j < n; ++j) sims.emplace_back(q[i].dot(m[j]).item<double>(), j);
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<double> votes(classes, 0.0);
    for (int64_t r = 0; r < k; ++r) votes[labels[sims[r].second].item<int64_t>()] += std::exp(sims[r].first / tau);
    out.push_back(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

std::vector<int64_t> to_vec(const torch::Tensor& t) {
  auto c = t.to(torch::kInt64).contiguous();
  return {c.data_ptr<int64_t>(), c.data_ptr<int64_t>() + c.numel()};
}

// Independent S_N: cosine via explicit dot products and norms.
double sn_oracle(const torch::Tensor& centroids, const torch::Tensor& bd, int64_t target) {
  auto cosine = [](const torch::Tensor& a, const torch::Tensor& b) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.size(0); ++i) {
      const double x = a[i].item<double>(), y = b[i].item<double>();
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    return dot / std::sqrt(na * nb);
  };
  double mean = 0;
  for (int64_t c = 0; c < centroids.size(0); ++c) mean += cosine(bd, centroids[c]);
  mean /= static_cast<double>(centroids.size(0));
  return cosine(bd, centroids[target]) / mean;
}

NormStats identity_norm() { return {{0.f, 0.f, 0.f}, {1.f, 1.f, 1.f}}; }

constexpr int64_t kToyTarget = 2;

// Embeds a clean image as the one-hot of its dominant channel and any image
// whose top-left red pixel is exactly 1 (the trigger) as the target one-hot.
EncoderStack toy_backdoored_encoder() {
  EncoderStack s;
  s.arch_tag = "toy";
  s.embed_dim = 3;
  s.encoder = torch::nn::Sequential(torch::nn::Functional([](torch::Tensor x) {
    auto dominant = x.mean({2, 3}).argmax(1);
    auto triggered = x.select(1, 0).select(1, 0).select(1, 0).eq(1.0);
    auto cls = torch::where(triggered, torch::full_like(dominant, kToyTarget), dominant);
    return torch::one_hot(cls, 3).to(torch::kFloat32);
  }));
  s.projector = torch::nn::Sequential(torch::nn::Identity());
  s.predictor = torch::nn::Sequential(torch::nn::Identity());
  return s;
}

LabeledImageSet colour_set(int64_t per_class, int64_t size) {
  LabeledImageSet d;
  const int64_t n = 3 * per_class;
  d.images = torch::full({n, 3, size, size}, 0.1f);
  d.labels = torch::arange(n, torch::kInt64).remainder(3);
  for (int64_t i = 0; i < n; ++i) d.images[i][d.labels[i].item<int64_t>()].fill_(0.8f);
  d.class_names = {"r", "g", "b"};
  return d;
}

torch::Tensor add_trigger(torch::Tensor images) {
  images = images.clone();
  images.index_put_({torch::indexing::Slice(), 0, 0, 0}, 1.0f);
  return images;
}

}  // namespace

TEST(Knn, SelfQueryReturnsOwnLabel) {
  auto gen = make_generator(1);
  auto mem = torch::randn({30, 8}, gen);
  auto labels = torch::randint(0, 4, {30}, gen);
  auto pred = knn_predict(mem, labels, mem, 4, {1, 0.1});
  EXPECT_TRUE(torch::equal(pred.to(torch::kInt64), labels));
}

TEST(Knn, UniformMemoryLabel) {
  auto gen = make_generator(2);
  auto mem = torch::randn({20, 5}, gen);
  auto labels = torch::full({20}, 3, torch::kInt64);
  auto pred = knn_predict(mem, labels, torch::randn({7, 5}, gen), 5, {5, 0.1});
  EXPECT_TRUE(pred.eq(3).all().item<bool>());
}

TEST(Knn, MatchesExhaustiveOracle) {
  for (int64_t n : {10, 50, 100}) {
    for (int64_t k : {1, 5, 20, 200}) {
      auto gen = make_generator(static_cast<uint64_t>(100 * n + k));
      auto mem = torch::randn({n, 6}, gen);
      auto labels = torch::randint(0, 5, {n}, gen);
      auto query = torch::randn({25, 6}, gen);
      auto pred = knn_predict(mem, labels, query, 5, {k, 0.1});
      EXPECT_EQ(to_vec(pred), knn_oracle(mem, labels, query, 5, k, 0.1)) << "n=" << n << " k=" << k;
    }
  }
}

TEST(Knn, OversizedKIsClamped) {
  const auto before = knn_clamp_count();
  auto mem = torch::eye(3);
  knn_predict(mem, torch::tensor({0, 1, 2}), mem, 3, {10, 0.1});
  EXPECT_EQ(knn_clamp_count(), before + 1);
}

TEST(Knn, EmptyMemory) {
  EXPECT_THROW(knn_predict(torch::zeros({0, 3}), torch::zeros({0}, torch::kInt64), torch::ones({1, 3}), 2, {}),
               ArgumentError);
}

TEST(Metrics, AttackSuccessCounting) {
  auto target = torch::full({20}, 1, torch::kInt64);
  auto labels = torch::zeros({20}, torch::kInt64);
  EXPECT_DOUBLE_EQ(attack_success(target, labels, 1).excluding_target, 1.0);
  EXPECT_DOUBLE_EQ(attack_success(torch::zeros({20}, torch::kInt64), labels, 1).excluding_target, 0.0);
  auto mixed = torch::zeros({20}, torch::kInt64);
  mixed.narrow(0, 0, 7).fill_(1);
  auto r = attack_success(mixed, labels, 1);
  EXPECT_DOUBLE_EQ(r.excluding_target, 0.35);
  EXPECT_DOUBLE_EQ(1.0 - r.excluding_target, mixed.ne(1).to(torch::kDouble).mean().item<double>());
}

TEST(Metrics, TargetRowsExcludedByDefault) {
  // 4 target-class rows (all predicted target) and 6 others, 3 predicted target.
  auto labels = torch::tensor({1, 1, 1, 1, 0, 0, 2, 2, 3, 3});
  auto pred = torch::tensor({1, 1, 1, 1, 1, 0, 1, 2, 1, 3});
  auto r = attack_success(pred, labels, 1);
  EXPECT_DOUBLE_EQ(r.excluding_target, 0.5);
  EXPECT_DOUBLE_EQ(r.including_target, 0.7);
  EXPECT_DOUBLE_EQ(accuracy(pred, labels), 0.7);
  EXPECT_THROW(attack_success(torch::zeros({0}), torch::zeros({0}), 0), ArgumentError);
}

TEST(NormalizedSimilarity, OrthonormalCentroids) {
  CentroidTable t;
  t.class_centroids = torch::eye(10, torch::kDouble);
  t.backdoor_centroid = torch::zeros({10}, torch::kDouble);
  t.backdoor_centroid[9] = 1.0;
  t.target = 9;
  EXPECT_NEAR(normalized_similarity(t), 10.0, 1e-6);
}

TEST(NormalizedSimilarity, EqualSimilaritiesGiveOne) {
  CentroidTable t;
  t.class_centroids = torch::tensor({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}}, torch::kDouble);
  t.backdoor_centroid = torch::tensor({1.0, 2.0}, torch::kDouble);
  t.target = 1;
  EXPECT_NEAR(normalized_similarity(t), 1.0, 1e-12);
}

TEST(NormalizedSimilarity, MatchesIndependentFormulaAndIsRotationInvariant) {
  auto gen = make_generator(7);
  CentroidTable t;
  t.class_centroids = torch::randn({6, 5}, gen).to(torch::kDouble) + 1.0;
  t.backdoor_centroid = torch::randn({5}, gen).to(torch::kDouble) + 1.0;
  t.target = 4;
  const double sn = normalized_similarity(t);
  EXPECT_NEAR(sn, sn_oracle(t.class_centroids, t.backdoor_centroid, 4), 1e-10);

  auto q = std::get<0>(torch::linalg_qr(torch::randn({5, 5}, gen).to(torch::kDouble)));
  CentroidTable r = t;
  r.class_centroids = t.class_centroids.matmul(q);
  r.backdoor_centroid = t.backdoor_centroid.matmul(q);
  EXPECT_NEAR(normalized_similarity(r), sn, 1e-10);
}

TEST(NormalizedSimilarity, ZeroCentroidIsAnError) {
  CentroidTable t;
  t.class_centroids = torch::eye(3, torch::kDouble);
  t.backdoor_centroid = torch::zeros({3}, torch::kDouble);
  t.target = 0;
  EXPECT_THROW(normalized_similarity(t), ArgumentError);
}

TEST(NormalizedSimilarity, CentroidsUseCappedClassMeans) {
  auto stack = init_encoder("tiny-conv", 8, 3);
  auto data = make_synthetic_set(3, 6, 16, 3);
  auto trig = data.images.narrow(0, 0, 4);
  auto norm = synthetic_norm();
  auto table = build_centroids(stack, data, trig, 1, norm, 4);
  auto feats = embed(stack, data.images, norm);
  for (int64_t c = 0; c < 3; ++c) {
    auto rows = torch::nonzero(data.labels == c).squeeze(1).narrow(0, 0, 4);
    EXPECT_TRUE(torch::allclose(table.class_centroids[c].to(torch::kFloat), feats.index_select(0, rows).mean(0),
                                1e-5, 1e-6));
  }
  EXPECT_TRUE(torch::allclose(table.backdoor_centroid.to(torch::kFloat), embed(stack, trig, norm).mean(0), 1e-5, 1e-6));
  EXPECT_NEAR(normalized_similarity(stack, data, trig, 1, norm, 4), normalized_similarity(table), 1e-12);
}

TEST(Monitor, FreshEncoderRecordIsFinite) {
  auto stack = init_encoder("tiny-conv", 16, 1);
  auto train = make_synthetic_set(4, 8, 16, 1);
  auto test = make_synthetic_set(4, 4, 16, 2, Split::kTest);
  MonitorData d;
  d.memory = train;
  d.test = test;
  d.triggered_test = test;
  d.triggered_test.images = add_trigger(test.images);
  d.triggered_train = add_trigger(train.images.narrow(0, 0, 8));
  d.backdoored = d.triggered_train;
  d.target = 1;
  d.norm = synthetic_norm();
  d.knn = {10, 0.1};
  d.view_pipeline = victim_pipeline(16, false, d.norm);
  auto r = monitor_epoch(stack, d, 0);
  EXPECT_EQ(r.epoch, 0);
  for (double v : {r.ba, r.asr, r.asr_incl_target, r.s_n, r.alignment, r.uniformity}) EXPECT_TRUE(std::isfinite(v));
  EXPECT_GE(r.ba, 0.0);
  EXPECT_LE(r.ba, 1.0);

  auto bank = build_bank(stack, d.memory, d.norm);
  EXPECT_EQ(r.ba, compute_ba(stack, d.test, bank, d.norm, d.knn));
  EXPECT_EQ(r.ba, monitor_epoch(stack, d, 0).ba);
  auto [a, u] = alignment_uniformity(stack, d.backdoored, d.view_pipeline, d.view_seed);
  EXPECT_EQ(r.alignment, a);
  EXPECT_EQ(r.uniformity, u);
}

TEST(Monitor, PerfectlyBackdooredToyEncoder) {
  auto stack = toy_backdoored_encoder();
  auto train = colour_set(10, 8);
  auto test = colour_set(5, 8);
  MonitorData d;
  d.memory = train;
  d.test = test;
  d.triggered_test = test;
  d.triggered_test.images = add_trigger(test.images);
  d.triggered_train = add_trigger(train.images);
  d.target = kToyTarget;
  d.norm = identity_norm();
  d.knn = {5, 0.1};
  auto r = monitor_epoch(stack, d, 3);
  EXPECT_DOUBLE_EQ(r.ba, 1.0);
  EXPECT_DOUBLE_EQ(r.asr, 1.0);
  EXPECT_DOUBLE_EQ(r.asr_incl_target, 1.0);

  auto table = build_centroids(stack, train, d.triggered_train, kToyTarget, d.norm);
  auto sims = torch::nn::functional::cosine_similarity(table.class_centroids,
                                                       table.backdoor_centroid.unsqueeze(0).expand_as(table.class_centroids));
  EXPECT_EQ(sims.argmax().item<int64_t>(), kToyTarget);
  EXPECT_NEAR(r.s_n, 3.0, 1e-9);
}

TEST(Metrics, EmptyTestSet) {
  auto stack = init_encoder("tiny-conv", 8, 1);
  auto train = make_synthetic_set(2, 4, 16, 1);
  auto bank = build_bank(stack, train, synthetic_norm());
  auto empty = train.select(torch::zeros({0}, torch::kInt64));
  EXPECT_THROW(compute_ba(stack, empty, bank, synthetic_norm(), {}), ArgumentError);
  EXPECT_THROW(compute_asr(stack, empty, bank, 0, synthetic_norm(), {}), ArgumentError);
}

TEST(Export, RowsPcaAndDeterminism) {
  testkit::TempDir dir("emb");
  auto stack = init_encoder("tiny-conv", 8, 2);
  auto data = make_synthetic_set(3, 5, 16, 4);
  auto trig = make_synthetic_set(3, 2, 16, 5, Split::kTest);
  std::vector<bool> poisoned(data.size(), false);
  poisoned[3] = true;
  export_embeddings(stack, synthetic_norm(), data, poisoned, trig, dir / "a.tsv");
  export_embeddings(stack, synthetic_norm(), data, poisoned, trig, dir / "b.tsv");

  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const auto text = slurp(dir / "a.tsv");
  EXPECT_EQ(sha1_hex(text), sha1_hex(slurp(dir / "b.tsv")));

  std::istringstream in(text);
  std::string line;
  int64_t rows = 0;
  double pc0 = 0, pc1 = 0;
  std::map<int, int> flags;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("id", 0) == 0) continue;
    std::istringstream fields(line);
    std::vector<std::string> cols;
    std::string f;
    while (std::getline(fields, f, '\t')) cols.push_back(f);
    ASSERT_EQ(cols.size(), 3u + 8u + 2u);
    flags[std::stoi(cols[2])]++;
    pc0 += std::stod(cols[cols.size() - 2]);
    pc1 += std::stod(cols.back());
    ++rows;
  }
  EXPECT_EQ(rows, data.size() + trig.size());
  EXPECT_NEAR(pc0 / rows, 0.0, 1e-6);
  EXPECT_NEAR(pc1 / rows, 0.0, 1e-6);
  EXPECT_EQ(flags[1], 1);
  EXPECT_EQ(flags[2], trig.size());
}

TEST(Export, PcaMatchesSvd) {
  auto gen = make_generator(9);
  auto x = torch::randn({40, 5}, gen).to(torch::kDouble) * torch::tensor({5.0, 3.0, 1.0, 0.5, 0.1}, torch::kDouble);
  auto p = pca2(x);
  auto centered = x - x.mean(0, true);
  auto svd = torch::linalg_svd(centered, false);
  auto ref = centered.matmul(std::get<2>(svd).narrow(0, 0, 2).t());
  for (int64_t j = 0; j < 2; ++j) {
    auto a = p.select(1, j), b = ref.select(1, j);
    EXPECT_TRUE(torch::allclose(a, b, 0, 1e-9) || torch::allclose(a, -b, 0, 1e-9));
  }
}

TEST(MetricsRecord, JsonRoundTrip) {
  MetricsRecord r{7, 0.9, 0.1, 0.2, 1.5, 0.3, -2.5};
  auto back = MetricsRecord::from_json(r.to_json());
  EXPECT_EQ(back.epoch, 7);
  EXPECT_DOUBLE_EQ(back.ba, 0.9);
  EXPECT_DOUBLE_EQ(back.asr, 0.1);
  EXPECT_DOUBLE_EQ(back.asr_incl_target, 0.2);
  EXPECT_DOUBLE_EQ(back.s_n, 1.5);
  EXPECT_DOUBLE_EQ(back.alignment, 0.3);
  EXPECT_DOUBLE_EQ(back.uniformity, -2.5);
}
