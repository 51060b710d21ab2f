#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "blto/common.hpp"
#include "blto/objectives.hpp"
#include "support.hpp"

using namespace blto;

namespace {

torch::Tensor randn(std::vector<int64_t> shape, uint64_t seed) {
  auto gen = make_generator(seed);
  return torch::randn(shape, gen).to(torch::kDouble);
}

double cos_row(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.dot(b) / (a.norm() * b.norm())).item<double>();
}

// Brute-force NT-Xent: enumerate every anchor, its positive and all
// non-self candidates explicitly.
double infonce_oracle(const torch::Tensor& v1, const torch::Tensor& v2, double tau) {
  const int64_t b = v1.size(0);
  std::vector<torch::Tensor> rows;
  for (int64_t i = 0; i < b; ++i) rows.push_back(v1[i]);
  for (int64_t i = 0; i < b; ++i) rows.push_back(v2[i]);
  const int64_t n = 2 * b;
  double total = 0;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t pos = i < b ? i + b : i - b;
    double denom = 0;
    for (int64_t j = 0; j < n; ++j) {
      if (j != i) denom += std::exp(cos_row(rows[i], rows[j]) / tau);
    }
    total += -std::log(std::exp(cos_row(rows[i], rows[pos]) / tau) / denom);
  }
  return total / static_cast<double>(n);
}

double uniformity_oracle(const torch::Tensor& x, double t) {
  auto u = x / x.norm(2, 1, true);
  double sum = 0;
  int64_t count = 0;
  for (int64_t i = 0; i < u.size(0); ++i) {
    for (int64_t j = i + 1; j < u.size(0); ++j) {
      sum += std::exp(-t * (u[i] - u[j]).pow(2).sum().item<double>());
      ++count;
    }
  }
  return std::log(sum / static_cast<double>(count));
}

}  // namespace

TEST(Cosine, BasicCases) {
  auto v = randn({3, 5}, 1);
  EXPECT_TRUE(torch::allclose(blto::cosine_similarity(v, v), torch::ones({3}, torch::kDouble)));
  EXPECT_TRUE(torch::allclose(blto::cosine_similarity(v, -v), -torch::ones({3}, torch::kDouble)));
  auto e1 = torch::tensor({{1.0, 0.0}}, torch::kDouble);
  auto e2 = torch::tensor({{0.0, 1.0}}, torch::kDouble);
  EXPECT_DOUBLE_EQ(blto::cosine_similarity(e1, e2).item<double>(), 0.0);
}

TEST(Cosine, ZeroVectorIsDegenerate) {
  const auto before = degenerate_cosine_count();
  auto a = torch::tensor({{0.0, 0.0}, {1.0, 2.0}}, torch::kDouble);
  auto b = torch::tensor({{1.0, 0.0}, {1.0, 2.0}}, torch::kDouble);
  auto c = blto::cosine_similarity(a, b);
  EXPECT_EQ(c[0].item<double>(), 0.0);
  EXPECT_NEAR(c[1].item<double>(), 1.0, 1e-12);
  EXPECT_EQ(degenerate_cosine_count(), before + 1);
}

TEST(Cosine, ShapeMismatch) {
  EXPECT_THROW(blto::cosine_similarity(torch::zeros({2, 3}), torch::zeros({2, 4})), ArgumentError);
}

TEST(SimSiam, IdenticalUnitVectors) {
  auto v = torch::tensor({{0.6, 0.8}, {0.6, 0.8}}, torch::kDouble);
  EXPECT_NEAR(simsiam_loss(v, v, v, v).item<double>(), -2.0, 1e-6);
  EXPECT_NEAR(simsiam_loss(v, v, v, v, true).item<double>(), -1.0, 1e-6);
}

TEST(SimSiam, OrthogonalBranches) {
  auto p = torch::tensor({{1.0, 0.0}}, torch::kDouble);
  auto z = torch::tensor({{0.0, 3.0}}, torch::kDouble);
  EXPECT_NEAR(simsiam_loss(p, p, z, z).item<double>(), 0.0, 1e-12);
}

TEST(SimSiam, StackLossMatchesHandFormula) {
  auto s = init_encoder("tiny-conv", 8, 1);
  s.to(torch::kDouble);
  s.train(false);  // identical batch-norm statistics across the two evaluations
  ViewPair views;
  views.view1 = randn({4, 3, 8, 8}, 2);
  views.view2 = randn({4, 3, 8, 8}, 3);
  const double loss = simsiam_loss(s, views).item<double>();

  auto a = project_and_predict(s, encode(s, views.view1));
  auto b = project_and_predict(s, encode(s, views.view2));
  double expected = 0;
  for (int64_t i = 0; i < 4; ++i) expected -= (cos_row(a.p[i], b.z[i]) + cos_row(b.p[i], a.z[i])) / 4.0;
  EXPECT_NEAR(loss, expected, 1e-10);
}

TEST(SimSiam, GradientFlowsOnlyThroughPredictions) {
  auto p1 = randn({4, 6}, 4).requires_grad_(true);
  auto p2 = randn({4, 6}, 5).requires_grad_(true);
  auto z1 = randn({4, 6}, 6).requires_grad_(true);
  auto z2 = randn({4, 6}, 7).requires_grad_(true);
  // z arrives detached, as project_and_predict returns it.
  auto loss = simsiam_loss(p1, p2, z1.detach(), z2.detach());
  auto g = torch::autograd::grad({loss}, {p1, p2, z1, z2}, {}, false, false, true);
  EXPECT_TRUE(g[0].defined() && g[0].abs().sum().item<double>() > 0);
  EXPECT_TRUE(g[1].defined() && g[1].abs().sum().item<double>() > 0);
  EXPECT_FALSE(g[2].defined());
  EXPECT_FALSE(g[3].defined());
}

TEST(SimSiam, LearnerGradientsIgnoreProjectionBranch) {
  auto s = init_encoder("tiny-conv", 8, 8);
  s.to(torch::kDouble);
  s.train(false);
  ViewPair views;
  views.view1 = randn({4, 3, 8, 8}, 9);
  views.view2 = randn({4, 3, 8, 8}, 10);
  ContrastiveLearner learner(s, {ClMethod::kSimSiam, 0.2, 0.99, false});
  auto params = learner.trainable_parameters();
  auto g = torch::autograd::grad({learner.loss(views)}, params, {}, false, false, true);

  // Same loss with the z branch computed from a frozen copy: identical
  // gradients show z contributes nothing.
  auto frozen = s.clone();
  auto a = project_and_predict(s, encode(s, views.view1));
  auto b = project_and_predict(s, encode(s, views.view2));
  torch::Tensor fz1, fz2;
  {
    torch::NoGradGuard guard;
    fz1 = frozen.projector->forward(encode(frozen, views.view1));
    fz2 = frozen.projector->forward(encode(frozen, views.view2));
  }
  auto h = torch::autograd::grad({simsiam_loss(a.p, b.p, fz1, fz2)}, params, {}, false, false, true);
  for (size_t i = 0; i < params.size(); ++i) {
    ASSERT_EQ(g[i].defined(), h[i].defined());
    if (g[i].defined()) EXPECT_TRUE(torch::allclose(g[i], h[i], 0, 1e-12));
  }
}

TEST(InfoNce, AllIdenticalIsLogThree) {
  auto v = torch::ones({2, 4}, torch::kDouble);
  EXPECT_NEAR(infonce_loss(v, v, 0.2).item<double>(), std::log(3.0), 1e-6);
}

TEST(InfoNce, OneHotPairsMatchEnumeration) {
  auto e1 = torch::tensor({{1.0, 0.0}, {0.0, 1.0}}, torch::kDouble);
  const double got = infonce_loss(e1, e1, 0.2).item<double>();
  // Each anchor: positive at cosine 1, both other candidates at cosine 0.
  const double expected = -std::log(std::exp(5.0) / (std::exp(5.0) + 2.0));
  EXPECT_NEAR(got, expected, 1e-9);
  EXPECT_NEAR(got, infonce_oracle(e1, e1, 0.2), 1e-9);
}

TEST(InfoNce, MatchesBruteForce) {
  for (int64_t b = 2; b <= 8; ++b) {
    for (double tau : {0.2, 0.5, 1.0}) {
      auto v1 = randn({b, 5}, 100 + b);
      auto v2 = randn({b, 5}, 200 + b);
      EXPECT_NEAR(infonce_loss(v1, v2, tau).item<double>(), infonce_oracle(v1, v2, tau), 1e-6)
          << "B=" << b << " tau=" << tau;
    }
  }
}

TEST(InfoNce, InvariantToPairPermutationAndScale) {
  auto v1 = randn({6, 4}, 11);
  auto v2 = randn({6, 4}, 12);
  auto perm = torch::tensor({3, 0, 5, 1, 4, 2}, torch::kInt64);
  const double base = infonce_loss(v1, v2, 0.2).item<double>();
  EXPECT_NEAR(infonce_loss(v1.index_select(0, perm), v2.index_select(0, perm), 0.2).item<double>(), base, 1e-10);
  for (double c : {0.5, 2.0}) EXPECT_NEAR(infonce_loss(c * v1, c * v2, 0.2).item<double>(), base, 1e-10);
}

TEST(InfoNce, NeedsNegatives) {
  EXPECT_THROW(infonce_loss(torch::ones({1, 3}), torch::ones({1, 3}), 0.2), ArgumentError);
  EXPECT_THROW(infonce_loss(torch::ones({2, 3}), torch::ones({2, 3}), 0.0), ArgumentError);
}

TEST(Byol, PairLossCases) {
  auto u = torch::tensor({{0.6, 0.8}}, torch::kDouble);
  auto o = torch::tensor({{0.8, -0.6}}, torch::kDouble);
  EXPECT_NEAR(byol_pair_loss(u, u).item<double>(), 0.0, 1e-12);
  EXPECT_NEAR(byol_pair_loss(u, o).item<double>(), 2.0, 1e-12);
  EXPECT_NEAR(byol_loss(u, o, u, o).item<double>(), 2.0, 1e-12);
  EXPECT_NEAR(byol_loss(u, u, u, u).item<double>(), 0.0, 1e-12);
  for (double c : {0.5, 2.0}) {
    auto p = randn({4, 3}, 13), z = randn({4, 3}, 14);
    EXPECT_NEAR(byol_pair_loss(c * p, c * z).item<double>(), byol_pair_loss(p, z).item<double>(), 1e-12);
  }
}

TEST(Byol, EmaUpdate) {
  auto target = std::vector<torch::Tensor>{torch::ones({3}), torch::zeros({2})};
  auto online = std::vector<torch::Tensor>{torch::full({3}, 3.0), torch::full({2}, 2.0)};
  auto t1 = std::vector<torch::Tensor>{target[0].clone(), target[1].clone()};
  ema_update(t1, online, 1.0);
  EXPECT_TRUE(torch::equal(t1[0], target[0]));
  EXPECT_TRUE(torch::equal(t1[1], target[1]));
  auto t0 = std::vector<torch::Tensor>{target[0].clone(), target[1].clone()};
  ema_update(t0, online, 0.0);
  EXPECT_TRUE(torch::equal(t0[0], online[0]));
  EXPECT_TRUE(torch::equal(t0[1], online[1]));
  auto th = std::vector<torch::Tensor>{target[0].clone(), target[1].clone()};
  ema_update(th, online, 0.75);
  EXPECT_TRUE(torch::allclose(th[0], torch::full({3}, 1.5)));
  EXPECT_THROW(ema_update(th, {online[0]}, 0.5), ArgumentError);
}

TEST(Byol, LearnerTrainsOnlineOnly) {
  auto s = init_encoder("tiny-conv", 8, 15);
  ContrastiveLearner learner(s, {ClMethod::kByol, 0.2, 0.9, false});
  const auto n_all = s.parameters().size();
  EXPECT_EQ(learner.trainable_parameters().size(), n_all);
  ViewPair views;
  views.view1 = torch::rand({4, 3, 8, 8});
  views.view2 = torch::rand({4, 3, 8, 8});
  auto loss = learner.loss(views);
  EXPECT_TRUE(std::isfinite(loss.item<double>()));
  EXPECT_GE(loss.item<double>(), 0.0);
  EXPECT_LE(loss.item<double>(), 4.0);
}

TEST(Alignment, CollapsedEmbeddings) {
  auto x = torch::ones({5, 3}, torch::kDouble);
  EXPECT_NEAR(alignment_loss(x, x).item<double>(), 0.0, 1e-12);
  EXPECT_NEAR(uniformity_loss(x).item<double>(), 0.0, 1e-12);
}

TEST(Alignment, AntipodalPair) {
  auto x = torch::tensor({{1.0, 0.0}, {-1.0, 0.0}}, torch::kDouble);
  EXPECT_NEAR(uniformity_loss(x, 2.0).item<double>(), -8.0, 1e-12);
  EXPECT_NEAR(alignment_loss(x.narrow(0, 0, 1), x.narrow(0, 1, 1)).item<double>(), 4.0, 1e-12);
}

TEST(Alignment, MatchesPairEnumeration) {
  auto u = randn({7, 4}, 16), v = randn({7, 4}, 17);
  auto un = u / u.norm(2, 1, true), vn = v / v.norm(2, 1, true);
  double align = 0;
  for (int64_t i = 0; i < 7; ++i) align += (un[i] - vn[i]).pow(2).sum().item<double>() / 7.0;
  EXPECT_NEAR(alignment_loss(u, v).item<double>(), align, 1e-12);
  for (double t : {1.0, 2.0}) EXPECT_NEAR(uniformity_loss(u, t).item<double>(), uniformity_oracle(u, t), 1e-12);
  EXPECT_LE(uniformity_loss(u).item<double>(), 0.0);
  for (double c : {0.5, 2.0}) {
    EXPECT_NEAR(alignment_loss(c * u, c * v).item<double>(), align, 1e-12);
    EXPECT_NEAR(uniformity_loss(c * u).item<double>(), uniformity_oracle(u, 2.0), 1e-12);
  }
}

TEST(Alignment, SinglePointUniformityIsUndefined) {
  EXPECT_THROW(uniformity_loss(torch::ones({1, 3})), ArgumentError);
}

TEST(Config, Validation) {
  ClObjectiveConfig cfg;
  cfg.temperature = 0.0;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  cfg = {};
  cfg.ema_momentum = 1.5;
  EXPECT_THROW(cfg.validate(), ArgumentError);
  EXPECT_EQ(cl_method_from_string("byol"), ClMethod::kByol);
  EXPECT_EQ(to_string(ClMethod::kSimClr), "simclr");
  EXPECT_THROW(cl_method_from_string("moco"), ArgumentError);
}
