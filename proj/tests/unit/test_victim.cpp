#include <gtest/gtest.h>

#include "blto/common.hpp"
#include "blto/poisoning.hpp"
#include "blto/victim.hpp"
#include "support.hpp"

using namespace blto;

namespace {

VictimConfig quick(int64_t epochs) {
  VictimConfig cfg;
  cfg.embed_dim = 16;
  cfg.epochs = epochs;
  cfg.batch_size = 32;
  cfg.seed = 3;
  return cfg;
}

MonitorData monitor_for(const LabeledImageSet& train, const LabeledImageSet& test, int64_t target) {
  MonitorData d;
  d.memory = train;
  d.test = test;
  d.triggered_test = test;
  d.triggered_test.images = paste_patch(test.images, default_patch_for(test.height()));
  d.triggered_train = paste_patch(train.images.narrow(0, 0, 16), default_patch_for(train.height()));
  d.backdoored = d.triggered_train;
  d.target = target;
  d.norm = synthetic_norm();
  d.knn = {20, 0.1};
  d.view_pipeline = victim_pipeline(train.height(), false, d.norm);
  return d;
}

}  // namespace

TEST(TrainVictim, OneEpochGivesOneLedgerRow) {
  testkit::TempDir dir("victim");
  auto train = make_synthetic_set(4, 16, 16, 1);
  auto test = make_synthetic_set(4, 4, 16, 2, Split::kTest);
  auto md = monitor_for(train, test, 1);
  VictimHooks hooks;
  hooks.monitor = [&](const EncoderStack& s, int64_t epoch) { return monitor_epoch(s, md, epoch); };
  int calls = 0;
  hooks.on_epoch = [&](int64_t epoch, double loss, const MetricsRecord* rec) {
    ++calls;
    EXPECT_EQ(epoch, 1);
    EXPECT_TRUE(std::isfinite(loss));
    ASSERT_NE(rec, nullptr);
    EXPECT_EQ(rec->epoch, 1);
  };
  auto r = train_victim(train, quick(1), synthetic_norm(), hooks);
  EXPECT_EQ(r.records.size(), 1u);
  EXPECT_EQ(r.epoch_loss.size(), 1u);
  EXPECT_EQ(calls, 1);
  save_encoder(r.stack, dir / "encoder.ckpt");
  EXPECT_TRUE(std::filesystem::exists(dir / "encoder.ckpt"));
  EXPECT_EQ(load_encoder(dir / "encoder.ckpt").checksum(), r.stack.checksum());
}

TEST(TrainVictim, ReproducibleLedger) {
  auto train = make_synthetic_set(4, 16, 16, 1);
  auto test = make_synthetic_set(4, 4, 16, 2, Split::kTest);
  auto md = monitor_for(train, test, 1);
  VictimHooks hooks;
  hooks.monitor = [&](const EncoderStack& s, int64_t epoch) { return monitor_epoch(s, md, epoch); };
  for (auto method : {ClMethod::kSimClr, ClMethod::kSimSiam, ClMethod::kByol}) {
    auto cfg = quick(2);
    cfg.method.method = method;
    auto a = train_victim(train, cfg, synthetic_norm(), hooks);
    auto b = train_victim(train, cfg, synthetic_norm(), hooks);
    EXPECT_EQ(a.stack.checksum(), b.stack.checksum()) << to_string(method);
    ASSERT_EQ(a.records.size(), 2u);
    for (size_t i = 0; i < 2; ++i) EXPECT_EQ(a.records[i].to_json(), b.records[i].to_json());
    EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  }
}

TEST(TrainVictim, CleanRunIsAtChanceAndLossFalls) {
  auto train = make_synthetic_set(4, 50, 16, 1);
  auto test = make_synthetic_set(4, 25, 16, 2, Split::kTest);
  auto md = monitor_for(train, test, 1);
  VictimHooks hooks;
  hooks.monitor = [&](const EncoderStack& s, int64_t epoch) { return monitor_epoch(s, md, epoch); };
  auto cfg = quick(20);
  cfg.batch_size = 64;
  auto r = train_victim(train, cfg, synthetic_norm(), hooks);
  ASSERT_EQ(r.records.size(), 20u);
  EXPECT_LT(r.epoch_loss.back(), r.epoch_loss.front());
  // Without poisoning the patch leaves predictions spread by class prior.
  EXPECT_NEAR(r.records.back().asr_incl_target, 0.25, 0.15);
  EXPECT_GT(r.records.back().ba, 0.35);
}

TEST(TrainVictim, DivergenceAborts) {
  auto train = make_synthetic_set(4, 16, 16, 1);
  auto cfg = quick(3);
  cfg.base_lr = 1e12;
  cfg.final_lr = 1e12;
  std::vector<int64_t> seen;
  VictimHooks hooks;
  hooks.on_epoch = [&](int64_t epoch, double, const MetricsRecord*) { seen.push_back(epoch); };
  try {
    train_victim(train, cfg, synthetic_norm(), hooks);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_NE(e.record().find("victim"), std::string::npos);
  }
  EXPECT_LT(seen.size(), 3u);
}

TEST(TrainVictim, InvalidConfig) {
  auto train = make_synthetic_set(4, 4, 16, 1);
  auto cfg = quick(0);
  EXPECT_THROW(train_victim(train, cfg, synthetic_norm()), ArgumentError);
  cfg = quick(1);
  cfg.mix_ratio = 1.5;
  EXPECT_THROW(cfg.validate(), ArgumentError);
}

TEST(VictimConfig, JsonRoundTrip) {
  auto cfg = quick(7);
  cfg.method = {ClMethod::kByol, 0.3, 0.95, false};
  cfg.include_blur = true;
  cfg.mix_ratio = 0.5;
  auto back = VictimConfig::from_json(cfg.to_json());
  EXPECT_EQ(back.to_json(), cfg.to_json());
  EXPECT_EQ(back.method.method, ClMethod::kByol);
  EXPECT_TRUE(back.include_blur);
}

TEST(MixDatasets, FullRatioIsPrimary) {
  auto a = make_synthetic_set(2, 10, 8, 1);
  auto b = make_synthetic_set(3, 10, 8, 2);
  auto m = mix_datasets(a, b, 1.0, 0);
  EXPECT_TRUE(torch::equal(m.images, a.images));
  EXPECT_TRUE(torch::equal(m.labels, a.labels));
}

TEST(MixDatasets, HalfAndHalf) {
  auto a = make_synthetic_set(2, 50, 8, 1);
  auto b = make_synthetic_set(2, 40, 8, 2);
  auto m = mix_datasets(a, b, 0.5, 0);
  const int64_t from_primary = (m.labels < 2).sum().item<int64_t>();
  const int64_t from_extra = (m.labels >= 2).sum().item<int64_t>();
  EXPECT_LE(std::abs(from_primary - from_extra), 1);
  EXPECT_EQ(from_extra, 80);
  EXPECT_EQ(m.num_classes(), 4);
  EXPECT_EQ(m.class_names[2], "extra:" + b.class_names[0]);
  EXPECT_NO_THROW(m.validate());
}

TEST(MixDatasets, QuarterRatioUsesEverything) {
  auto a = make_synthetic_set(10, 100, 8, 1);
  auto b = make_synthetic_set(10, 300, 8, 2);
  auto m = mix_datasets(a, b, 0.25, 4);
  EXPECT_EQ(m.size(), 4000);
  EXPECT_EQ((m.labels < 10).sum().item<int64_t>(), 1000);
  EXPECT_EQ((m.labels >= 10).sum().item<int64_t>(), 3000);
}

TEST(MixDatasets, ZeroRatioIsExtraOnly) {
  auto a = make_synthetic_set(2, 10, 8, 1);
  auto b = make_synthetic_set(2, 6, 8, 2);
  auto m = mix_datasets(a, b, 0.0, 0);
  EXPECT_EQ(m.size(), 12);
  EXPECT_TRUE((m.labels >= 2).all().item<bool>());
}

TEST(MixDatasets, DeterministicAndOrdered) {
  auto a = make_synthetic_set(2, 50, 8, 1);
  auto b = make_synthetic_set(2, 20, 8, 2);
  auto m1 = mix_datasets(a, b, 0.6, 9);
  auto m2 = mix_datasets(a, b, 0.6, 9);
  EXPECT_TRUE(torch::equal(m1.images, m2.images));
  EXPECT_FALSE(torch::equal(m1.images, mix_datasets(a, b, 0.6, 10).images));
  EXPECT_EQ(m1.size(), 101);  // round(0.6 * 101) = 61 primary rows, all 40 extra rows
  EXPECT_EQ((m1.labels < 2).sum().item<int64_t>(), 61);
}

TEST(MixDatasets, ShapeMismatch) {
  auto a = make_synthetic_set(2, 10, 8, 1);
  auto b = make_synthetic_set(2, 10, 16, 2);
  EXPECT_THROW(mix_datasets(a, b, 0.5, 0), ArgumentError);
  EXPECT_THROW(mix_datasets(a, a, 1.5, 0), ArgumentError);
}
