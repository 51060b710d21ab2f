#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "blto/report.hpp"
#include "blto/runner.hpp"
#include "support.hpp"

using namespace blto;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ExperimentConfig smoke(const fs::path& out, AttackKind kind = AttackKind::kBlto) {
  json doc = {{"output_dir", out.string()},
              {"dataset", {{"num_classes", 4}, {"per_class", 8}, {"test_per_class", 4}, {"image_size", 16}}},
              {"attack",
               {{"kind", to_string(kind)},
                {"target_class", 1},
                {"poisoning_rate", 0.125},
                {"blto",
                 {{"N", 2},
                  {"K", 1},
                  {"J", 1},
                  {"batch_size", 8},
                  {"embed_dim", 8},
                  {"generator", {{"base_channels", 2}, {"residual_blocks", 0}}}}}}},
              {"victim", {{"embed_dim", 8}, {"epochs", 2}, {"batch_size", 8}}},
              {"evaluation", {{"knn_k", 5}, {"triggered_train_count", 8}}}};
  auto cfg = parse_config(doc);
  cfg.validate();
  return cfg;
}

std::string slurp(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Experiment, HashesFollowDependencies) {
  testkit::TempDir dir("hashes");
  auto base = smoke(dir.path());
  Experiment a(base);
  auto cfg = base;
  cfg.victims[0].epochs = 3;
  Experiment b(cfg);
  EXPECT_EQ(a.trigger_hash(), b.trigger_hash());
  EXPECT_EQ(a.poison_hash(), b.poison_hash());
  EXPECT_NE(a.victim_hash(0), b.victim_hash(0));
  cfg = base;
  cfg.attack.blto.iterations = 3;
  Experiment c(cfg);
  EXPECT_NE(a.trigger_hash(), c.trigger_hash());
  EXPECT_NE(a.poison_hash(), c.poison_hash());
  Experiment p(smoke(dir.path(), AttackKind::kPatch));
  EXPECT_NE(a.poison_hash(), p.poison_hash());
  EXPECT_EQ(a.run_id().rfind("blto-", 0), 0u);
}

TEST(Experiment, StagesReuseAndForce) {
  testkit::TempDir dir("stages");
  std::vector<std::string> lines;
  RunOptions opts;
  opts.log = [&](const std::string& l) { lines.push_back(l); };
  Experiment e(smoke(dir.path()), opts);
  auto vdirs = e.pretrain();
  ASSERT_EQ(vdirs.size(), 1u);
  for (const char* f : {"encoder.ckpt", "metrics.jsonl", "loss.jsonl", "summary.json", "stage.json"}) {
    EXPECT_TRUE(fs::exists(vdirs[0] / f)) << f;
  }
  EXPECT_TRUE(fs::exists(e.trigger_dir() / "generator.ckpt"));
  EXPECT_EQ(read_jsonl(vdirs[0] / "metrics.jsonl").size(), 2u);
  const auto ledger = slurp(vdirs[0] / "metrics.jsonl");
  const auto gen = slurp(e.trigger_dir() / "generator.ckpt");

  lines.clear();
  Experiment again(smoke(dir.path()), opts);
  again.pretrain();
  int reused = 0;
  for (const auto& l : lines) reused += l.find("reusing") != std::string::npos;
  EXPECT_EQ(reused, 3);  // trigger, poison and victim
  EXPECT_EQ(slurp(vdirs[0] / "metrics.jsonl"), ledger);

  RunOptions forced;
  forced.force = true;
  Experiment f(smoke(dir.path()), forced);
  f.optimize_trigger();
  f.pretrain();
  EXPECT_EQ(slurp(e.trigger_dir() / "generator.ckpt"), gen);
  EXPECT_EQ(slurp(vdirs[0] / "metrics.jsonl"), ledger);

  auto ev = again.evaluate(0, dir / "emb.tsv");
  EXPECT_TRUE(ev.at("matches_ledger").get<bool>());
  EXPECT_TRUE(fs::exists(dir / "emb.tsv"));
}

TEST(Experiment, RefusesMismatchedStage) {
  testkit::TempDir dir("mismatch");
  Experiment e(smoke(dir.path()));
  fs::create_directories(e.trigger_dir());
  std::ofstream(e.trigger_dir() / "stage.json") << R"({"stage":"trigger","hash":"deadbeef","complete":true})";
  EXPECT_THROW(e.optimize_trigger(), std::runtime_error);
  EXPECT_TRUE(fs::exists(e.trigger_dir() / "stage.json"));
}

TEST(Experiment, EvaluateNeedsPretrain) {
  testkit::TempDir dir("noeval");
  Experiment e(smoke(dir.path(), AttackKind::kPatch));
  EXPECT_THROW(e.evaluate(0), std::runtime_error);
}

TEST(Report, TwoRunsGiveCurvesAndSummary) {
  testkit::TempDir dir("report");
  Experiment a(smoke(dir / "runs"));
  Experiment b(smoke(dir / "runs", AttackKind::kPatch));
  auto da = a.pretrain();
  auto db = b.pretrain();
  auto result = write_report({dir / "runs", dir / "nothing"}, dir / "out");
  EXPECT_EQ(result.runs.size(), 2u);
  ASSERT_EQ(result.missing.size(), 1u);
  EXPECT_EQ(result.missing[0], dir / "nothing");
  EXPECT_TRUE(fs::exists(dir / "out" / "curves" / (da[0].filename().string() + ".csv")));
  EXPECT_TRUE(fs::exists(dir / "out" / "curves" / (db[0].filename().string() + ".csv")));
  EXPECT_TRUE(fs::exists(dir / "out" / "sn_asr.svg"));
  const auto summary = slurp(dir / "out" / "summary.csv");
  EXPECT_EQ(summary.rfind("attack,method,BA,ASR\n", 0), 0u);
  EXPECT_EQ(std::count(summary.begin(), summary.end(), '\n'), 3);
  EXPECT_EQ(load_run(da[0]).records.size(), 2u);
}

TEST(Report, EmptyInputWritesNothing) {
  testkit::TempDir dir("report_empty");
  fs::create_directories(dir / "empty");
  EXPECT_THROW(write_report({dir / "empty"}, dir / "out"), ArgumentError);
  EXPECT_FALSE(fs::exists(dir / "out"));
}
