#include "blto/runner.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "blto/common.hpp"

namespace blto {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kStageFile = "stage.json";

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

void write_json(const fs::path& file, const json& j) { write_text(file, j.dump(2) + "\n"); }

json read_json(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw std::runtime_error(file.string() + ": not valid JSON");
  return j;
}

// Append-only JSONL writer; each row is flushed so an aborted run leaves a
// readable partial ledger.
class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& file) : out_(file, std::ios::binary | std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write " + file.string());
  }
  void append(const json& row) {
    out_ << row.dump() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::string short_hash(const std::string& h) { return h.substr(0, 12); }

// Returns true when `dir` already holds a complete stage with hash `hash`.
// A stage directory recorded under a different hash is never touched.
bool stage_ready(const fs::path& dir, const std::string& hash, bool force) {
  const fs::path marker = dir / kStageFile;
  if (fs::exists(marker)) {
    const json j = read_json(marker);
    const std::string recorded = j.value("hash", std::string());
    if (recorded != hash) {
      throw std::runtime_error("refusing to resume " + dir.string() + ": recorded config hash " + recorded +
                               " does not match " + hash);
    }
    if (j.value("complete", false) && !force) return true;
  }
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  return false;
}

void mark_stage(const fs::path& dir, const std::string& stage, const std::string& hash, bool complete) {
  write_json(dir / kStageFile, {{"stage", stage}, {"hash", hash}, {"complete", complete}});
}

std::string format_record(const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "epoch %lld BA %.4f ASR %.4f S_N %.4f align %.4f unif %.4f",
                static_cast<long long>(r.epoch), r.ba, r.asr, r.s_n, r.alignment, r.uniformity);
  return buf;
}

LabeledImageSet load_split(const DatasetSpec& d, const fs::path& root, Split split) {
  if (d.kind == "cifar10") return load_cifar10(root, split);
  const int64_t per_class = split == Split::kTrain ? d.per_class : d.test_per_class;
  return make_synthetic_set(d.num_classes, per_class, d.image_size, derive_seed(d.seed, split == Split::kTrain ? 0 : 1),
                            split);
}

}  // namespace

std::vector<json> read_jsonl(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  std::vector<json> rows;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw std::runtime_error(file.string() + ":" + std::to_string(lineno) + ": bad JSON");
    rows.push_back(std::move(j));
  }
  return rows;
}

ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  d.train = load_split(cfg.dataset, cfg.data_root(), Split::kTrain);
  d.test = load_split(cfg.dataset, cfg.data_root(), Split::kTest);
  d.split = split_reference(d.train, cfg.attack.target_class,
                            reference_count_for_rate(cfg.attack.poisoning_rate, d.train.size()));
  if (cfg.extra) d.extra = load_split(*cfg.extra, cfg.extra->root, Split::kTrain);
  return d;
}

Experiment::Experiment(ExperimentConfig cfg, RunOptions opts) : cfg_(std::move(cfg)), opts_(std::move(opts)) {
  cfg_.validate();
  at::set_num_threads(static_cast<int>(cfg_.threads));
}

void Experiment::log(const std::string& line) const {
  if (opts_.log) opts_.log(line);
}

const ExperimentData& Experiment::data() {
  if (!data_) data_ = load_experiment_data(cfg_);
  return *data_;
}

std::string Experiment::run_id() const { return to_string(cfg_.attack.kind) + "-" + short_hash(cfg_.hash()); }

std::string Experiment::trigger_hash() const {
  const auto a = cfg_.attack.to_json();
  return json_hash({{"stage", "trigger"},
                    {"dataset", cfg_.dataset.to_json()},
                    {"seed", cfg_.seed},
                    {"threads", cfg_.threads},
                    {"target_class", a["target_class"]},
                    {"poisoning_rate", a["poisoning_rate"]},
                    {"epsilon", a["epsilon"]},
                    {"mode", a["mode"]},
                    {"blto", a["blto"]}});
}

std::string Experiment::poison_hash() const {
  json j{{"stage", "poison"},
         {"dataset", cfg_.dataset.to_json()},
         {"kind", to_string(cfg_.attack.kind)},
         {"target_class", cfg_.attack.target_class},
         {"poisoning_rate", cfg_.attack.poisoning_rate}};
  if (cfg_.attack.kind == AttackKind::kBlto) j["trigger"] = trigger_hash();
  if (cfg_.attack.kind == AttackKind::kPatch) j["patch"] = {{"size", cfg_.patch().size}, {"margin", cfg_.patch().margin}};
  return json_hash(j);
}

std::string Experiment::victim_hash(size_t i) const {
  json eval_trigger = "identity";
  const auto kind = cfg_.attack.kind;
  if (kind == AttackKind::kBlto || (kind == AttackKind::kNone && cfg_.attack.none_trigger == "blto")) {
    eval_trigger = trigger_hash();
  } else if (kind == AttackKind::kPatch) {
    eval_trigger = {{"patch", cfg_.patch().size}, {"margin", cfg_.patch().margin}};
  }
  return json_hash({{"stage", "victim"},
                    {"poison", poison_hash()},
                    {"victim", cfg_.victims.at(i).to_json()},
                    {"threads", cfg_.threads},
                    {"extra", cfg_.extra ? cfg_.extra->to_json() : json(nullptr)},
                    {"evaluation", cfg_.evaluation.to_json()},
                    {"eval_trigger", eval_trigger}});
}

fs::path Experiment::trigger_dir() const { return cfg_.output_dir / "trigger" / short_hash(trigger_hash()); }

fs::path Experiment::poison_dir() const { return cfg_.output_dir / "poison" / short_hash(poison_hash()); }

fs::path Experiment::victim_dir(size_t i) const {
  return cfg_.output_dir / "victim" /
         (to_string(cfg_.attack.kind) + "-" + to_string(cfg_.victims.at(i).method.method) + "-" +
          short_hash(victim_hash(i)));
}

fs::path Experiment::optimize_trigger() {
  const fs::path dir = trigger_dir();
  const std::string hash = trigger_hash();
  if (stage_ready(dir, hash, opts_.force)) {
    log("trigger: reusing " + dir.string());
    return dir;
  }
  mark_stage(dir, "trigger", hash, false);
  const BltoConfig bc = cfg_.blto();
  log("trigger: running BLTO (N=" + std::to_string(bc.iterations) + ", K=" + std::to_string(bc.inner_steps) +
      ", J=" + std::to_string(bc.outer_steps) + ") into " + dir.string());

  JsonlWriter trace(dir / "trace.jsonl");
  JsonlWriter timing(dir / "timing.jsonl");
  BltoHooks hooks;
  hooks.on_iteration = [&](const BltoIterationRecord& r) {
    trace.append(r.to_json());
    timing.append({{"iteration", r.iteration}, {"wall_clock_s", r.wall_clock_s}});
  };
  auto result = run_blto(data().split, bc, hooks);

  const std::string final_checksum = result.generator.checksum();
  save_generator(result.generator, dir / "generator.ckpt", {{"config_hash", hash}, {"checksum", final_checksum}});
  write_json(dir / "summary.json", {{"config_hash", hash},
                                    {"iterations", bc.iterations},
                                    {"inner_updates", result.trace.inner_updates},
                                    {"outer_updates", result.trace.outer_updates},
                                    {"reinit_count", result.trace.reinit_count},
                                    {"initial_generator_checksum", result.initial_generator_checksum},
                                    {"generator_checksum", final_checksum}});

  // Side-by-side preview of a few test images: clean, triggered, and the
  // trigger itself scaled so that eps maps to full intensity.
  const auto& test = data().test;
  const int64_t n = std::min<int64_t>(8, test.size());
  auto sample = test.select(torch::arange(n, torch::kInt64));
  auto triggered = sample;
  triggered.images = apply_trigger_8bit(result.generator, sample.images, bc.epsilon);
  auto diff = sample;
  diff.images = ((triggered.images - sample.images).abs() / bc.epsilon).clamp(0.0, 1.0);
  ImageDirHeader h;
  h.class_names = test.class_names;
  h.split = Split::kTest;
  h.config_hash = hash;
  export_image_dir(sample, dir / "preview" / "original", h);
  export_image_dir(triggered, dir / "preview" / "triggered", h);
  export_image_dir(diff, dir / "preview" / "difference", h);

  mark_stage(dir, "trigger", hash, true);
  log("trigger: done, generator checksum " + final_checksum);
  return dir;
}

fs::path Experiment::poison() {
  const fs::path dir = poison_dir();
  const std::string hash = poison_hash();
  const auto kind = cfg_.attack.kind;
  fs::path gen_dir;
  if (kind == AttackKind::kBlto) gen_dir = optimize_trigger();
  if (stage_ready(dir, hash, opts_.force)) {
    log("poison: reusing " + dir.string());
    return dir;
  }
  mark_stage(dir, "poison", hash, false);
  PoisonedSet ps;
  if (kind == AttackKind::kBlto) {
    ps = poison_with_generator(load_generator(gen_dir / "generator.ckpt"), data().split, cfg_.attack.epsilon);
  } else if (kind == AttackKind::kPatch) {
    ps = poison_with_patch(data().split, cfg_.patch());
  } else {
    ps = no_poison(data().split);
  }
  ps.manifest.poisoning_rate = cfg_.attack.poisoning_rate;
  export_poisoned(ps, dir, hash);
  mark_stage(dir, "poison", hash, true);
  log("poison: wrote " + std::to_string(ps.data.size()) + " images (" +
      std::to_string(ps.manifest.poisoned_indices.size()) + " poisoned) to " + dir.string());
  return dir;
}

std::function<torch::Tensor(const torch::Tensor&)> Experiment::trigger_fn() {
  const auto kind = cfg_.attack.kind;
  if (kind == AttackKind::kPatch) {
    const PatchSpec spec = cfg_.patch();
    return [spec](const torch::Tensor& x) { return paste_patch(x, spec); };
  }
  if (kind == AttackKind::kBlto || cfg_.attack.none_trigger == "blto") {
    auto gen = load_generator(optimize_trigger() / "generator.ckpt");
    const double eps = cfg_.attack.epsilon;
    return [gen, eps](const torch::Tensor& x) { return apply_trigger_8bit(gen, x, eps); };
  }
  return [](const torch::Tensor& x) { return x.clone(); };
}

MonitorData Experiment::monitor_data(const PoisonedSet& poisoned) {
  const auto& d = data();
  auto trig = trigger_fn();
  MonitorData md;
  md.memory = d.train;
  md.test = d.test;
  md.triggered_test = d.test;
  md.triggered_test.images = trig(d.test.images);
  auto nontarget = (d.train.labels != cfg_.attack.target_class).nonzero().view(-1);
  nontarget = nontarget.slice(0, 0, std::min<int64_t>(nontarget.size(0), cfg_.evaluation.triggered_train_count));
  md.triggered_train = trig(d.train.images.index_select(0, nontarget));
  if (d.split.reference_set.size() > 0) {
    md.backdoored = poisoned.data.images.index_select(0, d.split.reference_indices);
  }
  md.target = cfg_.attack.target_class;
  md.norm = cfg_.norm();
  md.knn = cfg_.evaluation.knn;
  md.view_pipeline = victim_pipeline(cfg_.dataset.image_size, false, cfg_.norm());
  md.view_seed = cfg_.evaluation.view_seed;
  md.centroid_cap = cfg_.evaluation.centroid_cap;
  return md;
}

std::vector<fs::path> Experiment::pretrain() {
  const fs::path pdir = poison();
  std::string recorded;
  // The victim sees the attacker only through the exported dataset.
  const PoisonedSet poisoned = import_poisoned(pdir, &recorded);
  if (recorded != poison_hash()) {
    throw std::runtime_error("poisoned export " + pdir.string() + " carries hash " + recorded + ", expected " +
                             poison_hash());
  }
  const size_t count = cfg_.victims.size();
  std::vector<fs::path> dirs(count);
  std::vector<size_t> todo;
  for (size_t i = 0; i < count; ++i) {
    dirs[i] = victim_dir(i);
    if (stage_ready(dirs[i], victim_hash(i), opts_.force)) {
      log("pretrain: reusing " + dirs[i].string());
    } else {
      todo.push_back(i);
    }
  }
  if (todo.empty()) return dirs;
  const MonitorData md = monitor_data(poisoned);

  std::mutex log_mutex;
  auto train_one = [&](size_t i) {
    const auto& vc = cfg_.victims[i];
    const fs::path dir = dirs[i];
    const std::string hash = victim_hash(i);
    const std::string id = dir.filename().string();
    mark_stage(dir, "victim", hash, false);
    LabeledImageSet train_set = poisoned.data;
    if (vc.mix_ratio < 1.0) train_set = mix_datasets(poisoned.data, *data().extra, vc.mix_ratio, vc.seed);

    JsonlWriter metrics(dir / "metrics.jsonl");
    JsonlWriter losses(dir / "loss.jsonl");
    VictimHooks hooks;
    hooks.monitor = [&](const EncoderStack& s, int64_t epoch) { return monitor_epoch(s, md, epoch); };
    hooks.on_epoch = [&](int64_t epoch, double loss, const MetricsRecord* r) {
      losses.append({{"epoch", epoch}, {"loss", loss}});
      json row = r->to_json();
      row["run_id"] = id;
      row["config_hash"] = hash;
      metrics.append(row);
      std::lock_guard<std::mutex> lock(log_mutex);
      log(id + ": " + format_record(*r) + " loss " + std::to_string(loss));
    };
    VictimResult result;
    try {
      result = train_victim(train_set, vc, cfg_.norm(), hooks);
    } catch (const DivergenceError& e) {
      write_json(dir / "divergence.json", json::parse(e.record(), nullptr, false));
      throw;
    }
    save_encoder(result.stack, dir / "encoder.ckpt", {{"config_hash", hash}, {"run_id", id}});
    const MetricsRecord& last = result.records.back();
    write_json(dir / "summary.json", {{"run_id", id},
                                      {"config_hash", hash},
                                      {"attack", to_string(cfg_.attack.kind)},
                                      {"method", to_string(vc.method.method)},
                                      {"epochs", vc.epochs},
                                      {"final", last.to_json()}});
    mark_stage(dir, "victim", hash, true);
  };

  const size_t workers = std::min<size_t>(static_cast<size_t>(cfg_.parallelism), todo.size());
  if (workers <= 1) {
    for (size_t i : todo) train_one(i);
    return dirs;
  }
  std::atomic<size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      at::set_num_threads(static_cast<int>(cfg_.threads));
      try {
        for (size_t k = next++; k < todo.size(); k = next++) train_one(todo[k]);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return dirs;
}

json Experiment::evaluate(size_t victim_index, const std::optional<fs::path>& embeddings) {
  const fs::path dir = victim_dir(victim_index);
  const fs::path marker = dir / kStageFile;
  if (!fs::exists(marker) || !read_json(marker).value("complete", false)) {
    throw std::runtime_error("no completed victim run in " + dir.string() + "; run pretrain first");
  }
  const std::string hash = victim_hash(victim_index);
  if (read_json(marker).value("hash", std::string()) != hash) {
    throw std::runtime_error("refusing to evaluate " + dir.string() + ": config hash mismatch");
  }
  const PoisonedSet poisoned = import_poisoned(poison_dir());
  const MonitorData md = monitor_data(poisoned);
  const EncoderStack stack = load_encoder(dir / "encoder.ckpt");
  const auto ledger = read_jsonl(dir / "metrics.jsonl");
  const int64_t epoch = ledger.empty() ? 0 : ledger.back().value("epoch", int64_t{0});
  const MetricsRecord rec = monitor_epoch(stack, md, epoch);
  json out = rec.to_json();
  out["run_id"] = dir.filename().string();
  out["config_hash"] = hash;
  out["matches_ledger"] = !ledger.empty() && MetricsRecord::from_json(ledger.back()).to_json() == rec.to_json();
  write_json(dir / "eval.json", out);
  if (embeddings) {
    std::vector<bool> flags(poisoned.data.size(), false);
    for (auto i : poisoned.manifest.poisoned_indices) flags[i] = true;
    export_embeddings(stack, cfg_.norm(), poisoned.data, flags, md.triggered_test, *embeddings);
  }
  log("evaluate: " + format_record(rec));
  return out;
}

fs::path run_ablation(const ExperimentConfig& cfg, const std::vector<AblationMode>& modes, const RunOptions& opts) {
  if (modes.empty()) throw ArgumentError("no ablation modes given");
  std::ostringstream csv;
  csv << "mode,method,BA,ASR\n";
  for (auto mode : modes) {
    ExperimentConfig c = cfg;
    c.attack.kind = AttackKind::kBlto;
    c.attack.mode = mode;
    Experiment exp(c, opts);
    const auto dirs = exp.pretrain();
    for (size_t i = 0; i < dirs.size(); ++i) {
      const json s = read_json(dirs[i] / "summary.json");
      char line[160];
      std::snprintf(line, sizeof line, "%s,%s,%.6f,%.6f\n", to_string(mode).c_str(),
                    s.at("method").get<std::string>().c_str(), s.at("final").at("BA").get<double>(),
                    s.at("final").at("ASR").get<double>());
      csv << line;
    }
  }
  fs::create_directories(cfg.output_dir);
  const fs::path out = cfg.output_dir / "ablation.csv";
  const fs::path tmp = cfg.output_dir / "ablation.csv.tmp";
  write_text(tmp, csv.str());
  fs::rename(tmp, out);
  return out;
}

}  // namespace blto
