#include "blto/config.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "blto/common.hpp"

namespace blto {

namespace {

using nlohmann::json;

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown fields.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }

  const json* raw(const std::string& key) {
    used_.insert(key);
    return has(key) ? &j_.at(key) : nullptr;
  }

  int64_t integer(const std::string& key, int64_t def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number_integer()) throw ConfigError(at(key), "expected an integer");
    return v->get<int64_t>();
  }

  uint64_t unsigned_integer(const std::string& key, uint64_t def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<int64_t>() < 0)) {
      throw ConfigError(at(key), "expected a non-negative integer");
    }
    return v->get<uint64_t>();
  }

  double real(const std::string& key, double def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_number()) throw ConfigError(at(key), "expected a number");
    return v->get<double>();
  }

  bool boolean(const std::string& key, bool def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_boolean()) throw ConfigError(at(key), "expected true or false");
    return v->get<bool>();
  }

  std::string string(const std::string& key, const std::string& def) {
    const json* v = raw(key);
    if (!v) return def;
    if (!v->is_string()) throw ConfigError(at(key), "expected a string");
    return v->get<std::string>();
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(at(key), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Fn>
auto with_path(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ArgumentError& e) {
    throw ConfigError(path, e.what());
  }
}

DatasetSpec parse_dataset(const json& j, const std::string& path) {
  Reader r(j, path);
  DatasetSpec d;
  d.kind = r.string("kind", d.kind);
  d.root = r.string("root", d.root);
  d.num_classes = r.integer("num_classes", d.num_classes);
  d.per_class = r.integer("per_class", d.per_class);
  d.test_per_class = r.integer("test_per_class", d.test_per_class);
  d.image_size = r.integer("image_size", d.image_size);
  d.seed = r.unsigned_integer("seed", d.seed);
  r.finish();
  if (d.kind == "cifar10") {
    d.num_classes = 10;
    d.image_size = 32;
  }
  return d;
}

ClObjectiveConfig parse_objective(Reader& r, ClObjectiveConfig c, const std::string& path) {
  c.method = with_path(path + ".method", [&] { return cl_method_from_string(r.string("method", to_string(c.method))); });
  c.temperature = r.real("temperature", c.temperature);
  c.ema_momentum = r.real("ema_momentum", c.ema_momentum);
  c.simsiam_halved = r.boolean("simsiam_halved", c.simsiam_halved);
  return c;
}

BltoConfig parse_blto(const json& j, const std::string& path) {
  Reader r(j, path);
  BltoConfig c;
  c.iterations = r.integer("N", c.iterations);
  c.inner_steps = r.integer("K", c.inner_steps);
  c.outer_steps = r.integer("J", c.outer_steps);
  c.inner_lr = r.real("inner_lr", c.inner_lr);
  c.inner_momentum = r.real("inner_momentum", c.inner_momentum);
  c.inner_weight_decay = r.real("inner_weight_decay", c.inner_weight_decay);
  c.outer_lr = r.real("outer_lr", c.outer_lr);
  c.reinit_every = r.integer("reinit_every", c.reinit_every);
  c.batch_size = r.integer("batch_size", c.batch_size);
  c.surrogate_arch = r.string("surrogate_arch", c.surrogate_arch);
  c.embed_dim = r.integer("embed_dim", c.embed_dim);
  if (const json* m = r.raw("inner_method")) {
    Reader mr(*m, r.at("inner_method"));
    c.inner_method = parse_objective(mr, c.inner_method, r.at("inner_method"));
    mr.finish();
  }
  if (const json* g = r.raw("generator")) {
    Reader gr(*g, r.at("generator"));
    c.generator.base_channels = gr.integer("base_channels", c.generator.base_channels);
    c.generator.residual_blocks = gr.integer("residual_blocks", c.generator.residual_blocks);
    c.generator.output_init_scale = gr.real("output_init_scale", c.generator.output_init_scale);
    gr.finish();
  }
  r.finish();
  return c;
}

AttackSpec parse_attack(const json& j) {
  Reader r(j, "attack");
  AttackSpec a;
  a.kind = with_path("attack.kind", [&] { return attack_kind_from_string(r.string("kind", to_string(a.kind))); });
  a.target_class = r.integer("target_class", a.target_class);
  a.poisoning_rate = r.real("poisoning_rate", a.poisoning_rate);
  a.epsilon = r.real("epsilon", a.epsilon);
  a.mode = with_path("attack.mode", [&] { return ablation_mode_from_string(r.string("mode", to_string(a.mode))); });
  a.none_trigger = r.string("none_trigger", a.none_trigger);
  if (const json* b = r.raw("blto")) a.blto = parse_blto(*b, "attack.blto");
  if (const json* p = r.raw("patch")) {
    Reader pr(*p, "attack.patch");
    a.patch.size = pr.integer("size", -1);
    a.patch.margin = pr.integer("margin", 0);
    pr.finish();
  }
  r.finish();
  return a;
}

VictimConfig parse_victim(const json& j, const std::string& path) {
  Reader r(j, path);
  VictimConfig v;
  v.method = parse_objective(r, v.method, path);
  v.arch = r.string("arch", v.arch);
  v.embed_dim = r.integer("embed_dim", v.embed_dim);
  v.epochs = r.integer("epochs", v.epochs);
  v.batch_size = r.integer("batch_size", v.batch_size);
  v.base_lr = r.real("base_lr", v.base_lr);
  v.final_lr = r.real("final_lr", v.final_lr);
  v.momentum = r.real("momentum", v.momentum);
  v.weight_decay = r.real("weight_decay", v.weight_decay);
  v.include_blur = r.boolean("include_blur", v.include_blur);
  v.mix_ratio = r.real("mix_ratio", v.mix_ratio);
  r.finish();
  return v;
}

EvaluationSpec parse_evaluation(const json& j) {
  Reader r(j, "evaluation");
  EvaluationSpec e;
  e.knn.k = r.integer("knn_k", e.knn.k);
  e.knn.temperature = r.real("knn_temperature", e.knn.temperature);
  e.centroid_cap = r.integer("centroid_cap", e.centroid_cap);
  e.triggered_train_count = r.integer("triggered_train_count", e.triggered_train_count);
  e.view_seed = r.unsigned_integer("view_seed", e.view_seed);
  r.finish();
  return e;
}

void require(bool ok, const std::string& path, const std::string& what) {
  if (!ok) throw ConfigError(path, what);
}

void validate_dataset(const DatasetSpec& d, const std::string& path, const std::filesystem::path& root) {
  require(d.kind == "synthetic" || d.kind == "cifar10", path + ".kind", "expected synthetic or cifar10");
  if (d.kind == "synthetic") {
    require(d.num_classes >= 2, path + ".num_classes", "must be >= 2");
    require(d.per_class >= 2, path + ".per_class", "must be >= 2");
    require(d.test_per_class >= 1, path + ".test_per_class", "must be >= 1");
    require(d.image_size >= 8 && d.image_size % 4 == 0, path + ".image_size", "must be a multiple of 4 and >= 8");
  } else {
    require(!root.empty(), path + ".root", std::string("not set and ") + kDataRootEnv + " is empty");
    require(std::filesystem::is_directory(root), path + ".root", "directory " + root.string() + " does not exist");
  }
}

}  // namespace

std::string json_hash(const nlohmann::json& value) { return sha1_hex(value.dump()); }

nlohmann::json DatasetSpec::to_json() const {
  json j{{"kind", kind}, {"image_size", image_size}, {"num_classes", num_classes}};
  if (kind == "synthetic") {
    j["per_class"] = per_class;
    j["test_per_class"] = test_per_class;
    j["seed"] = seed;
  } else {
    j["root"] = root;
  }
  return j;
}

nlohmann::json AttackSpec::to_json() const {
  auto b = blto.to_json();
  b.erase("epsilon");
  b.erase("seed");
  b.erase("norm");
  return {{"kind", to_string(kind)},
          {"target_class", target_class},
          {"poisoning_rate", poisoning_rate},
          {"epsilon", epsilon},
          {"mode", to_string(mode)},
          {"none_trigger", none_trigger},
          {"blto", b},
          {"patch", {{"size", patch.size}, {"margin", patch.margin}}}};
}

nlohmann::json EvaluationSpec::to_json() const {
  return {{"knn_k", knn.k},
          {"knn_temperature", knn.temperature},
          {"centroid_cap", centroid_cap},
          {"triggered_train_count", triggered_train_count},
          {"view_seed", view_seed}};
}

nlohmann::json ExperimentConfig::to_json() const {
  json victims_json = json::array();
  for (const auto& v : victims) {
    auto vj = v.to_json();
    vj.erase("seed");
    victims_json.push_back(vj);
  }
  return {{"seed", seed},
          {"output_dir", output_dir.generic_string()},
          {"threads", threads},
          {"parallelism", parallelism},
          {"dataset", dataset.to_json()},
          {"extra", extra ? extra->to_json() : json(nullptr)},
          {"attack", attack.to_json()},
          {"victim", victims_json},
          {"evaluation", evaluation.to_json()}};
}

std::string ExperimentConfig::hash() const { return json_hash(to_json()); }

NormStats ExperimentConfig::norm() const { return dataset.kind == "cifar10" ? cifar10_norm() : synthetic_norm(); }

BltoConfig ExperimentConfig::blto() const {
  BltoConfig c = ablation_mode(attack.blto, attack.mode);
  c.epsilon = attack.epsilon;
  c.seed = seed;
  c.norm = norm();
  return c;
}

PatchSpec ExperimentConfig::patch() const {
  if (attack.patch.size >= 0) return attack.patch;
  PatchSpec p = default_patch_for(dataset.image_size);
  p.margin = attack.patch.margin;
  return p;
}

std::filesystem::path ExperimentConfig::data_root() const {
  if (!dataset.root.empty()) return dataset.root;
  const char* env = std::getenv(kDataRootEnv);
  return env ? std::filesystem::path(env) : std::filesystem::path();
}

void ExperimentConfig::validate() const {
  require(threads >= 1, "threads", "must be >= 1");
  require(parallelism >= 1, "parallelism", "must be >= 1");
  require(!output_dir.empty(), "output_dir", "must not be empty");
  validate_dataset(dataset, "dataset", data_root());
  if (extra) {
    validate_dataset(*extra, "extra", extra->root);
    require(extra->image_size == dataset.image_size, "extra.image_size", "must match dataset.image_size");
  }

  require(attack.target_class >= 0 && attack.target_class < dataset.num_classes, "attack.target_class",
          "must lie in [0, " + std::to_string(dataset.num_classes) + ")");
  require(attack.poisoning_rate >= 0.0 && attack.poisoning_rate <= 1.0, "attack.poisoning_rate",
          "must lie in [0, 1]");
  require(attack.epsilon > 0.0 && attack.epsilon <= 1.0, "attack.epsilon", "must lie in (0, 1]");
  require(attack.none_trigger == "blto" || attack.none_trigger == "identity", "attack.none_trigger",
          "expected blto or identity");
  const int64_t train_size = dataset.kind == "cifar10" ? 50000 : dataset.num_classes * dataset.per_class;
  const int64_t class_size = dataset.kind == "cifar10" ? 5000 : dataset.per_class;
  require(reference_count_for_rate(attack.poisoning_rate, train_size) <= class_size, "attack.poisoning_rate",
          "needs more target-class images than the dataset holds");
  const auto& b = attack.blto;
  require(b.iterations >= 0, "attack.blto.N", "must be >= 0");
  require(b.inner_steps >= 0, "attack.blto.K", "must be >= 0");
  require(b.outer_steps >= 0, "attack.blto.J", "must be >= 0");
  require(b.inner_lr > 0.0, "attack.blto.inner_lr", "must be > 0");
  require(b.outer_lr > 0.0, "attack.blto.outer_lr", "must be > 0");
  require(b.inner_momentum >= 0.0 && b.inner_momentum < 1.0, "attack.blto.inner_momentum", "must lie in [0, 1)");
  require(b.inner_weight_decay >= 0.0, "attack.blto.inner_weight_decay", "must be >= 0");
  require(b.reinit_every >= 0, "attack.blto.reinit_every", "must be >= 0");
  require(b.batch_size >= 2, "attack.blto.batch_size", "must be >= 2");
  require(b.embed_dim >= 8, "attack.blto.embed_dim", "must be >= 8");
  require(b.surrogate_arch == "tiny-conv" || b.surrogate_arch == "resnet18-style", "attack.blto.surrogate_arch",
          "expected tiny-conv or resnet18-style");
  require(b.generator.base_channels >= 1, "attack.blto.generator.base_channels", "must be >= 1");
  require(b.generator.residual_blocks >= 0, "attack.blto.generator.residual_blocks", "must be >= 0");
  with_path("attack.blto.inner_method", [&] { b.inner_method.validate(); });
  const PatchSpec p = patch();
  require(p.margin >= 0, "attack.patch.margin", "must be >= 0");
  require(p.size + p.margin <= dataset.image_size, "attack.patch.size", "patch does not fit inside the image");

  require(!victims.empty(), "victim", "at least one victim is required");
  for (size_t i = 0; i < victims.size(); ++i) {
    const std::string at = victims.size() == 1 ? std::string("victim") : "victim[" + std::to_string(i) + "]";
    const auto& v = victims[i];
    require(v.epochs >= 1, at + ".epochs", "must be >= 1");
    require(v.batch_size >= 2, at + ".batch_size", "must be >= 2");
    require(v.embed_dim >= 8, at + ".embed_dim", "must be >= 8");
    require(v.arch == "tiny-conv" || v.arch == "resnet18-style", at + ".arch", "expected tiny-conv or resnet18-style");
    require(v.base_lr > 0.0, at + ".base_lr", "must be > 0");
    require(v.final_lr >= 0.0, at + ".final_lr", "must be >= 0");
    require(v.momentum >= 0.0 && v.momentum < 1.0, at + ".momentum", "must lie in [0, 1)");
    require(v.weight_decay >= 0.0, at + ".weight_decay", "must be >= 0");
    require(v.mix_ratio >= 0.0 && v.mix_ratio <= 1.0, at + ".mix_ratio", "must lie in [0, 1]");
    require(v.mix_ratio == 1.0 || extra.has_value(), at + ".mix_ratio", "mixing needs an `extra` dataset");
    with_path(at, [&] { v.method.validate(); });
  }

  require(evaluation.knn.k >= 1, "evaluation.knn_k", "must be >= 1");
  require(evaluation.knn.temperature > 0.0, "evaluation.knn_temperature", "must be > 0");
  require(evaluation.centroid_cap >= 1, "evaluation.centroid_cap", "must be >= 1");
  require(evaluation.triggered_train_count >= 1, "evaluation.triggered_train_count", "must be >= 1");
}

ExperimentConfig parse_config(const nlohmann::json& doc) {
  Reader r(doc, "");
  ExperimentConfig c;
  c.seed = r.unsigned_integer("seed", c.seed);
  c.output_dir = r.string("output_dir", c.output_dir.string());
  c.threads = r.integer("threads", c.threads);
  c.parallelism = r.integer("parallelism", c.parallelism);
  if (const json* d = r.raw("dataset")) c.dataset = parse_dataset(*d, "dataset");
  if (const json* e = r.raw("extra")) c.extra = parse_dataset(*e, "extra");
  if (const json* a = r.raw("attack")) c.attack = parse_attack(*a);
  if (const json* v = r.raw("victim")) {
    c.victims.clear();
    if (v->is_array()) {
      for (size_t i = 0; i < v->size(); ++i) c.victims.push_back(parse_victim(v->at(i), "victim[" + std::to_string(i) + "]"));
    } else {
      c.victims.push_back(parse_victim(*v, "victim"));
    }
  }
  for (auto& v : c.victims) v.seed = c.seed;
  if (const json* e = r.raw("evaluation")) c.evaluation = parse_evaluation(*e);
  r.finish();
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(assignment, "override must look like key.path=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    if (p.empty()) throw ConfigError(key, "empty path component");
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      char* end = nullptr;
      const long idx = std::strtol(p.c_str(), &end, 10);
      if (*end != '\0' || idx < 0 || static_cast<size_t>(idx) >= node->size()) {
        throw ConfigError(key, "index '" + p + "' out of range");
      }
      node = &(*node)[static_cast<size_t>(idx)];
    } else {
      if (node->is_null()) *node = json::object();
      if (!node->is_object()) throw ConfigError(key, "'" + p + "' is below a non-object value");
      node = &(*node)[p];
    }
    if (last) *node = value;
  }
}

ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  std::ifstream in(file);
  if (!in) throw ConfigError(file.string(), "cannot open config file");
  json doc = json::parse(in, nullptr, false, true);
  if (doc.is_discarded()) throw ConfigError(file.string(), "not valid JSON");
  for (const auto& o : overrides) apply_override(doc, o);
  auto cfg = parse_config(doc);
  cfg.validate();
  return cfg;
}

}  // namespace blto
