#include "blto/models.hpp"

#include <mutex>

#include "blto/checkpoint.hpp"
#include "blto/common.hpp"

namespace blto {

namespace nn = torch::nn;

namespace {

nn::Conv2d conv(int64_t in, int64_t out, int64_t k, int64_t stride = 1, int64_t pad = 0, bool bias = false) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(bias));
}

class BasicBlockImpl : public nn::Cloneable<BasicBlockImpl> {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) : in_(in), out_(out), stride_(stride) { reset(); }

  void reset() override {
    body = register_module("body", nn::Sequential(conv(in_, out_, 3, stride_, 1), nn::BatchNorm2d(out_),
                                                  nn::ReLU(), conv(out_, out_, 3, 1, 1), nn::BatchNorm2d(out_)));
    if (stride_ != 1 || in_ != out_) {
      shortcut = register_module("shortcut", nn::Sequential(conv(in_, out_, 1, stride_), nn::BatchNorm2d(out_)));
    } else {
      shortcut = nullptr;
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto skip = shortcut ? shortcut->forward(x) : x;
    return torch::relu(body->forward(x) + skip);
  }

  nn::Sequential body{nullptr};
  nn::Sequential shortcut{nullptr};

 private:
  int64_t in_, out_, stride_;
};
TORCH_MODULE(BasicBlock);

class ResidualBlockImpl : public nn::Cloneable<ResidualBlockImpl> {
 public:
  explicit ResidualBlockImpl(int64_t ch) : ch_(ch) { reset(); }

  void reset() override {
    body = register_module(
        "body", nn::Sequential(nn::ReflectionPad2d(1), conv(ch_, ch_, 3), nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch_).affine(true)),
                               nn::ReLU(), nn::ReflectionPad2d(1), conv(ch_, ch_, 3),
                               nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch_).affine(true))));
  }

  torch::Tensor forward(const torch::Tensor& x) { return x + body->forward(x); }

  nn::Sequential body{nullptr};

 private:
  int64_t ch_;
};
TORCH_MODULE(ResidualBlock);

nn::Sequential tiny_conv(int64_t d) {
  const int64_t c1 = std::max<int64_t>(d / 4, 1), c2 = std::max<int64_t>(d / 2, 1);
  return nn::Sequential(conv(3, c1, 3, 1, 1), nn::BatchNorm2d(c1), nn::ReLU(),     //
                        conv(c1, c2, 3, 2, 1), nn::BatchNorm2d(c2), nn::ReLU(),    //
                        conv(c2, d, 3, 2, 1), nn::BatchNorm2d(d), nn::ReLU(),      //
                        conv(d, d, 3, 2, 1), nn::BatchNorm2d(d), nn::ReLU(),       //
                        nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)), nn::Flatten());
}

nn::Sequential resnet18_style(int64_t d) {
  if (d % 8 != 0) throw ArgumentError("resnet18-style embed_dim must be divisible by 8");
  const int64_t w0 = d / 8;
  nn::Sequential s(conv(3, w0, 3, 1, 1), nn::BatchNorm2d(w0), nn::ReLU());
  int64_t in = w0;
  const int64_t widths[4] = {d / 8, d / 4, d / 2, d};
  for (int stage = 0; stage < 4; ++stage) {
    const int64_t stride = stage == 0 ? 1 : 2;
    s->push_back(BasicBlock(in, widths[stage], stride));
    s->push_back(BasicBlock(widths[stage], widths[stage], 1));
    in = widths[stage];
  }
  s->push_back(nn::AdaptiveAvgPool2d(nn::AdaptiveAvgPool2dOptions(1)));
  s->push_back(nn::Flatten());
  return s;
}

nn::Sequential mlp_head(int64_t in, int64_t hidden, int64_t out) {
  return nn::Sequential(nn::Linear(nn::LinearOptions(in, hidden).bias(false)), nn::BatchNorm1d(hidden), nn::ReLU(),
                        nn::Linear(hidden, out));
}

template <typename ModuleHolder>
void collect_state(const std::string& prefix, const ModuleHolder& m, NamedTensors& out) {
  for (const auto& item : m->named_parameters()) out.emplace_back(prefix + item.key(), item.value());
  for (const auto& item : m->named_buffers()) out.emplace_back(prefix + item.key(), item.value());
}

void load_into(const NamedTensors& current, const NamedTensors& state, const std::string& what) {
  if (current.size() != state.size()) {
    throw ArgumentError(what + ": expected " + std::to_string(current.size()) + " tensors, got " +
                        std::to_string(state.size()));
  }
  torch::NoGradGuard guard;
  for (size_t i = 0; i < current.size(); ++i) {
    if (current[i].first != state[i].first || !current[i].second.sizes().equals(state[i].second.sizes())) {
      throw ArgumentError(what + ": tensor mismatch at '" + current[i].first + "'");
    }
    current[i].second.copy_(state[i].second);
  }
}

std::vector<torch::Tensor> values(const NamedTensors& named) {
  std::vector<torch::Tensor> out;
  for (const auto& [_, t] : named) out.push_back(t);
  return out;
}

nn::Sequential clone_seq(const nn::Sequential& s) {
  return nn::Sequential(std::dynamic_pointer_cast<nn::SequentialImpl>(s->clone()));
}

}  // namespace

// ---------------------------------------------------------------------------
// EncoderStack

std::vector<torch::Tensor> EncoderStack::encoder_parameters() const { return encoder->parameters(); }

std::vector<torch::Tensor> EncoderStack::head_parameters() const {
  auto out = projector->parameters();
  for (auto& p : predictor->parameters()) out.push_back(p);
  return out;
}

std::vector<torch::Tensor> EncoderStack::parameters() const {
  auto out = encoder_parameters();
  for (auto& p : head_parameters()) out.push_back(p);
  return out;
}

NamedTensors EncoderStack::named_state() const {
  NamedTensors out;
  collect_state("encoder.", encoder, out);
  collect_state("projector.", projector, out);
  collect_state("predictor.", predictor, out);
  return out;
}

void EncoderStack::load_named_state(const NamedTensors& state) { load_into(named_state(), state, "encoder stack"); }

std::string EncoderStack::checksum() const { return tensor_checksum(values(named_state())); }

EncoderStack EncoderStack::clone() const {
  EncoderStack s;
  s.arch_tag = arch_tag;
  s.embed_dim = embed_dim;
  s.encoder = clone_seq(encoder);
  s.projector = clone_seq(projector);
  s.predictor = clone_seq(predictor);
  return s;
}

void EncoderStack::train(bool on) {
  encoder->train(on);
  projector->train(on);
  predictor->train(on);
}

void EncoderStack::to(torch::Dtype dtype) {
  encoder->to(dtype);
  projector->to(dtype);
  predictor->to(dtype);
}

const std::vector<std::string>& supported_archs() {
  static const std::vector<std::string> archs = {"tiny-conv", "resnet18-style"};
  return archs;
}

EncoderStack init_encoder(const std::string& arch_tag, int64_t embed_dim, uint64_t seed) {
  if (embed_dim < 4) throw ArgumentError("embed_dim must be >= 4");
  std::lock_guard<std::mutex> lock(init_mutex());
  torch::manual_seed(seed);
  EncoderStack s;
  s.arch_tag = arch_tag;
  s.embed_dim = embed_dim;
  if (arch_tag == "tiny-conv") {
    s.encoder = tiny_conv(embed_dim);
  } else if (arch_tag == "resnet18-style") {
    s.encoder = resnet18_style(embed_dim);
  } else {
    throw ArgumentError("unknown arch_tag '" + arch_tag + "'");
  }
  s.projector = mlp_head(embed_dim, embed_dim, embed_dim);
  s.predictor = mlp_head(embed_dim, std::max<int64_t>(embed_dim / 4, 4), embed_dim);
  return s;
}

torch::Tensor encode(const EncoderStack& stack, const torch::Tensor& batch) {
  if (batch.dim() != 4 || batch.size(1) != 3) {
    throw ArgumentError("encode expects a [B, 3, H, W] batch");
  }
  if (batch.size(2) < 8 || batch.size(3) < 8) throw ArgumentError("encode expects H, W >= 8");
  return stack.encoder.ptr()->forward(batch);
}

Projection project_and_predict(const EncoderStack& stack, const torch::Tensor& embeddings) {
  auto proj = stack.projector.ptr()->forward(embeddings);
  return {proj.detach(), stack.predictor.ptr()->forward(proj)};
}

EncoderStack reinit_encoder(const EncoderStack& stack, uint64_t seed) {
  return init_encoder(stack.arch_tag, stack.embed_dim, seed);
}

// ---------------------------------------------------------------------------
// Generator

TriggerGeneratorImpl::TriggerGeneratorImpl(GeneratorConfig cfg) : cfg_(cfg) { reset(); }

void TriggerGeneratorImpl::reset() {
  const int64_t c = cfg_.base_channels;
  if (c < 1 || cfg_.residual_blocks < 0) throw ArgumentError("invalid generator config");
  auto in = [](int64_t ch) { return nn::InstanceNorm2d(nn::InstanceNorm2dOptions(ch).affine(true)); };
  nn::Sequential body(nn::ReflectionPad2d(3), conv(3, c, 7), in(c), nn::ReLU(),  //
                      conv(c, 2 * c, 3, 2, 1), in(2 * c), nn::ReLU(),              //
                      conv(2 * c, 4 * c, 3, 2, 1), in(4 * c), nn::ReLU());
  for (int64_t i = 0; i < cfg_.residual_blocks; ++i) body->push_back(ResidualBlock(4 * c));
  auto up = [](int64_t i, int64_t o) {
    return nn::ConvTranspose2d(nn::ConvTranspose2dOptions(i, o, 3).stride(2).padding(1).output_padding(1).bias(false));
  };
  body->push_back(up(4 * c, 2 * c));
  body->push_back(in(2 * c));
  body->push_back(nn::ReLU());
  body->push_back(up(2 * c, c));
  body->push_back(in(c));
  body->push_back(nn::ReLU());
  body_ = register_module("body", body);
  out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(c, 3, 1)));
  torch::NoGradGuard guard;
  out_->weight.mul_(cfg_.output_init_scale);
  out_->bias.mul_(cfg_.output_init_scale);
}

torch::Tensor TriggerGeneratorImpl::forward(const torch::Tensor& x, double amplitude) {
  auto residual = out_->forward(body_->forward(x * 2.0 - 1.0));
  return (x + amplitude * torch::tanh(residual)).clamp(0.0, 1.0);
}

std::vector<torch::Tensor> GeneratorParams::parameters() const { return net->parameters(); }

NamedTensors GeneratorParams::named_state() const {
  NamedTensors out;
  collect_state("generator.", net, out);
  return out;
}

void GeneratorParams::load_named_state(const NamedTensors& state) { load_into(named_state(), state, "generator"); }

std::string GeneratorParams::checksum() const { return tensor_checksum(values(named_state())); }

GeneratorParams GeneratorParams::clone() const {
  GeneratorParams g;
  g.net = TriggerGenerator(std::dynamic_pointer_cast<TriggerGeneratorImpl>(net->clone()));
  g.epsilon = epsilon;
  return g;
}

GeneratorParams init_generator(const GeneratorConfig& cfg, double epsilon, uint64_t seed) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ArgumentError("epsilon must lie in [0, 1]");
  std::lock_guard<std::mutex> lock(init_mutex());
  torch::manual_seed(seed);
  GeneratorParams g;
  g.net = TriggerGenerator(cfg);
  g.epsilon = epsilon;
  return g;
}

torch::Tensor generate(const GeneratorParams& params, const torch::Tensor& batch) {
  if (batch.dim() != 4 || batch.size(1) != 3) throw ArgumentError("generate expects a [B, 3, H, W] batch");
  if (batch.size(2) % 4 != 0 || batch.size(3) % 4 != 0 || batch.size(2) < 8 || batch.size(3) < 8) {
    throw ArgumentError("generator input H and W must be multiples of 4 and at least 8");
  }
  return params.net.ptr()->forward(batch, params.epsilon);
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_encoder(const EncoderStack& stack, const std::filesystem::path& file, const nlohmann::json& meta) {
  checkpoint::Container c;
  c.kind = "encoder";
  c.meta = meta;
  c.meta["arch_tag"] = stack.arch_tag;
  c.meta["embed_dim"] = stack.embed_dim;
  c.tensors = stack.named_state();
  checkpoint::write(c, file);
}

EncoderStack load_encoder(const std::filesystem::path& file, nlohmann::json* meta) {
  auto c = checkpoint::read(file);
  if (c.kind != "encoder") throw IngestionError(file.string(), "checkpoint kind is '" + c.kind + "', not encoder");
  auto stack = init_encoder(c.meta.at("arch_tag").get<std::string>(), c.meta.at("embed_dim").get<int64_t>(), 0);
  stack.load_named_state(c.tensors);
  if (meta != nullptr) *meta = c.meta;
  return stack;
}

void save_generator(const GeneratorParams& gen, const std::filesystem::path& file, const nlohmann::json& meta) {
  checkpoint::Container c;
  c.kind = "generator";
  c.meta = meta;
  const auto& cfg = gen.net->config();
  c.meta["base_channels"] = cfg.base_channels;
  c.meta["residual_blocks"] = cfg.residual_blocks;
  c.meta["output_init_scale"] = cfg.output_init_scale;
  c.meta["epsilon"] = gen.epsilon;
  c.tensors = gen.named_state();
  checkpoint::write(c, file);
}

GeneratorParams load_generator(const std::filesystem::path& file, nlohmann::json* meta) {
  auto c = checkpoint::read(file);
  if (c.kind != "generator") {
    throw IngestionError(file.string(), "checkpoint kind is '" + c.kind + "', not generator");
  }
  GeneratorConfig cfg;
  cfg.base_channels = c.meta.at("base_channels").get<int64_t>();
  cfg.residual_blocks = c.meta.at("residual_blocks").get<int64_t>();
  cfg.output_init_scale = c.meta.at("output_init_scale").get<double>();
  auto gen = init_generator(cfg, c.meta.at("epsilon").get<double>(), 0);
  gen.load_named_state(c.tensors);
  if (meta != nullptr) *meta = c.meta;
  return gen;
}

}  // namespace blto
