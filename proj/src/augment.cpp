#include "blto/augment.hpp"

#include <cmath>

#include "blto/common.hpp"

namespace blto {

namespace F = torch::nn::functional;
using torch::indexing::Slice;

NormStats cifar10_norm() { return {{0.4914f, 0.4822f, 0.4465f}, {0.2470f, 0.2435f, 0.2616f}}; }

NormStats synthetic_norm() { return {{0.5f, 0.5f, 0.5f}, {0.5f, 0.5f, 0.5f}}; }

std::string to_string(AugKind kind) {
  switch (kind) {
    case AugKind::kRandomResizedCrop: return "RandomResizedCrop";
    case AugKind::kHorizontalFlip: return "RandomHorizontalFlip";
    case AugKind::kColorJitter: return "ColorJitter";
    case AugKind::kGrayscale: return "RandomGrayscale";
    case AugKind::kGaussianBlur: return "GaussianBlur";
    case AugKind::kNormalize: return "Normalize";
  }
  return "?";
}

namespace {

AugKind kind_from_string(const std::string& s) {
  for (auto k : {AugKind::kRandomResizedCrop, AugKind::kHorizontalFlip, AugKind::kColorJitter,
                 AugKind::kGrayscale, AugKind::kGaussianBlur, AugKind::kNormalize}) {
    if (to_string(k) == s) return k;
  }
  throw ArgumentError("unknown augmentation op '" + s + "'");
}

AugmentationPipeline base_pipeline(int64_t image_size, NormStats norm) {
  if (image_size < 8) throw ArgumentError("image_size must be >= 8");
  AugmentationPipeline p;
  p.image_size = image_size;
  p.normalize = std::move(norm);
  p.ops.push_back({AugKind::kRandomResizedCrop, 1.0, {0.2, 1.0, 3.0 / 4.0, 4.0 / 3.0}});
  p.ops.push_back({AugKind::kHorizontalFlip, 0.5, {}});
  p.ops.push_back({AugKind::kColorJitter, 0.8, {0.4, 0.4, 0.4, 0.1}});
  p.ops.push_back({AugKind::kGrayscale, 0.2, {}});
  return p;
}

AugOp blur_op(int64_t image_size) {
  return {AugKind::kGaussianBlur, 0.5, {static_cast<double>(image_size / 20 * 2 + 1), 0.1, 2.0}};
}

}  // namespace

AugmentationPipeline attacker_pipeline(int64_t image_size, NormStats norm) {
  auto p = base_pipeline(image_size, std::move(norm));
  p.ops.push_back(blur_op(image_size));
  p.ops.push_back({AugKind::kNormalize, 1.0, {}});
  return p;
}

AugmentationPipeline victim_pipeline(int64_t image_size, bool include_blur, NormStats norm) {
  auto p = base_pipeline(image_size, std::move(norm));
  if (include_blur) p.ops.push_back(blur_op(image_size));
  p.ops.push_back({AugKind::kNormalize, 1.0, {}});
  return p;
}

void AugmentationPipeline::validate() const {
  if (image_size < 1) throw ArgumentError("image_size must be positive");
  if (ops.empty() || ops.back().kind != AugKind::kNormalize) {
    throw ArgumentError("Normalize must be the final op");
  }
  for (size_t i = 0; i < ops.size(); ++i) {
    const auto& op = ops[i];
    if (op.probability < 0.0 || op.probability > 1.0) {
      throw ArgumentError(to_string(op.kind) + ": probability outside [0, 1]");
    }
    if (op.kind == AugKind::kNormalize && i + 1 != ops.size()) {
      throw ArgumentError("Normalize must appear only as the final op");
    }
    if (op.kind == AugKind::kRandomResizedCrop) {
      if (op.params.size() != 4) throw ArgumentError("RandomResizedCrop needs 4 params");
      if (!(op.params[0] > 0.0 && op.params[0] <= 1.0) || op.params[1] < op.params[0]) {
        throw ArgumentError("RandomResizedCrop scale lower bound must lie in (0, 1]");
      }
      if (op.params[2] <= 0.0 || op.params[3] < op.params[2]) {
        throw ArgumentError("RandomResizedCrop ratio range invalid");
      }
    }
    if (op.kind == AugKind::kColorJitter && op.params.size() != 4) {
      throw ArgumentError("ColorJitter needs 4 params");
    }
    if (op.kind == AugKind::kGaussianBlur) {
      if (op.params.size() != 3) throw ArgumentError("GaussianBlur needs 3 params");
      const auto k = static_cast<int64_t>(op.params[0]);
      if (k < 1 || k % 2 == 0) throw ArgumentError("GaussianBlur kernel size must be odd");
      if (op.params[1] <= 0.0 || op.params[2] < op.params[1]) {
        throw ArgumentError("GaussianBlur sigma range invalid");
      }
    }
  }
  if (normalize.mean.size() != normalize.std.size() || normalize.mean.empty()) {
    throw ArgumentError("normalize mean/std size mismatch");
  }
  for (float s : normalize.std) {
    if (!(s > 0.0f)) throw ArgumentError("normalize std must be positive");
  }
}

const AugOp* AugmentationPipeline::find(AugKind kind) const {
  for (const auto& op : ops) {
    if (op.kind == kind) return &op;
  }
  return nullptr;
}

AugOp* AugmentationPipeline::find(AugKind kind) {
  for (auto& op : ops) {
    if (op.kind == kind) return &op;
  }
  return nullptr;
}

nlohmann::json AugmentationPipeline::to_json() const {
  nlohmann::json j;
  j["image_size"] = image_size;
  j["ops"] = nlohmann::json::array();
  for (const auto& op : ops) {
    j["ops"].push_back({{"op", to_string(op.kind)}, {"p", op.probability}, {"params", op.params}});
  }
  j["normalize"] = {{"mean", normalize.mean}, {"std", normalize.std}};
  return j;
}

AugmentationPipeline AugmentationPipeline::from_json(const nlohmann::json& j) {
  AugmentationPipeline p;
  p.image_size = j.at("image_size").get<int64_t>();
  for (const auto& o : j.at("ops")) {
    p.ops.push_back({kind_from_string(o.at("op").get<std::string>()), o.at("p").get<double>(),
                     o.at("params").get<std::vector<double>>()});
  }
  p.normalize.mean = j.at("normalize").at("mean").get<std::vector<float>>();
  p.normalize.std = j.at("normalize").at("std").get<std::vector<float>>();
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Parameter draws

namespace {

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool bernoulli(std::mt19937_64& rng, double p) {
  // Always consume one draw so the stream layout does not depend on p.
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return u < p;
}

int64_t randint(std::mt19937_64& rng, int64_t lo, int64_t hi_exclusive) {
  return std::uniform_int_distribution<int64_t>(lo, hi_exclusive - 1)(rng);
}

void draw_crop(const AugOp& op, int64_t height, int64_t width, std::mt19937_64& rng, SampleDraw& d) {
  const double area = static_cast<double>(height * width);
  const double log_lo = std::log(op.params[2]), log_hi = std::log(op.params[3]);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target_area = area * uniform(rng, op.params[0], op.params[1]);
    const double aspect = std::exp(uniform(rng, log_lo, log_hi));
    const auto w = static_cast<int64_t>(std::nearbyint(std::sqrt(target_area * aspect)));
    const auto h = static_cast<int64_t>(std::nearbyint(std::sqrt(target_area / aspect)));
    if (w > 0 && w <= width && h > 0 && h <= height) {
      d.top = randint(rng, 0, height - h + 1);
      d.left = randint(rng, 0, width - w + 1);
      d.height = h;
      d.width = w;
      return;
    }
  }
  // Central crop fallback.
  const double in_ratio = static_cast<double>(width) / static_cast<double>(height);
  int64_t w = width, h = height;
  if (in_ratio < op.params[2]) {
    h = static_cast<int64_t>(std::nearbyint(w / op.params[2]));
  } else if (in_ratio > op.params[3]) {
    w = static_cast<int64_t>(std::nearbyint(h * op.params[3]));
  }
  d.top = (height - h) / 2;
  d.left = (width - w) / 2;
  d.height = h;
  d.width = w;
}

}  // namespace

std::vector<SampleDraw> draw_params(const AugmentationPipeline& pipeline, int64_t batch_size,
                                    int64_t height, int64_t width, std::mt19937_64& rng) {
  std::vector<SampleDraw> draws(batch_size);
  for (auto& d : draws) {
    d.height = height;
    d.width = width;
    for (const auto& op : pipeline.ops) {
      switch (op.kind) {
        case AugKind::kRandomResizedCrop:
          draw_crop(op, height, width, rng, d);
          break;
        case AugKind::kHorizontalFlip:
          d.flip = bernoulli(rng, op.probability);
          break;
        case AugKind::kColorJitter: {
          d.jitter = bernoulli(rng, op.probability);
          const double b = op.params[0], c = op.params[1], s = op.params[2], h = op.params[3];
          d.brightness = static_cast<float>(uniform(rng, std::max(0.0, 1 - b), 1 + b));
          d.contrast = static_cast<float>(uniform(rng, std::max(0.0, 1 - c), 1 + c));
          d.saturation = static_cast<float>(uniform(rng, std::max(0.0, 1 - s), 1 + s));
          d.hue = static_cast<float>(uniform(rng, -h, h));
          break;
        }
        case AugKind::kGrayscale:
          d.grayscale = bernoulli(rng, op.probability);
          break;
        case AugKind::kGaussianBlur:
          d.blur = bernoulli(rng, op.probability);
          d.sigma = static_cast<float>(uniform(rng, op.params[1], op.params[2]));
          break;
        case AugKind::kNormalize:
          break;
      }
    }
  }
  return draws;
}

// ---------------------------------------------------------------------------
// Pixel maps

torch::Tensor rgb_to_grayscale(const torch::Tensor& batch) {
  auto r = batch.select(1, 0), g = batch.select(1, 1), b = batch.select(1, 2);
  return (0.299 * r + 0.587 * g + 0.114 * b).unsqueeze(1);
}

torch::Tensor rgb_to_hsv(const torch::Tensor& batch) {
  auto r = batch.select(1, 0), g = batch.select(1, 1), b = batch.select(1, 2);
  auto maxc = torch::max(torch::max(r, g), b);
  auto minc = torch::min(torch::min(r, g), b);
  auto eqc = maxc == minc;
  auto cr = maxc - minc;
  auto ones = torch::ones_like(maxc);
  auto s = cr / torch::where(eqc, ones, maxc);
  auto cr_div = torch::where(eqc, ones, cr);
  auto rc = (maxc - r) / cr_div;
  auto gc = (maxc - g) / cr_div;
  auto bc = (maxc - b) / cr_div;
  auto is_r = maxc == r;
  auto is_g = (maxc == g).logical_and(is_r.logical_not());
  auto is_b = (maxc != g).logical_and(is_r.logical_not());
  auto h = is_r.to(batch.dtype()) * (bc - gc) + is_g.to(batch.dtype()) * (2.0 + rc - bc) +
           is_b.to(batch.dtype()) * (4.0 + gc - rc);
  h = torch::fmod(h / 6.0 + 1.0, 1.0);
  return torch::stack({h, s, maxc}, 1);
}

torch::Tensor hsv_to_rgb(const torch::Tensor& batch) {
  auto h = batch.select(1, 0), s = batch.select(1, 1), v = batch.select(1, 2);
  auto i = torch::floor(h * 6.0);
  auto f = h * 6.0 - i;
  auto sector = torch::remainder(i.detach().to(torch::kInt64), 6);
  auto p = torch::clamp(v * (1.0 - s), 0.0, 1.0);
  auto q = torch::clamp(v * (1.0 - s * f), 0.0, 1.0);
  auto t = torch::clamp(v * (1.0 - s * (1.0 - f)), 0.0, 1.0);
  // rows: sector 0..5; columns: r, g, b
  const std::array<std::array<int, 3>, 6> table = {{{0, 3, 2}, {1, 0, 2}, {2, 0, 3}, {2, 1, 0}, {3, 2, 0}, {0, 2, 1}}};
  std::array<torch::Tensor, 4> src = {v, q, p, t};
  std::vector<torch::Tensor> out;
  for (int ch = 0; ch < 3; ++ch) {
    torch::Tensor acc = torch::zeros_like(v);
    for (int k = 0; k < 6; ++k) {
      acc = acc + (sector == k).to(v.dtype()) * src[table[k][ch]];
    }
    out.push_back(acc);
  }
  return torch::stack(out, 1);
}

torch::Tensor gaussian_kernel1d(int64_t kernel_size, double sigma, torch::Dtype dtype) {
  const double half = (kernel_size - 1) * 0.5;
  auto x = torch::linspace(-half, half, kernel_size, torch::TensorOptions().dtype(dtype));
  auto pdf = torch::exp(-0.5 * (x / sigma).pow(2));
  return pdf / pdf.sum();
}

torch::Tensor normalize(const torch::Tensor& batch, const NormStats& stats) {
  const auto opts = torch::TensorOptions().dtype(batch.dtype());
  auto mean = torch::tensor(stats.mean, opts).view({1, -1, 1, 1});
  auto std = torch::tensor(stats.std, opts).view({1, -1, 1, 1});
  return (batch - mean) / std;
}

torch::Tensor denormalize(const torch::Tensor& batch, const NormStats& stats) {
  const auto opts = torch::TensorOptions().dtype(batch.dtype());
  auto mean = torch::tensor(stats.mean, opts).view({1, -1, 1, 1});
  auto std = torch::tensor(stats.std, opts).view({1, -1, 1, 1});
  return batch * std + mean;
}

namespace {

torch::Tensor mask_of(const std::vector<SampleDraw>& draws, bool SampleDraw::*field, const torch::Tensor& like) {
  std::vector<uint8_t> m;
  m.reserve(draws.size());
  for (const auto& d : draws) m.push_back(d.*field ? 1 : 0);
  return torch::tensor(m, torch::kUInt8).to(torch::kBool).view({-1, 1, 1, 1}).expand_as(like);
}

torch::Tensor per_sample(const std::vector<SampleDraw>& draws, float SampleDraw::*field, const torch::Tensor& like) {
  std::vector<double> v;
  v.reserve(draws.size());
  for (const auto& d : draws) v.push_back(d.*field);
  return torch::tensor(v, torch::TensorOptions().dtype(like.dtype())).view({-1, 1, 1, 1});
}

bool any_of(const std::vector<SampleDraw>& draws, bool SampleDraw::*field) {
  for (const auto& d : draws) {
    if (d.*field) return true;
  }
  return false;
}

torch::Tensor crop_resize(const torch::Tensor& batch, const std::vector<SampleDraw>& draws, int64_t size) {
  std::vector<torch::Tensor> out;
  out.reserve(draws.size());
  for (size_t i = 0; i < draws.size(); ++i) {
    const auto& d = draws[i];
    auto crop = batch.index({static_cast<int64_t>(i), Slice(), Slice(d.top, d.top + d.height),
                             Slice(d.left, d.left + d.width)})
                    .unsqueeze(0);
    if (!(d.height == size && d.width == size)) {
      crop = F::interpolate(crop, F::InterpolateFuncOptions()
                                      .size(std::vector<int64_t>{size, size})
                                      .mode(torch::kBilinear)
                                      .align_corners(false)
                                      .antialias(true));
    }
    out.push_back(crop);
  }
  return torch::cat(out, 0);
}

torch::Tensor color_jitter(const torch::Tensor& x, const std::vector<SampleDraw>& draws) {
  auto y = (x * per_sample(draws, &SampleDraw::brightness, x)).clamp(0.0, 1.0);
  {
    auto c = per_sample(draws, &SampleDraw::contrast, x);
    auto mean = rgb_to_grayscale(y).mean({1, 2, 3}, true);
    y = (c * y + (1.0 - c) * mean).clamp(0.0, 1.0);
  }
  {
    auto s = per_sample(draws, &SampleDraw::saturation, x);
    auto gray = rgb_to_grayscale(y);
    y = (s * y + (1.0 - s) * gray).clamp(0.0, 1.0);
  }
  {
    auto hue = per_sample(draws, &SampleDraw::hue, x).view({-1, 1, 1});
    auto hsv = rgb_to_hsv(y);
    auto h = torch::remainder(hsv.select(1, 0) + hue, 1.0);
    y = hsv_to_rgb(torch::stack({h, hsv.select(1, 1), hsv.select(1, 2)}, 1));
  }
  return y;
}

torch::Tensor gaussian_blur(const torch::Tensor& x, const std::vector<SampleDraw>& draws, int64_t k) {
  if (k <= 1) return x;
  const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  std::vector<torch::Tensor> kernels;
  for (const auto& d : draws) {
    // Unblurred rows get a delta kernel; a zero sigma would leak NaN into backward.
    auto k1 = d.blur ? gaussian_kernel1d(k, d.sigma, x.scalar_type())
                     : torch::zeros({k}, torch::TensorOptions().dtype(x.scalar_type())).index_fill_(0, torch::tensor(k / 2), 1.0);
    kernels.push_back(k1.unsqueeze(0).expand({c, k}));
  }
  auto k1 = torch::cat(kernels, 0);  // [B*C, k]
  const int64_t pad = k / 2;
  auto flat = x.reshape({1, b * c, h, w});
  flat = F::pad(flat, F::PadFuncOptions({pad, pad, pad, pad}).mode(torch::kReflect));
  flat = F::conv2d(flat, k1.view({b * c, 1, 1, k}), F::Conv2dFuncOptions().groups(b * c));
  flat = F::conv2d(flat, k1.view({b * c, 1, k, 1}), F::Conv2dFuncOptions().groups(b * c));
  return flat.view({b, c, h, w});
}

}  // namespace

torch::Tensor apply_draws(const AugmentationPipeline& pipeline, const torch::Tensor& batch,
                          const std::vector<SampleDraw>& draws) {
  if (batch.dim() != 4) throw ArgumentError("batch must be [B, C, H, W]");
  if (static_cast<int64_t>(draws.size()) != batch.size(0)) throw ArgumentError("draw count != batch size");
  auto x = batch;
  for (const auto& op : pipeline.ops) {
    switch (op.kind) {
      case AugKind::kRandomResizedCrop:
        x = crop_resize(x, draws, pipeline.image_size);
        break;
      case AugKind::kHorizontalFlip:
        if (any_of(draws, &SampleDraw::flip)) {
          x = torch::where(mask_of(draws, &SampleDraw::flip, x), x.flip({3}), x);
        }
        break;
      case AugKind::kColorJitter:
        if (any_of(draws, &SampleDraw::jitter)) {
          if (x.size(1) != 3) throw ArgumentError("ColorJitter requires 3-channel images");
          x = torch::where(mask_of(draws, &SampleDraw::jitter, x), color_jitter(x, draws), x);
        }
        break;
      case AugKind::kGrayscale:
        if (any_of(draws, &SampleDraw::grayscale)) {
          if (x.size(1) != 3) throw ArgumentError("RandomGrayscale requires 3-channel images");
          x = torch::where(mask_of(draws, &SampleDraw::grayscale, x), rgb_to_grayscale(x).expand_as(x), x);
        }
        break;
      case AugKind::kGaussianBlur:
        if (any_of(draws, &SampleDraw::blur)) {
          const auto k = static_cast<int64_t>(op.params[0]);
          x = torch::where(mask_of(draws, &SampleDraw::blur, x), gaussian_blur(x, draws, k), x);
        }
        break;
      case AugKind::kNormalize:
        x = normalize(x, pipeline.normalize);
        break;
    }
  }
  return x;
}

torch::Tensor augment(const AugmentationPipeline& pipeline, const torch::Tensor& batch,
                      std::mt19937_64& rng, std::vector<SampleDraw>* record) {
  if (batch.dim() != 4) throw ArgumentError("batch must be [B, C, H, W]");
  const int64_t h = batch.size(2), w = batch.size(3);
  if (pipeline.find(AugKind::kRandomResizedCrop) != nullptr &&
      (h < pipeline.image_size || w < pipeline.image_size)) {
    throw ArgumentError("batch spatial size " + std::to_string(h) + "x" + std::to_string(w) +
                        " smaller than crop output " + std::to_string(pipeline.image_size));
  }
  if (pipeline.find(AugKind::kRandomResizedCrop) == nullptr && (h != pipeline.image_size || w != pipeline.image_size)) {
    throw ArgumentError("batch spatial size differs from image_size and no crop is configured");
  }
  auto draws = draw_params(pipeline, batch.size(0), h, w, rng);
  auto out = apply_draws(pipeline, batch, draws);
  if (record != nullptr) *record = std::move(draws);
  return out;
}

ViewPair sample_views(const AugmentationPipeline& pipeline, const torch::Tensor& batch, uint64_t seed) {
  std::mt19937_64 rng(seed);
  ViewPair v;
  v.seed = seed;
  v.view1 = augment(pipeline, batch, rng, &v.draws1);
  v.view2 = augment(pipeline, batch, rng, &v.draws2);
  return v;
}

}  // namespace blto
