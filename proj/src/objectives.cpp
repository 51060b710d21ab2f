#include "blto/objectives.hpp"

#include "blto/common.hpp"

namespace blto {

namespace F = torch::nn::functional;

namespace {
std::atomic<uint64_t> g_degenerate_cosines{0};
}

std::string to_string(ClMethod m) {
  switch (m) {
    case ClMethod::kSimSiam: return "simsiam";
    case ClMethod::kSimClr: return "simclr";
    case ClMethod::kByol: return "byol";
  }
  return "?";
}

ClMethod cl_method_from_string(const std::string& s) {
  if (s == "simsiam") return ClMethod::kSimSiam;
  if (s == "simclr") return ClMethod::kSimClr;
  if (s == "byol") return ClMethod::kByol;
  throw ArgumentError("unknown CL method '" + s + "' (expected simsiam, simclr or byol)");
}

void ClObjectiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be > 0");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ArgumentError("ema_momentum must lie in [0, 1]");
}

torch::Tensor cosine_similarity(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.dim() != 2 || !a.sizes().equals(b.sizes())) {
    throw ArgumentError("cosine_similarity expects two [B, d] batches of equal shape");
  }
  auto dot = (a * b).sum(1);
  auto denom = a.norm(2, 1) * b.norm(2, 1);
  auto degenerate = denom == 0;
  const auto count = degenerate.sum().item<int64_t>();
  if (count > 0) {
    g_degenerate_cosines += static_cast<uint64_t>(count);
    denom = torch::where(degenerate, torch::ones_like(denom), denom);
  }
  auto cos = (dot / denom).clamp(-1.0, 1.0);
  return count > 0 ? torch::where(degenerate, torch::zeros_like(cos), cos) : cos;
}

uint64_t degenerate_cosine_count() { return g_degenerate_cosines.load(); }

torch::Tensor simsiam_loss(const torch::Tensor& p1, const torch::Tensor& p2, const torch::Tensor& z1,
                           const torch::Tensor& z2, bool halved) {
  auto loss = -(blto::cosine_similarity(p1, z2).mean() + blto::cosine_similarity(p2, z1).mean());
  return halved ? loss * 0.5 : loss;
}

torch::Tensor simsiam_loss(const EncoderStack& stack, const ViewPair& views, bool halved) {
  auto a = project_and_predict(stack, encode(stack, views.view1));
  auto b = project_and_predict(stack, encode(stack, views.view2));
  return simsiam_loss(a.p, b.p, a.z, b.z, halved);
}

torch::Tensor infonce_loss(const torch::Tensor& view1, const torch::Tensor& view2, double temperature) {
  if (view1.dim() != 2 || !view1.sizes().equals(view2.sizes())) {
    throw ArgumentError("infonce_loss expects two [B, d] batches of equal shape");
  }
  const int64_t b = view1.size(0);
  if (b < 2) throw ArgumentError("infonce_loss needs B >= 2 (no negatives otherwise)");
  if (!(temperature > 0.0)) throw ArgumentError("temperature must be > 0");
  auto z = F::normalize(torch::cat({view1, view2}, 0), F::NormalizeFuncOptions().dim(1));
  auto logits = torch::mm(z, z.t()) / temperature;
  auto eye = torch::eye(2 * b, torch::TensorOptions().dtype(torch::kBool));
  logits = logits.masked_fill(eye, -std::numeric_limits<double>::infinity());
  auto idx = torch::arange(b, torch::kInt64);
  auto targets = torch::cat({idx + b, idx});
  return F::cross_entropy(logits, targets);
}

torch::Tensor byol_pair_loss(const torch::Tensor& p, const torch::Tensor& z) {
  return (2.0 - 2.0 * blto::cosine_similarity(p, z)).mean();
}

torch::Tensor byol_loss(const torch::Tensor& p1, const torch::Tensor& p2, const torch::Tensor& z1,
                        const torch::Tensor& z2) {
  return 0.5 * (byol_pair_loss(p1, z2) + byol_pair_loss(p2, z1));
}

void ema_update(const std::vector<torch::Tensor>& target, const std::vector<torch::Tensor>& online, double m) {
  if (target.size() != online.size()) throw ArgumentError("ema_update: parameter count mismatch");
  torch::NoGradGuard guard;
  for (size_t i = 0; i < target.size(); ++i) {
    target[i].mul_(m).add_(online[i].detach(), 1.0 - m);
  }
}

torch::Tensor alignment_loss(const torch::Tensor& u, const torch::Tensor& v) {
  if (u.dim() != 2 || !u.sizes().equals(v.sizes())) {
    throw ArgumentError("alignment_loss expects two [B, d] batches of equal shape");
  }
  auto nu = F::normalize(u, F::NormalizeFuncOptions().dim(1));
  auto nv = F::normalize(v, F::NormalizeFuncOptions().dim(1));
  return (nu - nv).pow(2).sum(1).mean();
}

torch::Tensor uniformity_loss(const torch::Tensor& x, double t) {
  if (x.dim() != 2) throw ArgumentError("uniformity_loss expects a [N, d] batch");
  if (x.size(0) < 2) throw ArgumentError("uniformity_loss needs at least 2 points");
  auto nx = F::normalize(x, F::NormalizeFuncOptions().dim(1));
  return torch::pdist(nx, 2).pow(2).mul(-t).exp().mean().log();
}

// ---------------------------------------------------------------------------

ContrastiveLearner::ContrastiveLearner(EncoderStack stack, ClObjectiveConfig cfg)
    : stack_(std::move(stack)), cfg_(cfg) {
  cfg_.validate();
  if (cfg_.method == ClMethod::kByol) {
    target_ = stack_.clone();
    for (auto& p : target_->parameters()) p.set_requires_grad(false);
  }
}

torch::Tensor ContrastiveLearner::loss(const ViewPair& views) {
  switch (cfg_.method) {
    case ClMethod::kSimSiam:
      return simsiam_loss(stack_, views, cfg_.simsiam_halved);
    case ClMethod::kSimClr: {
      auto z1 = stack_.projector->forward(encode(stack_, views.view1));
      auto z2 = stack_.projector->forward(encode(stack_, views.view2));
      return infonce_loss(z1, z2, cfg_.temperature);
    }
    case ClMethod::kByol: {
      auto a = project_and_predict(stack_, encode(stack_, views.view1));
      auto b = project_and_predict(stack_, encode(stack_, views.view2));
      torch::Tensor t1, t2;
      {
        torch::NoGradGuard guard;
        t1 = target_->projector->forward(encode(*target_, views.view1));
        t2 = target_->projector->forward(encode(*target_, views.view2));
      }
      return byol_loss(a.p, b.p, t1, t2);
    }
  }
  throw ArgumentError("unsupported CL method");
}

void ContrastiveLearner::after_step() {
  if (cfg_.method != ClMethod::kByol) return;
  auto online = stack_.encoder_parameters();
  for (auto& p : stack_.projector->parameters()) online.push_back(p);
  auto target = target_->encoder_parameters();
  for (auto& p : target_->projector->parameters()) target.push_back(p);
  ema_update(target, online, cfg_.ema_momentum);
}

std::vector<torch::Tensor> ContrastiveLearner::trainable_parameters() const {
  if (cfg_.method == ClMethod::kSimClr) {
    auto out = stack_.encoder_parameters();
    for (auto& p : stack_.projector->parameters()) out.push_back(p);
    return out;
  }
  return stack_.parameters();
}

}  // namespace blto
