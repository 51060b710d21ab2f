#pragma once

#include <torch/torch.h>

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace blto::testkit {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("blto_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

/// Central-difference gradient of `f` over every entry of `params`,
/// flattened in order.
inline std::vector<double> numeric_gradient(const std::function<torch::Tensor()>& f,
                                            const std::vector<torch::Tensor>& params, double h = 1e-6) {
  std::vector<double> out;
  torch::NoGradGuard guard;
  for (const auto& param : params) {
    auto flat = param.detach().view({-1});
    for (int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      flat[i] = orig + h;
      const double up = f().item<double>();
      flat[i] = orig - h;
      const double down = f().item<double>();
      flat[i] = orig;
      out.push_back((up - down) / (2 * h));
    }
  }
  return out;
}

inline std::vector<double> flatten(const std::vector<torch::Tensor>& tensors) {
  std::vector<double> out;
  for (const auto& t : tensors) {
    auto c = t.to(torch::kDouble).contiguous().view({-1});
    out.insert(out.end(), c.data_ptr<double>(), c.data_ptr<double>() + c.numel());
  }
  return out;
}

/// ||a - b|| / max(||a||, ||b||).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

/// Relative error between autograd gradients of `f` and central
/// differences over every entry of `params` (double precision expected).
inline double gradient_error(const std::function<torch::Tensor()>& f, const std::vector<torch::Tensor>& params,
                             double h = 1e-6) {
  auto grads = torch::autograd::grad({f()}, params, {}, false, false, true);
  std::vector<torch::Tensor> analytic;
  for (size_t p = 0; p < params.size(); ++p) {
    analytic.push_back(grads[p].defined() ? grads[p] : torch::zeros_like(params[p]));
  }
  return relative_error(flatten(analytic), numeric_gradient(f, params, h));
}

inline int64_t numel(const std::vector<torch::Tensor>& params) {
  int64_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

}  // namespace blto::testkit
