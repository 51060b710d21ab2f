#include "blto/common.hpp"

#include <ATen/CPUGeneratorImpl.h>
#include <openssl/evp.h>

#include <array>
#include <memory>
#include <mutex>

namespace blto {

namespace {

struct DigestCtx {
  DigestCtx() : ctx(EVP_MD_CTX_new()) {
    if (ctx == nullptr || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1) {
      throw std::runtime_error("sha1: digest init failed");
    }
  }
  ~DigestCtx() { EVP_MD_CTX_free(ctx); }
  DigestCtx(const DigestCtx&) = delete;
  DigestCtx& operator=(const DigestCtx&) = delete;

  void update(const void* data, size_t size) {
    if (size > 0 && EVP_DigestUpdate(ctx, data, size) != 1) {
      throw std::runtime_error("sha1: digest update failed");
    }
  }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_DigestFinal_ex(ctx, md.data(), &len) != 1) {
      throw std::runtime_error("sha1: digest final failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
      out.push_back(kHex[md[i] >> 4]);
      out.push_back(kHex[md[i] & 0xf]);
    }
    return out;
  }

  EVP_MD_CTX* ctx;
};

}  // namespace

std::string sha1_hex(std::string_view data) {
  DigestCtx d;
  d.update(data.data(), data.size());
  return d.hex();
}

std::string tensor_checksum(const std::vector<torch::Tensor>& tensors) {
  DigestCtx d;
  for (const auto& t : tensors) {
    auto c = t.detach().contiguous().cpu();
    for (auto s : c.sizes()) {
      int64_t v = s;
      d.update(&v, sizeof(v));
    }
    d.update(c.data_ptr(), c.numel() * c.element_size());
  }
  return d.hex();
}

uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index) {
  // splitmix64 finalizer over a simple combination
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1) + 0xbf58476d1ce4e5b9ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

torch::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace blto
