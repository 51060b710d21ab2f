#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace blto::checkpoint {

inline constexpr char kMagic[8] = {'B', 'L', 'T', 'O', 'C', 'K', 'P', 'T'};
inline constexpr uint32_t kFormatVersion = 1;

// Layout:
//   8 bytes   magic "BLTOCKPT"
//   u32 LE    format version
//   u64 LE    header length
//   header    JSON: {"kind", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
//   payload   raw little-endian tensor bytes, concatenated in header order
struct Container {
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
};

void write(const Container& c, const std::filesystem::path& file);
Container read(const std::filesystem::path& file);

}  // namespace blto::checkpoint
