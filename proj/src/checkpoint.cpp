#include "blto/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "blto/common.hpp"

namespace blto::checkpoint {

namespace {

std::string dtype_name(torch::Dtype t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    default: throw ArgumentError("checkpoint: unsupported dtype");
  }
}

torch::Dtype dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  throw ArgumentError("checkpoint: unknown dtype '" + s + "'");
}

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::ifstream& in, const std::string& file) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw IngestionError(file, "truncated checkpoint");
  return v;
}

}  // namespace

void write(const Container& c, const std::filesystem::path& file) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> blobs;
  uint64_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    auto b = t.detach().contiguous().cpu();
    const uint64_t nbytes = b.numel() * b.element_size();
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(b.scalar_type())},
                                 {"shape", b.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    blobs.push_back(b);
  }
  const std::string h = header.dump();
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
  out.write(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kFormatVersion);
  put<uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& b : blobs) {
    out.write(static_cast<const char*>(b.data_ptr()), static_cast<std::streamsize>(b.numel() * b.element_size()));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + file.string());
}

Container read(const std::filesystem::path& file) {
  const std::string fname = file.string();
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError(fname, "cannot open checkpoint");
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw IngestionError(fname, "not a blto checkpoint");
  }
  const auto version = get<uint32_t>(in, fname);
  if (version != kFormatVersion) {
    throw IngestionError(fname, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto hlen = get<uint64_t>(in, fname);
  std::string h(hlen, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(hlen))) throw IngestionError(fname, "truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError(fname, std::string("bad header: ") + e.what());
  }
  Container c;
  c.kind = header.at("kind").get<std::string>();
  c.meta = header.at("meta");
  const auto base = in.tellg();
  for (const auto& t : header.at("tensors")) {
    auto shape = t.at("shape").get<std::vector<int64_t>>();
    auto tensor = torch::empty(shape, dtype_from(t.at("dtype").get<std::string>()));
    const auto nbytes = t.at("nbytes").get<uint64_t>();
    if (nbytes != static_cast<uint64_t>(tensor.numel() * tensor.element_size())) {
      throw IngestionError(fname, "size mismatch for tensor " + t.at("name").get<std::string>());
    }
    in.seekg(base + static_cast<std::streamoff>(t.at("offset").get<uint64_t>()));
    if (!in.read(static_cast<char*>(tensor.data_ptr()), static_cast<std::streamsize>(nbytes))) {
      throw IngestionError(fname, "truncated payload");
    }
    c.tensors.emplace_back(t.at("name").get<std::string>(), tensor);
  }
  return c;
}

}  // namespace blto::checkpoint
