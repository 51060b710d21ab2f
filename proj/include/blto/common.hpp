#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace blto {

/// Invalid sizes, shapes, or out-of-range arguments.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Missing or corrupt dataset files. The message names the offending file.
class IngestionError : public std::runtime_error {
 public:
  IngestionError(const std::string& file, const std::string& what)
      : std::runtime_error(file + ": " + what), file_(file) {}
  const std::string& file() const noexcept { return file_; }

 private:
  std::string file_;
};

/// A training loop produced a non-finite loss or objective. `record` holds a
/// one-line JSON diagnostic of where it happened.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::string record)
      : std::runtime_error(what), record_(std::move(record)) {}
  const std::string& record() const noexcept { return record_; }

 private:
  std::string record_;
};

/// Invalid experiment configuration. `path` is the dotted key that failed.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// Lowercase hex SHA-1 of `data`.
std::string sha1_hex(std::string_view data);

/// SHA-1 over the raw bytes of every tensor, in order. Used as a parameter
/// checksum for isolation and determinism checks.
std::string tensor_checksum(const std::vector<torch::Tensor>& tensors);

/// Mixes a base seed with a stream tag into an independent 64-bit seed.
uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index = 0);

/// CPU generator seeded deterministically.
torch::Generator make_generator(uint64_t seed);

/// Serializes global RNG use during module construction, so concurrent runs
/// with distinct seeds still initialize deterministically.
std::mutex& init_mutex();

}  // namespace blto
