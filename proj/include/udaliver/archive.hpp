#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace udaliver {

inline constexpr uint32_t kArchiveVersion = 1;

/// Versioned container of named tensors plus a JSON manifest. Used for model
/// checkpoints, training state and cached slice datasets.
///
/// Layout: "UDLARCH\0" | u32 version | u64 manifest length | manifest JSON |
/// tensor payloads (little-endian, contiguous, in manifest order). The
/// manifest's "tensors" array carries name, dtype, shape, offset and size.
class TensorArchive {
 public:
  nlohmann::json meta = nlohmann::json::object();

  void add(const std::string& name, const torch::Tensor& t);
  bool has(const std::string& name) const;
  const torch::Tensor& get(const std::string& name) const;
  const std::vector<std::pair<std::string, torch::Tensor>>& tensors() const { return tensors_; }

  void add_module(const std::string& prefix, torch::nn::Module& m);
  /// Copies prefix-named tensors into every parameter and buffer of m;
  /// throws ConfigError on a missing name or shape mismatch.
  void load_module(const std::string& prefix, torch::nn::Module& m) const;

  void save(const std::filesystem::path& path) const;
  std::string serialize() const;
  static TensorArchive load(const std::filesystem::path& path);
  static TensorArchive deserialize(const std::string& bytes, const std::string& origin = "<memory>");

 private:
  std::vector<std::pair<std::string, torch::Tensor>> tensors_;
};

}  // namespace udaliver
