#pragma once

// Checkpoint container: a directory holding manifest.json plus one raw
// little-endian float32 blob per named tensor, row-major.

#include <lofa/tensor.hpp>

#include <nlohmann/json.hpp>

#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace lofa {

using json = nlohmann::json;

inline constexpr int kStoreVersion = 1;

struct NamedTensor {
  std::string name;
  Mat value;
};

struct TensorDir {
  std::string kind;
  json config;
  json manifest;
  std::vector<NamedTensor> tensors;

  const Mat& get(const std::string& name) const;
  bool has(const std::string& name) const;
};

// Writes the container, replacing any previous contents of dir.
void write_tensor_dir(const std::filesystem::path& dir, const std::string& kind, const json& config,
                      std::span<const NamedTensor> tensors, const json& extra = json::object());
TensorDir read_tensor_dir(const std::filesystem::path& dir);

// Raw float32 payload helpers shared with the LoRA bank format.
void write_f32(std::ostream& out, const Mat& m);
Mat read_f32(std::istream& in, Eigen::Index rows, Eigen::Index cols, const std::string& what);

// Hex SHA-256 over tensor names, shapes and payload bytes, in order.
std::string fingerprint(std::span<const NamedTensor> tensors);
std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_file(const std::filesystem::path& file);

void write_text_file(const std::filesystem::path& file, const std::string& text);
std::string read_text_file(const std::filesystem::path& file);

}  // namespace lofa
