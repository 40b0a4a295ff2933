#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace lofa {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mat2 = Eigen::Matrix<float, Eigen::Dynamic, 2, Eigen::RowMajor>;

// Attention projections targeted by LoRA.
enum class BlockType : int { Q = 0, K = 1, V = 2, O = 3 };

inline constexpr std::array<BlockType, 4> kBlockTypes = {BlockType::Q, BlockType::K, BlockType::V,
                                                          BlockType::O};

inline const char* block_type_name(BlockType t) {
  switch (t) {
    case BlockType::Q: return "q";
    case BlockType::K: return "k";
    case BlockType::V: return "v";
    case BlockType::O: return "o";
  }
  return "?";
}

inline BlockType parse_block_type(std::string_view s) {
  if (s == "q") return BlockType::Q;
  if (s == "k") return BlockType::K;
  if (s == "v") return BlockType::V;
  if (s == "o") return BlockType::O;
  throw std::invalid_argument("unknown block type '" + std::string(s) + "'");
}

struct BlockKey {
  int depth = 0;
  BlockType type = BlockType::Q;

  friend auto operator<=>(const BlockKey&, const BlockKey&) = default;

  std::string name() const {
    return "blocks." + std::to_string(depth) + "." + block_type_name(type);
  }
};

// Error categories surfaced to the CLI as exit codes.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CompatibilityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MissingArtifactError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace lofa
