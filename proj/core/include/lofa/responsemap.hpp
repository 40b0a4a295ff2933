#pragma once

// Relative-change statistics between a LoRA delta and its base weights.
//
//   m_i = |dw_i| / max(|w_i|, guard)      (magnitude map)
//   r_i = 1  iff  m_i > tau                (response map)
//
// r_i = 1 marks the entries the adapter meaningfully changes.

#include <lofa/lorakit.hpp>

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace lofa {

using Mask = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr float kDefaultThreshold = 0.02f;
inline constexpr float kDefaultGuard = 1e-8f;
inline constexpr float kThresholdSweep[] = {0.01f, 0.015f, 0.02f, 0.025f, 0.03f};

struct MagnitudeMap {
  std::map<BlockKey, Mat> values;
  float guard_epsilon = kDefaultGuard;
};

struct ResponseMap {
  std::map<BlockKey, Mask> masks;
  float threshold = kDefaultThreshold;

  double density() const;
  size_t entries() const;
};

// Elementwise ratio of a delta over base weights, one block.
Mat magnitude_block(const Mat& weight, const Mat& delta, float guard_epsilon = kDefaultGuard);
MagnitudeMap magnitude_map(const BaseModel& base, const LoraAdapter& lora, float guard_epsilon = kDefaultGuard);

Mask binarize_block(const Mat& magnitude, float threshold);
ResponseMap binarize(const MagnitudeMap& mmap, float threshold = kDefaultThreshold);
ResponseMap response_map(const BaseModel& base, const LoraAdapter& lora, float threshold = kDefaultThreshold);

// Per block, the fraction of entries with m_i <= threshold.
std::map<BlockKey, double> sparsity_stats(const MagnitudeMap& mmap, float threshold);

// Cosine between the flattened binary masks over all blocks; two empty masks give 1.
double mask_cosine(const ResponseMap& a, const ResponseMap& b);

enum class PerturbMode { Zero, Noise };
PerturbMode parse_perturb_mode(const std::string& s);

// Perturbs the delta entries with r_i = 0 (or, with `invert`, those with
// r_i = 1) and returns a dense-delta adapter. Untouched entries keep their
// exact delta values.
LoraAdapter perturb_masked(const LoraAdapter& lora, const ResponseMap& rmap, PerturbMode mode, float sigma,
                           uint64_t seed = 0, bool invert = false);

Mat mask_to_float(const Mask& m);
Mask float_to_mask(const Mat& probs, float threshold);  // 1 where probs > threshold

struct NamedResponseMap {
  std::string name;
  ResponseMap map;
};

// One grayscale PGM per map: depth rows by Q/K/V/O columns of m x n tiles,
// active entries white on black. Returns written paths.
std::vector<std::filesystem::path> render_response_maps(const std::vector<NamedResponseMap>& maps,
                                                        const std::filesystem::path& dir);

// response_maps.json plus one uint8 blob per map (blocks in key order, row-major).
void export_response_maps(const std::vector<NamedResponseMap>& maps, const std::filesystem::path& dir);
std::vector<NamedResponseMap> import_response_maps(const std::filesystem::path& dir);

}  // namespace lofa
