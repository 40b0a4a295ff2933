#pragma once

#include <lofa/tensor.hpp>

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace lofa {

struct LoraFactors {
  Mat B;  // m x r
  Mat A;  // r x n
};

struct LoraMeta {
  std::string task_id;
  std::string prompt_text;
  int training_steps = 0;
  uint64_t seed = 0;
  std::string base_fingerprint;  // empty when unknown
};

// Low-rank adapter over every attention projection of a base model.
// A perturbed adapter no longer factors at rank r; it carries explicit
// per-block deltas in `dense` instead of `factors`.
struct LoraAdapter {
  int rank = 4;
  std::map<BlockKey, LoraFactors> factors;
  std::map<BlockKey, Mat> dense;
  LoraMeta meta;

  bool is_dense() const { return !dense.empty(); }

  std::vector<BlockKey> keys() const {
    std::vector<BlockKey> out;
    if (is_dense()) {
      for (const auto& [k, v] : dense) out.push_back(k);
    } else {
      for (const auto& [k, v] : factors) out.push_back(k);
    }
    return out;
  }
};

}  // namespace lofa
