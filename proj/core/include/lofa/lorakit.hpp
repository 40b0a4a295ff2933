#pragma once

// LoRA algebra (W' = W + BA), per-task fine-tuning and the LoRA bank format.

#include <lofa/lora_adapter.hpp>
#include <lofa/task_spec.hpp>
#include <lofa/toybase.hpp>

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lofa {

// B * A for one block, or the stored dense delta of a perturbed adapter.
Mat delta(const LoraAdapter& lora, BlockKey key);

// New model with every targeted block replaced by W + delta; the input is untouched.
BaseModel merge(const BaseModel& base, const LoraAdapter& lora);

// Adapter with B = 0 and A ~ N(0, a_init_std^2) for every block of `base`.
LoraAdapter init_lora(const BaseModel& base, int rank, float a_init_std, uint64_t seed);
LoraAdapter zero_lora(const BaseModel& base, int rank);

struct LoraTrainOptions {
  int rank = 4;
  int steps = 1000;
  float lr = 1e-4f;
  int batch = 4;             // target draws per step
  int points_per_draw = 32;  // points per draw
  float a_init_std = 0.01f;
  uint64_t seed = 0;
};

// Trains only (B, A) against the flow-matching loss on the task's targets;
// the base model stays frozen.
LoraAdapter finetune_lora(const BaseModel& base, const TaskSpec& task, const LoraTrainOptions& opt,
                          std::vector<float>* loss_history = nullptr);

struct BankRecord {
  std::string split;   // "train" or "val"
  std::string family;  // family label used for split hygiene
  float quality_energy = -1.0f;
  bool quality_passed = true;
};

struct LoraBank {
  int rank = 4;
  std::string base_fingerprint;
  std::vector<LoraAdapter> adapters;
  std::vector<BankRecord> records;  // parallel to adapters

  size_t size() const { return adapters.size(); }
  std::vector<size_t> indices(const std::string& split) const;
  std::set<std::string> family_labels(const std::string& split) const;
  // Throws CompatibilityError on rank/fingerprint disagreement or leaked families.
  void validate() const;
  const LoraAdapter* find(const std::string& task_id) const;
};

void save_bank(const LoraBank& bank, const std::filesystem::path& dir);
// With `base`, a fingerprint mismatch is reported in `warnings` rather than thrown.
LoraBank load_bank(const std::filesystem::path& dir, const BaseModel* base = nullptr,
                   std::vector<std::string>* warnings = nullptr);

void save_adapter(const LoraAdapter& lora, const std::filesystem::path& file);
LoraAdapter load_adapter(const std::filesystem::path& file);

}  // namespace lofa
