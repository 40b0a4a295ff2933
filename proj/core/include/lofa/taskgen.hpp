#pragma once

// Synthetic personalization tasks and the condition-LoRA paired bank.

#include <lofa/lorakit.hpp>
#include <lofa/task_spec.hpp>

#include <filesystem>
#include <utility>
#include <vector>

namespace lofa {

struct TaskSplit {
  std::vector<TaskSpec> train;
  std::vector<TaskSpec> val;
};

// Validation tasks come from parameter bands (and the spiral/star kinds)
// never used for training. Throws std::invalid_argument when a count
// exceeds what the family bands can supply.
TaskSplit make_task_families(uint64_t seed, int n_train_tasks = 48, int n_val_tasks = 12);

struct BankBuildOptions {
  LoraTrainOptions lora;
  float reject_energy = 0.5f;  // quality threshold on energy distance
  int quality_points = 1000;
  int quality_steps = 50;
  uint64_t quality_seed = 1234;
};

// One fine-tune per task; adapters share the LoRA seed so every task starts
// from the same A initialisation.
LoraBank build_pairs(const BaseModel& base, const TaskSplit& tasks, const BankBuildOptions& opt);

void save_tasks(const TaskSplit& tasks, const std::filesystem::path& file);
TaskSplit load_tasks(const std::filesystem::path& file);
const TaskSpec* find_task(const TaskSplit& tasks, const std::string& task_id);

}  // namespace lofa
