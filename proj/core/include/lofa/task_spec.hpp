#pragma once

#include <lofa/toybase.hpp>

#include <string>
#include <vector>

namespace lofa {

enum class TaskKind { Rotate, Scale, Translate, Ring, Moons, Spiral, Star, Mixture };

const char* task_kind_name(TaskKind k);
TaskKind parse_task_kind(const std::string& s);
// Coarse family name: ring/moons/spiral/star share the "shape" family.
const char* task_family_name(TaskKind k);

// One personalization task: a target 2D distribution described by a prompt.
struct TaskSpec {
  std::string task_id;
  TaskKind kind = TaskKind::Rotate;
  std::vector<float> params;
  std::string prompt_text;
  std::string split;         // "train" or "val"
  std::string family_label;  // kind plus parameter band, e.g. "rotate/[20,70]"
  uint64_t seed = 0;

  // Draws n target points; a pure function of the rng state.
  Mat sample(Rng& rng, int n) const;
  PointSampler sampler() const;
};

// Asymmetric three-blob pattern the base model is trained on; the rotate,
// scale and translate families transform it.
Mat base_pattern(Rng& rng, int n);
PointSampler base_pattern_sampler();

std::string make_prompt(TaskKind kind, const std::vector<float>& params);
std::string format_number(float v);

json to_json(const TaskSpec& t);
TaskSpec task_from_json(const json& j);

}  // namespace lofa
