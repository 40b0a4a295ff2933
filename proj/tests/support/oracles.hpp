#pragma once

#include <lofa/trainer.hpp>

#include <string>
#include <vector>

namespace lofa::testing {

struct GradientGroupError {
  std::string name;
  double relative_error = 0.0;
  size_t entries = 0;
};

// Tiny 2-depth model used by the gradient oracle.
BaseModel tiny_model(uint64_t seed);
LoraAdapter random_lora(const BaseModel& base, int rank, float stddev, uint64_t seed);
FlowBatch random_flow_batch(int n, uint64_t seed);

// Analytic gradients of fm_loss (w.r.t. every base parameter and every LoRA
// factor) against double-precision central differences of the reference model.
std::vector<GradientGroupError> fm_loss_gradient_errors(uint64_t seed);

// Analytic gradients of stage2_loss w.r.t. the stacked predicted factors.
std::vector<GradientGroupError> stage2_loss_gradient_errors(uint64_t seed);

// Tiny base, tasks and bank for fast end-to-end unit tests.
struct TinyWorld {
  BaseModel base;
  TaskSplit tasks;
  LoraBank bank;
  Vocab vocab;

  HyperConfig hyper(Arrangement arrangement = Arrangement::WeightTokens) const;
  TrainData train_data(float threshold = 0.02f) const;
  TrainData val_data(float threshold = 0.02f) const;
};
const TinyWorld& tiny_world();

}  // namespace lofa::testing
