#pragma once

#include <lofa/autodiff.hpp>

#include <vector>

namespace lofa {

// lr(step) = peak * min(1, step / warmup_steps); constant afterwards.
struct WarmupSchedule {
  float peak_lr = 1e-4f;
  int warmup_steps = 0;

  float at(int step) const;
};

struct AdamWOptions {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;  // decoupled
  float clip_norm = 0.0f;     // global gradient-norm clip; 0 disables
};

class AdamW {
 public:
  AdamW(std::vector<ad::Param*> params, AdamWOptions options = {});

  void zero_grad();
  // Applies one update with the given learning rate and returns the pre-clip gradient norm.
  float step(float lr);

  int steps_taken() const { return t_; }

 private:
  std::vector<ad::Param*> params_;
  std::vector<Mat> m_;
  std::vector<Mat> v_;
  AdamWOptions opt_;
  int t_ = 0;
};

}  // namespace lofa
