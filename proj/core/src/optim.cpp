#include <lofa/optim.hpp>

#include <algorithm>
#include <cmath>

namespace lofa {

float WarmupSchedule::at(int step) const {
  if (warmup_steps <= 0) return peak_lr;
  const float frac = std::min(1.0f, static_cast<float>(step) / static_cast<float>(warmup_steps));
  return peak_lr * frac;
}

AdamW::AdamW(std::vector<ad::Param*> params, AdamWOptions options)
    : params_(std::move(params)), opt_(options) {
  for (const ad::Param* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::zero_grad() {
  for (ad::Param* p : params_) p->zero_grad();
}

float AdamW::step(float lr) {
  double sq = 0.0;
  for (const ad::Param* p : params_) sq += static_cast<double>(p->grad.squaredNorm());
  const float norm = static_cast<float>(std::sqrt(sq));
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
  const float clip = (opt_.clip_norm > 0.0f && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0f;

  ++t_;
  const float bc1 = 1.0f - std::pow(opt_.beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(opt_.beta2, static_cast<float>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    ad::Param& p = *params_[i];
    auto g = p.grad.array() * clip;
    m_[i].array() = opt_.beta1 * m_[i].array() + (1.0f - opt_.beta1) * g;
    v_[i].array() = opt_.beta2 * v_[i].array() + (1.0f - opt_.beta2) * g.square();
    if (opt_.weight_decay > 0.0f) p.value *= (1.0f - lr * opt_.weight_decay);
    p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
  }
  return norm;
}

}  // namespace lofa
