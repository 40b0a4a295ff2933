#pragma once

// Toy flow-matching denoiser over 2D points. Each sample is a 3-token
// sequence (point, time, learned class token) processed by pre-norm
// transformer layers; the Q/K/V/O projections are the LoRA targets.

#include <lofa/autodiff.hpp>
#include <lofa/lora_adapter.hpp>
#include <lofa/store.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <vector>

namespace lofa {

using Rng = std::mt19937_64;

struct ModelDims {
  int depths = 4;
  int d = 32;  // hidden width; Q/K/V/O are d x d so m = n = d
  int heads = 4;
  int mlp_hidden = 64;
  int time_features = 16;

  int m() const { return d; }
  int n() const { return d; }
  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

json to_json(const ModelDims& dims);
ModelDims model_dims_from_json(const json& j);

// What the network regresses. Velocity: x1 - x0. Epsilon: the noise draw x1.
enum class FlowTarget { Velocity, Epsilon };

struct FlowSample {
  Eigen::Vector2f x0;
  Eigen::Vector2f x1;
  float t = 0.0f;

  Eigen::Vector2f x_t() const { return (1.0f - t) * x0 + t * x1; }
  Eigen::Vector2f v_target() const { return x1 - x0; }
};

// Struct-of-arrays batch of flow samples.
struct FlowBatch {
  Mat x0;  // N x 2
  Mat x1;  // N x 2
  Eigen::VectorXf t;

  Eigen::Index size() const { return x0.rows(); }
  Mat x_t() const;
  Mat target(FlowTarget convention) const;
  FlowSample sample(Eigen::Index i) const;
  static FlowBatch from_samples(const std::vector<FlowSample>& samples);
};

// Pairs clean points with fresh N(0, I) noise and U[0, 1] times.
FlowBatch make_flow_batch(const Mat& x0, Rng& rng);

using PointSampler = std::function<Mat(Rng&, int)>;

class BaseModel {
 public:
  BaseModel() = default;
  BaseModel(ModelDims dims, uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  FlowTarget target() const { return target_; }
  void set_target(FlowTarget t) { target_ = t; }

  // Ordered depth-major, then Q, K, V, O.
  std::vector<BlockKey> block_keys() const;
  bool has_block(BlockKey k) const;
  const Mat& weight(BlockKey k) const;
  ad::Param& weight_param(BlockKey k);

  std::vector<ad::Param*> parameters();
  std::vector<ad::Param*> non_lora_parameters();
  std::vector<NamedTensor> tensors() const;
  std::string fingerprint() const;

  void save(const std::filesystem::path& dir) const;
  static BaseModel load(const std::filesystem::path& dir);

  struct Layer {
    ad::Param ln1_g, ln1_b;
    ad::Param q, k, v, o;
    ad::Param ln2_g, ln2_b;
    ad::Param mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  ad::Param in_w, in_b;
  ad::Param time_w1, time_b1, time_w2, time_b2;
  ad::Param cls;
  std::vector<Layer> layers;
  ad::Param lnf_g, lnf_b;
  ad::Param out_w, out_b;

 private:
  std::vector<ad::Param*> all_params();

  ModelDims dims_;
  FlowTarget target_ = FlowTarget::Velocity;
};

// Per-block additive weight deltas living on a tape; blocks absent from the
// map run with their base weight.
using DeltaVars = std::map<BlockKey, ad::Var>;

// Sinusoidal time features, N x time_features.
Mat time_features(const Eigen::VectorXf& t, int count);

// Records the denoiser forward on `tape` and returns N x 2 predictions.
// With train_base the base parameters become gradient-tracked leaves;
// otherwise they enter as constants (the model is only mutated through its
// Param grads). The model must outlive the tape.
ad::Var forward_graph(ad::Tape& tape, const BaseModel& model, const Mat& x_t, const Eigen::VectorXf& t,
                      const DeltaVars* delta, bool train_base);

struct InjectedLora {
  DeltaVars delta;
  // Leaf variables of the factors (empty for dense adapters).
  std::map<BlockKey, std::pair<ad::Var, ad::Var>> factors;
};

// Injects an adapter's deltas (B*A per block, or dense deltas) on a tape.
// With track_factors, B and A enter as gradient-tracked leaves.
InjectedLora inject_lora(ad::Tape& tape, const LoraAdapter& adapter, bool track_factors);
void check_lora_shapes(const BaseModel& model, const LoraAdapter& lora);

Mat forward(const BaseModel& model, const Mat& x_t, const Eigen::VectorXf& t,
            const LoraAdapter* lora = nullptr);

float fm_loss(const BaseModel& model, const FlowBatch& batch, const LoraAdapter* lora = nullptr);
ad::Var fm_loss_graph(ad::Tape& tape, const BaseModel& model, const FlowBatch& batch, const DeltaVars* delta,
                      bool train_base);

// Euler integration of the learned flow from t = 1 (N(0, I) draws) down to t = 0.
Mat sample(const BaseModel& model, int n, int steps, const LoraAdapter* lora, uint64_t seed);
Mat sample_from(const BaseModel& model, const Mat& noise, int steps, const LoraAdapter* lora);

struct BaseTrainOptions {
  int steps = 2000;
  float lr = 1e-3f;
  int batch = 256;
  uint64_t seed = 0;
};

std::vector<float> train_base(BaseModel& model, const PointSampler& target, const BaseTrainOptions& opt);

}  // namespace lofa
