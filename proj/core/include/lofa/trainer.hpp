#pragma once

// Training of both hypernetwork stages and of the ablation variants.
//
//   L_stage1 = BCE(R_hat, R)
//   L_stage2 = lambda_recon * (mean|B_hat - B| + mean|A_hat - A|) + lambda_diff * L_fm(base + B_hat A_hat)
//
// Optimiser: AdamW with decoupled weight decay, lr(t) = peak * min(1, t / warmup).

#include <lofa/hypernet.hpp>
#include <lofa/responsemap.hpp>
#include <lofa/taskgen.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lofa {

struct TrainConfig {
  int stage1_steps = 4000;
  float stage1_lr = 1e-4f;
  int stage2_steps = 7000;
  float stage2_lr = 4e-5f;
  int warmup_steps = 1000;
  int batch_size = 4;
  float lambda_recon = 5.0f;
  float lambda_diff = 1.0f;
  uint64_t seed = 0;
  double desk_scale_factor = 0.25;  // multiplies step and warmup counts
  float weight_decay = 0.01f;
  float clip_norm = 1.0f;
  bool one_sided_bce = false;
  float threshold = kDefaultThreshold;
  int diff_points = 128;  // target points per L_diff evaluation

  int scaled(int steps) const;
  int stage1_budget() const { return scaled(stage1_steps); }
  int stage2_budget() const { return scaled(stage2_steps); }
  int warmup_budget() const;

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

// One adapter of the bank prepared for training.
struct TrainExample {
  std::string task_id;
  const TaskSpec* task = nullptr;
  const LoraAdapter* adapter = nullptr;
  Condition cond;
  std::map<BlockKey, Mat> target_mask;  // ground-truth response map as 0/1 floats
};

struct TrainData {
  const BaseModel* base = nullptr;
  std::vector<BlockKey> keys;
  std::vector<TrainExample> examples;
  Vocab vocab;
  int rank = 4;
};

// Vocabulary over the training prompts only; validation words outside it map to UNK.
Vocab corpus_vocab(const TaskSplit& tasks);

// Examples for bank[indices]; every adapter needs its task in `tasks` (ConfigError otherwise).
TrainData make_train_data(const BaseModel& base, const LoraBank& bank, const TaskSplit& tasks,
                          const std::vector<size_t>& indices, const Vocab& vocab, int max_cond_len,
                          float threshold);

TargetDims target_for(const BaseModel& base, int rank);

struct StepRecord {
  int step = 0;
  float lr = 0.0f;
  float loss = 0.0f;
  float recon = 0.0f;
  float diff = 0.0f;
  float grad_norm = 0.0f;
};

struct TrainHistory {
  std::string stage;
  std::vector<StepRecord> rows;

  float final_loss() const { return rows.empty() ? 0.0f : rows.back().loss; }
};

// Called after every optimiser step.
using ProgressFn = std::function<void(const std::string& stage, const StepRecord& row)>;

void write_metrics_csv(const std::vector<TrainHistory>& histories, const std::filesystem::path& file);

ad::Var stage1_loss(ad::Var probs, const Mat& target, bool one_sided = false);

struct Stage2Loss {
  ad::Var total;
  ad::Var recon;
  ad::Var diff;  // 1x1 zero when lambda_diff is 0 or no flow batch is given
};

// B_hat stacks groups of m x r, A_hat groups of r x n, in `keys` order.
// Blocks not in `keys` run with their base weight in L_diff.
Stage2Loss stage2_loss(ad::Tape& tape, ad::Var B_hat, ad::Var A_hat, const Mat& B, const Mat& A,
                       const BaseModel& base, const std::vector<BlockKey>& keys, const FlowBatch* flow,
                       float lambda_recon, float lambda_diff);

TrainHistory train_stage1(StageOneNet& net, const TrainData& data, const TrainConfig& cfg,
                          const ProgressFn& progress = {});

// Guide features for a batch; an empty function trains without guidance.
using GuideFn = std::function<std::vector<StageOneFeatures>(const HyperBatch&)>;
GuideFn stage_one_guide(const StageOneNet& s1);
GuideFn lightweight_guide(const StageTwoNet& first);

// steps < 0 uses cfg.stage2_budget().
TrainHistory train_stage2(StageTwoNet& net, const TrainData& data, const TrainConfig& cfg, const GuideFn& guide,
                          int steps = -1, const std::string& stage = "stage2", const ProgressFn& progress = {});

// Ablation variants sharing one training budget.
enum class Variant { Full, WoResponse, Lightweight, PromptInput };
inline constexpr Variant kAllVariants[] = {Variant::Full, Variant::WoResponse, Variant::Lightweight,
                                           Variant::PromptInput};
const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);

// Initialisation seeds of the networks of one pipeline, derived from the training seed.
struct PipelineSeeds {
  uint64_t stage1, stage2, first;
  static PipelineSeeds from(uint64_t train_seed);
};

struct PipelineOptions {
  HyperConfig hyper;                   // target dims are filled from the data
  std::vector<int> feature_layers = {4, 8};
  int lightweight_layers = 2;
  ProgressFn progress;
};

// A trained predictor: Stage I (or the lightweight first net) plus Stage II.
struct Pipeline {
  Variant variant = Variant::Full;
  std::optional<StageOneNet> s1;
  std::optional<StageTwoNet> first;
  StageTwoNet s2;
  std::vector<TrainHistory> histories;

  int total_steps() const;
  LoraAdapter predict(const BaseModel& base, const std::string& prompt) const;

  void save(const std::filesystem::path& dir) const;
  static Pipeline load(const std::filesystem::path& dir);
};

Pipeline train_pipeline(Variant variant, const TrainData& data, const TrainConfig& cfg,
                        const PipelineOptions& opt = {});

}  // namespace lofa
