#pragma once

// Two-stage transformer hypernetwork.
//
// One sample is one base weight block W (m x n) plus a prompt. In the default
// arrangement W is tokenized row by row (m tokens of width n, projected to the
// backbone width) and every token receives the block's depth embedding E_pos
// and block-type embedding E_type. Self-attention runs over the row tokens and
// cross-attention reads the prompt tokens.
//
//   Stage I : f_theta(W + E_pos + E_type, C)          -> R_hat in (0,1)^{m x n}
//   Stage II: f_phi(W + E_pos + E_type, C, F_stage1)  -> (B_hat, A_hat)
//
// Stage II starts from a copy of the Stage-I backbone and adds feature
// cross-attention sublayers (default at layers 4 and 8, 1-based) that read the
// Stage-I final-layer tokens F_stage1 of the same sample.

#include <lofa/autodiff.hpp>
#include <lofa/lorakit.hpp>
#include <lofa/store.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace lofa {

// ---------------------------------------------------------------------------
// Prompt conditioning

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kNull = 2;
  static constexpr int kNum = 3;

  Vocab();
  // Words of the corpus (numbers excluded) in first-seen order.
  static Vocab build(const std::vector<std::string>& corpus);

  int id(const std::string& word) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  json to_json() const;
  static Vocab from_json(const json& j);

 private:
  std::vector<std::string> words_;
  std::map<std::string, int> index_;
};

std::vector<std::string> tokenize_prompt(const std::string& prompt);

// Token ids plus, for numeric words, their value (ids hold kNum).
struct Condition {
  std::vector<int> ids;
  std::vector<float> values;
  std::string prompt_text;

  int length() const { return static_cast<int>(ids.size()); }
};

// Lowercase, whitespace split; numbers map to kNum with their value, unknown
// words to kUnk, the empty prompt to a single kNull. Truncates at max_cond_len.
Condition encode_condition(const std::string& prompt, const Vocab& vocab, int max_cond_len);

inline constexpr int kNumericFeatures = 4;
Eigen::RowVector4f numeric_features(float value);

// ---------------------------------------------------------------------------
// Architecture

enum class Arrangement {
  WeightTokens,  // weight rows are the token stream, the prompt is cross-attended
  PromptTokens,  // prompt tokens are the stream, weight rows are cross-attended
};

const char* arrangement_name(Arrangement a);
Arrangement parse_arrangement(const std::string& s);

struct TargetDims {
  int depths = 4;
  int m = 32;
  int n = 32;
  int rank = 4;
  friend bool operator==(const TargetDims&, const TargetDims&) = default;
};

struct HyperConfig {
  int layers = 8;
  int width = 64;
  int heads = 4;
  int ffn_mult = 2;
  int max_cond_len = 16;
  Arrangement arrangement = Arrangement::WeightTokens;
  std::vector<int> feature_layers;  // 1-based backbone layers with feature attention
  int guide_width = 0;              // width of guide features; 0 means `width`
  TargetDims target;

  json to_json() const;
  static HyperConfig from_json(const json& j);
};

struct AttnParams {
  ad::Param ln_g, ln_b, wq, wk, wv, wo;
};

struct HyperLayer {
  AttnParams self_attn;
  AttnParams cross_attn;
  std::optional<AttnParams> feature_attn;
  ad::Param ffn_ln_g, ffn_ln_b, w1, b1, w2, b2;
};

// A batch of (block, prompt) samples laid out for the backbone.
struct HyperBatch {
  int groups = 0;
  std::vector<BlockKey> keys;
  Mat weight_rows;                 // groups*m x n
  std::vector<int> cond_ids;       // groups*max_cond_len, PAD-filled
  Mat cond_numeric;                // groups*max_cond_len x kNumericFeatures
  std::vector<int> cond_lens;      // per group
};

struct HyperSample {
  BlockKey key;
  const Mat* weight = nullptr;
  const Condition* cond = nullptr;
};

HyperBatch make_hyper_batch(const std::vector<HyperSample>& samples, const HyperConfig& cfg);

// Guide features handed from a first-stage network to a second-stage one.
struct GuideVars {
  ad::Var tokens;              // groups*tokens_per_group x guide width
  Eigen::Index tokens_per_group = 0;
  std::vector<int> lens;       // valid tokens per group (empty: all)
};

// Per-sample final-layer features of a first-stage network (F_stage1).
struct StageOneFeatures {
  Mat tokens;  // tokens_per_group x width
  int valid = 0;
};

class HyperBackbone {
 public:
  HyperBackbone() = default;
  HyperBackbone(const HyperConfig& cfg, const Vocab& vocab, uint64_t seed);

  const HyperConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  Eigen::Index tokens_per_group() const;

  using Binder = std::function<ad::Var(const ad::Param&)>;

  // Returns final-layer tokens (after the output norm) and their valid lengths.
  ad::Var run(ad::Tape& tape, const HyperBatch& batch, const Binder& bind, const GuideVars* guide,
              std::vector<int>* valid_lens) const;

  std::vector<ad::Param*> parameters();
  // Parameters shared with any backbone of the same shape (feature attention excluded).
  std::vector<ad::Param*> shared_parameters();
  // Copies every shared parameter from `other`; shapes must agree.
  void copy_shared_from(const HyperBackbone& other);
  // Adds freshly initialised feature attention to the configured layers.
  void add_feature_attention(const std::vector<int>& layers_1based, int guide_width, uint64_t seed);

 private:
  HyperConfig cfg_;
  Vocab vocab_;

 public:
  ad::Param tok_w, tok_b;
  ad::Param e_row, e_pos, e_type;
  ad::Param cond_emb, num_w, cond_pos;
  ad::Param ctx_ln_g, ctx_ln_b;
  std::vector<HyperLayer> layers;
  ad::Param out_ln_g, out_ln_b;
};

class StageOneNet {
 public:
  StageOneNet() = default;
  StageOneNet(const HyperConfig& cfg, const Vocab& vocab, uint64_t seed);

  const HyperConfig& config() const { return backbone.config(); }
  const Vocab& vocab() const { return backbone.vocab(); }

  struct Output {
    ad::Var probs;     // groups*m x n, in (0,1)
    ad::Var features;  // final-layer tokens
    std::vector<int> lens;
  };
  Output run(ad::Tape& tape, const HyperBatch& batch, bool trainable) const;

  std::vector<ad::Param*> parameters();

  void save(const std::filesystem::path& dir, const json& meta = json::object()) const;
  static StageOneNet load(const std::filesystem::path& dir, json* meta = nullptr);

  HyperBackbone backbone;
  ad::Param head_w, head_b;  // zero-initialised
  bool trained = false;
};

class StageTwoNet {
 public:
  StageTwoNet() = default;
  // Fresh network (random backbone).
  StageTwoNet(const HyperConfig& cfg, const Vocab& vocab, uint64_t seed);
  // Backbone copied from a trained Stage-I network; feature attention added at cfg.feature_layers.
  static StageTwoNet from_stage_one(const StageOneNet& s1, const std::vector<int>& feature_layers, uint64_t seed);

  const HyperConfig& config() const { return backbone.config(); }
  const Vocab& vocab() const { return backbone.vocab(); }

  struct Output {
    ad::Var B;         // groups*m x r
    ad::Var A;         // groups*r x n
    ad::Var features;  // final-layer tokens
    std::vector<int> lens;
  };
  Output run(ad::Tape& tape, const HyperBatch& batch, const GuideVars* guide, bool trainable) const;

  std::vector<ad::Param*> parameters();

  void save(const std::filesystem::path& dir, const json& meta = json::object()) const;
  static StageTwoNet load(const std::filesystem::path& dir, json* meta = nullptr);

  HyperBackbone backbone;
  ad::Param head_b_w, head_b_b;  // pooled -> m*r, zero-initialised
  ad::Param head_a_w, head_a_b;  // pooled -> r*n, zero-initialised
};

// Single-sample operations.
struct StageOneResult {
  Mat probs;  // m x n
  StageOneFeatures features;
};
StageOneResult stage1_forward(const StageOneNet& net, BlockKey key, const Mat& weight, const Condition& cond);

LoraFactors stage2_forward(const StageTwoNet& net, BlockKey key, const Mat& weight, const Condition& cond,
                           const StageOneFeatures* f1);

// Guide features for a whole batch from either kind of first-stage network.
std::vector<StageOneFeatures> guide_features(const StageOneNet& net, const HyperBatch& batch);
std::vector<StageOneFeatures> guide_features(const StageTwoNet& net, const HyperBatch& batch);
GuideVars guide_vars(ad::Tape& tape, const std::vector<StageOneFeatures>& features);

// Counts optimiser-free inference calls; predict_lora never records a backward pass.
struct InferenceStats {
  size_t backward_passes_before = 0;
  size_t backward_passes_after = 0;
};

// Predicts a full adapter for `prompt`: Stage I then Stage II over every block of `base`.
// `first` may be null for single-stage networks; `lightweight_first` selects a
// LoRA-predicting first stage instead of a response-map one.
LoraAdapter predict_lora(const StageOneNet* s1, const StageTwoNet& s2, const BaseModel& base,
                         const std::string& prompt, InferenceStats* stats = nullptr);
LoraAdapter predict_lora_lightweight(const StageTwoNet& first, const StageTwoNet& s2, const BaseModel& base,
                                     const std::string& prompt);

// Global counter of Tape::backward calls, for the no-optimisation check.
size_t backward_pass_count();

}  // namespace lofa
