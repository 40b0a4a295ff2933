#pragma once

// Desk-scale evaluation: generation quality, response alignment, ablations,
// threshold and injection sweeps, perturbation study and scaling curve.
//
// Generation quality is the energy distance between points sampled from the
// adapted base model and fresh draws from the task's target distribution.

#include <lofa/metrics.hpp>
#include <lofa/trainer.hpp>

#include <filesystem>
#include <limits>
#include <string>
#include <vector>

namespace lofa {

// Base model, task definitions and the LoRA bank, loaded together.
struct Workspace {
  BaseModel base;
  TaskSplit tasks;
  LoraBank bank;
  std::vector<std::string> warnings;

  static Workspace load(const std::filesystem::path& base_dir, const std::filesystem::path& tasks_file,
                        const std::filesystem::path& bank_dir);
};

struct EvalOptions {
  int points = 1000;
  int steps = 50;
  uint64_t seed = 0;
};

// Sampler noise and target draws both derive from `seed`, so two adapters
// evaluated with the same seed see common random numbers.
double eval_generation(const BaseModel& base, const LoraAdapter* adapter, const TaskSpec& task, int n = 1000,
                       int steps = 50, uint64_t seed = 0);

// Mean absolute factor error, summed over B and A, averaged over blocks.
double factor_l1(const LoraAdapter& predicted, const LoraAdapter& truth);

struct AlignmentResult {
  double stage1_vs_gt = 0.0;         // thresholded R_hat vs ground-truth R
  double predicted_vs_stage1 = 0.0;  // R of the predicted LoRA vs thresholded R_hat
  double predicted_vs_gt = 0.0;      // R of the predicted LoRA vs ground-truth R
  double untrained_vs_gt = 0.0;      // zero-head Stage I (R_hat = 0.5, ties to 0) vs ground truth
  double predicted_vs_random = 0.0;  // predicted R vs random masks with the Stage-I density
  int adapters = 0;
};

inline constexpr float kStageOneMaskThreshold = 0.5f;

// Thresholded Stage-I response map for one prompt over every block of `base`.
ResponseMap stage1_response_map(const StageOneNet& s1, const BaseModel& base, const std::string& prompt,
                                float prob_threshold = kStageOneMaskThreshold);

AlignmentResult eval_response_alignment(const Pipeline& pipeline, const BaseModel& base, const TrainData& val,
                                        float tau = kDefaultThreshold, uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Reports

struct MetricRow {
  std::string experiment;
  std::string setting;
  std::string method;
  std::string task_id;
  uint64_t seed = 0;
  double energy_distance = std::numeric_limits<double>::quiet_NaN();
  double recon = std::numeric_limits<double>::quiet_NaN();
  double mask_cosine = std::numeric_limits<double>::quiet_NaN();
  int budget_steps = 0;
};

struct EvalReport {
  std::string name;
  json config;
  std::vector<MetricRow> rows;
  json summary = json::object();
  std::vector<std::string> files;  // extra outputs relative to the run directory

  // report.json plus rows.csv in dir.
  void write(const std::filesystem::path& dir) const;
};

// First 12 hex digits of SHA-256 over the canonical JSON dump.
std::string config_hash(const json& config);
// root / "<name>-<hash>".
std::filesystem::path run_directory(const std::filesystem::path& root, const std::string& name, const json& config);

struct Series {
  std::string label;
  std::vector<double> x, y;
};
void write_line_plot_svg(const std::filesystem::path& file, const std::string& title, const std::string& x_label,
                         const std::string& y_label, const std::vector<Series>& series);

// ---------------------------------------------------------------------------
// Experiments

struct ExperimentConfig {
  TrainConfig train;
  PipelineOptions pipeline;
  std::vector<uint64_t> seeds = {0, 1, 2};
  EvalOptions eval;
  std::vector<double> fractions = {0.25, 0.5, 1.0};
  uint64_t subset_seed = 0;
  std::vector<float> thresholds = {kThresholdSweep[0], kThresholdSweep[1], kThresholdSweep[2], kThresholdSweep[3],
                                   kThresholdSweep[4]};
  std::vector<std::vector<int>> injections = {{1, 2}, {2, 4}, {4, 6}, {6, 8}, {4, 8}};
  std::vector<uint64_t> sweep_seeds = {0};
  std::vector<float> noise_sigmas = {0.0f, 0.002f, 0.01f};
  std::string perturb_split = "val";  // val, train or all
  std::filesystem::path cache_dir;    // trained pipelines are reused from here when set
  std::vector<Variant> variants = {Variant::Full, Variant::WoResponse, Variant::Lightweight, Variant::PromptInput};

  json to_json() const;
};

// Trains (or loads from cfg.cache_dir) the pipeline for one variant and data subset.
Pipeline obtain_pipeline(Variant variant, const TrainData& data, const TrainConfig& train, const PipelineOptions& opt,
                         const std::filesystem::path& cache_dir);

// Validation data with the full training vocabulary.
TrainData validation_data(const Workspace& ws, const Vocab& vocab, const HyperConfig& hyper, float threshold);
TrainData training_data(const Workspace& ws, const std::vector<size_t>& indices, const Vocab& vocab,
                        const HyperConfig& hyper, float threshold);

// Mean validation energy distance of a pipeline's predictions plus one row per task.
double evaluate_pipeline(const Pipeline& p, const Workspace& ws, const TrainData& val, const EvalOptions& eval,
                         const std::string& experiment, const std::string& setting, uint64_t seed,
                         std::vector<MetricRow>* rows);

// One trained pipeline on the validation tasks: per-task rows, reference
// distances and, for two-stage pipelines, response alignment.
EvalReport run_evaluation(const Workspace& ws, const Pipeline& p, const ExperimentConfig& cfg);

EvalReport run_ablations(const Workspace& ws, const ExperimentConfig& cfg);
EvalReport run_sweeps(const Workspace& ws, const ExperimentConfig& cfg);
EvalReport run_perturbation(const Workspace& ws, const ExperimentConfig& cfg);
// Writes scaling.svg into plot_dir when it is non-empty.
EvalReport run_scaling(const Workspace& ws, const ExperimentConfig& cfg, const std::filesystem::path& plot_dir = {});

// Nested prefixes of one fixed permutation of the training indices.
std::vector<std::vector<size_t>> nested_subsets(const std::vector<size_t>& indices, const std::vector<double>& fractions,
                                                uint64_t seed);

}  // namespace lofa
