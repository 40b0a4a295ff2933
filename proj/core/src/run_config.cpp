#include <lofa/run_config.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

namespace lofa {

namespace fs = std::filesystem;

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "master seed for data generation"},
      {"base.depths", "4", "base model depth count"},
      {"base.d", "32", "base model width (LoRA blocks are d x d)"},
      {"base.heads", "4", "base model attention heads"},
      {"base.mlp_hidden", "64", "base model MLP hidden width"},
      {"base.time_features", "16", "sinusoidal time features"},
      {"base.target", "velocity", "flow-matching target: velocity or epsilon"},
      {"base.steps", "2000", "base model training steps"},
      {"base.lr", "1e-3", "base model learning rate"},
      {"base.batch", "256", "base model batch size"},
      {"tasks.train", "48", "training tasks"},
      {"tasks.val", "12", "validation tasks (held-out families)"},
      {"lora.rank", "4", "LoRA rank"},
      {"lora.steps", "1000", "LoRA fine-tuning steps per task"},
      {"lora.lr", "1e-4", "LoRA learning rate"},
      {"lora.batch", "4", "target draws per LoRA step"},
      {"lora.points_per_draw", "32", "points per target draw"},
      {"lora.a_init_std", "0.01", "standard deviation of the A initialisation"},
      {"bank.reject_energy", "0.5", "adapters above this energy distance are flagged"},
      {"bank.quality_points", "1000", "points for the build-time quality check"},
      {"bank.quality_steps", "50", "sampler steps for the quality check"},
      {"train.stage1_steps", "4000", "Stage-I steps before desk scaling"},
      {"train.stage1_lr", "1e-4", "Stage-I peak learning rate"},
      {"train.stage2_steps", "7000", "Stage-II steps before desk scaling"},
      {"train.stage2_lr", "4e-5", "Stage-II peak learning rate"},
      {"train.warmup_steps", "1000", "linear warmup steps before desk scaling"},
      {"train.batch_size", "4", "Stage-I samples per step"},
      {"train.lambda_recon", "5", "weight of the factor reconstruction loss"},
      {"train.lambda_diff", "1", "weight of the flow-matching loss"},
      {"train.desk_scale_factor", "0.25", "multiplies step and warmup counts"},
      {"train.weight_decay", "0.01", "decoupled weight decay"},
      {"train.clip_norm", "1", "global gradient-norm clip (0 disables)"},
      {"train.one_sided_bce", "false", "use -R log R_hat instead of full BCE"},
      {"train.threshold", "0.02", "response-map threshold tau"},
      {"train.diff_points", "128", "target points per flow-matching loss"},
      {"train.seed", "0", "hypernetwork training seed"},
      {"hyper.layers", "8", "backbone layers"},
      {"hyper.width", "64", "backbone width"},
      {"hyper.heads", "4", "backbone attention heads"},
      {"hyper.ffn_mult", "2", "feed-forward expansion"},
      {"hyper.max_cond_len", "16", "maximum prompt tokens"},
      {"hyper.arrangement", "weight_tokens", "weight_tokens or prompt_tokens"},
      {"hyper.feature_layers", "4,8", "1-based Stage-II layers with feature attention"},
      {"hyper.lightweight_layers", "2", "layers of the lightweight first stage"},
      {"eval.points", "1000", "points per energy-distance evaluation"},
      {"eval.steps", "50", "Euler steps when sampling"},
      {"eval.seed", "0", "evaluation seed"},
      {"experiment.seeds", "0,1,2", "training seeds for ablations and scaling"},
      {"experiment.variants", "full,wo_response,lightweight,prompt_input", "ablation variants"},
      {"experiment.fractions", "0.25,0.5,1", "bank fractions for the scaling study"},
      {"experiment.subset_seed", "0", "permutation seed for nested subsets"},
      {"experiment.thresholds", "0.01,0.015,0.02,0.025,0.03", "threshold sweep"},
      {"experiment.injections", "1&2,2&4,4&6,6&8,4&8", "feature-injection sweep"},
      {"experiment.sweep_seeds", "0", "training seeds per sweep setting"},
      {"experiment.noise_sigmas", "0,0.002,0.01", "noise levels for the perturbation study"},
      {"experiment.perturb_split", "val", "adapters perturbed: val, train or all"},
      {"experiment.cache_dir", "", "reuse trained pipelines from this directory"},
      {"paths.base", "base", "base model directory (relative to the run root)"},
      {"paths.tasks", "tasks/tasks.json", "task definitions file"},
      {"paths.bank", "bank", "LoRA bank directory"},
      {"paths.stage1", "stage1", "Stage-I checkpoint directory"},
      {"paths.stage2", "stage2", "Stage-II checkpoint directory"},
  };
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_known(const std::string& key) {
  const auto& keys = config_keys();
  return std::any_of(keys.begin(), keys.end(), [&](const ConfigKey& k) { return k.key == key; });
}

template <class T>
T parse_integral(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("key " + key + ": expected an integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size() || !std::isfinite(out)) {
    throw ConfigError("key " + key + ": expected a number, got '" + v + "'");
  }
  return out;
}

}  // namespace

RunConfig::RunConfig() {
  for (const ConfigKey& k : config_keys()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (!is_known(key)) throw ConfigError("unknown config key '" + key + "'");
  values_[key] = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    try {
      set_assignment(line);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_file(const fs::path& file) {
  if (!fs::exists(file)) throw ConfigError("config file not found: " + file.string());
  merge_text(read_text_file(file), file.string());
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int RunConfig::get_int(const std::string& key) const { return parse_integral<int>(key, get(key)); }
uint64_t RunConfig::get_u64(const std::string& key) const { return parse_integral<uint64_t>(key, get(key)); }
float RunConfig::get_float(const std::string& key) const { return static_cast<float>(parse_real(key, get(key))); }
double RunConfig::get_double(const std::string& key) const { return parse_real(key, get(key)); }

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key " + key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> RunConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  std::istringstream in(get(key));
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

json RunConfig::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

std::string config_reference() {
  std::string out;
  for (const ConfigKey& k : config_keys()) {
    out += k.key + " = " + k.default_value + "  # " + k.help + "\n";
  }
  return out;
}

ModelDims RunConfig::model_dims() const {
  ModelDims d;
  d.depths = get_int("base.depths");
  d.d = get_int("base.d");
  d.heads = get_int("base.heads");
  d.mlp_hidden = get_int("base.mlp_hidden");
  d.time_features = get_int("base.time_features");
  if (d.depths < 1 || d.d < 1 || d.heads < 1 || d.d % d.heads != 0 || d.mlp_hidden < 1 || d.time_features < 2 ||
      d.time_features % 2 != 0) {
    throw ConfigError("invalid base model dimensions");
  }
  return d;
}

BaseTrainOptions RunConfig::base_train() const {
  BaseTrainOptions o;
  o.steps = get_int("base.steps");
  o.lr = get_float("base.lr");
  o.batch = get_int("base.batch");
  o.seed = get_u64("seed");
  if (o.steps < 1 || o.lr <= 0.0f || o.batch < 2) throw ConfigError("invalid base training options");
  return o;
}

FlowTarget RunConfig::flow_target() const {
  const std::string& t = get("base.target");
  if (t == "velocity") return FlowTarget::Velocity;
  if (t == "epsilon") return FlowTarget::Epsilon;
  throw ConfigError("base.target must be velocity or epsilon");
}

BankBuildOptions RunConfig::bank_build() const {
  BankBuildOptions o;
  o.lora.rank = get_int("lora.rank");
  o.lora.steps = get_int("lora.steps");
  o.lora.lr = get_float("lora.lr");
  o.lora.batch = get_int("lora.batch");
  o.lora.points_per_draw = get_int("lora.points_per_draw");
  o.lora.a_init_std = get_float("lora.a_init_std");
  o.lora.seed = get_u64("seed");
  o.reject_energy = get_float("bank.reject_energy");
  o.quality_points = get_int("bank.quality_points");
  o.quality_steps = get_int("bank.quality_steps");
  if (o.lora.rank < 1 || o.lora.steps < 1 || o.lora.lr <= 0.0f || o.lora.batch < 1 || o.lora.points_per_draw < 1 ||
      o.lora.a_init_std < 0.0f || o.quality_points < 2 || o.quality_steps < 1) {
    throw ConfigError("invalid LoRA bank options");
  }
  return o;
}

TrainConfig RunConfig::train() const {
  TrainConfig c;
  c.stage1_steps = get_int("train.stage1_steps");
  c.stage1_lr = get_float("train.stage1_lr");
  c.stage2_steps = get_int("train.stage2_steps");
  c.stage2_lr = get_float("train.stage2_lr");
  c.warmup_steps = get_int("train.warmup_steps");
  c.batch_size = get_int("train.batch_size");
  c.lambda_recon = get_float("train.lambda_recon");
  c.lambda_diff = get_float("train.lambda_diff");
  c.desk_scale_factor = get_double("train.desk_scale_factor");
  c.weight_decay = get_float("train.weight_decay");
  c.clip_norm = get_float("train.clip_norm");
  c.one_sided_bce = get_bool("train.one_sided_bce");
  c.threshold = get_float("train.threshold");
  c.diff_points = get_int("train.diff_points");
  c.seed = get_u64("train.seed");
  c.validate();
  return c;
}

HyperConfig RunConfig::hyper() const {
  HyperConfig h;
  h.layers = get_int("hyper.layers");
  h.width = get_int("hyper.width");
  h.heads = get_int("hyper.heads");
  h.ffn_mult = get_int("hyper.ffn_mult");
  h.max_cond_len = get_int("hyper.max_cond_len");
  h.arrangement = parse_arrangement(get("hyper.arrangement"));
  return h;
}

PipelineOptions RunConfig::pipeline() const {
  PipelineOptions p;
  p.hyper = hyper();
  p.feature_layers.clear();
  for (const auto& s : get_list("hyper.feature_layers")) p.feature_layers.push_back(parse_integral<int>("hyper.feature_layers", s));
  for (int l : p.feature_layers) {
    if (l < 1 || l > p.hyper.layers) throw ConfigError("hyper.feature_layers entries must lie in 1..hyper.layers");
  }
  p.lightweight_layers = get_int("hyper.lightweight_layers");
  if (p.lightweight_layers < 1) throw ConfigError("hyper.lightweight_layers must be >= 1");
  return p;
}

EvalOptions RunConfig::eval() const {
  EvalOptions e;
  e.points = get_int("eval.points");
  e.steps = get_int("eval.steps");
  e.seed = get_u64("eval.seed");
  if (e.points < 2 || e.steps < 1) throw ConfigError("invalid evaluation options");
  return e;
}

ExperimentConfig RunConfig::experiment() const {
  ExperimentConfig c;
  c.train = train();
  c.pipeline = pipeline();
  c.eval = eval();
  c.seeds.clear();
  for (const auto& s : get_list("experiment.seeds")) c.seeds.push_back(parse_integral<uint64_t>("experiment.seeds", s));
  c.variants.clear();
  for (const auto& s : get_list("experiment.variants")) c.variants.push_back(parse_variant(s));
  c.fractions.clear();
  for (const auto& s : get_list("experiment.fractions")) c.fractions.push_back(parse_real("experiment.fractions", s));
  c.subset_seed = get_u64("experiment.subset_seed");
  c.thresholds.clear();
  for (const auto& s : get_list("experiment.thresholds")) {
    c.thresholds.push_back(static_cast<float>(parse_real("experiment.thresholds", s)));
  }
  c.injections.clear();
  for (const auto& s : get_list("experiment.injections")) {
    std::vector<int> layers;
    std::istringstream in(s);
    for (std::string l; std::getline(in, l, '&');) layers.push_back(parse_integral<int>("experiment.injections", trim(l)));
    c.injections.push_back(layers);
  }
  c.sweep_seeds.clear();
  for (const auto& s : get_list("experiment.sweep_seeds")) {
    c.sweep_seeds.push_back(parse_integral<uint64_t>("experiment.sweep_seeds", s));
  }
  c.noise_sigmas.clear();
  for (const auto& s : get_list("experiment.noise_sigmas")) {
    c.noise_sigmas.push_back(static_cast<float>(parse_real("experiment.noise_sigmas", s)));
  }
  c.perturb_split = get("experiment.perturb_split");
  if (c.perturb_split != "val" && c.perturb_split != "train" && c.perturb_split != "all") {
    throw ConfigError("experiment.perturb_split must be val, train or all");
  }
  c.cache_dir = get("experiment.cache_dir");
  if (c.seeds.empty() || c.variants.empty() || c.fractions.empty()) throw ConfigError("experiment lists must be non-empty");
  for (double f : c.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("experiment.fractions must lie in (0, 1]");
  }
  for (float t : c.thresholds) {
    if (!(t > 0.0f)) throw ConfigError("experiment.thresholds must be positive");
  }
  return c;
}

}  // namespace lofa
