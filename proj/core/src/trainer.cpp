#include <lofa/trainer.hpp>
#include <lofa/optim.hpp>

#include <cmath>
#include <fstream>
#include <sstream>

namespace lofa {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration

int TrainConfig::scaled(int steps) const {
  return std::max(1, static_cast<int>(std::lround(steps * desk_scale_factor)));
}

int TrainConfig::warmup_budget() const {
  return std::max(0, static_cast<int>(std::lround(warmup_steps * desk_scale_factor)));
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(stage1_steps > 0 && stage2_steps > 0, "step counts must be positive");
  require(stage1_lr > 0.0f && stage2_lr > 0.0f, "learning rates must be positive");
  require(warmup_steps >= 0, "warmup_steps must be >= 0");
  require(batch_size > 0, "batch_size must be positive");
  require(lambda_recon >= 0.0f && lambda_diff >= 0.0f, "loss weights must be >= 0");
  require(lambda_recon + lambda_diff > 0.0f, "at least one loss weight must be positive");
  require(desk_scale_factor > 0.0, "desk_scale_factor must be positive");
  require(weight_decay >= 0.0f && clip_norm >= 0.0f, "weight_decay and clip_norm must be >= 0");
  require(threshold > 0.0f, "threshold must be positive");
  require(diff_points >= 2, "diff_points must be >= 2");
}

json TrainConfig::to_json() const {
  return {{"stage1_steps", stage1_steps},
          {"stage1_lr", stage1_lr},
          {"stage2_steps", stage2_steps},
          {"stage2_lr", stage2_lr},
          {"warmup_steps", warmup_steps},
          {"batch_size", batch_size},
          {"lambda_recon", lambda_recon},
          {"lambda_diff", lambda_diff},
          {"seed", seed},
          {"desk_scale_factor", desk_scale_factor},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"one_sided_bce", one_sided_bce},
          {"threshold", threshold},
          {"diff_points", diff_points},
          {"effective_stage1_steps", stage1_budget()},
          {"effective_stage2_steps", stage2_budget()},
          {"effective_warmup_steps", warmup_budget()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.stage1_steps = j.value("stage1_steps", c.stage1_steps);
  c.stage1_lr = j.value("stage1_lr", c.stage1_lr);
  c.stage2_steps = j.value("stage2_steps", c.stage2_steps);
  c.stage2_lr = j.value("stage2_lr", c.stage2_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lambda_recon = j.value("lambda_recon", c.lambda_recon);
  c.lambda_diff = j.value("lambda_diff", c.lambda_diff);
  c.seed = j.value("seed", c.seed);
  c.desk_scale_factor = j.value("desk_scale_factor", c.desk_scale_factor);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.one_sided_bce = j.value("one_sided_bce", c.one_sided_bce);
  c.threshold = j.value("threshold", c.threshold);
  c.diff_points = j.value("diff_points", c.diff_points);
  return c;
}

// ---------------------------------------------------------------------------
// Data

Vocab corpus_vocab(const TaskSplit& tasks) {
  std::vector<std::string> corpus;
  for (const TaskSpec& t : tasks.train) corpus.push_back(t.prompt_text);
  return Vocab::build(corpus);
}

TrainData make_train_data(const BaseModel& base, const LoraBank& bank, const TaskSplit& tasks,
                          const std::vector<size_t>& indices, const Vocab& vocab, int max_cond_len,
                          float threshold) {
  TrainData d;
  d.base = &base;
  d.keys = base.block_keys();
  d.vocab = vocab;
  d.rank = bank.rank;
  for (size_t i : indices) {
    if (i >= bank.size()) throw std::out_of_range("bank index out of range");
    const LoraAdapter& a = bank.adapters[i];
    const TaskSpec* task = find_task(tasks, a.meta.task_id);
    if (task == nullptr) throw ConfigError("missing task data for adapter " + a.meta.task_id);
    if (a.is_dense()) throw ConfigError("adapter " + a.meta.task_id + " has no low-rank factors");
    check_lora_shapes(base, a);
    TrainExample ex;
    ex.task_id = a.meta.task_id;
    ex.task = task;
    ex.adapter = &a;
    ex.cond = encode_condition(a.meta.prompt_text.empty() ? task->prompt_text : a.meta.prompt_text, vocab,
                               max_cond_len);
    for (const auto& [k, mask] : response_map(base, a, threshold).masks) ex.target_mask.emplace(k, mask_to_float(mask));
    d.examples.push_back(std::move(ex));
  }
  return d;
}

TargetDims target_for(const BaseModel& base, int rank) {
  return {base.dims().depths, base.dims().m(), base.dims().n(), rank};
}

void write_metrics_csv(const std::vector<TrainHistory>& histories, const fs::path& file) {
  std::ostringstream out;
  out << "stage,step,lr,loss,recon,diff,grad_norm\n";
  out.precision(9);
  for (const TrainHistory& h : histories) {
    for (const StepRecord& r : h.rows) {
      out << h.stage << ',' << r.step << ',' << r.lr << ',' << r.loss << ',' << r.recon << ',' << r.diff << ','
          << r.grad_norm << '\n';
    }
  }
  write_text_file(file, out.str());
}

namespace {

std::vector<TrainHistory> read_metrics_csv(const fs::path& file) {
  std::vector<TrainHistory> out;
  std::istringstream in(read_text_file(file));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string stage, cell;
    std::getline(row, stage, ',');
    std::vector<float> v;
    while (std::getline(row, cell, ',')) v.push_back(std::stof(cell));
    if (v.size() != 6) throw FormatError("malformed metrics row in " + file.string());
    if (out.empty() || out.back().stage != stage) out.push_back({stage, {}});
    out.back().rows.push_back({static_cast<int>(v[0]), v[1], v[2], v[3], v[4], v[5]});
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

ad::Var stage1_loss(ad::Var probs, const Mat& target, bool one_sided) {
  if (probs.rows() != target.rows() || probs.cols() != target.cols()) {
    throw ShapeError("stage1_loss: prediction and target shapes differ");
  }
  return ad::bce(probs, target, 1e-7f, one_sided);
}

Stage2Loss stage2_loss(ad::Tape& tape, ad::Var B_hat, ad::Var A_hat, const Mat& B, const Mat& A,
                       const BaseModel& base, const std::vector<BlockKey>& keys, const FlowBatch* flow,
                       float lambda_recon, float lambda_diff) {
  const Eigen::Index m = base.dims().m(), r = B_hat.cols();
  const auto groups = static_cast<Eigen::Index>(keys.size());
  if (B_hat.rows() != groups * m || A_hat.rows() != groups * r || B.rows() != B_hat.rows() ||
      B.cols() != B_hat.cols() || A.rows() != A_hat.rows() || A.cols() != A_hat.cols()) {
    throw ShapeError("stage2_loss: factor shapes do not match the block list");
  }
  Stage2Loss out;
  out.recon = ad::add(ad::l1(B_hat, tape.constant(B)), ad::l1(A_hat, tape.constant(A)));
  if (flow != nullptr && lambda_diff > 0.0f) {
    DeltaVars delta;
    for (Eigen::Index g = 0; g < groups; ++g) {
      delta.emplace(keys[static_cast<size_t>(g)],
                    ad::matmul(ad::slice_rows(B_hat, g * m, m), ad::slice_rows(A_hat, g * r, r)));
    }
    out.diff = fm_loss_graph(tape, base, *flow, &delta, false);
    out.total = ad::add(ad::scale(out.recon, lambda_recon), ad::scale(out.diff, lambda_diff));
  } else {
    out.diff = tape.constant(Mat::Zero(1, 1));
    out.total = ad::scale(out.recon, lambda_recon);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loops

namespace {

float checked(float v, const std::string& stage, int step) {
  if (!std::isfinite(v)) {
    throw NumericalError(stage + ": non-finite loss at step " + std::to_string(step));
  }
  return v;
}

float scalar(ad::Var v) { return v.value()(0, 0); }

}  // namespace

TrainHistory train_stage1(StageOneNet& net, const TrainData& data, const TrainConfig& cfg,
                          const ProgressFn& progress) {
  cfg.validate();
  if (data.examples.empty() || data.keys.empty()) throw std::invalid_argument("train_stage1: empty bank");
  const int steps = cfg.stage1_budget();
  const auto n_blocks = static_cast<int>(data.keys.size());
  const int n_samples = static_cast<int>(data.examples.size()) * n_blocks;
  const int m = net.config().target.m, n = net.config().target.n;

  Rng rng(cfg.seed ^ 0x51a9e1ULL);
  std::uniform_int_distribution<int> pick(0, n_samples - 1);
  AdamW opt(net.parameters(), {.weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm});
  const WarmupSchedule sched{cfg.stage1_lr, cfg.warmup_budget()};

  TrainHistory hist{"stage1", {}};
  for (int step = 0; step < steps; ++step) {
    std::vector<HyperSample> samples;
    Mat target(static_cast<Eigen::Index>(cfg.batch_size) * m, n);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int s = pick(rng);
      const TrainExample& ex = data.examples[static_cast<size_t>(s / n_blocks)];
      const BlockKey k = data.keys[static_cast<size_t>(s % n_blocks)];
      samples.push_back({k, &data.base->weight(k), &ex.cond});
      target.middleRows(static_cast<Eigen::Index>(b) * m, m) = ex.target_mask.at(k);
    }
    const HyperBatch batch = make_hyper_batch(samples, net.config());
    ad::Tape tape;
    const auto out = net.run(tape, batch, true);
    ad::Var loss = stage1_loss(out.probs, target, cfg.one_sided_bce);
    StepRecord row;
    row.step = step;
    row.loss = checked(scalar(loss), "stage1", step);
    row.lr = sched.at(step + 1);
    opt.zero_grad();
    tape.backward(loss);
    row.grad_norm = opt.step(row.lr);
    hist.rows.push_back(row);
    if (progress) progress(hist.stage, row);
  }
  net.trained = true;
  return hist;
}

GuideFn stage_one_guide(const StageOneNet& s1) {
  return [&s1](const HyperBatch& batch) { return guide_features(s1, batch); };
}

GuideFn lightweight_guide(const StageTwoNet& first) {
  return [&first](const HyperBatch& batch) { return guide_features(first, batch); };
}

TrainHistory train_stage2(StageTwoNet& net, const TrainData& data, const TrainConfig& cfg, const GuideFn& guide,
                          int steps, const std::string& stage, const ProgressFn& progress) {
  cfg.validate();
  if (data.examples.empty() || data.keys.empty()) throw std::invalid_argument("train_stage2: empty bank");
  if (steps < 0) steps = cfg.stage2_budget();
  const HyperConfig& hc = net.config();
  const Eigen::Index m = hc.target.m, n = hc.target.n, r = hc.target.rank;
  if (r != data.rank) throw CompatibilityError("hypernetwork rank differs from the bank rank");
  const auto groups = static_cast<Eigen::Index>(data.keys.size());

  // Per-adapter batch, stacked ground-truth factors and (frozen) guide features.
  struct Prepared {
    HyperBatch batch;
    Mat B, A;
    std::vector<StageOneFeatures> guide;
  };
  std::vector<std::optional<Prepared>> cache(data.examples.size());
  auto prepare = [&](size_t e) -> const Prepared& {
    if (cache[e]) return *cache[e];
    const TrainExample& ex = data.examples[e];
    Prepared p;
    std::vector<HyperSample> samples;
    for (BlockKey k : data.keys) samples.push_back({k, &data.base->weight(k), &ex.cond});
    p.batch = make_hyper_batch(samples, hc);
    p.B.resize(groups * m, r);
    p.A.resize(groups * r, n);
    for (Eigen::Index g = 0; g < groups; ++g) {
      const LoraFactors& f = ex.adapter->factors.at(data.keys[static_cast<size_t>(g)]);
      p.B.middleRows(g * m, m) = f.B;
      p.A.middleRows(g * r, r) = f.A;
    }
    if (guide) p.guide = guide(p.batch);
    cache[e] = std::move(p);
    return *cache[e];
  };

  Rng rng(cfg.seed ^ 0x2b7e1516ULL);
  std::uniform_int_distribution<size_t> pick(0, data.examples.size() - 1);
  AdamW opt(net.parameters(), {.weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm});
  const WarmupSchedule sched{cfg.stage2_lr, cfg.warmup_budget()};

  TrainHistory hist{stage, {}};
  for (int step = 0; step < steps; ++step) {
    const size_t e = pick(rng);
    const Prepared& p = prepare(e);
    std::optional<FlowBatch> flow;
    if (cfg.lambda_diff > 0.0f) flow = make_flow_batch(data.examples[e].task->sample(rng, cfg.diff_points), rng);

    ad::Tape tape;
    std::optional<GuideVars> gv;
    if (guide) gv = guide_vars(tape, p.guide);
    const auto out = net.run(tape, p.batch, gv ? &*gv : nullptr, true);
    const Stage2Loss loss = stage2_loss(tape, out.B, out.A, p.B, p.A, *data.base, data.keys, flow ? &*flow : nullptr,
                                        cfg.lambda_recon, cfg.lambda_diff);
    StepRecord row;
    row.step = step;
    row.loss = checked(scalar(loss.total), stage, step);
    row.recon = scalar(loss.recon);
    row.diff = scalar(loss.diff);
    row.lr = sched.at(step + 1);
    opt.zero_grad();
    tape.backward(loss.total);
    row.grad_norm = opt.step(row.lr);
    hist.rows.push_back(row);
    if (progress) progress(hist.stage, row);
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Variants

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Full: return "full";
    case Variant::WoResponse: return "wo_response";
    case Variant::Lightweight: return "lightweight";
    case Variant::PromptInput: return "prompt_input";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : kAllVariants) {
    if (s == variant_name(v)) return v;
  }
  throw ConfigError("unknown variant '" + s + "'");
}

PipelineSeeds PipelineSeeds::from(uint64_t train_seed) {
  const uint64_t b = train_seed * 1000003ULL;
  return {b + 11, b + 23, b + 37};
}

int Pipeline::total_steps() const {
  size_t total = 0;
  for (const TrainHistory& h : histories) total += h.rows.size();
  return static_cast<int>(total);
}

LoraAdapter Pipeline::predict(const BaseModel& base, const std::string& prompt) const {
  switch (variant) {
    case Variant::Full:
    case Variant::PromptInput:
      return predict_lora(s1 ? &*s1 : nullptr, s2, base, prompt);
    case Variant::WoResponse:
      return predict_lora(nullptr, s2, base, prompt);
    case Variant::Lightweight:
      if (!first) throw std::logic_error("lightweight pipeline without its first network");
      return predict_lora_lightweight(*first, s2, base, prompt);
  }
  throw std::logic_error("unknown variant");
}

void Pipeline::save(const fs::path& dir) const {
  fs::create_directories(dir);
  if (s1) s1->save(dir / "stage1");
  if (first) first->save(dir / "first", {{"role", "lightweight"}});
  s2.save(dir / "stage2", {{"variant", variant_name(variant)}});
  write_metrics_csv(histories, dir / "metrics.csv");
  json j{{"format", "lofa-pipeline"},
         {"version", 1},
         {"variant", variant_name(variant)},
         {"has_stage1", s1.has_value()},
         {"has_first", first.has_value()},
         {"total_steps", total_steps()}};
  write_text_file(dir / "pipeline.json", j.dump(2) + "\n");
}

Pipeline Pipeline::load(const fs::path& dir) {
  if (!fs::exists(dir / "pipeline.json")) throw MissingArtifactError("no pipeline at " + dir.string());
  const json j = json::parse(read_text_file(dir / "pipeline.json"));
  Pipeline p;
  p.variant = parse_variant(j.at("variant"));
  if (j.at("has_stage1").get<bool>()) p.s1 = StageOneNet::load(dir / "stage1");
  if (j.at("has_first").get<bool>()) p.first = StageTwoNet::load(dir / "first");
  p.s2 = StageTwoNet::load(dir / "stage2");
  if (fs::exists(dir / "metrics.csv")) p.histories = read_metrics_csv(dir / "metrics.csv");
  return p;
}

Pipeline train_pipeline(Variant variant, const TrainData& data, const TrainConfig& cfg, const PipelineOptions& opt) {
  cfg.validate();
  if (data.base == nullptr) throw std::invalid_argument("train_pipeline: no base model");
  HyperConfig h = opt.hyper;
  h.target = target_for(*data.base, data.rank);
  h.feature_layers.clear();
  h.guide_width = 0;
  const PipelineSeeds seeds = PipelineSeeds::from(cfg.seed);
  const uint64_t s1_seed = seeds.stage1, s2_seed = seeds.stage2, first_seed = seeds.first;

  Pipeline p;
  p.variant = variant;
  switch (variant) {
    case Variant::Full:
    case Variant::PromptInput: {
      if (variant == Variant::PromptInput) h.arrangement = Arrangement::PromptTokens;
      p.s1.emplace(h, data.vocab, s1_seed);
      p.histories.push_back(train_stage1(*p.s1, data, cfg, opt.progress));
      p.s2 = StageTwoNet::from_stage_one(*p.s1, opt.feature_layers, s2_seed);
      p.histories.push_back(train_stage2(p.s2, data, cfg, stage_one_guide(*p.s1), -1, "stage2", opt.progress));
      break;
    }
    case Variant::WoResponse: {
      p.s2 = StageTwoNet(h, data.vocab, s2_seed);
      p.histories.push_back(train_stage2(p.s2, data, cfg, {}, cfg.stage1_budget() + cfg.stage2_budget(), "stage2",
                                         opt.progress));
      break;
    }
    case Variant::Lightweight: {
      HyperConfig hl = h;
      hl.layers = opt.lightweight_layers;
      p.first.emplace(hl, data.vocab, first_seed);
      p.histories.push_back(
          train_stage2(*p.first, data, cfg, {}, cfg.stage1_budget(), "lightweight", opt.progress));
      HyperConfig h2 = h;
      h2.feature_layers = opt.feature_layers;
      h2.guide_width = hl.width;
      p.s2 = StageTwoNet(h2, data.vocab, s2_seed);
      p.histories.push_back(train_stage2(p.s2, data, cfg, lightweight_guide(*p.first), -1, "stage2", opt.progress));
      break;
    }
  }
  return p;
}

}  // namespace lofa
