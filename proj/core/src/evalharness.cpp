#include <lofa/evalharness.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lofa {

namespace fs = std::filesystem;

Workspace Workspace::load(const fs::path& base_dir, const fs::path& tasks_file, const fs::path& bank_dir) {
  for (const fs::path& p : {base_dir / "manifest.json", tasks_file, bank_dir / "bank_manifest.json"}) {
    if (!fs::exists(p)) throw MissingArtifactError("missing artifact " + p.string());
  }
  Workspace ws;
  ws.base = BaseModel::load(base_dir);
  ws.tasks = load_tasks(tasks_file);
  ws.bank = load_bank(bank_dir, &ws.base, &ws.warnings);
  return ws;
}

// ---------------------------------------------------------------------------
// Metrics

double eval_generation(const BaseModel& base, const LoraAdapter* adapter, const TaskSpec& task, int n, int steps,
                       uint64_t seed) {
  if (n < 2) throw std::invalid_argument("eval_generation needs at least two points");
  const Mat generated = sample(base, n, steps, adapter, seed);
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 0x7f4a7c15ULL);
  const Mat target = task.sample(rng, n);
  return energy_distance(generated, target);
}

double factor_l1(const LoraAdapter& predicted, const LoraAdapter& truth) {
  if (predicted.factors.size() != truth.factors.size()) throw ShapeError("factor_l1: block sets differ");
  double total = 0.0;
  for (const auto& [k, t] : truth.factors) {
    auto it = predicted.factors.find(k);
    if (it == predicted.factors.end()) throw ShapeError("factor_l1: missing block " + k.name());
    const LoraFactors& p = it->second;
    if (p.B.rows() != t.B.rows() || p.B.cols() != t.B.cols() || p.A.rows() != t.A.rows() || p.A.cols() != t.A.cols()) {
      throw ShapeError("factor_l1: shape mismatch at " + k.name());
    }
    total += (p.B - t.B).cwiseAbs().mean() + (p.A - t.A).cwiseAbs().mean();
  }
  return truth.factors.empty() ? 0.0 : total / static_cast<double>(truth.factors.size());
}

ResponseMap stage1_response_map(const StageOneNet& s1, const BaseModel& base, const std::string& prompt,
                                float prob_threshold) {
  const HyperConfig& c = s1.config();
  const Condition cond = encode_condition(prompt, s1.vocab(), c.max_cond_len);
  std::vector<HyperSample> samples;
  for (BlockKey k : base.block_keys()) samples.push_back({k, &base.weight(k), &cond});
  ad::Tape tape(false);
  const auto out = s1.run(tape, make_hyper_batch(samples, c), false);
  const Mat& probs = out.probs.value();
  ResponseMap map;
  map.threshold = prob_threshold;
  for (size_t g = 0; g < samples.size(); ++g) {
    map.masks.emplace(samples[g].key,
                      float_to_mask(probs.middleRows(static_cast<Eigen::Index>(g) * c.target.m, c.target.m),
                                    prob_threshold));
  }
  return map;
}

namespace {

ResponseMap to_response_map(const std::map<BlockKey, Mat>& masks) {
  ResponseMap r;
  for (const auto& [k, m] : masks) r.masks.emplace(k, float_to_mask(m, 0.5f));
  return r;
}

ResponseMap random_like(const ResponseMap& shape, double density, Rng& rng) {
  std::bernoulli_distribution coin(std::clamp(density, 0.0, 1.0));
  ResponseMap r;
  r.threshold = shape.threshold;
  for (const auto& [k, m] : shape.masks) {
    Mask x(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = coin(rng) ? 1 : 0;
    r.masks.emplace(k, std::move(x));
  }
  return r;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

AlignmentResult eval_response_alignment(const Pipeline& pipeline, const BaseModel& base, const TrainData& val,
                                        float tau, uint64_t seed) {
  if (!pipeline.s1) throw std::invalid_argument("response alignment needs a Stage-I network");
  const StageOneNet untrained(pipeline.s1->config(), pipeline.s1->vocab(), 0);
  Rng rng(seed ^ 0xa11a11ULL);
  AlignmentResult r;
  std::vector<double> s1_gt, pred_s1, pred_gt, untr_gt, pred_rand;
  for (const TrainExample& ex : val.examples) {
    const ResponseMap gt = to_response_map(ex.target_mask);
    const ResponseMap s1_map = stage1_response_map(*pipeline.s1, base, ex.cond.prompt_text);
    const ResponseMap untr_map = stage1_response_map(untrained, base, ex.cond.prompt_text);
    const LoraAdapter pred = pipeline.predict(base, ex.cond.prompt_text);
    const ResponseMap pred_map = response_map(base, pred, tau);
    const ResponseMap rand_map = random_like(s1_map, s1_map.density(), rng);
    s1_gt.push_back(mask_cosine(s1_map, gt));
    pred_s1.push_back(mask_cosine(pred_map, s1_map));
    pred_gt.push_back(mask_cosine(pred_map, gt));
    untr_gt.push_back(mask_cosine(untr_map, gt));
    pred_rand.push_back(mask_cosine(pred_map, rand_map));
  }
  r.stage1_vs_gt = mean_of(s1_gt);
  r.predicted_vs_stage1 = mean_of(pred_s1);
  r.predicted_vs_gt = mean_of(pred_gt);
  r.untrained_vs_gt = mean_of(untr_gt);
  r.predicted_vs_random = mean_of(pred_rand);
  r.adapters = static_cast<int>(val.examples.size());
  return r;
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream s;
  s.precision(9);
  s << v;
  return s.str();
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

json row_json(const MetricRow& r) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"experiment", r.experiment}, {"setting", r.setting}, {"method", r.method},
          {"task_id", r.task_id},       {"seed", r.seed},       {"energy_distance", num(r.energy_distance)},
          {"recon", num(r.recon)},      {"mask_cosine", num(r.mask_cosine)}, {"budget_steps", r.budget_steps}};
}

}  // namespace

void EvalReport::write(const fs::path& dir) const {
  fs::create_directories(dir);
  json rows_json = json::array();
  std::ostringstream csv;
  csv << "experiment,setting,method,task_id,seed,energy_distance,recon,mask_cosine,budget_steps\n";
  for (const MetricRow& r : rows) {
    rows_json.push_back(row_json(r));
    csv << r.experiment << ',' << r.setting << ',' << r.method << ',' << r.task_id << ',' << r.seed << ','
        << csv_number(r.energy_distance) << ',' << csv_number(r.recon) << ',' << csv_number(r.mask_cosine) << ','
        << r.budget_steps << '\n';
  }
  std::vector<std::string> all_files = files;
  all_files.insert(all_files.begin(), {"report.json", "rows.csv"});
  const json report{{"format", "lofa-report"}, {"version", 1},  {"name", name},
                    {"config_hash", config_hash(config)}, {"config", config}, {"summary", summary},
                    {"files", all_files},   {"rows", rows_json}};
  write_text_file(dir / "rows.csv", csv.str());
  write_text_file(dir / "report.json", report.dump(2) + "\n");
}

std::string config_hash(const json& config) {
  const std::string s = config.dump();
  return sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()}).substr(0, 12);
}

fs::path run_directory(const fs::path& root, const std::string& name, const json& config) {
  return root / (name + "-" + config_hash(config));
}

void write_line_plot_svg(const fs::path& file, const std::string& title, const std::string& x_label,
                         const std::string& y_label, const std::vector<Series>& series) {
  const double W = 640, H = 420, left = 70, right = 170, top = 40, bottom = 60;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const Series& s : series) {
    for (size_t i = 0; i < s.x.size() && i < s.y.size(); ++i) {
      if (!std::isfinite(s.y[i])) continue;
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
  const double pad = std::max((y1 - y0) * 0.1, 1e-6);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (W - left - right); };
  auto py = [&](double y) { return H - bottom - (y - y0) / (y1 - y0) * (H - top - bottom); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream s;
  s.precision(6);
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\""
    << " font-size=\"12\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
    << "</text>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << H - bottom << "\" x2=\"" << W - right << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << H - bottom
    << "\" stroke=\"black\"/>\n";
  std::vector<double> xticks;
  for (const Series& ser : series) xticks.insert(xticks.end(), ser.x.begin(), ser.x.end());
  std::sort(xticks.begin(), xticks.end());
  xticks.erase(std::unique(xticks.begin(), xticks.end()), xticks.end());
  for (double x : xticks) {
    s << "<line x1=\"" << px(x) << "\" y1=\"" << H - bottom << "\" x2=\"" << px(x) << "\" y2=\"" << H - bottom + 5
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << px(x) << "\" y=\"" << H - bottom + 20 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  }
  for (int i = 0; i <= 4; ++i) {
    const double y = y0 + (y1 - y0) * i / 4.0;
    s << "<line x1=\"" << left - 5 << "\" y1=\"" << py(y) << "\" x2=\"" << left << "\" y2=\"" << py(y)
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"" << left - 8 << "\" y=\"" << py(y) + 4 << "\" text-anchor=\"end\">" << y << "</text>\n";
  }
  s << "<text x=\"" << (left + W - right) / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">"
    << xml_escape(x_label) << "</text>\n";
  s << "<text x=\"18\" y=\"" << (top + H - bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
    << (top + H - bottom) / 2 << ")\">" << xml_escape(y_label) << "</text>\n";
  for (size_t k = 0; k < series.size(); ++k) {
    const Series& ser = series[k];
    const char* color = colors[k % std::size(colors)];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i) {
      if (std::isfinite(ser.y[i])) s << px(ser.x[i]) << ',' << py(ser.y[i]) << ' ';
    }
    s << "\"/>\n";
    for (size_t i = 0; i < ser.x.size() && i < ser.y.size(); ++i) {
      if (!std::isfinite(ser.y[i])) continue;
      s << "<circle cx=\"" << px(ser.x[i]) << "\" cy=\"" << py(ser.y[i]) << "\" r=\"3.5\" fill=\"" << color
        << "\"/>\n";
    }
    const double ly = top + 10 + 20.0 * static_cast<double>(k);
    s << "<line x1=\"" << W - right + 15 << "\" y1=\"" << ly << "\" x2=\"" << W - right + 40 << "\" y2=\"" << ly
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    s << "<text x=\"" << W - right + 46 << "\" y=\"" << ly + 4 << "\">" << xml_escape(ser.label) << "</text>\n";
  }
  s << "</svg>\n";
  write_text_file(file, s.str());
}

// ---------------------------------------------------------------------------
// Experiments

json ExperimentConfig::to_json() const {
  json inj = json::array();
  for (const auto& v : injections) inj.push_back(v);
  std::vector<std::string> vars;
  for (Variant v : variants) vars.push_back(variant_name(v));
  return {{"train", train.to_json()},
          {"hyper", pipeline.hyper.to_json()},
          {"feature_layers", pipeline.feature_layers},
          {"lightweight_layers", pipeline.lightweight_layers},
          {"seeds", seeds},
          {"eval", {{"points", eval.points}, {"steps", eval.steps}, {"seed", eval.seed}}},
          {"fractions", fractions},
          {"subset_seed", subset_seed},
          {"thresholds", thresholds},
          {"injections", inj},
          {"sweep_seeds", sweep_seeds},
          {"noise_sigmas", noise_sigmas},
          {"perturb_split", perturb_split},
          {"variants", vars}};
}

namespace {

std::string data_digest(const TrainData& data) {
  std::vector<NamedTensor> tensors;
  for (const TrainExample& ex : data.examples) {
    for (const auto& [k, f] : ex.adapter->factors) {
      tensors.push_back({ex.task_id + "/" + k.name() + ".B", f.B});
      tensors.push_back({ex.task_id + "/" + k.name() + ".A", f.A});
    }
  }
  return fingerprint(tensors);
}

}  // namespace

Pipeline obtain_pipeline(Variant variant, const TrainData& data, const TrainConfig& train, const PipelineOptions& opt,
                         const fs::path& cache_dir) {
  if (cache_dir.empty()) return train_pipeline(variant, data, train, opt);
  std::vector<std::string> ids;
  for (const TrainExample& ex : data.examples) ids.push_back(ex.task_id);
  const json key{{"variant", variant_name(variant)},
                 {"train", train.to_json()},
                 {"hyper", opt.hyper.to_json()},
                 {"feature_layers", opt.feature_layers},
                 {"lightweight_layers", opt.lightweight_layers},
                 {"base", data.base->fingerprint()},
                 {"tasks", ids},
                 {"vocab", data.vocab.to_json()},
                 {"factors", data_digest(data)}};
  const fs::path dir = cache_dir / (std::string("pipe-") + variant_name(variant) + "-" + config_hash(key));
  if (fs::exists(dir / "pipeline.json")) return Pipeline::load(dir);
  Pipeline p = train_pipeline(variant, data, train, opt);
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  p.save(tmp);
  write_text_file(tmp / "cache_key.json", key.dump(2) + "\n");
  fs::remove_all(dir);
  fs::rename(tmp, dir);
  return p;
}

TrainData validation_data(const Workspace& ws, const Vocab& vocab, const HyperConfig& hyper, float threshold) {
  return make_train_data(ws.base, ws.bank, ws.tasks, ws.bank.indices("val"), vocab, hyper.max_cond_len, threshold);
}

TrainData training_data(const Workspace& ws, const std::vector<size_t>& indices, const Vocab& vocab,
                        const HyperConfig& hyper, float threshold) {
  return make_train_data(ws.base, ws.bank, ws.tasks, indices, vocab, hyper.max_cond_len, threshold);
}

double evaluate_pipeline(const Pipeline& p, const Workspace& ws, const TrainData& val, const EvalOptions& eval,
                         const std::string& experiment, const std::string& setting, uint64_t seed,
                         std::vector<MetricRow>* rows) {
  if (val.examples.empty()) throw std::invalid_argument("no validation adapters");
  std::vector<double> eds;
  for (size_t i = 0; i < val.examples.size(); ++i) {
    const TrainExample& ex = val.examples[i];
    const LoraAdapter pred = p.predict(ws.base, ex.cond.prompt_text);
    const double ed = eval_generation(ws.base, &pred, *ex.task, eval.points, eval.steps, eval.seed * 7919 + i);
    eds.push_back(ed);
    if (rows != nullptr) {
      MetricRow r;
      r.experiment = experiment;
      r.setting = setting;
      r.method = variant_name(p.variant);
      r.task_id = ex.task_id;
      r.seed = seed;
      r.energy_distance = ed;
      r.recon = factor_l1(pred, *ex.adapter);
      r.budget_steps = p.total_steps();
      rows->push_back(r);
    }
  }
  return mean_of(eds);
}

namespace {

// Energy distances of the ground-truth adapters and of the bare base model on the validation tasks.
json reference_rows(const Workspace& ws, const TrainData& val, const EvalOptions& eval, const std::string& experiment,
                    std::vector<MetricRow>* rows) {
  std::vector<double> gt, base;
  for (size_t i = 0; i < val.examples.size(); ++i) {
    const TrainExample& ex = val.examples[i];
    const uint64_t s = eval.seed * 7919 + i;
    gt.push_back(eval_generation(ws.base, ex.adapter, *ex.task, eval.points, eval.steps, s));
    base.push_back(eval_generation(ws.base, nullptr, *ex.task, eval.points, eval.steps, s));
    MetricRow r;
    r.experiment = experiment;
    r.setting = "reference";
    r.task_id = ex.task_id;
    r.method = "ground_truth";
    r.energy_distance = gt.back();
    rows->push_back(r);
    r.method = "base";
    r.energy_distance = base.back();
    rows->push_back(r);
  }
  return {{"ground_truth_mean", mean_of(gt)}, {"base_mean", mean_of(base)}};
}

json alignment_json(const AlignmentResult& a) {
  return {{"stage1_vs_gt", a.stage1_vs_gt},          {"predicted_vs_stage1", a.predicted_vs_stage1},
          {"predicted_vs_gt", a.predicted_vs_gt},    {"untrained_vs_gt", a.untrained_vs_gt},
          {"predicted_vs_random", a.predicted_vs_random}, {"adapters", a.adapters}};
}

bool majority(int wins, int total) { return total > 0 && 3 * wins >= 2 * total; }

}  // namespace

EvalReport run_evaluation(const Workspace& ws, const Pipeline& p, const ExperimentConfig& cfg) {
  EvalReport rep;
  rep.name = "evaluate";
  rep.config = cfg.to_json();
  const TrainData val = validation_data(ws, p.s2.vocab(), p.s2.config(), cfg.train.threshold);
  const double mean = evaluate_pipeline(p, ws, val, cfg.eval, "evaluate", "default", cfg.train.seed, &rep.rows);
  rep.summary = {{"method", variant_name(p.variant)},
                 {"mean_energy", mean},
                 {"reference", reference_rows(ws, val, cfg.eval, "evaluate", &rep.rows)},
                 {"validation_tasks", val.examples.size()}};
  if (p.s1) {
    rep.summary["alignment"] = alignment_json(eval_response_alignment(p, ws.base, val, cfg.train.threshold,
                                                                      cfg.eval.seed));
  }
  return rep;
}

EvalReport run_ablations(const Workspace& ws, const ExperimentConfig& cfg) {
  EvalReport rep;
  rep.name = "ablate";
  rep.config = cfg.to_json();
  const Vocab vocab = corpus_vocab(ws.tasks);
  const TrainData train = training_data(ws, ws.bank.indices("train"), vocab, cfg.pipeline.hyper, cfg.train.threshold);
  const TrainData val = validation_data(ws, vocab, cfg.pipeline.hyper, cfg.train.threshold);

  std::map<Variant, std::vector<double>> means;
  std::map<Variant, std::vector<int>> budgets;
  json alignment = json::array();
  for (uint64_t seed : cfg.seeds) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    for (Variant v : cfg.variants) {
      const Pipeline p = obtain_pipeline(v, train, tc, cfg.pipeline, cfg.cache_dir);
      means[v].push_back(evaluate_pipeline(p, ws, val, cfg.eval, "ablate", "default", seed, &rep.rows));
      budgets[v].push_back(p.total_steps());
      if (v == Variant::Full) {
        json a = alignment_json(eval_response_alignment(p, ws.base, val, cfg.train.threshold, seed));
        a["seed"] = seed;
        alignment.push_back(a);
      }
    }
  }

  json variants = json::object();
  bool parity = true;
  std::optional<std::vector<int>> reference_budget;
  for (const auto& [v, m] : means) {
    variants[variant_name(v)] = {{"mean_energy_per_seed", m},
                                 {"mean_energy", mean_of(m)},
                                 {"std_energy", std_of(m)},
                                 {"total_steps", budgets[v]}};
    if (!reference_budget) reference_budget = budgets[v];
    parity = parity && budgets[v] == *reference_budget;
  }
  json ordering = json::object();
  if (means.contains(Variant::Full)) {
    for (const auto& [v, m] : means) {
      if (v == Variant::Full) continue;
      int wins = 0;
      for (size_t i = 0; i < m.size(); ++i) wins += means[Variant::Full][i] <= m[i] ? 1 : 0;
      ordering[variant_name(v)] = {{"full_wins", wins},
                                   {"seeds", m.size()},
                                   {"majority", majority(wins, static_cast<int>(m.size()))},
                                   {"gating", v == Variant::WoResponse}};
    }
  }
  rep.summary = {{"variants", variants},
                 {"budget_parity", parity},
                 {"full_vs", ordering},
                 {"alignment", alignment},
                 {"reference", reference_rows(ws, val, cfg.eval, "ablate", &rep.rows)},
                 {"validation_tasks", val.examples.size()},
                 {"training_tasks", train.examples.size()}};
  return rep;
}

EvalReport run_sweeps(const Workspace& ws, const ExperimentConfig& cfg) {
  EvalReport rep;
  rep.name = "sweep";
  rep.config = cfg.to_json();
  for (const auto& layers : cfg.injections) {
    for (int l : layers) {
      if (l < 1 || l > cfg.pipeline.hyper.layers) throw ConfigError("experiment.injections entries must lie in 1..hyper.layers");
    }
  }
  const Vocab vocab = corpus_vocab(ws.tasks);
  const TrainData val = validation_data(ws, vocab, cfg.pipeline.hyper, cfg.train.threshold);
  json thresholds = json::array(), injections = json::array();

  auto run_setting = [&](const std::string& setting, const TrainConfig& base_tc, const PipelineOptions& po) {
    const TrainData train = training_data(ws, ws.bank.indices("train"), vocab, po.hyper, base_tc.threshold);
    std::vector<double> m;
    std::vector<int> budget;
    for (uint64_t seed : cfg.sweep_seeds) {
      TrainConfig tc = base_tc;
      tc.seed = seed;
      const Pipeline p = obtain_pipeline(Variant::Full, train, tc, po, cfg.cache_dir);
      m.push_back(evaluate_pipeline(p, ws, val, cfg.eval, "sweep", setting, seed, &rep.rows));
      budget.push_back(p.total_steps());
    }
    return json{{"setting", setting},
                {"seeds", cfg.sweep_seeds},
                {"total_steps", budget},
                {"stage1_steps", base_tc.stage1_budget()},
                {"stage2_steps", base_tc.stage2_budget()},
                {"mean_energy_per_seed", m},
                {"mean_energy", mean_of(m)}};
  };

  for (float tau : cfg.thresholds) {
    TrainConfig tc = cfg.train;
    tc.threshold = tau;
    json s = run_setting("tau=" + format_number(tau * 1000.0f) + "e-3", tc, cfg.pipeline);
    s["threshold"] = tau;
    thresholds.push_back(s);
  }
  for (const auto& layers : cfg.injections) {
    PipelineOptions po = cfg.pipeline;
    po.feature_layers = layers;
    std::string name = "inject=";
    for (size_t i = 0; i < layers.size(); ++i) name += (i ? "&" : "") + std::to_string(layers[i]);
    json s = run_setting(name, cfg.train, po);
    s["feature_layers"] = layers;
    injections.push_back(s);
  }
  rep.summary = {{"thresholds", thresholds}, {"injections", injections}};
  return rep;
}

EvalReport run_perturbation(const Workspace& ws, const ExperimentConfig& cfg) {
  EvalReport rep;
  rep.name = "perturb";
  rep.config = cfg.to_json();
  std::vector<size_t> idx;
  if (cfg.perturb_split == "all") {
    idx.resize(ws.bank.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
  } else if (cfg.perturb_split == "val" || cfg.perturb_split == "train") {
    idx = ws.bank.indices(cfg.perturb_split);
  } else {
    throw ConfigError("perturb_split must be val, train or all");
  }
  if (idx.empty()) throw std::invalid_argument("no adapters to perturb");
  const float tau = cfg.train.threshold;

  std::map<std::string, std::vector<double>> eds;
  std::map<std::string, std::vector<double>> rel;
  std::vector<double> density;
  for (size_t n = 0; n < idx.size(); ++n) {
    const LoraAdapter& a = ws.bank.adapters[idx[n]];
    const TaskSpec* task = find_task(ws.tasks, a.meta.task_id);
    if (task == nullptr) throw ConfigError("missing task data for adapter " + a.meta.task_id);
    const uint64_t s = cfg.eval.seed * 7919 + n;
    const ResponseMap rmap = response_map(ws.base, a, tau);
    density.push_back(rmap.density());
    const double ref = eval_generation(ws.base, &a, *task, cfg.eval.points, cfg.eval.steps, s);
    auto record = [&](const std::string& mode, const LoraAdapter& p) {
      const double ed = eval_generation(ws.base, &p, *task, cfg.eval.points, cfg.eval.steps, s);
      eds[mode].push_back(ed);
      rel[mode].push_back(std::abs(ed - ref) / std::max(ref, 1e-12));
      MetricRow r;
      r.experiment = "perturb";
      r.setting = mode;
      r.method = "ground_truth";
      r.task_id = a.meta.task_id;
      r.seed = s;
      r.energy_distance = ed;
      rep.rows.push_back(r);
    };
    eds["unperturbed"].push_back(ref);
    record("zero_below", perturb_masked(a, rmap, PerturbMode::Zero, 0.0f, s));
    record("zero_above", perturb_masked(a, rmap, PerturbMode::Zero, 0.0f, s, true));
    for (float sigma : cfg.noise_sigmas) {
      record("noise_below_sigma=" + format_number(sigma * 1000.0f) + "e-3",
             perturb_masked(a, rmap, PerturbMode::Noise, sigma, s));
    }
  }
  const double ref_mean = mean_of(eds["unperturbed"]);
  json modes = json::object();
  for (const auto& [mode, v] : eds) {
    json m{{"mean_energy", mean_of(v)}};
    if (mode != "unperturbed") {
      m["relative_change_of_mean"] = std::abs(mean_of(v) - ref_mean) / std::max(ref_mean, 1e-12);
      m["mean_relative_change"] = mean_of(rel[mode]);
    }
    modes[mode] = m;
  }
  rep.summary = {{"threshold", tau},
                 {"split", cfg.perturb_split},
                 {"adapters", idx.size()},
                 {"mean_density", mean_of(density)},
                 {"modes", modes}};
  return rep;
}

std::vector<std::vector<size_t>> nested_subsets(const std::vector<size_t>& indices, const std::vector<double>& fractions,
                                                uint64_t seed) {
  std::vector<size_t> perm = indices;
  Rng rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<size_t>> out;
  double prev = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("fractions must lie in (0, 1]");
    if (f < prev) throw ConfigError("fractions must be non-decreasing");
    prev = f;
    const auto count = std::max<size_t>(1, static_cast<size_t>(std::lround(f * static_cast<double>(perm.size()))));
    out.emplace_back(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(std::min(count, perm.size())));
  }
  return out;
}

EvalReport run_scaling(const Workspace& ws, const ExperimentConfig& cfg, const fs::path& plot_dir) {
  EvalReport rep;
  rep.name = "scale";
  rep.config = cfg.to_json();
  const Vocab vocab = corpus_vocab(ws.tasks);
  const TrainData val = validation_data(ws, vocab, cfg.pipeline.hyper, cfg.train.threshold);
  const auto subsets = nested_subsets(ws.bank.indices("train"), cfg.fractions, cfg.subset_seed);
  const Variant methods[] = {Variant::Full, Variant::WoResponse};

  // curves[method][seed][fraction]
  std::map<Variant, std::vector<std::vector<double>>> curves;
  for (uint64_t seed : cfg.seeds) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    for (Variant v : methods) {
      std::vector<double> curve;
      for (size_t f = 0; f < subsets.size(); ++f) {
        const TrainData train = training_data(ws, subsets[f], vocab, cfg.pipeline.hyper, tc.threshold);
        const Pipeline p = obtain_pipeline(v, train, tc, cfg.pipeline, cfg.cache_dir);
        curve.push_back(evaluate_pipeline(p, ws, val, cfg.eval, "scale", "fraction=" + format_number(
                                                                             static_cast<float>(cfg.fractions[f])),
                                          seed, &rep.rows));
      }
      curves[v].push_back(curve);
    }
  }

  json methods_json = json::object();
  std::vector<Series> series;
  for (Variant v : methods) {
    const auto& per_seed = curves[v];
    std::vector<double> mean_curve(cfg.fractions.size(), 0.0);
    int monotone = 0;
    for (const auto& c : per_seed) {
      bool ok = true;
      for (size_t f = 0; f < c.size(); ++f) {
        mean_curve[f] += c[f] / static_cast<double>(per_seed.size());
        if (f > 0 && c[f] > c[f - 1]) ok = false;
      }
      monotone += ok ? 1 : 0;
    }
    methods_json[variant_name(v)] = {{"per_seed", per_seed},
                                     {"mean_curve", mean_curve},
                                     {"monotone_seeds", monotone},
                                     {"seeds", per_seed.size()},
                                     {"majority_monotone", majority(monotone, static_cast<int>(per_seed.size()))}};
    series.push_back({variant_name(v), cfg.fractions, mean_curve});
  }
  std::vector<size_t> sizes;
  for (const auto& s : subsets) sizes.push_back(s.size());
  rep.summary = {{"fractions", cfg.fractions}, {"subset_sizes", sizes}, {"methods", methods_json}};
  if (!plot_dir.empty()) {
    write_line_plot_svg(plot_dir / "scaling.svg", "Validation energy distance vs bank fraction", "training bank fraction",
                        "mean validation energy distance", series);
    rep.files.push_back("scaling.svg");
  }
  return rep;
}

}  // namespace lofa
