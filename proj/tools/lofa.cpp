// lofa: command-line driver for the desk-scale pipeline.
//
//   gen-base -> gen-tasks -> build-bank -> train-stage1 -> train-stage2 -> predict / evaluate
//   analyze-responses, ablate, sweep, scale
//
// Exit codes: 0 ok, 1 internal, 2 missing artifact, 3 config error, 4 numerical failure.

#include <lofa/run_config.hpp>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdlib>
#include <iostream>

namespace fs = std::filesystem;
using namespace lofa;

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kMissing = 2, kConfig = 3, kNumerical = 4 };

struct Context {
  RunConfig cfg;
  fs::path root;
  std::string command;

  fs::path path(const std::string& key) const {
    const fs::path p = cfg.get(key);
    return p.is_absolute() ? p : root / p;
  }
};

void require_artifact(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingArtifactError(what + " not found at " + p.string() + " (run the producing step first)");
}

// run_config.json plus outputs.json (every file under dir with its SHA-256).
void write_provenance(const Context& ctx, const fs::path& dir, const json& extra = json::object()) {
  fs::create_directories(dir);
  json rc{{"command", ctx.command}, {"config", ctx.cfg.to_json()}, {"config_hash", config_hash(ctx.cfg.to_json())}};
  if (!extra.empty()) rc["artifacts"] = extra;
  write_text_file(dir / "run_config.json", rc.dump(2) + "\n");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().filename() != "outputs.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  json list = json::array();
  for (const fs::path& f : files) {
    list.push_back({{"path", fs::relative(f, dir).generic_string()},
                    {"bytes", fs::file_size(f)},
                    {"sha256", sha256_file(f)}});
  }
  write_text_file(dir / "outputs.json", json{{"command", ctx.command}, {"files", list}}.dump(2) + "\n");
}

ProgressFn progress_logger(int every) {
  return [every](const std::string& stage, const StepRecord& r) {
    if (r.step % every == 0) {
      spdlog::info("{} step {} lr {:.3g} loss {:.5f} recon {:.5f} diff {:.5f}", stage, r.step, r.lr, r.loss, r.recon,
                   r.diff);
    }
  };
}

Workspace load_workspace(const Context& ctx) {
  require_artifact(ctx.path("paths.base") / "manifest.json", "base model");
  require_artifact(ctx.path("paths.tasks"), "task file");
  require_artifact(ctx.path("paths.bank") / "bank_manifest.json", "LoRA bank");
  Workspace ws = Workspace::load(ctx.path("paths.base"), ctx.path("paths.tasks"), ctx.path("paths.bank"));
  for (const auto& w : ws.warnings) spdlog::warn("{}", w);
  return ws;
}

json workspace_fingerprints(const Workspace& ws) {
  return {{"base", ws.base.fingerprint()}, {"bank_base", ws.bank.base_fingerprint}, {"adapters", ws.bank.size()}};
}

// ---------------------------------------------------------------------------

int cmd_gen_base(const Context& ctx) {
  BaseModel model(ctx.cfg.model_dims(), ctx.cfg.get_u64("seed"));
  model.set_target(ctx.cfg.flow_target());
  const BaseTrainOptions opt = ctx.cfg.base_train();
  spdlog::info("training base model for {} steps", opt.steps);
  const auto losses = train_base(model, base_pattern_sampler(), opt);
  const fs::path dir = ctx.path("paths.base");
  model.save(dir);
  std::string csv = "step,loss\n";
  for (size_t i = 0; i < losses.size(); ++i) csv += std::to_string(i) + "," + std::to_string(losses[i]) + "\n";
  write_text_file(dir / "train_loss.csv", csv);
  Rng rng(opt.seed + 99);
  const double quality = energy_distance(sample(model, 1000, 50, nullptr, opt.seed + 7), base_pattern(rng, 1000));
  write_text_file(dir / "quality.json", json{{"energy_distance", quality}, {"points", 1000}, {"steps", 50}}.dump(2) + "\n");
  spdlog::info("base model saved to {} (energy distance to pattern {:.4f})", dir.string(), quality);
  write_provenance(ctx, dir, {{"fingerprint", model.fingerprint()}});
  return kOk;
}

int cmd_gen_tasks(const Context& ctx) {
  const TaskSplit tasks =
      make_task_families(ctx.cfg.get_u64("seed"), ctx.cfg.get_int("tasks.train"), ctx.cfg.get_int("tasks.val"));
  const fs::path file = ctx.path("paths.tasks");
  save_tasks(tasks, file);
  spdlog::info("{} training and {} validation tasks written to {}", tasks.train.size(), tasks.val.size(), file.string());
  write_provenance(ctx, file.parent_path());
  return kOk;
}

int cmd_build_bank(const Context& ctx) {
  require_artifact(ctx.path("paths.base") / "manifest.json", "base model");
  require_artifact(ctx.path("paths.tasks"), "task file");
  const BaseModel base = BaseModel::load(ctx.path("paths.base"));
  const TaskSplit tasks = load_tasks(ctx.path("paths.tasks"));
  const BankBuildOptions opt = ctx.cfg.bank_build();
  spdlog::info("fine-tuning {} adapters ({} steps each)", tasks.train.size() + tasks.val.size(), opt.lora.steps);
  const LoraBank bank = build_pairs(base, tasks, opt);
  int flagged = 0;
  for (const BankRecord& r : bank.records) flagged += r.quality_passed ? 0 : 1;
  const fs::path dir = ctx.path("paths.bank");
  save_bank(bank, dir);
  spdlog::info("bank saved to {} ({} adapters, {} above the quality threshold)", dir.string(), bank.size(), flagged);
  write_provenance(ctx, dir, {{"base", base.fingerprint()}});
  return kOk;
}

int cmd_analyze(const Context& ctx, bool perturbation) {
  const Workspace ws = load_workspace(ctx);
  const ExperimentConfig exp = ctx.cfg.experiment();
  const float tau = exp.train.threshold;
  const json hashed{{"config", ctx.cfg.to_json()}, {"artifacts", workspace_fingerprints(ws)}, {"perturb", perturbation}};
  const fs::path dir = run_directory(ctx.root, "analysis", hashed);

  json adapters = json::array();
  std::vector<NamedResponseMap> maps;
  for (size_t i = 0; i < ws.bank.size(); ++i) {
    const LoraAdapter& a = ws.bank.adapters[i];
    const MagnitudeMap mm = magnitude_map(ws.base, a);
    json dens = json::object();
    for (float t : exp.thresholds) dens[format_number(t * 1000.0f) + "e-3"] = binarize(mm, t).density();
    json blocks = json::object();
    for (const auto& [k, s] : sparsity_stats(mm, tau)) blocks[k.name()] = s;
    adapters.push_back({{"task_id", a.meta.task_id},
                        {"split", ws.bank.records[i].split},
                        {"density_by_threshold", dens},
                        {"sparsity_by_block", blocks}});
    maps.push_back({a.meta.task_id, binarize(mm, tau)});
  }
  export_response_maps(maps, dir);
  render_response_maps(maps, dir / "renders");
  json summary{{"threshold", tau}, {"adapters", adapters}};
  if (perturbation) {
    const EvalReport rep = run_perturbation(ws, exp);
    rep.write(dir / "perturbation");
    summary["perturbation"] = rep.summary;
  }
  write_text_file(dir / "analysis.json", summary.dump(2) + "\n");
  spdlog::info("response analysis written to {}", dir.string());
  write_provenance(ctx, dir, workspace_fingerprints(ws));
  std::cout << dir.string() << "\n";
  return kOk;
}

int cmd_train_stage1(const Context& ctx) {
  const Workspace ws = load_workspace(ctx);
  const TrainConfig tc = ctx.cfg.train();
  const PipelineOptions po = ctx.cfg.pipeline();
  HyperConfig h = po.hyper;
  h.target = target_for(ws.base, ws.bank.rank);
  const Vocab vocab = corpus_vocab(ws.tasks);
  const TrainData data = training_data(ws, ws.bank.indices("train"), vocab, h, tc.threshold);
  StageOneNet net(h, vocab, PipelineSeeds::from(tc.seed).stage1);
  spdlog::info("Stage I: {} adapters, {} steps", data.examples.size(), tc.stage1_budget());
  const TrainHistory hist = train_stage1(net, data, tc, progress_logger(100));
  const fs::path dir = ctx.path("paths.stage1");
  net.save(dir, {{"train", tc.to_json()}, {"base", ws.base.fingerprint()}, {"steps", hist.rows.size()}});
  write_metrics_csv({hist}, dir / "metrics.csv");
  spdlog::info("Stage I saved to {} (final loss {:.5f})", dir.string(), hist.final_loss());
  write_provenance(ctx, dir, workspace_fingerprints(ws));
  return kOk;
}

int cmd_train_stage2(const Context& ctx) {
  const Workspace ws = load_workspace(ctx);
  require_artifact(ctx.path("paths.stage1") / "manifest.json", "Stage-I checkpoint");
  const StageOneNet s1 = StageOneNet::load(ctx.path("paths.stage1"));
  if (!s1.trained) spdlog::warn("Stage-I checkpoint carries no training metadata; its guidance is untrained");
  const TrainConfig tc = ctx.cfg.train();
  const PipelineOptions po = ctx.cfg.pipeline();
  if (s1.config().target != target_for(ws.base, ws.bank.rank)) {
    throw CompatibilityError("Stage-I checkpoint targets a different base model or rank");
  }
  const TrainData data = training_data(ws, ws.bank.indices("train"), s1.vocab(), s1.config(), tc.threshold);
  StageTwoNet s2 = StageTwoNet::from_stage_one(s1, po.feature_layers, PipelineSeeds::from(tc.seed).stage2);
  spdlog::info("Stage II: {} adapters, {} steps", data.examples.size(), tc.stage2_budget());
  const TrainHistory hist = train_stage2(s2, data, tc, stage_one_guide(s1), -1, "stage2", progress_logger(100));
  const fs::path dir = ctx.path("paths.stage2");
  s2.save(dir, {{"train", tc.to_json()}, {"base", ws.base.fingerprint()}, {"steps", hist.rows.size()}});
  write_metrics_csv({hist}, dir / "metrics.csv");
  spdlog::info("Stage II saved to {} (final loss {:.5f})", dir.string(), hist.final_loss());
  write_provenance(ctx, dir, workspace_fingerprints(ws));
  return kOk;
}

Pipeline load_two_stage(const Context& ctx) {
  require_artifact(ctx.path("paths.stage1") / "manifest.json", "Stage-I checkpoint");
  require_artifact(ctx.path("paths.stage2") / "manifest.json", "Stage-II checkpoint");
  Pipeline p;
  p.variant = Variant::Full;
  p.s1 = StageOneNet::load(ctx.path("paths.stage1"));
  p.s2 = StageTwoNet::load(ctx.path("paths.stage2"));
  if (p.s2.config().arrangement == Arrangement::PromptTokens) p.variant = Variant::PromptInput;
  return p;
}

int cmd_predict(const Context& ctx, const std::string& prompt, const fs::path& out) {
  require_artifact(ctx.path("paths.base") / "manifest.json", "base model");
  const BaseModel base = BaseModel::load(ctx.path("paths.base"));
  const Pipeline p = load_two_stage(ctx);
  InferenceStats stats;
  const auto t0 = std::chrono::steady_clock::now();
  const LoraAdapter a = predict_lora(&*p.s1, p.s2, base, prompt, &stats);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_adapter(a, out);
  std::cout << "wall_clock_s=" << secs << " backward_passes=" << stats.backward_passes_after - stats.backward_passes_before
            << " blocks=" << a.factors.size() << " out=" << out.string() << "\n";
  const fs::path dir = ctx.root / "predict";
  write_text_file(dir / "prediction.json",
                  json{{"prompt", prompt}, {"adapter", fs::absolute(out).string()}, {"adapter_sha256", sha256_file(out)}}
                          .dump(2) +
                      "\n");
  write_provenance(ctx, dir, {{"base", base.fingerprint()}});
  return kOk;
}

int cmd_evaluate(const Context& ctx) {
  const Workspace ws = load_workspace(ctx);
  const Pipeline p = load_two_stage(ctx);
  const ExperimentConfig exp = ctx.cfg.experiment();
  const json hashed{{"config", ctx.cfg.to_json()},
                    {"artifacts", workspace_fingerprints(ws)},
                    {"stage2", sha256_file(ctx.path("paths.stage2") / "manifest.json")}};
  const fs::path dir = run_directory(ctx.root, "evaluate", hashed);
  EvalReport rep = run_evaluation(ws, p, exp);
  rep.config = hashed;
  rep.write(dir);
  spdlog::info("mean validation energy distance {:.4f}; report in {}", rep.summary["mean_energy"].get<double>(),
               dir.string());
  write_provenance(ctx, dir, workspace_fingerprints(ws));
  std::cout << dir.string() << "\n";
  return kOk;
}

int cmd_experiment(const Context& ctx) {
  const Workspace ws = load_workspace(ctx);
  ExperimentConfig exp = ctx.cfg.experiment();
  const json hashed{{"config", ctx.cfg.to_json()}, {"artifacts", workspace_fingerprints(ws)}};
  const fs::path dir = run_directory(ctx.root, ctx.command, hashed);
  if (exp.cache_dir.empty()) {
    exp.cache_dir = dir / "pipelines";
  } else if (exp.cache_dir.is_relative()) {
    exp.cache_dir = ctx.root / exp.cache_dir;
  }
  exp.pipeline.progress = progress_logger(250);
  EvalReport rep;
  if (ctx.command == "ablate") {
    rep = run_ablations(ws, exp);
  } else if (ctx.command == "sweep") {
    rep = run_sweeps(ws, exp);
  } else {
    rep = run_scaling(ws, exp, dir);
  }
  rep.config = hashed;
  rep.write(dir);
  spdlog::info("{} report written to {}", ctx.command, dir.string());
  write_provenance(ctx, dir, workspace_fingerprints(ws));
  std::cout << dir.string() << "\n";
  return kOk;
}

int fail(int code, const char* category, const std::string& message) {
  std::cerr << "error: " << category << ": " << message << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale two-stage LoRA hypernetwork pipeline"};
  app.require_subcommand(0, 1);
  std::string config_file;
  std::vector<std::string> overrides;
  bool list_keys = false, verbose = false;
  app.add_option("-c,--config", config_file, "key = value config file");
  app.add_option("--set", overrides, "override one key (key=value), repeatable");
  app.add_flag("--list-keys", list_keys, "print every config key with its default and exit");
  app.add_flag("-v,--verbose", verbose, "debug logging");

  auto* gen_base = app.add_subcommand("gen-base", "train the toy flow-matching base model");
  auto* gen_tasks = app.add_subcommand("gen-tasks", "write training and held-out task definitions");
  auto* build_bank = app.add_subcommand("build-bank", "fine-tune one LoRA per task");
  auto* analyze = app.add_subcommand("analyze-responses", "magnitude and response maps of the bank");
  bool perturb = false;
  analyze->add_flag("--perturbation", perturb, "also run the sub-threshold perturbation study");
  auto* stage1 = app.add_subcommand("train-stage1", "train the response-map predictor");
  auto* stage2 = app.add_subcommand("train-stage2", "train the LoRA predictor guided by Stage I");
  auto* predict = app.add_subcommand("predict", "predict an adapter for a prompt");
  std::string prompt;
  std::string out;
  predict->add_option("--prompt", prompt, "condition text")->required();
  predict->add_option("--out", out, "adapter file to write")->required();
  auto* evaluate = app.add_subcommand("evaluate", "evaluate the trained two-stage pipeline on held-out tasks");
  auto* ablate = app.add_subcommand("ablate", "train and compare the four ablation variants");
  auto* sweep = app.add_subcommand("sweep", "threshold and feature-injection sweeps");
  auto* scale = app.add_subcommand("scale", "validation metric against bank fraction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kConfig, "config", e.what());
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
  if (list_keys) {
    std::cout << config_reference();
    return kOk;
  }
  if (app.get_subcommands().empty()) return fail(kConfig, "config", "a subcommand is required (see --help)");

  try {
    Context ctx;
    if (!config_file.empty()) ctx.cfg.merge_file(config_file);
    for (const auto& o : overrides) ctx.cfg.set_assignment(o);
    const char* root = std::getenv("LOFA_RUN_DIR");
    ctx.root = root != nullptr && *root != '\0' ? fs::path(root) : fs::path("runs");
    ctx.command = app.get_subcommands().front()->get_name();
    fs::create_directories(ctx.root);

    if (app.got_subcommand(gen_base)) return cmd_gen_base(ctx);
    if (app.got_subcommand(gen_tasks)) return cmd_gen_tasks(ctx);
    if (app.got_subcommand(build_bank)) return cmd_build_bank(ctx);
    if (app.got_subcommand(analyze)) return cmd_analyze(ctx, perturb);
    if (app.got_subcommand(stage1)) return cmd_train_stage1(ctx);
    if (app.got_subcommand(stage2)) return cmd_train_stage2(ctx);
    if (app.got_subcommand(predict)) return cmd_predict(ctx, prompt, out);
    if (app.got_subcommand(evaluate)) return cmd_evaluate(ctx);
    if (app.got_subcommand(ablate) || app.got_subcommand(sweep) || app.got_subcommand(scale)) return cmd_experiment(ctx);
    return fail(kConfig, "config", "unknown subcommand");
  } catch (const MissingArtifactError& e) {
    return fail(kMissing, "missing_artifact", e.what());
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const NumericalError& e) {
    return fail(kNumerical, "numerical", e.what());
  } catch (const CompatibilityError& e) {
    return fail(kInternal, "compatibility", e.what());
  } catch (const FormatError& e) {
    return fail(kInternal, "format", e.what());
  } catch (const std::exception& e) {
    return fail(kInternal, "internal", e.what());
  }
}
