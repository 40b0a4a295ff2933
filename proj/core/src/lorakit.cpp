#include <lofa/lorakit.hpp>
#include <lofa/optim.hpp>

#include <fstream>

namespace lofa {

namespace fs = std::filesystem;

Mat delta(const LoraAdapter& lora, BlockKey key) {
  if (lora.is_dense()) {
    auto it = lora.dense.find(key);
    if (it == lora.dense.end()) throw std::out_of_range("adapter has no block " + key.name());
    return it->second;
  }
  auto it = lora.factors.find(key);
  if (it == lora.factors.end()) throw std::out_of_range("adapter has no block " + key.name());
  Mat out;
  out.noalias() = it->second.B * it->second.A;
  return out;
}

BaseModel merge(const BaseModel& base, const LoraAdapter& lora) {
  if (!lora.meta.base_fingerprint.empty() && lora.meta.base_fingerprint != base.fingerprint()) {
    throw CompatibilityError("adapter '" + lora.meta.task_id + "' was trained against a different base model");
  }
  check_lora_shapes(base, lora);
  BaseModel out = base;
  for (BlockKey k : lora.keys()) out.weight_param(k).value += delta(lora, k);
  return out;
}

LoraAdapter init_lora(const BaseModel& base, int rank, float a_init_std, uint64_t seed) {
  if (rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, a_init_std);
  LoraAdapter out;
  out.rank = rank;
  out.meta.seed = seed;
  out.meta.base_fingerprint = base.fingerprint();
  for (BlockKey k : base.block_keys()) {
    LoraFactors f{Mat::Zero(base.dims().m(), rank), Mat(rank, base.dims().n())};
    for (Eigen::Index i = 0; i < f.A.size(); ++i) f.A.data()[i] = a_init_std > 0.0f ? normal(rng) : 0.0f;
    out.factors.emplace(k, std::move(f));
  }
  return out;
}

LoraAdapter zero_lora(const BaseModel& base, int rank) { return init_lora(base, rank, 0.0f, 0); }

LoraAdapter finetune_lora(const BaseModel& base, const TaskSpec& task, const LoraTrainOptions& opt,
                          std::vector<float>* loss_history) {
  if (opt.steps < 0 || opt.lr <= 0.0f || opt.batch < 1 || opt.points_per_draw < 1) {
    throw std::invalid_argument("finetune_lora: steps must be >= 0, lr and batch positive");
  }
  LoraAdapter lora = init_lora(base, opt.rank, opt.a_init_std, opt.seed);
  lora.meta.task_id = task.task_id;
  lora.meta.prompt_text = task.prompt_text;
  lora.meta.training_steps = opt.steps;

  // Factors are trained through Params that mirror the adapter entries.
  std::vector<std::pair<BlockKey, std::pair<ad::Param, ad::Param>>> params;
  for (const auto& [k, f] : lora.factors) {
    params.emplace_back(k, std::make_pair(ad::Param(k.name() + ".B", f.B), ad::Param(k.name() + ".A", f.A)));
  }
  std::vector<ad::Param*> plist;
  for (auto& [k, ba] : params) {
    plist.push_back(&ba.first);
    plist.push_back(&ba.second);
  }
  AdamW adam(plist);
  Rng rng(opt.seed ^ 0x9e3779b97f4a7c15ULL);
  const PointSampler target = task.sampler();
  for (int step = 0; step < opt.steps; ++step) {
    const FlowBatch batch = make_flow_batch(target(rng, opt.batch * opt.points_per_draw), rng);
    adam.zero_grad();
    ad::Tape tape;
    DeltaVars deltas;
    for (auto& [k, ba] : params) deltas.emplace(k, ad::matmul(tape.param(ba.first), tape.param(ba.second)));
    ad::Var loss = fm_loss_graph(tape, base, batch, &deltas, false);
    tape.backward(loss);
    adam.step(opt.lr);
    if (loss_history) loss_history->push_back(loss.value()(0, 0));
  }
  for (auto& [k, ba] : params) {
    lora.factors[k].B = ba.first.value;
    lora.factors[k].A = ba.second.value;
  }
  return lora;
}

std::vector<size_t> LoraBank::indices(const std::string& split) const {
  std::vector<size_t> out;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == split) out.push_back(i);
  }
  return out;
}

std::set<std::string> LoraBank::family_labels(const std::string& split) const {
  std::set<std::string> out;
  for (const auto& r : records) {
    if (r.split == split) out.insert(r.family);
  }
  return out;
}

void LoraBank::validate() const {
  if (records.size() != adapters.size()) throw FormatError("bank records and adapters disagree in count");
  for (const auto& a : adapters) {
    if (a.rank != rank) throw CompatibilityError("adapter '" + a.meta.task_id + "' has a different rank");
    if (a.is_dense()) throw CompatibilityError("bank adapters must be low-rank");
    if (!a.meta.base_fingerprint.empty() && a.meta.base_fingerprint != base_fingerprint) {
      throw CompatibilityError("adapter '" + a.meta.task_id + "' has a different base fingerprint");
    }
  }
  const auto train = family_labels("train");
  for (const auto& f : family_labels("val")) {
    if (train.contains(f)) throw CompatibilityError("family '" + f + "' appears in both train and val");
  }
}

const LoraAdapter* LoraBank::find(const std::string& task_id) const {
  for (const auto& a : adapters) {
    if (a.meta.task_id == task_id) return &a;
  }
  return nullptr;
}

namespace {

json block_table(const LoraAdapter& a) {
  json out = json::array();
  for (const auto& [k, f] : a.factors) {
    out.push_back({{"depth", k.depth},
                   {"block_type", block_type_name(k.type)},
                   {"B_shape", {f.B.rows(), f.B.cols()}},
                   {"A_shape", {f.A.rows(), f.A.cols()}}});
  }
  return out;
}

json meta_json(const LoraMeta& m) {
  return {{"task_id", m.task_id},
          {"prompt_text", m.prompt_text},
          {"training_steps", m.training_steps},
          {"seed", m.seed},
          {"base_fingerprint", m.base_fingerprint}};
}

LoraMeta meta_from_json(const json& j) {
  LoraMeta m;
  m.task_id = j.value("task_id", "");
  m.prompt_text = j.value("prompt_text", "");
  m.training_steps = j.value("training_steps", 0);
  m.seed = j.value("seed", uint64_t{0});
  m.base_fingerprint = j.value("base_fingerprint", "");
  return m;
}

void write_factor_blob(const LoraAdapter& a, const fs::path& file) {
  if (a.is_dense()) throw FormatError("dense-delta adapters cannot be stored in the factor format");
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  for (const auto& [k, f] : a.factors) {
    write_f32(out, f.B);
    write_f32(out, f.A);
  }
}

std::map<BlockKey, LoraFactors> read_factor_blob(const fs::path& file, const json& blocks,
                                                 const std::string& adapter_name) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("missing adapter blob " + file.string());
  std::map<BlockKey, LoraFactors> out;
  for (const auto& b : blocks) {
    const BlockKey k{b.at("depth").get<int>(), parse_block_type(b.at("block_type").get<std::string>())};
    const std::string base = adapter_name + ":" + k.name();
    LoraFactors f;
    f.B = read_f32(in, b.at("B_shape").at(0), b.at("B_shape").at(1), base + ".B");
    f.A = read_f32(in, b.at("A_shape").at(0), b.at("A_shape").at(1), base + ".A");
    out.emplace(k, std::move(f));
  }
  in.peek();
  if (!in.eof()) throw FormatError("adapter blob " + file.string() + " is longer than its manifest declares");
  return out;
}

}  // namespace

void save_bank(const LoraBank& bank, const fs::path& dir) {
  bank.validate();
  fs::create_directories(dir / "adapters");
  for (const auto& entry : fs::directory_iterator(dir / "adapters")) fs::remove(entry.path());
  json adapters = json::array();
  json train = json::array(), val = json::array();
  for (const auto& f : bank.family_labels("train")) train.push_back(f);
  for (const auto& f : bank.family_labels("val")) val.push_back(f);
  for (size_t i = 0; i < bank.size(); ++i) {
    const LoraAdapter& a = bank.adapters[i];
    const BankRecord& r = bank.records[i];
    const std::string file = "adapters/" + a.meta.task_id + ".bin";
    write_factor_blob(a, dir / file);
    json entry = meta_json(a.meta);
    entry["file"] = file;
    entry["split"] = r.split;
    entry["family"] = r.family;
    entry["quality"] = {{"energy_distance", r.quality_energy}, {"passed", r.quality_passed}};
    entry["bytes"] = fs::file_size(dir / file);
    adapters.push_back(std::move(entry));
  }
  json manifest = {{"format", "lofa-lora-bank"},
                   {"version", kStoreVersion},
                   {"dtype", "float32"},
                   {"endianness", "little"},
                   {"rank", bank.rank},
                   {"base_fingerprint", bank.base_fingerprint},
                   {"split_tags", {{"train", train}, {"val", val}}},
                   {"blob_layout", "per block in block order: B row-major, then A row-major"},
                   {"blocks", bank.adapters.empty() ? json::array() : block_table(bank.adapters.front())},
                   {"adapters", adapters}};
  write_text_file(dir / "bank_manifest.json", manifest.dump(2) + "\n");
}

LoraBank load_bank(const fs::path& dir, const BaseModel* base, std::vector<std::string>* warnings) {
  const fs::path mpath = dir / "bank_manifest.json";
  if (!fs::exists(mpath)) throw MissingArtifactError("no LoRA bank manifest at " + mpath.string());
  json m;
  try {
    m = json::parse(read_text_file(mpath));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed bank manifest: ") + e.what());
  }
  if (m.value("format", "") != "lofa-lora-bank" || m.value("dtype", "") != "float32" ||
      m.value("endianness", "") != "little") {
    throw FormatError("unsupported LoRA bank format at " + dir.string());
  }
  LoraBank bank;
  bank.rank = m.at("rank");
  bank.base_fingerprint = m.at("base_fingerprint");
  for (const auto& e : m.at("adapters")) {
    LoraAdapter a;
    a.rank = bank.rank;
    a.meta = meta_from_json(e);
    a.factors = read_factor_blob(dir / e.at("file").get<std::string>(), m.at("blocks"), a.meta.task_id);
    BankRecord r;
    r.split = e.at("split");
    r.family = e.at("family");
    r.quality_energy = e.at("quality").value("energy_distance", -1.0f);
    r.quality_passed = e.at("quality").value("passed", true);
    bank.adapters.push_back(std::move(a));
    bank.records.push_back(std::move(r));
  }
  if (base != nullptr && base->fingerprint() != bank.base_fingerprint) {
    const std::string msg = "bank base fingerprint " + bank.base_fingerprint.substr(0, 12) +
                            " does not match provided base " + base->fingerprint().substr(0, 12);
    if (warnings) warnings->push_back(msg);
  }
  bank.validate();
  return bank;
}

void save_adapter(const LoraAdapter& lora, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  write_factor_blob(lora, file);
  json side = {{"format", "lofa-lora-adapter"},
               {"version", kStoreVersion},
               {"dtype", "float32"},
               {"endianness", "little"},
               {"rank", lora.rank},
               {"blocks", block_table(lora)},
               {"meta", meta_json(lora.meta)}};
  write_text_file(fs::path(file.string() + ".json"), side.dump(2) + "\n");
}

LoraAdapter load_adapter(const fs::path& file) {
  const fs::path side = file.string() + ".json";
  if (!fs::exists(file) || !fs::exists(side)) throw MissingArtifactError("no adapter at " + file.string());
  const json m = json::parse(read_text_file(side));
  if (m.value("format", "") != "lofa-lora-adapter") throw FormatError("not a LoRA adapter: " + side.string());
  LoraAdapter a;
  a.rank = m.at("rank");
  a.meta = meta_from_json(m.at("meta"));
  a.factors = read_factor_blob(file, m.at("blocks"), a.meta.task_id);
  return a;
}

}  // namespace lofa
