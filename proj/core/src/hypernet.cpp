#include <lofa/hypernet.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <numbers>
#include <sstream>

namespace lofa {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Prompt conditioning

namespace {

const char* const kReserved[] = {"<pad>", "<unk>", "<null>", "<num>"};

bool parse_number(const std::string& word, float* value) {
  if (word.empty()) return false;
  const char c = word.front();
  if (!(std::isdigit(static_cast<unsigned char>(c)) || c == '-' || c == '+' || c == '.')) return false;
  char* end = nullptr;
  const float v = std::strtof(word.c_str(), &end);
  if (end != word.c_str() + word.size() || !std::isfinite(v)) return false;
  *value = v;
  return true;
}

}  // namespace

Vocab::Vocab() {
  for (const char* w : kReserved) {
    index_.emplace(w, static_cast<int>(words_.size()));
    words_.emplace_back(w);
  }
}

Vocab Vocab::build(const std::vector<std::string>& corpus) {
  Vocab v;
  for (const auto& prompt : corpus) {
    for (const auto& w : tokenize_prompt(prompt)) {
      float ignored = 0.0f;
      if (parse_number(w, &ignored) || v.index_.contains(w)) continue;
      v.index_.emplace(w, static_cast<int>(v.words_.size()));
      v.words_.push_back(w);
    }
  }
  return v;
}

int Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

json Vocab::to_json() const { return words_; }

Vocab Vocab::from_json(const json& j) {
  Vocab v;
  const auto words = j.get<std::vector<std::string>>();
  if (words.size() < std::size(kReserved)) throw FormatError("vocabulary is missing reserved tokens");
  for (size_t i = 0; i < std::size(kReserved); ++i) {
    if (words[i] != kReserved[i]) throw FormatError("vocabulary reserved token mismatch at " + std::to_string(i));
  }
  for (size_t i = std::size(kReserved); i < words.size(); ++i) {
    if (v.index_.contains(words[i])) throw FormatError("duplicate vocabulary word '" + words[i] + "'");
    v.index_.emplace(words[i], static_cast<int>(v.words_.size()));
    v.words_.push_back(words[i]);
  }
  return v;
}

std::vector<std::string> tokenize_prompt(const std::string& prompt) {
  std::string lower(prompt);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream in(lower);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

Condition encode_condition(const std::string& prompt, const Vocab& vocab, int max_cond_len) {
  if (max_cond_len < 1) throw std::invalid_argument("max_cond_len must be >= 1");
  Condition c;
  c.prompt_text = prompt;
  for (const auto& w : tokenize_prompt(prompt)) {
    if (c.length() == max_cond_len) break;
    float v = 0.0f;
    if (parse_number(w, &v)) {
      c.ids.push_back(Vocab::kNum);
      c.values.push_back(v);
    } else {
      c.ids.push_back(vocab.id(w));
      c.values.push_back(0.0f);
    }
  }
  if (c.ids.empty()) {
    c.ids.push_back(Vocab::kNull);
    c.values.push_back(0.0f);
  }
  return c;
}

Eigen::RowVector4f numeric_features(float value) {
  const float rad = value * std::numbers::pi_v<float> / 180.0f;
  return {value / 360.0f, value / 4.0f, std::sin(rad), std::cos(rad)};
}

// ---------------------------------------------------------------------------
// Configuration

const char* arrangement_name(Arrangement a) {
  return a == Arrangement::WeightTokens ? "weight_tokens" : "prompt_tokens";
}

Arrangement parse_arrangement(const std::string& s) {
  if (s == "weight_tokens") return Arrangement::WeightTokens;
  if (s == "prompt_tokens") return Arrangement::PromptTokens;
  throw ConfigError("unknown arrangement '" + s + "'");
}

json HyperConfig::to_json() const {
  return {{"layers", layers},
          {"width", width},
          {"heads", heads},
          {"ffn_mult", ffn_mult},
          {"max_cond_len", max_cond_len},
          {"arrangement", arrangement_name(arrangement)},
          {"feature_layers", feature_layers},
          {"guide_width", guide_width},
          {"target", {{"depths", target.depths}, {"m", target.m}, {"n", target.n}, {"rank", target.rank}}}};
}

HyperConfig HyperConfig::from_json(const json& j) {
  HyperConfig c;
  c.layers = j.at("layers");
  c.width = j.at("width");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.max_cond_len = j.at("max_cond_len");
  c.arrangement = parse_arrangement(j.at("arrangement"));
  c.feature_layers = j.at("feature_layers").get<std::vector<int>>();
  c.guide_width = j.at("guide_width");
  const json& t = j.at("target");
  c.target = {t.at("depths"), t.at("m"), t.at("n"), t.at("rank")};
  return c;
}

namespace {

void validate(const HyperConfig& c) {
  if (c.layers < 1) throw ConfigError("hypernet layers must be >= 1");
  if (c.width < 1 || c.heads < 1 || c.width % c.heads != 0) {
    throw ConfigError("hypernet width must be a positive multiple of heads");
  }
  if (c.ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
  if (c.max_cond_len < 1) throw ConfigError("max_cond_len must be >= 1");
  if (c.target.depths < 1 || c.target.m < 1 || c.target.n < 1 || c.target.rank < 1) {
    throw ConfigError("hypernet target dims must be positive");
  }
  if (c.guide_width < 0) throw ConfigError("guide_width must be >= 0");
  for (int l : c.feature_layers) {
    if (l < 1 || l > c.layers) {
      throw ConfigError("feature layer " + std::to_string(l) + " outside 1.." + std::to_string(c.layers));
    }
  }
}

ad::Param normal_param(std::string name, Eigen::Index rows, Eigen::Index cols, float stddev, Rng& rng) {
  std::normal_distribution<float> normal(0.0f, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return {std::move(name), std::move(m)};
}

ad::Param zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
  return {std::move(name), Mat::Zero(rows, cols)};
}

ad::Param ones(std::string name, Eigen::Index cols) { return {std::move(name), Mat::Ones(1, cols)}; }

AttnParams make_attn(const std::string& prefix, int d, int kv_in, float out_std, Rng& rng) {
  AttnParams p;
  p.ln_g = ones(prefix + ".ln_g", d);
  p.ln_b = zeros(prefix + ".ln_b", 1, d);
  p.wq = normal_param(prefix + ".wq", d, d, 1.0f / std::sqrt(static_cast<float>(d)), rng);
  p.wk = normal_param(prefix + ".wk", d, kv_in, 1.0f / std::sqrt(static_cast<float>(kv_in)), rng);
  p.wv = normal_param(prefix + ".wv", d, kv_in, 1.0f / std::sqrt(static_cast<float>(kv_in)), rng);
  p.wo = normal_param(prefix + ".wo", d, d, out_std, rng);
  return p;
}

void push_attn(std::vector<ad::Param*>& out, AttnParams& p) {
  for (ad::Param* q : {&p.ln_g, &p.ln_b, &p.wq, &p.wk, &p.wv, &p.wo}) out.push_back(q);
}

float residual_std(const HyperConfig& c) {
  return 1.0f / std::sqrt(static_cast<float>(c.width)) / std::sqrt(2.0f * static_cast<float>(c.layers));
}

constexpr uint64_t kFeatureSeedSalt = 0x5f3759df;

}  // namespace

// ---------------------------------------------------------------------------
// Batching

HyperBatch make_hyper_batch(const std::vector<HyperSample>& samples, const HyperConfig& cfg) {
  const int m = cfg.target.m, n = cfg.target.n, L = cfg.max_cond_len;
  HyperBatch b;
  b.groups = static_cast<int>(samples.size());
  b.weight_rows.resize(static_cast<Eigen::Index>(b.groups) * m, n);
  b.cond_ids.assign(static_cast<size_t>(b.groups) * L, Vocab::kPad);
  b.cond_numeric = Mat::Zero(static_cast<Eigen::Index>(b.groups) * L, kNumericFeatures);
  for (int g = 0; g < b.groups; ++g) {
    const HyperSample& s = samples[static_cast<size_t>(g)];
    if (s.weight == nullptr || s.cond == nullptr) throw std::invalid_argument("hyper sample without weight or prompt");
    if (s.weight->rows() != m || s.weight->cols() != n) {
      throw ShapeError("hyper sample " + s.key.name() + ": weight is " + std::to_string(s.weight->rows()) + "x" +
                       std::to_string(s.weight->cols()) + ", expected " + std::to_string(m) + "x" +
                       std::to_string(n));
    }
    if (s.key.depth < 0 || s.key.depth >= cfg.target.depths) {
      throw ShapeError("hyper sample depth " + std::to_string(s.key.depth) + " out of range");
    }
    b.keys.push_back(s.key);
    b.weight_rows.middleRows(static_cast<Eigen::Index>(g) * m, m) = *s.weight;
    const int len = std::min(s.cond->length(), L);
    if (len < 1) throw std::invalid_argument("empty condition; encode it with encode_condition");
    for (int i = 0; i < len; ++i) {
      const size_t row = static_cast<size_t>(g) * L + static_cast<size_t>(i);
      b.cond_ids[row] = s.cond->ids[static_cast<size_t>(i)];
      if (b.cond_ids[row] == Vocab::kNum) {
        b.cond_numeric.row(static_cast<Eigen::Index>(row)) = numeric_features(s.cond->values[static_cast<size_t>(i)]);
      }
    }
    b.cond_lens.push_back(len);
  }
  return b;
}

// ---------------------------------------------------------------------------
// Backbone

HyperBackbone::HyperBackbone(const HyperConfig& cfg, const Vocab& vocab, uint64_t seed) : cfg_(cfg), vocab_(vocab) {
  validate(cfg_);
  Rng rng(seed);
  const int d = cfg_.width, m = cfg_.target.m, n = cfg_.target.n;
  const float emb = 0.1f;
  tok_w = normal_param("tok.w", d, n, 1.0f / std::sqrt(static_cast<float>(n)), rng);
  tok_b = zeros("tok.b", 1, d);
  e_row = normal_param("emb.row", m, d, emb, rng);
  e_pos = normal_param("emb.pos", cfg_.target.depths, d, emb, rng);
  e_type = normal_param("emb.type", 4, d, emb, rng);
  cond_emb = normal_param("cond.emb", vocab_.size(), d, emb, rng);
  num_w = normal_param("cond.num_w", d, kNumericFeatures, 0.5f, rng);
  cond_pos = normal_param("cond.pos", cfg_.max_cond_len, d, emb, rng);
  ctx_ln_g = ones("ctx.ln_g", d);
  ctx_ln_b = zeros("ctx.ln_b", 1, d);
  const float out_std = residual_std(cfg_);
  const int hidden = d * cfg_.ffn_mult;
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layers." + std::to_string(l);
    HyperLayer layer;
    layer.self_attn = make_attn(p + ".self", d, d, out_std, rng);
    layer.cross_attn = make_attn(p + ".cross", d, d, out_std, rng);
    layer.ffn_ln_g = ones(p + ".ffn.ln_g", d);
    layer.ffn_ln_b = zeros(p + ".ffn.ln_b", 1, d);
    layer.w1 = normal_param(p + ".ffn.w1", hidden, d, 1.0f / std::sqrt(static_cast<float>(d)), rng);
    layer.b1 = zeros(p + ".ffn.b1", 1, hidden);
    layer.w2 = normal_param(p + ".ffn.w2", d, hidden,
                            1.0f / std::sqrt(static_cast<float>(hidden)) / std::sqrt(2.0f * cfg_.layers), rng);
    layer.b2 = zeros(p + ".ffn.b2", 1, d);
    layers.push_back(std::move(layer));
  }
  out_ln_g = ones("out.ln_g", d);
  out_ln_b = zeros("out.ln_b", 1, d);
  if (!cfg_.feature_layers.empty()) {
    const std::vector<int> fl = cfg_.feature_layers;
    add_feature_attention(fl, cfg_.guide_width == 0 ? d : cfg_.guide_width, seed ^ kFeatureSeedSalt);
  }
}

Eigen::Index HyperBackbone::tokens_per_group() const {
  return cfg_.arrangement == Arrangement::WeightTokens ? cfg_.target.m : cfg_.max_cond_len;
}

void HyperBackbone::add_feature_attention(const std::vector<int>& layers_1based, int guide_width, uint64_t seed) {
  if (guide_width < 1) throw ConfigError("guide width must be >= 1");
  std::vector<int> sorted(layers_1based);
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (int l : sorted) {
    if (l < 1 || l > cfg_.layers) {
      throw ConfigError("feature layer " + std::to_string(l) + " outside 1.." + std::to_string(cfg_.layers));
    }
  }
  Rng rng(seed);
  for (HyperLayer& layer : layers) layer.feature_attn.reset();
  for (int l : sorted) {
    layers[static_cast<size_t>(l - 1)].feature_attn =
        make_attn("layers." + std::to_string(l - 1) + ".feature", cfg_.width, guide_width, residual_std(cfg_), rng);
  }
  cfg_.feature_layers = sorted;
  cfg_.guide_width = guide_width;
}

std::vector<ad::Param*> HyperBackbone::shared_parameters() {
  std::vector<ad::Param*> out = {&tok_w, &tok_b, &e_row, &e_pos, &e_type, &cond_emb, &num_w, &cond_pos, &ctx_ln_g,
                                 &ctx_ln_b};
  for (HyperLayer& l : layers) {
    push_attn(out, l.self_attn);
    push_attn(out, l.cross_attn);
    for (ad::Param* p : {&l.ffn_ln_g, &l.ffn_ln_b, &l.w1, &l.b1, &l.w2, &l.b2}) out.push_back(p);
  }
  out.push_back(&out_ln_g);
  out.push_back(&out_ln_b);
  return out;
}

std::vector<ad::Param*> HyperBackbone::parameters() {
  std::vector<ad::Param*> out = shared_parameters();
  for (HyperLayer& l : layers) {
    if (l.feature_attn) push_attn(out, *l.feature_attn);
  }
  return out;
}

void HyperBackbone::copy_shared_from(const HyperBackbone& other) {
  if (other.vocab_.words() != vocab_.words()) throw CompatibilityError("backbone vocabularies differ");
  auto dst = shared_parameters();
  auto src = const_cast<HyperBackbone&>(other).shared_parameters();
  if (dst.size() != src.size()) throw CompatibilityError("backbone layouts differ");
  for (size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->name != src[i]->name || dst[i]->value.rows() != src[i]->value.rows() ||
        dst[i]->value.cols() != src[i]->value.cols()) {
      throw CompatibilityError("backbone parameter mismatch at " + dst[i]->name);
    }
    dst[i]->value = src[i]->value;
    dst[i]->zero_grad();
  }
}

namespace {

struct Ctx {
  ad::Tape& tape;
  const HyperBackbone::Binder& bind;
  int heads;
};

ad::Var linear(const Ctx& c, ad::Var x, const ad::Param& w, const ad::Param& b) {
  return ad::add_row(ad::matmul_nt(x, c.bind(w)), c.bind(b));
}

// Pre-norm attention sublayer; `src` null means self-attention.
ad::Var attend(const Ctx& c, const AttnParams& p, ad::Var h, const ad::Var* src, Eigen::Index tq, Eigen::Index tk,
               std::span<const int> lens) {
  ad::Var a = ad::layer_norm(h, c.bind(p.ln_g), c.bind(p.ln_b));
  ad::Var kv = src ? *src : a;
  ad::Var q = ad::matmul_nt(a, c.bind(p.wq));
  ad::Var k = ad::matmul_nt(kv, c.bind(p.wk));
  ad::Var v = ad::matmul_nt(kv, c.bind(p.wv));
  ad::Var o = ad::attention(q, k, v, c.heads, tq, tk, lens);
  return ad::add(h, ad::matmul_nt(o, c.bind(p.wo)));
}

}  // namespace

ad::Var HyperBackbone::run(ad::Tape& tape, const HyperBatch& batch, const Binder& bind, const GuideVars* guide,
                           std::vector<int>* valid_lens) const {
  const int G = batch.groups, m = cfg_.target.m, n = cfg_.target.n, L = cfg_.max_cond_len;
  if (G < 1) throw std::invalid_argument("empty hyper batch");
  if (batch.weight_rows.rows() != static_cast<Eigen::Index>(G) * m || batch.weight_rows.cols() != n ||
      batch.cond_ids.size() != static_cast<size_t>(G) * L || batch.cond_lens.size() != static_cast<size_t>(G)) {
    throw ShapeError("hyper batch does not match the network configuration");
  }
  const Ctx c{tape, bind, cfg_.heads};

  std::vector<int> row_idx, depth_idx, type_idx, pos_idx;
  for (int g = 0; g < G; ++g) {
    const BlockKey k = batch.keys[static_cast<size_t>(g)];
    if (k.depth < 0 || k.depth >= cfg_.target.depths) throw ShapeError("block depth out of range: " + k.name());
    for (int i = 0; i < m; ++i) {
      row_idx.push_back(i);
      depth_idx.push_back(k.depth);
      type_idx.push_back(static_cast<int>(k.type));
    }
    for (int i = 0; i < L; ++i) pos_idx.push_back(i);
  }
  for (int id : batch.cond_ids) {
    if (id < 0 || id >= vocab_.size()) throw std::out_of_range("condition token id out of vocabulary");
  }

  ad::Var wt = linear(c, tape.constant(batch.weight_rows), tok_w, tok_b);
  wt = ad::add(wt, ad::gather_rows(bind(e_row), row_idx));
  wt = ad::add(wt, ad::gather_rows(bind(e_pos), depth_idx));
  wt = ad::add(wt, ad::gather_rows(bind(e_type), type_idx));

  ad::Var ct = ad::gather_rows(bind(cond_emb), batch.cond_ids);
  ct = ad::add(ct, ad::matmul_nt(tape.constant(batch.cond_numeric), bind(num_w)));
  ct = ad::add(ct, ad::gather_rows(bind(cond_pos), pos_idx));

  const bool weights_primary = cfg_.arrangement == Arrangement::WeightTokens;
  ad::Var h = weights_primary ? wt : ct;
  ad::Var ctx = ad::layer_norm(weights_primary ? ct : wt, bind(ctx_ln_g), bind(ctx_ln_b));
  const Eigen::Index tq = weights_primary ? m : L;
  const Eigen::Index tk = weights_primary ? L : m;
  const std::span<const int> self_lens = weights_primary ? std::span<const int>{} : std::span<const int>(batch.cond_lens);
  const std::span<const int> ctx_lens = weights_primary ? std::span<const int>(batch.cond_lens) : std::span<const int>{};

  for (const HyperLayer& layer : layers) {
    h = attend(c, layer.self_attn, h, nullptr, tq, tq, self_lens);
    h = attend(c, layer.cross_attn, h, &ctx, tq, tk, ctx_lens);
    if (layer.feature_attn) {
      if (guide == nullptr) throw std::invalid_argument("feature attention needs guide features");
      if (guide->tokens.rows() != static_cast<Eigen::Index>(G) * guide->tokens_per_group ||
          guide->tokens.cols() != cfg_.guide_width) {
        throw ShapeError("guide features do not match the batch");
      }
      h = attend(c, *layer.feature_attn, h, &guide->tokens, tq, guide->tokens_per_group, guide->lens);
    }
    ad::Var a = ad::layer_norm(h, bind(layer.ffn_ln_g), bind(layer.ffn_ln_b));
    ad::Var f = linear(c, ad::silu(linear(c, a, layer.w1, layer.b1)), layer.w2, layer.b2);
    h = ad::add(h, f);
  }
  h = ad::layer_norm(h, bind(out_ln_g), bind(out_ln_b));
  if (valid_lens != nullptr) {
    *valid_lens = weights_primary ? std::vector<int>(static_cast<size_t>(G), m) : batch.cond_lens;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Stage networks

namespace {

HyperBackbone::Binder make_binder(ad::Tape& tape, bool trainable) {
  if (trainable) return [&tape](const ad::Param& p) { return tape.param(const_cast<ad::Param&>(p)); };
  return [&tape](const ad::Param& p) { return tape.constant(p.value); };
}

std::vector<NamedTensor> named(const std::vector<ad::Param*>& params) {
  std::vector<NamedTensor> out;
  for (const ad::Param* p : params) out.push_back({p->name, p->value});
  return out;
}

void assign(const std::vector<ad::Param*>& params, const TensorDir& dir) {
  for (ad::Param* p : params) {
    if (!dir.has(p->name)) throw FormatError("checkpoint is missing tensor " + p->name);
    const Mat& v = dir.get(p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
      throw FormatError("checkpoint tensor " + p->name + " has the wrong shape");
    }
    p->value = v;
    p->zero_grad();
  }
  if (dir.tensors.size() != params.size()) throw FormatError("checkpoint has unexpected tensors");
}

json net_config(const HyperBackbone& b, const json& meta) {
  return {{"hyper", b.config().to_json()}, {"vocab", b.vocab().to_json()}, {"meta", meta}};
}

TensorDir open_checkpoint(const fs::path& dir, const std::string& kind) {
  if (!fs::exists(dir / "manifest.json")) throw MissingArtifactError("no checkpoint at " + dir.string());
  TensorDir td = read_tensor_dir(dir);
  if (td.kind != kind) throw FormatError("expected a " + kind + " checkpoint, found " + td.kind);
  return td;
}

}  // namespace

StageOneNet::StageOneNet(const HyperConfig& cfg, const Vocab& vocab, uint64_t seed) : backbone(cfg, vocab, seed) {
  const int d = cfg.width, m = cfg.target.m, n = cfg.target.n;
  if (cfg.arrangement == Arrangement::WeightTokens) {
    head_w = zeros("head.w", n, d);
    head_b = zeros("head.b", 1, n);
  } else {
    head_w = zeros("head.w", static_cast<Eigen::Index>(m) * n, d);
    head_b = zeros("head.b", 1, static_cast<Eigen::Index>(m) * n);
  }
}

StageOneNet::Output StageOneNet::run(ad::Tape& tape, const HyperBatch& batch, bool trainable) const {
  const auto bind = make_binder(tape, trainable);
  Output out;
  out.features = backbone.run(tape, batch, bind, nullptr, &out.lens);
  const HyperConfig& c = config();
  if (c.arrangement == Arrangement::WeightTokens) {
    out.probs = ad::sigmoid(ad::add_row(ad::matmul_nt(out.features, bind(head_w)), bind(head_b)));
  } else {
    ad::Var pooled = ad::group_mean(out.features, backbone.tokens_per_group(), out.lens);
    ad::Var logits = ad::add_row(ad::matmul_nt(pooled, bind(head_w)), bind(head_b));
    out.probs = ad::reshape(ad::sigmoid(logits), static_cast<Eigen::Index>(batch.groups) * c.target.m, c.target.n);
  }
  return out;
}

std::vector<ad::Param*> StageOneNet::parameters() {
  auto out = backbone.parameters();
  out.push_back(&head_w);
  out.push_back(&head_b);
  return out;
}

void StageOneNet::save(const fs::path& dir, const json& meta) const {
  auto params = const_cast<StageOneNet*>(this)->parameters();
  json cfg = net_config(backbone, meta);
  cfg["trained"] = trained;
  write_tensor_dir(dir, "stage1", cfg, named(params));
}

StageOneNet StageOneNet::load(const fs::path& dir, json* meta) {
  const TensorDir td = open_checkpoint(dir, "stage1");
  StageOneNet net(HyperConfig::from_json(td.config.at("hyper")), Vocab::from_json(td.config.at("vocab")), 0);
  assign(net.parameters(), td);
  net.trained = td.config.value("trained", false);
  if (meta != nullptr) *meta = td.config.value("meta", json::object());
  return net;
}

StageTwoNet::StageTwoNet(const HyperConfig& cfg, const Vocab& vocab, uint64_t seed) : backbone(cfg, vocab, seed) {
  const int d = cfg.width, m = cfg.target.m, n = cfg.target.n, r = cfg.target.rank;
  head_b_w = zeros("head_b.w", static_cast<Eigen::Index>(m) * r, d);
  head_b_b = zeros("head_b.b", 1, static_cast<Eigen::Index>(m) * r);
  head_a_w = zeros("head_a.w", static_cast<Eigen::Index>(r) * n, d);
  head_a_b = zeros("head_a.b", 1, static_cast<Eigen::Index>(r) * n);
}

StageTwoNet StageTwoNet::from_stage_one(const StageOneNet& s1, const std::vector<int>& feature_layers,
                                        uint64_t seed) {
  HyperConfig cfg = s1.config();
  cfg.feature_layers = feature_layers;
  cfg.guide_width = s1.config().width;
  StageTwoNet net(cfg, s1.vocab(), seed);
  net.backbone.copy_shared_from(s1.backbone);
  return net;
}

StageTwoNet::Output StageTwoNet::run(ad::Tape& tape, const HyperBatch& batch, const GuideVars* guide,
                                     bool trainable) const {
  const auto bind = make_binder(tape, trainable);
  const HyperConfig& c = config();
  Output out;
  out.features = backbone.run(tape, batch, bind, guide, &out.lens);
  ad::Var pooled = ad::group_mean(out.features, backbone.tokens_per_group(), out.lens);
  const Eigen::Index G = batch.groups;
  out.B = ad::reshape(ad::add_row(ad::matmul_nt(pooled, bind(head_b_w)), bind(head_b_b)), G * c.target.m,
                      c.target.rank);
  out.A = ad::reshape(ad::add_row(ad::matmul_nt(pooled, bind(head_a_w)), bind(head_a_b)), G * c.target.rank,
                      c.target.n);
  return out;
}

std::vector<ad::Param*> StageTwoNet::parameters() {
  auto out = backbone.parameters();
  for (ad::Param* p : {&head_b_w, &head_b_b, &head_a_w, &head_a_b}) out.push_back(p);
  return out;
}

void StageTwoNet::save(const fs::path& dir, const json& meta) const {
  auto params = const_cast<StageTwoNet*>(this)->parameters();
  write_tensor_dir(dir, "stage2", net_config(backbone, meta), named(params));
}

StageTwoNet StageTwoNet::load(const fs::path& dir, json* meta) {
  const TensorDir td = open_checkpoint(dir, "stage2");
  StageTwoNet net(HyperConfig::from_json(td.config.at("hyper")), Vocab::from_json(td.config.at("vocab")), 0);
  assign(net.parameters(), td);
  if (meta != nullptr) *meta = td.config.value("meta", json::object());
  return net;
}

// ---------------------------------------------------------------------------
// Single-sample and inference helpers

namespace {

std::vector<StageOneFeatures> split_features(const Mat& tokens, Eigen::Index per_group, const std::vector<int>& lens) {
  std::vector<StageOneFeatures> out;
  for (size_t g = 0; g < lens.size(); ++g) {
    out.push_back({tokens.middleRows(static_cast<Eigen::Index>(g) * per_group, per_group), lens[g]});
  }
  return out;
}

}  // namespace

StageOneResult stage1_forward(const StageOneNet& net, BlockKey key, const Mat& weight, const Condition& cond) {
  const HyperBatch batch = make_hyper_batch({{key, &weight, &cond}}, net.config());
  ad::Tape tape(false);
  const auto out = net.run(tape, batch, false);
  StageOneResult r;
  r.probs = out.probs.value();
  r.features = {out.features.value(), out.lens.front()};
  return r;
}

LoraFactors stage2_forward(const StageTwoNet& net, BlockKey key, const Mat& weight, const Condition& cond,
                           const StageOneFeatures* f1) {
  const HyperBatch batch = make_hyper_batch({{key, &weight, &cond}}, net.config());
  ad::Tape tape(false);
  std::optional<GuideVars> guide;
  if (f1 != nullptr) guide = guide_vars(tape, {*f1});
  const auto out = net.run(tape, batch, guide ? &*guide : nullptr, false);
  return {out.B.value(), out.A.value()};
}

std::vector<StageOneFeatures> guide_features(const StageOneNet& net, const HyperBatch& batch) {
  ad::Tape tape(false);
  const auto out = net.run(tape, batch, false);
  return split_features(out.features.value(), net.backbone.tokens_per_group(), out.lens);
}

std::vector<StageOneFeatures> guide_features(const StageTwoNet& net, const HyperBatch& batch) {
  ad::Tape tape(false);
  const auto out = net.run(tape, batch, nullptr, false);
  return split_features(out.features.value(), net.backbone.tokens_per_group(), out.lens);
}

GuideVars guide_vars(ad::Tape& tape, const std::vector<StageOneFeatures>& features) {
  if (features.empty()) throw std::invalid_argument("no guide features");
  const Eigen::Index per = features.front().tokens.rows(), w = features.front().tokens.cols();
  Mat stacked(per * static_cast<Eigen::Index>(features.size()), w);
  GuideVars g;
  g.tokens_per_group = per;
  for (size_t i = 0; i < features.size(); ++i) {
    if (features[i].tokens.rows() != per || features[i].tokens.cols() != w) {
      throw ShapeError("guide features differ in shape");
    }
    stacked.middleRows(static_cast<Eigen::Index>(i) * per, per) = features[i].tokens;
    g.lens.push_back(features[i].valid);
  }
  g.tokens = tape.constant(std::move(stacked));
  return g;
}

namespace {

template <class GuideFn>
LoraAdapter predict_impl(const StageTwoNet& s2, const BaseModel& base, const std::string& prompt, GuideFn&& guide_fn) {
  const HyperConfig& c = s2.config();
  const ModelDims& dims = base.dims();
  if (c.target.depths != dims.depths || c.target.m != dims.m() || c.target.n != dims.n()) {
    throw CompatibilityError("hypernetwork target dims do not match the base model");
  }
  const Condition cond = encode_condition(prompt, s2.vocab(), c.max_cond_len);
  std::vector<HyperSample> samples;
  for (BlockKey k : base.block_keys()) samples.push_back({k, &base.weight(k), &cond});

  ad::Tape tape(false);
  std::optional<GuideVars> guide;
  if (!c.feature_layers.empty()) guide = guide_vars(tape, guide_fn(samples));
  const auto out = s2.run(tape, make_hyper_batch(samples, c), guide ? &*guide : nullptr, false);

  LoraAdapter a;
  a.rank = c.target.rank;
  a.meta.task_id = "predicted";
  a.meta.prompt_text = prompt;
  a.meta.base_fingerprint = base.fingerprint();
  const Mat& B = out.B.value();
  const Mat& A = out.A.value();
  for (size_t g = 0; g < samples.size(); ++g) {
    const auto gi = static_cast<Eigen::Index>(g);
    a.factors.emplace(samples[g].key, LoraFactors{B.middleRows(gi * c.target.m, c.target.m),
                                                  A.middleRows(gi * c.target.rank, c.target.rank)});
  }
  return a;
}

}  // namespace

LoraAdapter predict_lora(const StageOneNet* s1, const StageTwoNet& s2, const BaseModel& base, const std::string& prompt,
                         InferenceStats* stats) {
  if (stats != nullptr) stats->backward_passes_before = backward_pass_count();
  LoraAdapter a = predict_impl(s2, base, prompt, [&](const std::vector<HyperSample>& samples) {
    if (s1 == nullptr) throw std::invalid_argument("this Stage-II network needs a Stage-I network");
    return guide_features(*s1, make_hyper_batch(samples, s1->config()));
  });
  if (stats != nullptr) stats->backward_passes_after = backward_pass_count();
  return a;
}

LoraAdapter predict_lora_lightweight(const StageTwoNet& first, const StageTwoNet& s2, const BaseModel& base,
                                     const std::string& prompt) {
  return predict_impl(s2, base, prompt, [&](const std::vector<HyperSample>& samples) {
    return guide_features(first, make_hyper_batch(samples, first.config()));
  });
}

size_t backward_pass_count() { return ad::backward_calls(); }

}  // namespace lofa
