#include <lofa/toybase.hpp>
#include <lofa/optim.hpp>

#include <cmath>
#include <numbers>

namespace lofa {

namespace fs = std::filesystem;

json to_json(const ModelDims& dims) {
  return {{"depths", dims.depths},
          {"d", dims.d},
          {"heads", dims.heads},
          {"mlp_hidden", dims.mlp_hidden},
          {"time_features", dims.time_features},
          {"m", dims.m()},
          {"n", dims.n()},
          {"point_dim", 2}};
}

ModelDims model_dims_from_json(const json& j) {
  ModelDims d;
  d.depths = j.at("depths");
  d.d = j.at("d");
  d.heads = j.at("heads");
  d.mlp_hidden = j.at("mlp_hidden");
  d.time_features = j.at("time_features");
  return d;
}

Mat FlowBatch::x_t() const {
  Mat out(x0.rows(), 2);
  for (Eigen::Index i = 0; i < x0.rows(); ++i) out.row(i) = (1.0f - t(i)) * x0.row(i) + t(i) * x1.row(i);
  return out;
}

Mat FlowBatch::target(FlowTarget convention) const {
  return convention == FlowTarget::Velocity ? Mat(x1 - x0) : x1;
}

FlowSample FlowBatch::sample(Eigen::Index i) const {
  return {x0.row(i).transpose(), x1.row(i).transpose(), t(i)};
}

FlowBatch FlowBatch::from_samples(const std::vector<FlowSample>& samples) {
  FlowBatch b;
  const auto n = static_cast<Eigen::Index>(samples.size());
  b.x0.resize(n, 2);
  b.x1.resize(n, 2);
  b.t.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    b.x0.row(i) = samples[static_cast<size_t>(i)].x0.transpose();
    b.x1.row(i) = samples[static_cast<size_t>(i)].x1.transpose();
    b.t(i) = samples[static_cast<size_t>(i)].t;
  }
  return b;
}

FlowBatch make_flow_batch(const Mat& x0, Rng& rng) {
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_real_distribution<float> unif(0.0f, 1.0f);
  FlowBatch b;
  b.x0 = x0;
  b.x1.resize(x0.rows(), 2);
  b.t.resize(x0.rows());
  for (Eigen::Index i = 0; i < x0.rows(); ++i) {
    b.x1(i, 0) = normal(rng);
    b.x1(i, 1) = normal(rng);
    b.t(i) = unif(rng);
  }
  return b;
}

namespace {

Mat randn(Eigen::Index rows, Eigen::Index cols, float stddev, Rng& rng) {
  std::normal_distribution<float> normal(0.0f, stddev);
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

ad::Param linear_weight(const std::string& name, int out, int in, Rng& rng) {
  return {name, randn(out, in, 1.0f / std::sqrt(static_cast<float>(in)), rng)};
}

ad::Param zeros(const std::string& name, int rows, int cols) { return {name, Mat::Zero(rows, cols)}; }
ad::Param ones(const std::string& name, int rows, int cols) { return {name, Mat::Ones(rows, cols)}; }

using Binder = std::function<ad::Var(const ad::Param&)>;

ad::Var linear(ad::Var x, ad::Var w, ad::Var b) { return ad::add_row(ad::matmul_nt(x, w), b); }

ad::Var forward_impl(ad::Tape& tape, const BaseModel& model, const Mat& x_t, const Eigen::VectorXf& t,
                     const DeltaVars* delta, const Binder& bind) {
  const ModelDims& dims = model.dims();
  const Eigen::Index n = x_t.rows();
  if (x_t.cols() != 2 || t.size() != n) throw ShapeError("forward: expected N x 2 points and N times");

  ad::Var x = tape.constant(x_t);
  ad::Var point = linear(x, bind(model.in_w), bind(model.in_b));
  ad::Var tf = tape.constant(time_features(t, dims.time_features));
  ad::Var time = linear(ad::silu(linear(tf, bind(model.time_w1), bind(model.time_b1))), bind(model.time_w2),
                        bind(model.time_b2));
  std::vector<int> zero_idx(static_cast<size_t>(n), 0);
  ad::Var cls = ad::gather_rows(bind(model.cls), zero_idx);

  // Interleave into sample-major order: rows 3s, 3s+1, 3s+2 = point, time, class.
  const std::vector<ad::Var> parts = {point, time, cls};
  std::vector<int> perm(static_cast<size_t>(3 * n));
  for (Eigen::Index s = 0; s < n; ++s) {
    for (int j = 0; j < 3; ++j) perm[static_cast<size_t>(3 * s + j)] = static_cast<int>(j * n + s);
  }
  ad::Var h = ad::gather_rows(ad::concat_rows(parts), perm);

  for (int depth = 0; depth < dims.depths; ++depth) {
    const auto& layer = model.layers[static_cast<size_t>(depth)];
    auto proj = [&](const ad::Param& w, BlockType type) {
      ad::Var wv = bind(w);
      if (delta != nullptr) {
        if (auto it = delta->find({depth, type}); it != delta->end()) wv = ad::add(wv, it->second);
      }
      return wv;
    };
    ad::Var a = ad::layer_norm(h, bind(layer.ln1_g), bind(layer.ln1_b));
    ad::Var q = ad::matmul_nt(a, proj(layer.q, BlockType::Q));
    ad::Var k = ad::matmul_nt(a, proj(layer.k, BlockType::K));
    ad::Var v = ad::matmul_nt(a, proj(layer.v, BlockType::V));
    ad::Var att = ad::attention(q, k, v, dims.heads, 3, 3);
    h = ad::add(h, ad::matmul_nt(att, proj(layer.o, BlockType::O)));
    ad::Var b = ad::layer_norm(h, bind(layer.ln2_g), bind(layer.ln2_b));
    ad::Var mlp = linear(ad::silu(linear(b, bind(layer.mlp_w1), bind(layer.mlp_b1))), bind(layer.mlp_w2),
                         bind(layer.mlp_b2));
    h = ad::add(h, mlp);
  }

  std::vector<int> point_rows(static_cast<size_t>(n));
  for (Eigen::Index s = 0; s < n; ++s) point_rows[static_cast<size_t>(s)] = static_cast<int>(3 * s);
  ad::Var pts = ad::gather_rows(h, point_rows);
  pts = ad::layer_norm(pts, bind(model.lnf_g), bind(model.lnf_b));
  return linear(pts, bind(model.out_w), bind(model.out_b));
}

Binder constant_binder(ad::Tape& tape) {
  return [&tape](const ad::Param& p) { return tape.constant(p.value); };
}

}  // namespace

BaseModel::BaseModel(ModelDims dims, uint64_t seed) : dims_(dims) {
  if (dims.depths < 1 || dims.d < 1 || dims.heads < 1 || dims.d % dims.heads != 0 || dims.mlp_hidden < 1 ||
      dims.time_features < 2 || dims.time_features % 2 != 0) {
    throw ConfigError("invalid base model dimensions");
  }
  Rng rng(seed);
  const int d = dims.d;
  in_w = linear_weight("in.w", d, 2, rng);
  in_b = zeros("in.b", 1, d);
  time_w1 = linear_weight("time.w1", d, dims.time_features, rng);
  time_b1 = zeros("time.b1", 1, d);
  time_w2 = linear_weight("time.w2", d, d, rng);
  time_b2 = zeros("time.b2", 1, d);
  cls = {"cls", randn(1, d, 1.0f, rng)};
  for (int i = 0; i < dims.depths; ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    Layer l;
    l.ln1_g = ones(p + "ln1.g", 1, d);
    l.ln1_b = zeros(p + "ln1.b", 1, d);
    l.q = linear_weight(BlockKey{i, BlockType::Q}.name(), d, d, rng);
    l.k = linear_weight(BlockKey{i, BlockType::K}.name(), d, d, rng);
    l.v = linear_weight(BlockKey{i, BlockType::V}.name(), d, d, rng);
    l.o = linear_weight(BlockKey{i, BlockType::O}.name(), d, d, rng);
    l.ln2_g = ones(p + "ln2.g", 1, d);
    l.ln2_b = zeros(p + "ln2.b", 1, d);
    l.mlp_w1 = linear_weight(p + "mlp.w1", dims.mlp_hidden, d, rng);
    l.mlp_b1 = zeros(p + "mlp.b1", 1, dims.mlp_hidden);
    l.mlp_w2 = linear_weight(p + "mlp.w2", d, dims.mlp_hidden, rng);
    l.mlp_b2 = zeros(p + "mlp.b2", 1, d);
    layers.push_back(std::move(l));
  }
  lnf_g = ones("final.ln.g", 1, d);
  lnf_b = zeros("final.ln.b", 1, d);
  out_w = linear_weight("out.w", 2, d, rng);
  out_b = zeros("out.b", 1, 2);
}

std::vector<BlockKey> BaseModel::block_keys() const {
  std::vector<BlockKey> keys;
  for (int i = 0; i < dims_.depths; ++i) {
    for (BlockType t : kBlockTypes) keys.push_back({i, t});
  }
  return keys;
}

bool BaseModel::has_block(BlockKey k) const {
  return k.depth >= 0 && k.depth < dims_.depths && static_cast<int>(k.type) >= 0 && static_cast<int>(k.type) < 4;
}

const Mat& BaseModel::weight(BlockKey k) const {
  return const_cast<BaseModel*>(this)->weight_param(k).value;
}

ad::Param& BaseModel::weight_param(BlockKey k) {
  if (!has_block(k)) {
    throw std::out_of_range("no weight block at depth " + std::to_string(k.depth) + " type " +
                            block_type_name(k.type));
  }
  Layer& l = layers[static_cast<size_t>(k.depth)];
  switch (k.type) {
    case BlockType::Q: return l.q;
    case BlockType::K: return l.k;
    case BlockType::V: return l.v;
    case BlockType::O: return l.o;
  }
  throw std::logic_error("unreachable");
}

std::vector<ad::Param*> BaseModel::all_params() {
  std::vector<ad::Param*> out = {&in_w, &in_b, &time_w1, &time_b1, &time_w2, &time_b2, &cls};
  for (Layer& l : layers) {
    for (ad::Param* p : {&l.ln1_g, &l.ln1_b, &l.q, &l.k, &l.v, &l.o, &l.ln2_g, &l.ln2_b, &l.mlp_w1, &l.mlp_b1,
                         &l.mlp_w2, &l.mlp_b2}) {
      out.push_back(p);
    }
  }
  for (ad::Param* p : {&lnf_g, &lnf_b, &out_w, &out_b}) out.push_back(p);
  return out;
}

std::vector<ad::Param*> BaseModel::parameters() { return all_params(); }

std::vector<ad::Param*> BaseModel::non_lora_parameters() {
  std::vector<ad::Param*> out;
  for (ad::Param* p : all_params()) {
    bool is_block = false;
    for (Layer& l : layers) is_block = is_block || p == &l.q || p == &l.k || p == &l.v || p == &l.o;
    if (!is_block) out.push_back(p);
  }
  return out;
}

std::vector<NamedTensor> BaseModel::tensors() const {
  std::vector<NamedTensor> out;
  for (ad::Param* p : const_cast<BaseModel*>(this)->all_params()) out.push_back({p->name, p->value});
  return out;
}

std::string BaseModel::fingerprint() const { return lofa::fingerprint(tensors()); }

void BaseModel::save(const fs::path& dir) const {
  json cfg = {{"model_dims", to_json(dims_)},
              {"target", target_ == FlowTarget::Velocity ? "velocity" : "epsilon"}};
  json index = json::array();
  for (BlockKey k : block_keys()) {
    index.push_back({{"depth", k.depth}, {"block_type", block_type_name(k.type)}, {"tensor", k.name()}});
  }
  write_tensor_dir(dir, "base_model", cfg, tensors(), {{"block_index", index}});
}

BaseModel BaseModel::load(const fs::path& dir) {
  TensorDir td = read_tensor_dir(dir);
  if (td.kind != "base_model") throw FormatError("checkpoint at " + dir.string() + " is not a base model");
  BaseModel m(model_dims_from_json(td.config.at("model_dims")), 0);
  m.target_ = td.config.value("target", "velocity") == "epsilon" ? FlowTarget::Epsilon : FlowTarget::Velocity;
  for (ad::Param* p : m.all_params()) {
    const Mat& v = td.get(p->name);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) {
      throw FormatError("tensor '" + p->name + "' has wrong shape");
    }
    p->value = v;
    p->zero_grad();
  }
  return m;
}

Mat time_features(const Eigen::VectorXf& t, int count) {
  const int half = count / 2;
  Mat out(t.size(), count);
  for (int k = 0; k < half; ++k) {
    const float freq = half > 1 ? std::exp(std::log(16.0f) * static_cast<float>(k) / static_cast<float>(half - 1))
                                : 1.0f;
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      const float a = std::numbers::pi_v<float> * freq * t(i);
      out(i, 2 * k) = std::sin(a);
      out(i, 2 * k + 1) = std::cos(a);
    }
  }
  return out;
}

ad::Var forward_graph(ad::Tape& tape, const BaseModel& model, const Mat& x_t, const Eigen::VectorXf& t,
                      const DeltaVars* delta, bool train_base) {
  if (!train_base) return forward_impl(tape, model, x_t, t, delta, constant_binder(tape));
  return forward_impl(tape, model, x_t, t, delta,
                      [&tape](const ad::Param& p) { return tape.param(const_cast<ad::Param&>(p)); });
}

void check_lora_shapes(const BaseModel& model, const LoraAdapter& lora) {
  auto where = [](BlockKey k) {
    return "(depth " + std::to_string(k.depth) + ", " + block_type_name(k.type) + ")";
  };
  const int m = model.dims().m(), n = model.dims().n();
  for (BlockKey k : lora.keys()) {
    if (!model.has_block(k)) throw ShapeError("adapter block " + where(k) + " absent from base model");
  }
  if (lora.is_dense()) {
    for (const auto& [k, d] : lora.dense) {
      if (d.rows() != m || d.cols() != n) throw ShapeError("dense delta shape mismatch at " + where(k));
    }
    return;
  }
  for (const auto& [k, f] : lora.factors) {
    if (f.B.rows() != m || f.A.cols() != n || f.B.cols() != lora.rank || f.A.rows() != lora.rank) {
      throw ShapeError("LoRA factor shape mismatch at " + where(k));
    }
  }
}

InjectedLora inject_lora(ad::Tape& tape, const LoraAdapter& adapter, bool track_factors) {
  InjectedLora out;
  if (adapter.is_dense()) {
    for (const auto& [k, d] : adapter.dense) out.delta.emplace(k, tape.constant(d));
    return out;
  }
  for (const auto& [k, f] : adapter.factors) {
    ad::Var b = track_factors ? tape.input(f.B) : tape.constant(f.B);
    ad::Var a = track_factors ? tape.input(f.A) : tape.constant(f.A);
    out.delta.emplace(k, ad::matmul(b, a));
    out.factors.emplace(k, std::make_pair(b, a));
  }
  return out;
}

Mat forward(const BaseModel& model, const Mat& x_t, const Eigen::VectorXf& t, const LoraAdapter* lora) {
  ad::Tape tape(false);
  DeltaVars delta;
  if (lora != nullptr) {
    check_lora_shapes(model, *lora);
    delta = inject_lora(tape, *lora, false).delta;
  }
  return forward_impl(tape, model, x_t, t, lora ? &delta : nullptr, constant_binder(tape)).value();
}

ad::Var fm_loss_graph(ad::Tape& tape, const BaseModel& model, const FlowBatch& batch, const DeltaVars* delta,
                      bool train_base) {
  if (batch.size() == 0) throw std::invalid_argument("fm_loss: empty batch");
  ad::Var pred = forward_graph(tape, model, batch.x_t(), batch.t, delta, train_base);
  return ad::mse(pred, tape.constant(batch.target(model.target())));
}

float fm_loss(const BaseModel& model, const FlowBatch& batch, const LoraAdapter* lora) {
  if (batch.size() == 0) throw std::invalid_argument("fm_loss: empty batch");
  const Mat pred = forward(model, batch.x_t(), batch.t, lora);
  return (pred - batch.target(model.target())).squaredNorm() / static_cast<float>(pred.size());
}

Mat sample_from(const BaseModel& model, const Mat& noise, int steps, const LoraAdapter* lora) {
  if (steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
  Mat x = noise;
  const float dt = 1.0f / static_cast<float>(steps);
  for (int s = 0; s < steps; ++s) {
    const float t = 1.0f - static_cast<float>(s) * dt;
    const Eigen::VectorXf tv = Eigen::VectorXf::Constant(x.rows(), t);
    Mat v = forward(model, x, tv, lora);
    if (model.target() == FlowTarget::Epsilon) v = (v - x) / std::max(1.0f - t, 1e-3f);
    x -= dt * v;
  }
  return x;
}

Mat sample(const BaseModel& model, int n, int steps, const LoraAdapter* lora, uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  if (steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  Mat noise(n, 2);
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = normal(rng);
  return sample_from(model, noise, steps, lora);
}

std::vector<float> train_base(BaseModel& model, const PointSampler& target, const BaseTrainOptions& opt) {
  if (opt.steps < 0 || opt.batch < 1 || opt.lr <= 0.0f) throw std::invalid_argument("train_base: bad options");
  Rng rng(opt.seed);
  AdamW adam(model.parameters());
  std::vector<float> history;
  for (int step = 0; step < opt.steps; ++step) {
    const FlowBatch batch = make_flow_batch(target(rng, opt.batch), rng);
    adam.zero_grad();
    ad::Tape tape;
    ad::Var loss = fm_loss_graph(tape, model, batch, nullptr, true);
    tape.backward(loss);
    adam.step(opt.lr);
    history.push_back(loss.value()(0, 0));
  }
  return history;
}

}  // namespace lofa
