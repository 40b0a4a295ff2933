#include "oracles.hpp"

#include "reference_model.hpp"

#include <lofa/lorakit.hpp>

namespace lofa::testing {

namespace {
constexpr double kStep = 1e-5;
}

BaseModel tiny_model(uint64_t seed) {
  ModelDims dims;
  dims.depths = 2;
  dims.d = 8;
  dims.heads = 2;
  dims.mlp_hidden = 16;
  dims.time_features = 4;
  BaseModel m(dims, seed);
  // Move norms and biases off their trivial init so their gradients are generic.
  Rng rng(seed + 1);
  std::normal_distribution<float> z(0.0f, 0.1f);
  for (ad::Param* p : m.parameters()) {
    if (p->name.find(".b") != std::string::npos || p->name.find(".g") != std::string::npos) {
      for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += z(rng);
    }
  }
  return m;
}

LoraAdapter random_lora(const BaseModel& base, int rank, float stddev, uint64_t seed) {
  LoraAdapter a = init_lora(base, rank, stddev, seed);
  Rng rng(seed + 17);
  std::normal_distribution<float> z(0.0f, stddev);
  for (auto& [k, f] : a.factors) {
    for (Eigen::Index i = 0; i < f.B.size(); ++i) f.B.data()[i] = z(rng);
  }
  return a;
}

FlowBatch random_flow_batch(int n, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> z(0.0f, 1.0f);
  Mat x0(n, 2);
  for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = z(rng);
  return make_flow_batch(x0, rng);
}

std::vector<GradientGroupError> fm_loss_gradient_errors(uint64_t seed) {
  BaseModel model = tiny_model(seed);
  const LoraAdapter lora = random_lora(model, 2, 0.2f, seed + 5);
  const FlowBatch batch = random_flow_batch(6, seed + 9);

  for (ad::Param* p : model.parameters()) p->zero_grad();
  ad::Tape tape;
  InjectedLora inj = inject_lora(tape, lora, true);
  tape.backward(fm_loss_graph(tape, model, batch, &inj.delta, true));

  RefModel ref = RefModel::from(model);
  RefDeltas deltas;
  std::map<BlockKey, std::pair<MatD, MatD>> factors;
  for (const auto& [k, f] : lora.factors) factors[k] = {to_double(f.B), to_double(f.A)};
  auto rebuild = [&] {
    for (const auto& [k, ba] : factors) deltas[k] = ba.first * ba.second;
  };
  rebuild();
  auto loss = [&] { return ref_fm_loss(ref, batch, deltas); };

  std::vector<GradientGroupError> out;
  for (ad::Param* p : model.parameters()) {
    MatD& w = ref.p.at(p->name);
    const MatD fd = central_difference(w, kStep, loss);
    out.push_back({"base:" + p->name, relative_error(to_double(p->grad), fd), static_cast<size_t>(w.size())});
  }
  for (auto& [k, ba] : factors) {
    auto factor_loss = [&] {
      rebuild();
      return loss();
    };
    const auto& vars = inj.factors.at(k);
    const MatD fd_b = central_difference(ba.first, kStep, factor_loss);
    out.push_back({"B:" + k.name(), relative_error(to_double(tape.grad(vars.first.id())), fd_b),
                   static_cast<size_t>(fd_b.size())});
    const MatD fd_a = central_difference(ba.second, kStep, factor_loss);
    out.push_back({"A:" + k.name(), relative_error(to_double(tape.grad(vars.second.id())), fd_a),
                   static_cast<size_t>(fd_a.size())});
    rebuild();
  }
  return out;
}

const TinyWorld& tiny_world() {
  static const TinyWorld world = [] {
    TinyWorld w;
    w.base = tiny_model(21);
    w.tasks = make_task_families(2, 4, 2);
    BankBuildOptions opt;
    opt.lora.rank = 2;
    opt.lora.steps = 20;
    opt.lora.lr = 1e-2f;
    opt.quality_points = 30;
    opt.quality_steps = 2;
    w.bank = build_pairs(w.base, w.tasks, opt);
    w.vocab = corpus_vocab(w.tasks);
    return w;
  }();
  return world;
}

HyperConfig TinyWorld::hyper(Arrangement arrangement) const {
  HyperConfig h;
  h.layers = 2;
  h.width = 16;
  h.heads = 2;
  h.ffn_mult = 2;
  h.max_cond_len = 12;
  h.arrangement = arrangement;
  h.target = target_for(base, bank.rank);
  return h;
}

TrainData TinyWorld::train_data(float threshold) const {
  return make_train_data(base, bank, tasks, bank.indices("train"), vocab, 12, threshold);
}

TrainData TinyWorld::val_data(float threshold) const {
  return make_train_data(base, bank, tasks, bank.indices("val"), vocab, 12, threshold);
}

std::vector<GradientGroupError> stage2_loss_gradient_errors(uint64_t seed) {
  const BaseModel model = tiny_model(seed);
  const int r = 2, m = model.dims().m(), n = model.dims().n();
  const std::vector<BlockKey> keys = model.block_keys();
  const auto g = static_cast<Eigen::Index>(keys.size());
  const LoraAdapter truth = random_lora(model, r, 0.2f, seed + 3);
  const LoraAdapter guess = random_lora(model, r, 0.2f, seed + 4);
  Mat B(g * m, r), A(g * r, n), Bh(g * m, r), Ah(g * r, n);
  for (Eigen::Index i = 0; i < g; ++i) {
    const BlockKey k = keys[static_cast<size_t>(i)];
    B.middleRows(i * m, m) = truth.factors.at(k).B;
    A.middleRows(i * r, r) = truth.factors.at(k).A;
    Bh.middleRows(i * m, m) = guess.factors.at(k).B;
    Ah.middleRows(i * r, r) = guess.factors.at(k).A;
  }
  const FlowBatch batch = random_flow_batch(6, seed + 11);
  const float lr = 5.0f, ld = 1.0f;

  ad::Tape tape;
  ad::Var bh = tape.input(Bh), ah = tape.input(Ah);
  tape.backward(stage2_loss(tape, bh, ah, B, A, model, keys, &batch, lr, ld).total);

  const RefModel ref = RefModel::from(model);
  MatD bd = to_double(Bh), ad_ = to_double(Ah);
  const MatD bt = to_double(B), at = to_double(A);
  auto loss = [&] {
    RefDeltas deltas;
    for (Eigen::Index i = 0; i < g; ++i) {
      deltas[keys[static_cast<size_t>(i)]] = bd.middleRows(i * m, m) * ad_.middleRows(i * r, r);
    }
    const double recon = (bd - bt).cwiseAbs().mean() + (ad_ - at).cwiseAbs().mean();
    return lr * recon + ld * ref_fm_loss(ref, batch, deltas);
  };
  const MatD fd_b = central_difference(bd, kStep, loss);
  const MatD fd_a = central_difference(ad_, kStep, loss);
  return {{"B_hat", relative_error(to_double(tape.grad(bh.id())), fd_b), static_cast<size_t>(fd_b.size())},
          {"A_hat", relative_error(to_double(tape.grad(ah.id())), fd_a), static_cast<size_t>(fd_a.size())}};
}

}  // namespace lofa::testing
