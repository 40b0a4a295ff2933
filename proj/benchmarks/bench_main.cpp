#include <lofa/evalharness.hpp>
#include <lofa/lorakit.hpp>
#include <lofa/taskgen.hpp>

#include <benchmark/benchmark.h>

using namespace lofa;

namespace {

Mat normal_points(int n, uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<float> z(0.0f, 1.0f);
  Mat m(n, 2);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = z(rng);
  return m;
}

const BaseModel& base() {
  static const BaseModel m(ModelDims{}, 0);
  return m;
}

const LoraAdapter& adapter() {
  static const LoraAdapter a = [] {
    LoraAdapter l = init_lora(base(), 4, 0.01f, 1);
    for (auto& [k, f] : l.factors) f.B.setConstant(0.01f);
    return l;
  }();
  return a;
}

struct Nets {
  Vocab vocab;
  StageOneNet s1;
  StageTwoNet s2;
};

const Nets& nets() {
  static const Nets n = [] {
    Nets out;
    out.vocab = corpus_vocab(make_task_families(0));
    HyperConfig h;
    h.target = target_for(base(), 4);
    out.s1 = StageOneNet(h, out.vocab, 1);
    out.s2 = StageTwoNet::from_stage_one(out.s1, {4, 8}, 2);
    return out;
  }();
  return n;
}

void BM_forward(benchmark::State& state) {
  const Mat x = normal_points(static_cast<int>(state.range(0)), 1);
  const Eigen::VectorXf t = Eigen::VectorXf::Constant(x.rows(), 0.5f);
  for (auto _ : state) benchmark::DoNotOptimize(forward(base(), x, t, &adapter()));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_forward)->Arg(256)->Arg(1000);

void BM_fm_loss_backward(benchmark::State& state) {
  Rng rng(2);
  const FlowBatch batch = make_flow_batch(normal_points(static_cast<int>(state.range(0)), 3), rng);
  for (auto _ : state) {
    ad::Tape tape;
    InjectedLora inj = inject_lora(tape, adapter(), true);
    tape.backward(fm_loss_graph(tape, base(), batch, &inj.delta, false));
  }
}
BENCHMARK(BM_fm_loss_backward)->Arg(128)->Arg(256);

void BM_sample(benchmark::State& state) {
  for (auto _ : state) benchmark::DoNotOptimize(sample(base(), 1000, static_cast<int>(state.range(0)), &adapter(), 4));
}
BENCHMARK(BM_sample)->Arg(50)->Unit(benchmark::kMillisecond);

void BM_energy_distance(benchmark::State& state) {
  const auto n = static_cast<int>(state.range(0));
  const Mat x = normal_points(n, 5), y = normal_points(n, 6);
  for (auto _ : state) benchmark::DoNotOptimize(energy_distance(x, y));
}
BENCHMARK(BM_energy_distance)->Arg(500)->Arg(1000)->Unit(benchmark::kMillisecond);

void BM_stage1_step(benchmark::State& state) {
  const Nets& n = nets();
  const Condition cond = encode_condition("rotate the pattern by 30 degrees", n.vocab, n.s1.config().max_cond_len);
  std::vector<HyperSample> samples;
  const auto keys = base().block_keys();
  for (int i = 0; i < 4; ++i) samples.push_back({keys[static_cast<size_t>(i)], &base().weight(keys[static_cast<size_t>(i)]), &cond});
  const HyperBatch batch = make_hyper_batch(samples, n.s1.config());
  const Mat target = Mat::Ones(4 * 32, 32);
  for (auto _ : state) {
    ad::Tape tape;
    const auto out = n.s1.run(tape, batch, true);
    tape.backward(stage1_loss(out.probs, target));
  }
}
BENCHMARK(BM_stage1_step)->Unit(benchmark::kMillisecond);

void BM_predict_lora(benchmark::State& state) {
  const Nets& n = nets();
  for (auto _ : state) {
    benchmark::DoNotOptimize(predict_lora(&n.s1, n.s2, base(), "rotate the pattern by 45 degrees"));
  }
}
BENCHMARK(BM_predict_lora)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
