#include <doctest.h>

#include "oracles.hpp"

#include <lofa/trainer.hpp>

#include <cmath>
#include <filesystem>

using namespace lofa;
using namespace lofa::testing;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_train(int s1 = 6, int s2 = 6) {
  TrainConfig c;
  c.stage1_steps = s1;
  c.stage2_steps = s2;
  c.warmup_steps = 2;
  c.desk_scale_factor = 1.0;
  c.stage1_lr = 1e-3f;
  c.stage2_lr = 1e-3f;
  c.batch_size = 2;
  c.diff_points = 16;
  return c;
}

bool same_params(std::vector<ad::Param*> a, std::vector<ad::Param*> b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value != b[i]->value) return false;
  }
  return true;
}

double max_abs_delta_diff(const LoraAdapter& a, const LoraAdapter& b) {
  double worst = 0.0;
  for (BlockKey k : a.keys()) worst = std::max(worst, static_cast<double>((delta(a, k) - delta(b, k)).cwiseAbs().maxCoeff()));
  return worst;
}

}  // namespace

TEST_CASE("condition encoding") {
  const Vocab v = Vocab::build({"rotate the pattern by 45 degrees", "scale it"});
  const Condition empty = encode_condition("", v, 8);
  CHECK(empty.ids == std::vector<int>{Vocab::kNull});

  const Condition a = encode_condition("Rotate the pattern by 45 degrees", v, 8);
  const Condition b = encode_condition("rotate the pattern by 45 degrees", v, 8);
  CHECK(a.ids == b.ids);
  CHECK(a.ids[4] == Vocab::kNum);
  CHECK(a.values[4] == 45.0f);

  const Condition unseen = encode_condition("rotate the banana", v, 8);
  CHECK(unseen.ids[2] == Vocab::kUnk);
  CHECK(encode_condition("a b c d e f g h i j", v, 4).length() == 4);
  CHECK(v.id("45") == Vocab::kUnk);  // numbers never enter the vocabulary

  const auto f = numeric_features(90.0f);
  CHECK(f(0) == doctest::Approx(0.25f));
  CHECK(f(1) == doctest::Approx(22.5f));
  CHECK(f(2) == doctest::Approx(1.0f));
  CHECK(std::abs(f(3)) < 1e-6f);

  CHECK(Vocab::from_json(v.to_json()).words() == v.words());
  CHECK_THROWS_AS(parse_arrangement("sideways"), ConfigError);
}

TEST_CASE("zero-initialised heads") {
  const TinyWorld& w = tiny_world();
  const StageOneNet s1(w.hyper(), w.vocab, 1);
  const StageTwoNet s2 = StageTwoNet::from_stage_one(s1, {2}, 2);
  const Condition c = encode_condition(w.tasks.train[0].prompt_text, w.vocab, 12);
  const int m = w.base.dims().m(), n = w.base.dims().n();
  for (BlockKey k : w.base.block_keys()) {
    const StageOneResult r = stage1_forward(s1, k, w.base.weight(k), c);
    CHECK(r.probs.rows() == m);
    CHECK(r.probs.cols() == n);
    CHECK((r.probs.array() == 0.5f).all());
    const LoraFactors f = stage2_forward(s2, k, w.base.weight(k), c, &r.features);
    CHECK(f.B.rows() == m);
    CHECK(f.B.cols() == w.bank.rank);
    CHECK(f.A.rows() == w.bank.rank);
    CHECK(f.A.cols() == n);
    CHECK(f.B.isZero(0.0f));
    CHECK(f.A.isZero(0.0f));
  }
  const StageOneResult r1 = stage1_forward(s1, {1, BlockType::O}, w.base.weight({1, BlockType::O}), c);
  const StageOneResult r2 = stage1_forward(s1, {1, BlockType::O}, w.base.weight({1, BlockType::O}), c);
  CHECK(r1.probs == r2.probs);
  CHECK(r1.features.tokens == r2.features.tokens);
}

TEST_CASE("Stage II starts from the Stage-I backbone") {
  const TinyWorld& w = tiny_world();
  StageOneNet s1(w.hyper(), w.vocab, 3);
  StageTwoNet s2 = StageTwoNet::from_stage_one(s1, {2}, 4);
  CHECK(same_params(s1.backbone.shared_parameters(), s2.backbone.shared_parameters()));
  CHECK_FALSE(s2.backbone.layers[0].feature_attn.has_value());
  CHECK(s2.backbone.layers[1].feature_attn.has_value());
  CHECK(s2.config().feature_layers == std::vector<int>{2});
  CHECK_THROWS(StageTwoNet::from_stage_one(s1, {3}, 4));
}

TEST_CASE("predict_lora is a pure forward pass") {
  const TinyWorld& w = tiny_world();
  StageOneNet s1(w.hyper(), w.vocab, 5);
  StageTwoNet s2 = StageTwoNet::from_stage_one(s1, {2}, 6);
  // Give the heads some weight so predictions are not trivially zero.
  Rng rng(1);
  std::normal_distribution<float> z(0.0f, 0.05f);
  for (ad::Param* p : {&s2.head_b_w, &s2.head_a_w}) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = z(rng);
  }
  InferenceStats st;
  const LoraAdapter a = predict_lora(&s1, s2, w.base, "rotate the pattern by 45 degrees", &st);
  const LoraAdapter b = predict_lora(&s1, s2, w.base, "rotate the pattern by 45 degrees");
  CHECK(st.backward_passes_after == st.backward_passes_before);
  CHECK(a.keys() == w.base.block_keys());
  CHECK(max_abs_delta_diff(a, b) == 0.0);
  CHECK(max_abs_delta_diff(a, zero_lora(w.base, 2)) > 0.0);
  const LoraAdapter c = predict_lora(&s1, s2, w.base, "scale the pattern by 2");
  CHECK(max_abs_delta_diff(a, c) > 0.0);
}

TEST_CASE("network checkpoints round trip") {
  const TinyWorld& w = tiny_world();
  StageOneNet s1(w.hyper(), w.vocab, 7);
  StageTwoNet s2 = StageTwoNet::from_stage_one(s1, {1, 2}, 8);
  Rng rng(2);
  std::normal_distribution<float> z(0.0f, 0.05f);
  for (ad::Param* p : {&s1.head_w, &s2.head_b_w, &s2.head_a_w}) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = z(rng);
  }
  const fs::path d1 = fs::temp_directory_path() / "lofa_unit_s1";
  const fs::path d2 = fs::temp_directory_path() / "lofa_unit_s2";
  s1.save(d1, {{"note", 1}});
  s2.save(d2);
  json meta;
  const StageOneNet l1 = StageOneNet::load(d1, &meta);
  const StageTwoNet l2 = StageTwoNet::load(d2);
  CHECK(meta["note"] == 1);
  const std::string p = "translate the pattern by 1 and 2";
  CHECK(max_abs_delta_diff(predict_lora(&s1, s2, w.base, p), predict_lora(&l1, l2, w.base, p)) == 0.0);
  CHECK_THROWS_AS(StageTwoNet::load(d1), FormatError);
  CHECK_THROWS_AS(StageOneNet::load(d1 / "missing"), MissingArtifactError);
}

TEST_CASE("prompt-token arrangement") {
  const TinyWorld& w = tiny_world();
  StageOneNet s1(w.hyper(Arrangement::PromptTokens), w.vocab, 9);
  const Condition c = encode_condition("scale the pattern by 2", w.vocab, 12);
  const StageOneResult r = stage1_forward(s1, {0, BlockType::K}, w.base.weight({0, BlockType::K}), c);
  CHECK(r.probs.rows() == w.base.dims().m());
  CHECK((r.probs.array() == 0.5f).all());
}

TEST_CASE("stage1_loss closed forms and a second BCE implementation") {
  ad::Tape tape;
  Mat half = Mat::Constant(3, 3, 0.5f);
  Mat target(3, 3);
  target << 1, 0, 1, 0, 0, 1, 1, 1, 0;
  CHECK(stage1_loss(tape.constant(half), target).value()(0, 0) == doctest::Approx(std::log(2.0)));
  CHECK(stage1_loss(tape.constant(target), target).value()(0, 0) < 1e-6f);

  Rng rng(4);
  std::uniform_real_distribution<float> u(0.01f, 0.99f);
  Mat p(3, 3);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] = u(rng);
  double oracle = 0.0;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double q = p(i, j), r = target(i, j);
      oracle += -(r * std::log(q) + (1.0 - r) * std::log(1.0 - q));
    }
  }
  CHECK(stage1_loss(tape.constant(p), target).value()(0, 0) == doctest::Approx(oracle / 9.0).epsilon(1e-6));
}

TEST_CASE("stage2_loss structure") {
  const BaseModel base = tiny_model(3);
  const std::vector<BlockKey> keys = {{0, BlockType::Q}, {1, BlockType::V}};
  const LoraAdapter truth = random_lora(base, 2, 0.2f, 4);
  Mat B(16, 2), A(4, 8);
  B << truth.factors.at(keys[0]).B, truth.factors.at(keys[1]).B;
  A << truth.factors.at(keys[0]).A, truth.factors.at(keys[1]).A;
  const FlowBatch flow = random_flow_batch(8, 5);
  ad::Tape tape;
  const Stage2Loss exact = stage2_loss(tape, tape.constant(B), tape.constant(A), B, A, base, keys, &flow, 5.0f, 1.0f);
  CHECK(exact.recon.value()(0, 0) == 0.0f);
  CHECK(exact.total.value()(0, 0) == doctest::Approx(exact.diff.value()(0, 0)));

  LoraAdapter as_adapter;
  as_adapter.rank = 2;
  for (BlockKey k : keys) as_adapter.factors[k] = truth.factors.at(k);
  CHECK(exact.diff.value()(0, 0) == doctest::Approx(fm_loss(base, flow, &as_adapter)).epsilon(1e-5));

  Mat off = Mat::Constant(16, 2, 0.1f);
  const float once = stage2_loss(tape, tape.constant(B + off), tape.constant(A), B, A, base, keys, nullptr, 1.0f, 0.0f)
                         .recon.value()(0, 0);
  const float twice =
      stage2_loss(tape, tape.constant(B + 2.0f * off), tape.constant(A), B, A, base, keys, nullptr, 1.0f, 0.0f)
          .recon.value()(0, 0);
  CHECK(twice == doctest::Approx(2.0f * once));
  CHECK_THROWS_AS(stage2_loss(tape, tape.constant(B), tape.constant(A), B, A, base, {keys[0]}, nullptr, 1, 0),
                  ShapeError);
}

TEST_CASE("train config scaling and validation") {
  TrainConfig c;
  CHECK(c.stage1_budget() == 1000);
  CHECK(c.stage2_budget() == 1750);
  CHECK(c.warmup_budget() == 250);
  c.desk_scale_factor = 1.0;
  CHECK(c.stage2_budget() == 7000);
  CHECK(TrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  c.lambda_recon = -1.0f;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("training data preparation") {
  const TinyWorld& w = tiny_world();
  const TrainData d = w.train_data();
  CHECK(d.examples.size() == w.bank.indices("train").size());
  CHECK(d.keys == w.base.block_keys());
  for (const TrainExample& e : d.examples) {
    CHECK(e.adapter->meta.task_id == e.task_id);
    for (const auto& [k, m] : e.target_mask) CHECK(((m.array() == 0.0f) || (m.array() == 1.0f)).all());
  }
  TaskSplit missing = w.tasks;
  missing.train.pop_back();
  CHECK_THROWS_AS(make_train_data(w.base, w.bank, missing, w.bank.indices("train"), w.vocab, 12, 0.02f), ConfigError);
}

TEST_CASE("Stage-I training starts at log 2 and is deterministic") {
  const TinyWorld& w = tiny_world();
  const TrainData d = w.train_data();
  StageOneNet a(w.hyper(), w.vocab, 11), b(w.hyper(), w.vocab, 11);
  const TrainHistory ha = train_stage1(a, d, tiny_train());
  const TrainHistory hb = train_stage1(b, d, tiny_train());
  REQUIRE(ha.rows.size() == 6);
  CHECK(ha.rows[0].loss == doctest::Approx(std::log(2.0f)).epsilon(1e-4));
  CHECK(ha.rows[0].lr == doctest::Approx(5e-4f));
  CHECK(ha.rows[2].lr == doctest::Approx(1e-3f));
  CHECK(same_params(a.parameters(), b.parameters()));
  CHECK(a.trained);
}

TEST_CASE("Stage-II training is deterministic and logs both loss terms") {
  const TinyWorld& w = tiny_world();
  const TrainData d = w.train_data();
  StageOneNet s1(w.hyper(), w.vocab, 12);
  StageTwoNet a = StageTwoNet::from_stage_one(s1, {2}, 13), b = StageTwoNet::from_stage_one(s1, {2}, 13);
  const TrainHistory ha = train_stage2(a, d, tiny_train(), stage_one_guide(s1));
  train_stage2(b, d, tiny_train(), stage_one_guide(s1));
  CHECK(same_params(a.parameters(), b.parameters()));
  REQUIRE(ha.rows.size() == 6);
  CHECK(ha.rows[0].recon > 0.0f);
  CHECK(ha.rows[0].diff > 0.0f);
  CHECK(ha.rows[0].loss == doctest::Approx(5.0f * ha.rows[0].recon + ha.rows[0].diff).epsilon(1e-4));

  const fs::path f = fs::temp_directory_path() / "lofa_unit_metrics.csv";
  write_metrics_csv({ha}, f);
  const std::string csv = read_text_file(f);
  CHECK(csv.rfind("stage,step,lr,loss,recon,diff,grad_norm\n", 0) == 0);
}

TEST_CASE("a diverging run raises a numerical error") {
  const TinyWorld& w = tiny_world();
  StageOneNet s1(w.hyper(), w.vocab, 14);
  StageTwoNet s2 = StageTwoNet::from_stage_one(s1, {2}, 15);
  s2.head_b_b.value.setConstant(std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_AS(train_stage2(s2, w.train_data(), tiny_train(), stage_one_guide(s1)), NumericalError);
}

TEST_CASE("all variants share one budget and survive a checkpoint round trip") {
  const TinyWorld& w = tiny_world();
  const TrainData d = w.train_data();
  PipelineOptions opt;
  opt.hyper = w.hyper();
  opt.feature_layers = {2};
  opt.lightweight_layers = 1;
  std::vector<int> budgets;
  for (Variant v : kAllVariants) {
    CAPTURE(variant_name(v));
    const Pipeline p = train_pipeline(v, d, tiny_train(4, 5), opt);
    budgets.push_back(p.total_steps());
    const fs::path dir = fs::temp_directory_path() / ("lofa_unit_pipe_" + std::string(variant_name(v)));
    p.save(dir);
    const Pipeline back = Pipeline::load(dir);
    CHECK(back.variant == v);
    const std::string prompt = w.tasks.val[0].prompt_text;
    CHECK(max_abs_delta_diff(p.predict(w.base, prompt), back.predict(w.base, prompt)) == 0.0);
    CHECK(parse_variant(variant_name(v)) == v);
  }
  CHECK(std::all_of(budgets.begin(), budgets.end(), [&](int b) { return b == 9; }));
}
