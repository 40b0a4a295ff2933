#include <doctest.h>

#include <lofa/autodiff.hpp>
#include <lofa/optim.hpp>

#include <cmath>
#include <functional>
#include <random>

using namespace lofa;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Builds loss = sum(w .* f(inputs)) so every output entry gets a distinct
// upstream gradient, then compares analytic input gradients against float
// central differences.
using GraphFn = std::function<ad::Var(ad::Tape&, std::vector<ad::Var>&)>;

double check_gradients(std::vector<Mat> inputs, const GraphFn& f, float h = 1e-2f) {
  Mat weights;
  auto eval = [&](std::vector<Mat>& in, std::vector<Mat>* grads) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (const Mat& m : in) vars.push_back(tape.input(m));
    ad::Var out = f(tape, vars);
    if (weights.size() == 0) weights = random_mat(out.rows(), out.cols(), 99);
    ad::Var loss = ad::sum(ad::mul(out, tape.constant(weights)));
    if (grads != nullptr) {
      tape.backward(loss);
      for (const ad::Var& v : vars) grads->push_back(tape.grad(v.id()));
    }
    return static_cast<double>(loss.value()(0, 0));
  };
  std::vector<Mat> analytic;
  eval(inputs, &analytic);
  double worst = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> fd(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      const float keep = inputs[k].data()[i];
      inputs[k].data()[i] = keep + h;
      const double up = eval(inputs, nullptr);
      inputs[k].data()[i] = keep - h;
      const double down = eval(inputs, nullptr);
      inputs[k].data()[i] = keep;
      fd.data()[i] = (up - down) / (2.0 * h);
    }
    const Eigen::MatrixXd an = analytic[k].cast<double>();
    worst = std::max(worst, (an - fd).norm() / std::max(fd.norm(), 1e-6));
  }
  return worst;
}

}  // namespace

TEST_CASE("autodiff op gradients agree with finite differences") {
  const double tol = 2e-2;
  SUBCASE("matmul and matmul_nt") {
    CHECK(check_gradients({random_mat(3, 4, 1), random_mat(4, 2, 2)},
                          [](ad::Tape&, auto& v) { return ad::matmul(v[0], v[1]); }) < tol);
    CHECK(check_gradients({random_mat(3, 4, 3), random_mat(5, 4, 4)},
                          [](ad::Tape&, auto& v) { return ad::matmul_nt(v[0], v[1]); }) < tol);
  }
  SUBCASE("elementwise and broadcast") {
    CHECK(check_gradients({random_mat(3, 4, 5), random_mat(3, 4, 6)}, [](ad::Tape&, auto& v) {
            return ad::sub(ad::mul(v[0], v[1]), ad::scale(ad::add(v[0], v[1]), 0.5f));
          }) < tol);
    CHECK(check_gradients({random_mat(3, 4, 7), random_mat(1, 4, 8)},
                          [](ad::Tape&, auto& v) { return ad::add_row(v[0], v[1]); }) < tol);
  }
  SUBCASE("nonlinearities") {
    CHECK(check_gradients({random_mat(3, 5, 9)}, [](ad::Tape&, auto& v) { return ad::silu(v[0]); }) < tol);
    CHECK(check_gradients({random_mat(3, 5, 10)}, [](ad::Tape&, auto& v) { return ad::sigmoid(v[0]); }) < tol);
    CHECK(check_gradients({random_mat(4, 6, 11), random_mat(1, 6, 12), random_mat(1, 6, 13)},
                          [](ad::Tape&, auto& v) { return ad::layer_norm(v[0], v[1], v[2]); }) < tol);
  }
  SUBCASE("structure") {
    const std::vector<int> idx = {2, 0, 2, 1};
    CHECK(check_gradients({random_mat(3, 4, 14)},
                          [&](ad::Tape&, auto& v) { return ad::gather_rows(v[0], idx); }) < tol);
    CHECK(check_gradients({random_mat(2, 3, 15), random_mat(3, 3, 16)}, [](ad::Tape&, auto& v) {
            std::vector<ad::Var> parts = {v[0], v[1]};
            return ad::concat_rows(parts);
          }) < tol);
    CHECK(check_gradients({random_mat(6, 2, 17)},
                          [](ad::Tape&, auto& v) { return ad::reshape(ad::slice_rows(v[0], 1, 4), 2, 4); }) < tol);
    const std::vector<int> lens = {2, 3};
    CHECK(check_gradients({random_mat(6, 3, 18)},
                          [&](ad::Tape&, auto& v) { return ad::group_mean(v[0], 3, lens); }) < tol);
  }
  SUBCASE("masked multi-head attention") {
    const std::vector<int> lens = {3, 2};
    CHECK(check_gradients({random_mat(4, 4, 19), random_mat(6, 4, 20), random_mat(6, 4, 21)},
                          [&](ad::Tape&, auto& v) { return ad::attention(v[0], v[1], v[2], 2, 2, 3, lens); }) <
          tol);
  }
  SUBCASE("losses") {
    const Mat target = random_mat(3, 3, 22);
    CHECK(check_gradients({random_mat(3, 3, 23)},
                          [&](ad::Tape& t, auto& v) { return ad::mse(v[0], t.constant(target)); }) < tol);
    CHECK(check_gradients({random_mat(3, 3, 24)},
                          [&](ad::Tape& t, auto& v) { return ad::l1(v[0], t.constant(target)); }) < tol);
    Mat bin = (random_mat(3, 3, 25).array() > 0.0f).cast<float>().matrix();
    CHECK(check_gradients({random_mat(3, 3, 26)}, [&](ad::Tape&, auto& v) {
            return ad::bce(ad::sigmoid(v[0]), bin);
          }, 1e-3f) < tol);
  }
}

TEST_CASE("attention masks keys beyond the group length") {
  ad::Tape tape(false);
  Mat q = random_mat(1, 2, 1), k = random_mat(3, 2, 2), v = random_mat(3, 2, 3);
  const std::vector<int> lens = {1};
  ad::Var out = ad::attention(tape.constant(q), tape.constant(k), tape.constant(v), 1, 1, 3, lens);
  // One visible key: softmax is 1 on it.
  CHECK((out.value() - v.row(0)).norm() < 1e-6f);
}

TEST_CASE("parameters bind once per tape and accumulate gradient") {
  ad::Param p("p", Mat::Constant(1, 1, 3.0f));
  ad::Tape tape;
  ad::Var a = tape.param(p);
  ad::Var b = tape.param(p);
  CHECK(a.id() == b.id());
  tape.backward(ad::mul(a, b));
  CHECK(p.grad(0, 0) == doctest::Approx(6.0f));
}

TEST_CASE("backward counter increments per call") {
  const size_t before = ad::backward_calls();
  ad::Tape tape;
  ad::Var x = tape.input(Mat::Ones(1, 1));
  tape.backward(ad::sum(x));
  CHECK(ad::backward_calls() == before + 1);
}

TEST_CASE("shape errors are raised") {
  ad::Tape tape;
  CHECK_THROWS_AS(ad::matmul(tape.constant(Mat::Zero(2, 3)), tape.constant(Mat::Zero(2, 3))), ShapeError);
  CHECK_THROWS_AS(ad::group_mean(tape.constant(Mat::Zero(5, 2)), 2), ShapeError);
}

TEST_CASE("warmup schedule is linear then constant") {
  WarmupSchedule s{1e-4f, 1000};
  CHECK(s.at(0) == doctest::Approx(0.0f));
  CHECK(s.at(500) == doctest::Approx(5e-5f));
  CHECK(s.at(1000) == doctest::Approx(1e-4f));
  CHECK(s.at(2000) == doctest::Approx(1e-4f));
  WarmupSchedule none{2e-3f, 0};
  CHECK(none.at(0) == doctest::Approx(2e-3f));
}

TEST_CASE("AdamW matches a hand-rolled update") {
  ad::Param p("p", Mat::Constant(1, 2, 1.0f));
  AdamWOptions opt;
  opt.weight_decay = 0.1f;
  AdamW adam({&p}, opt);
  p.grad << 0.5f, -2.0f;
  adam.step(0.01f);
  // First step: m_hat = g, v_hat = g^2, so the Adam move is lr * sign(g) (up to eps).
  const double w0 = 1.0 - 0.01 * 0.1 * 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
  const double w1 = 1.0 - 0.01 * 0.1 * 1.0 + 0.01 * 2.0 / (2.0 + 1e-8);
  CHECK(p.value(0, 0) == doctest::Approx(w0).epsilon(1e-6));
  CHECK(p.value(0, 1) == doctest::Approx(w1).epsilon(1e-6));
}

TEST_CASE("AdamW clips the global gradient norm") {
  ad::Param p("p", Mat::Zero(1, 2));
  AdamWOptions opt;
  opt.clip_norm = 1.0f;
  AdamW adam({&p}, opt);
  p.grad << 3.0f, 4.0f;
  CHECK(adam.step(0.1f) == doctest::Approx(5.0f));
  CHECK(adam.steps_taken() == 1);
}
