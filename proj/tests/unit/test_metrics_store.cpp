#include <doctest.h>

#include <lofa/metrics.hpp>
#include <lofa/store.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace lofa;
namespace fs = std::filesystem;

namespace {

Mat gaussian_points(int n, float mx, float my, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> z(0.0f, 1.0f);
  Mat m(n, 2);
  for (int i = 0; i < n; ++i) {
    m(i, 0) = mx + z(rng);
    m(i, 1) = my + z(rng);
  }
  return m;
}

// Population energy distance from independent pair draws (no shared samples).
double monte_carlo_energy(double shift, int pairs, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> z(0.0, 1.0);
  double xy = 0.0, xx = 0.0, yy = 0.0;
  for (int i = 0; i < pairs; ++i) {
    const double x0 = z(rng), x1 = z(rng), y0 = shift + z(rng), y1 = z(rng);
    const double a0 = z(rng), a1 = z(rng), b0 = shift + z(rng), b1 = z(rng);
    xy += std::hypot(x0 - y0, x1 - y1);
    xx += std::hypot(x0 - a0, x1 - a1);
    yy += std::hypot(y0 - b0, y1 - b1);
  }
  return (2.0 * xy - xx - yy) / pairs;
}

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("lofa_unit_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("energy distance closed forms") {
  const Mat x = gaussian_points(50, 0.0f, 0.0f, 1);
  CHECK(energy_distance(x, x) == 0.0);

  Mat a(2, 2), b(2, 2);
  a << 0, 0, 0, 0;
  b << 3, 4, 3, 4;
  CHECK(energy_distance(a, b) == doctest::Approx(10.0));

  const Mat y = gaussian_points(40, 1.0f, 0.0f, 2);
  CHECK(energy_distance(x, y) == doctest::Approx(energy_distance(y, x)).epsilon(1e-12));
  CHECK_THROWS(energy_distance(x.topRows(1), y));
}

TEST_CASE("energy distance matches a Monte-Carlo oracle") {
  // Seed-averaged: a single 1000-point draw moves by ~3% through the sample means alone.
  const double oracle = monte_carlo_energy(3.0, 2'000'000, 777);
  double total = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    total += energy_distance(gaussian_points(1000, 0, 0, 100 + seed), gaussian_points(1000, 3, 0, 200 + seed));
  }
  const double mean = total / 10.0;
  INFO("mean " << mean << " oracle " << oracle);
  CHECK(std::abs(mean - oracle) / oracle < 0.05);
}

TEST_CASE("tensor directory round trip") {
  const fs::path dir = temp_dir("store");
  Mat a(2, 3);
  a << 1, 2, 3, 4, 5, 6;
  const std::vector<NamedTensor> ts = {{"a", a}, {"b.c", Mat::Constant(1, 1, -2.5f)}};
  write_tensor_dir(dir, "thing", {{"k", 1}}, ts);
  const TensorDir td = read_tensor_dir(dir);
  CHECK(td.kind == "thing");
  CHECK(td.config["k"] == 1);
  CHECK(td.get("a") == a);
  CHECK(td.has("b.c"));
  CHECK_FALSE(td.has("zzz"));
  CHECK(fingerprint(td.tensors) == fingerprint(ts));

  // Rewriting gives identical bytes.
  const std::string before = read_text_file(dir / "manifest.json");
  write_tensor_dir(dir, "thing", {{"k", 1}}, ts);
  CHECK(read_text_file(dir / "manifest.json") == before);
}

TEST_CASE("truncated tensor blob is a format error naming the tensor") {
  const fs::path dir = temp_dir("store_trunc");
  write_tensor_dir(dir, "thing", json::object(), std::vector<NamedTensor>{{"weights", Mat::Ones(4, 4)}});
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.path().extension() == ".bin") fs::resize_file(e.path(), 10);
  }
  try {
    read_tensor_dir(dir);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("weights") != std::string::npos);
  }
}

TEST_CASE("sha256 of a known string") {
  const std::string s = "abc";
  const std::vector<unsigned char> bytes(s.begin(), s.end());
  CHECK(sha256_hex(bytes) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
