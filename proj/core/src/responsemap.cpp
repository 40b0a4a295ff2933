#include <lofa/responsemap.hpp>

#include <cmath>
#include <fstream>

namespace lofa {

namespace fs = std::filesystem;

double ResponseMap::density() const {
  size_t ones = 0, total = 0;
  for (const auto& [k, m] : masks) {
    ones += static_cast<size_t>(m.cast<int>().sum());
    total += static_cast<size_t>(m.size());
  }
  return total == 0 ? 0.0 : static_cast<double>(ones) / static_cast<double>(total);
}

size_t ResponseMap::entries() const {
  size_t total = 0;
  for (const auto& [k, m] : masks) total += static_cast<size_t>(m.size());
  return total;
}

Mat magnitude_block(const Mat& weight, const Mat& delta, float guard_epsilon) {
  if (weight.rows() != delta.rows() || weight.cols() != delta.cols()) {
    throw ShapeError("magnitude map: delta and weight shapes differ");
  }
  if (!(guard_epsilon > 0.0f)) throw std::invalid_argument("guard epsilon must be positive");
  return delta.cwiseAbs().cwiseQuotient(weight.cwiseAbs().cwiseMax(guard_epsilon));
}

MagnitudeMap magnitude_map(const BaseModel& base, const LoraAdapter& lora, float guard_epsilon) {
  check_lora_shapes(base, lora);
  MagnitudeMap out;
  out.guard_epsilon = guard_epsilon;
  for (BlockKey k : lora.keys()) out.values.emplace(k, magnitude_block(base.weight(k), delta(lora, k), guard_epsilon));
  return out;
}

Mask binarize_block(const Mat& magnitude, float threshold) {
  return magnitude.unaryExpr([threshold](float v) -> uint8_t { return v > threshold ? 1 : 0; });
}

ResponseMap binarize(const MagnitudeMap& mmap, float threshold) {
  if (!(threshold > 0.0f)) throw std::invalid_argument("threshold must be positive");
  ResponseMap out;
  out.threshold = threshold;
  for (const auto& [k, v] : mmap.values) out.masks.emplace(k, binarize_block(v, threshold));
  return out;
}

ResponseMap response_map(const BaseModel& base, const LoraAdapter& lora, float threshold) {
  return binarize(magnitude_map(base, lora), threshold);
}

std::map<BlockKey, double> sparsity_stats(const MagnitudeMap& mmap, float threshold) {
  std::map<BlockKey, double> out;
  for (const auto& [k, v] : mmap.values) {
    const auto below = (v.array() <= threshold).count();
    out.emplace(k, static_cast<double>(below) / static_cast<double>(v.size()));
  }
  return out;
}

double mask_cosine(const ResponseMap& a, const ResponseMap& b) {
  if (a.masks.size() != b.masks.size()) throw ShapeError("mask_cosine: block sets differ");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (const auto& [k, ma] : a.masks) {
    auto it = b.masks.find(k);
    if (it == b.masks.end()) throw ShapeError("mask_cosine: block " + k.name() + " missing");
    const Mask& mb = it->second;
    if (ma.rows() != mb.rows() || ma.cols() != mb.cols()) throw ShapeError("mask_cosine: shape mismatch at " + k.name());
    const auto ia = ma.cast<int>().array();
    const auto ib = mb.cast<int>().array();
    dot += static_cast<double>((ia * ib).sum());
    na += static_cast<double>(ia.sum());
    nb += static_cast<double>(ib.sum());
  }
  if (na == 0.0 && nb == 0.0) return 1.0;
  if (na == 0.0 || nb == 0.0) return 0.0;
  // sqrt of the exact integer product keeps identical masks at exactly 1.
  return dot / std::sqrt(na * nb);
}

PerturbMode parse_perturb_mode(const std::string& s) {
  if (s == "zero") return PerturbMode::Zero;
  if (s == "noise") return PerturbMode::Noise;
  throw std::invalid_argument("unknown perturbation mode '" + s + "'");
}

LoraAdapter perturb_masked(const LoraAdapter& lora, const ResponseMap& rmap, PerturbMode mode, float sigma,
                           uint64_t seed, bool invert) {
  if (mode == PerturbMode::Noise && !(sigma >= 0.0f)) throw std::invalid_argument("noise sigma must be >= 0");
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  LoraAdapter out;
  out.rank = lora.rank;
  out.meta = lora.meta;
  for (BlockKey k : lora.keys()) {
    auto it = rmap.masks.find(k);
    if (it == rmap.masks.end()) throw ShapeError("perturb_masked: no mask for " + k.name());
    Mat d = delta(lora, k);
    const Mask& mask = it->second;
    if (mask.rows() != d.rows() || mask.cols() != d.cols()) throw ShapeError("perturb_masked: shape mismatch");
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      const bool selected = (mask.data()[i] == 0) != invert;
      if (!selected) continue;
      if (mode == PerturbMode::Zero) {
        d.data()[i] = 0.0f;
      } else if (sigma > 0.0f) {
        d.data()[i] += sigma * normal(rng);
      }
    }
    out.dense.emplace(k, std::move(d));
  }
  return out;
}

Mat mask_to_float(const Mask& m) { return m.cast<float>(); }

Mask float_to_mask(const Mat& probs, float threshold) { return binarize_block(probs, threshold); }

std::vector<fs::path> render_response_maps(const std::vector<NamedResponseMap>& maps, const fs::path& dir) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  for (const auto& nm : maps) {
    int depths = 0;
    Eigen::Index m = 0, n = 0;
    for (const auto& [k, mask] : nm.map.masks) {
      depths = std::max(depths, k.depth + 1);
      m = mask.rows();
      n = mask.cols();
    }
    const Eigen::Index height = depths * m, width = 4 * n;
    std::vector<uint8_t> pixels(static_cast<size_t>(height * width), 0);
    for (const auto& [k, mask] : nm.map.masks) {
      const Eigen::Index r0 = k.depth * m, c0 = static_cast<int>(k.type) * n;
      for (Eigen::Index i = 0; i < m; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
          pixels[static_cast<size_t>((r0 + i) * width + c0 + j)] = mask(i, j) ? 255 : 0;
        }
      }
    }
    const fs::path file = dir / (nm.name + ".pgm");
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    written.push_back(file);
  }
  return written;
}

void export_response_maps(const std::vector<NamedResponseMap>& maps, const fs::path& dir) {
  fs::create_directories(dir / "masks");
  json list = json::array();
  for (const auto& nm : maps) {
    const std::string file = "masks/" + nm.name + ".u8";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    json blocks = json::array();
    for (const auto& [k, mask] : nm.map.masks) {
      out.write(reinterpret_cast<const char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
      blocks.push_back({{"depth", k.depth}, {"block_type", block_type_name(k.type)},
                        {"shape", {mask.rows(), mask.cols()}}});
    }
    list.push_back({{"name", nm.name}, {"threshold", nm.map.threshold}, {"density", nm.map.density()},
                    {"file", file}, {"blocks", blocks}});
  }
  write_text_file(dir / "response_maps.json",
                  json{{"format", "lofa-response-maps"}, {"version", 1}, {"dtype", "uint8"}, {"maps", list}}.dump(2) +
                      "\n");
}

std::vector<NamedResponseMap> import_response_maps(const fs::path& dir) {
  const json j = json::parse(read_text_file(dir / "response_maps.json"));
  std::vector<NamedResponseMap> out;
  for (const auto& e : j.at("maps")) {
    NamedResponseMap nm;
    nm.name = e.at("name");
    nm.map.threshold = e.at("threshold");
    std::ifstream in(dir / e.at("file").get<std::string>(), std::ios::binary);
    for (const auto& b : e.at("blocks")) {
      Mask mask(b.at("shape").at(0).get<Eigen::Index>(), b.at("shape").at(1).get<Eigen::Index>());
      in.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
      if (in.gcount() != mask.size()) throw FormatError("truncated mask blob for " + nm.name);
      nm.map.masks.emplace(BlockKey{b.at("depth").get<int>(), parse_block_type(b.at("block_type").get<std::string>())}, std::move(mask));
    }
    out.push_back(std::move(nm));
  }
  return out;
}

}  // namespace lofa
