#include <lofa/store.hpp>

#include <openssl/evp.h>

#include <bit>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace lofa {

static_assert(std::endian::native == std::endian::little, "blob format assumes a little-endian host");

namespace fs = std::filesystem;

namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw std::runtime_error("sha256 init failed");
    }
  }
  void update(const void* data, size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return os.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

std::string blob_file_name(const std::string& tensor_name) { return "tensors/" + tensor_name + ".bin"; }

}  // namespace

const Mat& TensorDir::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw FormatError("tensor '" + name + "' missing from checkpoint");
}

bool TensorDir::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void write_f32(std::ostream& out, const Mat& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
}

Mat read_f32(std::istream& in, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  Mat m(rows, cols);
  const auto bytes = static_cast<std::streamsize>(m.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(m.data()), bytes);
  if (in.gcount() != bytes) {
    throw FormatError("truncated payload for tensor '" + what + "': expected " + std::to_string(bytes) +
                      " bytes, got " + std::to_string(in.gcount()));
  }
  return m;
}

void write_tensor_dir(const fs::path& dir, const std::string& kind, const json& config,
                      std::span<const NamedTensor> tensors, const json& extra) {
  fs::create_directories(dir / "tensors");
  for (const auto& entry : fs::directory_iterator(dir / "tensors")) fs::remove(entry.path());
  json list = json::array();
  for (const auto& t : tensors) {
    const std::string file = blob_file_name(t.name);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
    write_f32(out, t.value);
    list.push_back({{"name", t.name},
                    {"shape", {t.value.rows(), t.value.cols()}},
                    {"file", file},
                    {"bytes", t.value.size() * sizeof(float)}});
  }
  json manifest = {{"format", "lofa-tensors"},
                   {"version", kStoreVersion},
                   {"kind", kind},
                   {"dtype", "float32"},
                   {"endianness", "little"},
                   {"config", config},
                   {"fingerprint", fingerprint(tensors)},
                   {"tensors", list}};
  for (const auto& [k, v] : extra.items()) manifest[k] = v;
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

TensorDir read_tensor_dir(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw MissingArtifactError("no checkpoint manifest at " + mpath.string());
  TensorDir out;
  try {
    out.manifest = json::parse(read_text_file(mpath));
  } catch (const json::parse_error& e) {
    throw FormatError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  const json& m = out.manifest;
  if (m.value("dtype", "") != "float32" || m.value("endianness", "") != "little") {
    throw FormatError("unsupported dtype/endianness in " + mpath.string());
  }
  if (m.value("version", 0) != kStoreVersion) throw FormatError("unsupported checkpoint version");
  out.kind = m.value("kind", "");
  out.config = m.value("config", json::object());
  for (const auto& t : m.at("tensors")) {
    const std::string name = t.at("name");
    const auto rows = t.at("shape").at(0).get<Eigen::Index>();
    const auto cols = t.at("shape").at(1).get<Eigen::Index>();
    const fs::path file = dir / t.at("file").get<std::string>();
    std::ifstream in(file, std::ios::binary);
    if (!in) throw FormatError("missing blob for tensor '" + name + "'");
    Mat v = read_f32(in, rows, cols, name);
    in.peek();
    if (!in.eof()) throw FormatError("oversized blob for tensor '" + name + "'");
    out.tensors.push_back({name, std::move(v)});
  }
  return out;
}

std::string fingerprint(std::span<const NamedTensor> tensors) {
  Sha256 h;
  for (const auto& t : tensors) {
    h.update(t.name.data(), t.name.size());
    const int64_t shape[2] = {t.value.rows(), t.value.cols()};
    h.update(shape, sizeof(shape));
    h.update(t.value.data(), static_cast<size_t>(t.value.size()) * sizeof(float));
  }
  return h.hex();
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string sha256_file(const fs::path& file) {
  const std::string s = read_text_file(file);
  return sha256_hex({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

void write_text_file(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << text;
}

std::string read_text_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw MissingArtifactError("cannot read " + file.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace lofa
