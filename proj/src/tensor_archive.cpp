// SPDX-License-Identifier: Apache-2.0
#include "chimera/tensor_archive.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

#include "chimera/errors.hpp"

namespace chimera {

namespace fs = std::filesystem;

std::string dtype_name(DType d) { return d == DType::kFloat32 ? "float32" : "float64"; }

DType parse_dtype(const std::string& s) {
  if (s == "float32") return DType::kFloat32;
  if (s == "float64") return DType::kFloat64;
  throw FormatError("unsupported dtype '" + s + "'");
}

namespace {

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T read_le(const std::uint8_t* p) {
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

std::size_t dtype_width(DType d) { return d == DType::kFloat32 ? 4 : 8; }

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct EvpCtxDeleter {
  void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr); }
  void update(std::span<const std::uint8_t> b) { EVP_DigestUpdate(ctx_.get(), b.data(), b.size()); }
  void update(const std::string& s) {
    EVP_DigestUpdate(ctx_.get(), s.data(), s.size());
  }
  std::string hex() {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), md, &len);
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i)
      os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
  }

 private:
  std::unique_ptr<EVP_MD_CTX, EvpCtxDeleter> ctx_;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype) {
  std::vector<std::uint8_t> out;
  out.reserve(t.numel() * dtype_width(dtype));
  for (double v : t.values()) {
    if (dtype == DType::kFloat32) {
      append_le(out, static_cast<float>(v));
    } else {
      append_le(out, v);
    }
  }
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, const Shape& shape, DType dtype) {
  const std::size_t n = shape_numel(shape);
  const std::size_t w = dtype_width(dtype);
  if (bytes.size() != n * w) {
    throw FormatError("byte count " + std::to_string(bytes.size()) + " does not match shape " +
                      shape_to_string(shape) + " of " + dtype_name(dtype));
  }
  Tensor t(shape);
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = dtype == DType::kFloat32 ? static_cast<double>(read_le<float>(bytes.data() + i * w))
                                    : read_le<double>(bytes.data() + i * w);
  }
  return t;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  Sha256 h;
  h.update(bytes);
  return h.hex();
}

Tensor round_to_float32(Tensor t) {
  for (double& v : t.storage()) v = static_cast<double>(static_cast<float>(v));
  return t;
}

void TensorArchive::add(std::string name, Tensor tensor, DType dtype) {
  if (contains(name)) throw std::invalid_argument("duplicate tensor '" + name + "'");
  entries_.push_back(Entry{std::move(name), std::move(tensor), dtype});
}

bool TensorArchive::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.name == name; });
}

const Tensor& TensorArchive::get(const std::string& name) const {
  for (const Entry& e : entries_)
    if (e.name == name) return e.tensor;
  throw FormatError("tensor '" + name + "' is missing");
}

const Tensor& TensorArchive::get(const std::string& name, const Shape& expected) const {
  const Tensor& t = get(name);
  if (t.shape() != expected) {
    throw FormatError("tensor '" + name + "' has shape " + shape_to_string(t.shape()) +
                      ", expected " + shape_to_string(expected));
  }
  return t;
}

void TensorArchive::save(const fs::path& dir) const {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "chimera-tensors/1";
  manifest["metadata"] = metadata_;
  manifest["tensors"] = nlohmann::json::array();
  for (const Entry& e : entries_) {
    const auto bytes = encode_tensor(e.tensor, e.dtype);
    const std::string file = e.name + ".bin";
    write_file(dir / file, bytes);
    manifest["tensors"].push_back({{"name", e.name},
                                   {"dtype", dtype_name(e.dtype)},
                                   {"shape", e.tensor.shape()},
                                   {"file", file},
                                   {"sha256", sha256_hex(bytes)}});
  }
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << '\n';
}

TensorArchive TensorArchive::load(const fs::path& dir) {
  const fs::path manifest_path = dir / kManifestName;
  if (!fs::exists(manifest_path)) throw FormatError("no manifest at " + manifest_path.string());
  nlohmann::json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  TensorArchive archive;
  archive.metadata_ = manifest.value("metadata", nlohmann::json::object());
  for (const auto& item : manifest.at("tensors")) {
    const std::string name = item.at("name").get<std::string>();
    const fs::path file = dir / item.at("file").get<std::string>();
    if (!fs::exists(file)) throw FormatError("tensor '" + name + "': file " + file.string() + " is missing");
    const auto bytes = read_file(file);
    const DType dtype = parse_dtype(item.at("dtype").get<std::string>());
    const Shape shape = item.at("shape").get<Shape>();
    if (bytes.size() != shape_numel(shape) * dtype_width(dtype)) {
      throw FormatError("tensor '" + name + "': shape mismatch, file holds " +
                        std::to_string(bytes.size()) + " bytes for declared shape " +
                        shape_to_string(shape));
    }
    if (sha256_hex(bytes) != item.at("sha256").get<std::string>()) {
      throw FormatError("tensor '" + name + "': checksum mismatch");
    }
    archive.add(name, decode_tensor(bytes, shape, dtype), dtype);
  }
  return archive;
}

std::string TensorArchive::digest() const {
  Sha256 h;
  for (const Entry& e : entries_) {
    h.update(e.name + '\n' + dtype_name(e.dtype) + '\n' + shape_to_string(e.tensor.shape()) + '\n');
    h.update(encode_tensor(e.tensor, e.dtype));
  }
  return h.hex();
}

}  // namespace chimera
