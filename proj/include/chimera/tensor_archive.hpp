// SPDX-License-Identifier: Apache-2.0
#pragma once

// Directory of named tensors: manifest.json plus one raw little-endian,
// row-major file per tensor. Each manifest entry records name, dtype,
// shape and the SHA-256 of the raw file.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chimera/tensor.hpp"

namespace chimera {

enum class DType { kFloat32, kFloat64 };

std::string dtype_name(DType d);
DType parse_dtype(const std::string& s);

std::vector<std::uint8_t> encode_tensor(const Tensor& t, DType dtype);
Tensor decode_tensor(std::span<const std::uint8_t> bytes, const Shape& shape, DType dtype);

std::string sha256_hex(std::span<const std::uint8_t> bytes);

/// Rounds every element to the nearest float32 value.
Tensor round_to_float32(Tensor t);

class TensorArchive {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    DType dtype = DType::kFloat32;
  };

  void add(std::string name, Tensor tensor, DType dtype = DType::kFloat32);
  bool contains(const std::string& name) const;
  /// Throws FormatError naming the tensor when it is absent.
  const Tensor& get(const std::string& name) const;
  /// As get(), additionally checking the shape.
  const Tensor& get(const std::string& name, const Shape& expected) const;

  const std::vector<Entry>& entries() const { return entries_; }
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  void save(const std::filesystem::path& dir) const;
  /// Verifies presence, size and checksum of every listed tensor.
  static TensorArchive load(const std::filesystem::path& dir);

  /// SHA-256 over names, dtypes, shapes and encoded bytes of all entries.
  std::string digest() const;

  static constexpr const char* kManifestName = "manifest.json";

 private:
  std::vector<Entry> entries_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

}  // namespace chimera
