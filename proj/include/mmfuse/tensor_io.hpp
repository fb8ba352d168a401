// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "mmfuse/tensor.hpp"

// Binary tensor record:
//
//   8 bytes   magic "MMFKTNSR"
//   u8        dtype tag (0 = f32, 1 = f64)
//   u8        rank
//   rank x u64 little-endian dims
//   raw little-endian scalars, row-major
//
// An archive is a concatenation of records in one file plus a sidecar JSON
// manifest (<file>.json) mapping tensor names to byte offsets.

namespace mmfuse::io {

inline constexpr char kMagic[8] = {'M', 'M', 'F', 'K', 'T', 'N', 'S', 'R'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t);

AnyTensor read_tensor(std::istream& is);

/// Reads a record and converts to T when the stored dtype differs.
template <typename T>
Tensor<T> read_tensor_as(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t);

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

std::filesystem::path manifest_path(const std::filesystem::path& archive);

class TensorArchive {
 public:
  template <typename T>
  void put(const std::string& name, Tensor<T> t) {
    entries_[name] = AnyTensor(std::move(t));
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  /// Throws FormatError when `name` is absent. Converts dtype on demand.
  template <typename T>
  Tensor<T> get(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }

  /// Writes `path` (records) and manifest_path(path) (JSON).
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, AnyTensor> entries_;
};

}  // namespace mmfuse::io
