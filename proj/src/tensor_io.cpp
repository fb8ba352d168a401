// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

namespace mmfuse::io {

static_assert(std::endian::native == std::endian::little, "tensor files are little-endian; big-endian hosts unsupported");

namespace {

template <typename T>
constexpr DType dtype_of() {
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

void read_exact(std::istream& is, void* dst, std::size_t n) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("unexpected end of tensor data");
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  std::vector<T> data(shape_numel(shape));
  read_exact(is, data.data(), data.size() * sizeof(T));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename To>
Tensor<To> convert(const AnyTensor& any) {
  return std::visit(
      [](const auto& t) -> Tensor<To> {
        using From = typename std::decay_t<decltype(t)>::value_type;
        if constexpr (std::is_same_v<From, To>) {
          return t;
        } else {
          return t.template cast<To>();
        }
      },
      any);
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.empty()) throw FormatError("cannot serialize an empty tensor");
  os.write(kMagic, sizeof(kMagic));
  const auto tag = static_cast<std::uint8_t>(dtype_of<T>());
  const auto rank = static_cast<std::uint8_t>(t.rank());
  os.put(static_cast<char>(tag));
  os.put(static_cast<char>(rank));
  for (auto d : t.shape()) {
    const std::uint64_t dim = d;
    os.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  }
  os.write(reinterpret_cast<const char*>(t.raw()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw FormatError("tensor write failed");
}

AnyTensor read_tensor(std::istream& is) {
  char magic[8];
  read_exact(is, magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw FormatError("bad tensor magic");
  std::uint8_t tag = 0, rank = 0;
  read_exact(is, &tag, 1);
  read_exact(is, &rank, 1);
  if (rank == 0) throw FormatError("tensor rank must be >= 1");
  Shape shape(rank);
  for (auto& d : shape) {
    std::uint64_t dim = 0;
    read_exact(is, &dim, sizeof(dim));
    if (dim == 0) throw FormatError("tensor dimension must be >= 1");
    d = static_cast<std::size_t>(dim);
  }
  switch (static_cast<DType>(tag)) {
    case DType::f32:
      return read_payload<float>(is, std::move(shape));
    case DType::f64:
      return read_payload<double>(is, std::move(shape));
  }
  throw FormatError("unknown dtype tag " + std::to_string(tag));
}

template <typename T>
Tensor<T> read_tensor_as(std::istream& is) {
  return convert<T>(read_tensor(is));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor_as<T>(is);
}

std::filesystem::path manifest_path(const std::filesystem::path& archive) {
  auto p = archive;
  p += ".json";
  return p;
}

template <typename T>
Tensor<T> TensorArchive::get(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw FormatError("archive has no tensor named '" + name + "'");
  return convert<T>(it->second);
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  nlohmann::json manifest;
  manifest["format"] = "MMFKTNSR";
  manifest["version"] = 1;
  auto& tensors = manifest["tensors"];
  tensors = nlohmann::json::object();
  for (const auto& [name, any] : entries_) {
    const auto offset = static_cast<std::uint64_t>(os.tellp());
    std::visit([&](const auto& t) { write_tensor(os, t); }, any);
    const auto end = static_cast<std::uint64_t>(os.tellp());
    std::visit(
        [&](const auto& t) {
          using V = typename std::decay_t<decltype(t)>::value_type;
          tensors[name] = {{"offset", offset},
                           {"bytes", end - offset},
                           {"dtype", std::is_same_v<V, float> ? "f32" : "f64"},
                           {"shape", t.shape()}};
        },
        any);
  }
  std::ofstream ms(manifest_path(path));
  if (!ms) throw FormatError("cannot write manifest for " + path.string());
  ms << manifest.dump(2) << '\n';
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  std::ifstream ms(manifest_path(path));
  if (!ms) throw FormatError("missing manifest " + manifest_path(path).string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(ms);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }
  if (!manifest.contains("tensors") || !manifest["tensors"].is_object()) {
    throw FormatError("manifest lacks a 'tensors' object");
  }
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  TensorArchive archive;
  for (const auto& [name, entry] : manifest["tensors"].items()) {
    is.clear();
    is.seekg(static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    archive.entries_[name] = read_tensor(is);
  }
  return archive;
}

template void write_tensor<float>(std::ostream&, const Tensor<float>&);
template void write_tensor<double>(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor_as<float>(std::istream&);
template Tensor<double> read_tensor_as<double>(std::istream&);
template void save_tensor<float>(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor<double>(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor<float>(const std::filesystem::path&);
template Tensor<double> load_tensor<double>(const std::filesystem::path&);
template Tensor<float> TensorArchive::get<float>(const std::string&) const;
template Tensor<double> TensorArchive::get<double>(const std::string&) const;

}  // namespace mmfuse::io
