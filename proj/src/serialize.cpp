// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/serialize.hpp"

#include <array>
#include <cstdint>
#include <fstream>

namespace maskdiff {
namespace {

constexpr std::array<char, 4> kMagic{'M', 'D', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw SerializationError("truncated tensor archive: " + path.string());
  return v;
}

}  // namespace

template <typename Scalar>
void write_tensor_archive(const std::filesystem::path& path, const TensorArchive<Scalar>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw SerializationError("cannot open for writing: " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put(out, kVersion);
  put(out, static_cast<std::uint32_t>(sizeof(Scalar)));
  put(out, static_cast<std::uint64_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put(out, static_cast<std::int64_t>(d));
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  }
  if (!out) throw SerializationError("write failed: " + path.string());
}

template <typename Scalar>
TensorArchive<Scalar> read_tensor_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SerializationError("cannot open tensor archive: " + path.string());
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw SerializationError("not a tensor archive: " + path.string());
  if (get<std::uint32_t>(in, path) != kVersion) throw SerializationError("unsupported archive version: " + path.string());
  if (get<std::uint32_t>(in, path) != sizeof(Scalar)) {
    throw SerializationError("archive scalar width does not match the requested type: " + path.string());
  }
  const auto count = get<std::uint64_t>(in, path);
  TensorArchive<Scalar> entries;
  entries.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(in, path), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw SerializationError("corrupt tensor rank in " + path.string());
    Shape shape(rank);
    for (auto& d : shape) {
      d = static_cast<Index>(get<std::int64_t>(in, path));
      if (d < 0) throw SerializationError("corrupt tensor shape in " + path.string());
    }
    Tensor<Scalar> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
    if (!in) throw SerializationError("truncated tensor archive: " + path.string());
    entries.emplace_back(std::move(name), std::move(t));
  }
  return entries;
}

template void write_tensor_archive<float>(const std::filesystem::path&, const TensorArchive<float>&);
template void write_tensor_archive<double>(const std::filesystem::path&, const TensorArchive<double>&);
template TensorArchive<float> read_tensor_archive<float>(const std::filesystem::path&);
template TensorArchive<double> read_tensor_archive<double>(const std::filesystem::path&);

}  // namespace maskdiff
