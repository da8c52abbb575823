#pragma once

#include <stdlib.h>
#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pcbmerge/checkpoint.hpp"
#include "pcbmerge/error.hpp"
#include "pcbmerge/task_vector.hpp"
#include "pcbmerge/tensor.hpp"

namespace fixtures {

using pcbmerge::Checkpoint;
using pcbmerge::Shape;
using pcbmerge::Tensor;

// Removes itself on destruction.
class TempDir {
 public:
  TempDir() {
    std::string pattern = (std::filesystem::temp_directory_path() / "pcbmerge-test-XXXXXX").string();
    path_ = ::mkdtemp(pattern.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline Checkpoint make_ckpt(const std::map<std::string, std::vector<float>>& tensors) {
  Checkpoint c;
  for (const auto& [name, values] : tensors) c.tensors.emplace(name, Tensor::from_f32({values.size()}, values));
  return c;
}

inline pcbmerge::TaskVector make_tv(const std::map<std::string, std::vector<float>>& deltas,
                                    const std::string& label = "t") {
  auto schema = std::make_shared<pcbmerge::TensorSchema>();
  for (const auto& [name, values] : deltas) {
    schema->entries.emplace(name, pcbmerge::SchemaEntry{{values.size()}, pcbmerge::DType::F32, true});
  }
  pcbmerge::TaskVector tv;
  tv.deltas = {deltas.begin(), deltas.end()};
  tv.schema = std::move(schema);
  tv.label = label;
  return tv;
}

inline std::vector<float> values_of(const Checkpoint& c, const std::string& name) { return c.at(name).to_f32(); }

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Hand-assembled safetensors file: 8-byte little-endian length, header, payload.
inline std::vector<std::uint8_t> raw_safetensors(const std::string& header, const std::vector<std::uint8_t>& payload,
                                                 std::uint64_t declared_length) {
  std::vector<std::uint8_t> out(8);
  for (int b = 0; b < 8; ++b) out[b] = static_cast<std::uint8_t>(declared_length >> (8 * b));
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

inline std::vector<std::uint8_t> raw_safetensors(const std::string& header, const std::vector<std::uint8_t>& payload) {
  return raw_safetensors(header, payload, header.size());
}

inline std::vector<std::uint8_t> f32_bytes(const std::vector<float>& v) {
  std::vector<std::uint8_t> out(v.size() * 4);
  std::memcpy(out.data(), v.data(), out.size());
  return out;
}

inline std::vector<float> uniform_values(std::mt19937_64& rng, std::size_t n, float lo, float hi) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// Code of the pcbmerge::Error thrown by `f`, if any.
template <typename F>
std::optional<pcbmerge::ErrorCode> error_of(F&& f) {
  try {
    f();
  } catch (const pcbmerge::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

}  // namespace fixtures
