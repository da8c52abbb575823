#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcbmerge/tensor.hpp"

namespace pcbmerge {

// Headers above this size are rejected before any allocation.
inline constexpr std::uint64_t kMaxHeaderBytes = 100ull * 1024 * 1024;

// A named set of tensors. Immutable once built; copies share tensor storage.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::optional<std::filesystem::path> source_path;
  std::optional<std::map<std::string, std::string>> header_metadata;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
};

// Loads a safetensors file. Tensors reference a read-only mapping of the file,
// so nothing beyond the header is copied until values are read.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Canonical encoding: header entries sorted by name, payload contiguous with no
// padding between tensors. Equal checkpoints produce identical bytes.
std::vector<std::byte> encode_checkpoint(const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

struct SchemaEntry {
  Shape shape;
  DType dtype = DType::F32;
  bool mergeable = false;

  bool operator==(const SchemaEntry&) const = default;
};

struct TensorSchema {
  std::map<std::string, SchemaEntry> entries;

  std::vector<std::string> mergeable_names() const;
  std::size_t mergeable_numel() const;
  bool operator==(const TensorSchema&) const = default;
};

enum class MissingPolicy { Error, Skip };

// Shared schema of `ckpts`; the first checkpoint is the reference for dtypes.
// With MissingPolicy::Skip, tensors absent from any checkpoint are dropped and
// described in `warnings` instead of raising MissingTensor.
TensorSchema validate_compatibility(std::span<const Checkpoint> ckpts,
                                    MissingPolicy policy = MissingPolicy::Error,
                                    std::vector<std::string>* warnings = nullptr);

}  // namespace pcbmerge
