#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pcbmerge/dtype.hpp"

namespace pcbmerge {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_to_string(const Shape& shape);

// Immutable, shape-tagged block of little-endian bytes. Copies share storage,
// which may be owned memory or a read-only file mapping.
class Tensor {
 public:
  Tensor() = default;

  // Adopts `bytes`; size must equal numel(shape) * dtype_size(dtype).
  static Tensor from_bytes(DType dtype, Shape shape, std::vector<std::byte> bytes);
  // Shares `owner`'s lifetime; `bytes` must stay valid while `owner` lives.
  static Tensor from_shared(DType dtype, Shape shape, std::shared_ptr<const void> owner,
                            std::span<const std::byte> bytes);

  static Tensor from_f32(Shape shape, std::vector<float> values);
  static Tensor from_f64(Shape shape, std::span<const double> values);
  // Narrows f32 values to a floating `dtype` (round-to-nearest-even for halves).
  static Tensor from_f32_as(DType dtype, Shape shape, std::span<const float> values);

  DType dtype() const noexcept { return dtype_; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t numel() const noexcept { return numel_; }
  std::size_t nbytes() const noexcept { return bytes_.size(); }
  std::span<const std::byte> bytes() const noexcept { return bytes_; }

  // Converting element reads; valid for floating dtypes only.
  void read_f32(std::size_t begin, std::span<float> out) const;
  void read_f64(std::size_t begin, std::span<double> out) const;
  std::vector<float> to_f32() const;

  bool operator==(const Tensor& other) const noexcept;

 private:
  DType dtype_ = DType::F32;
  Shape shape_;
  std::size_t numel_ = 0;
  std::shared_ptr<const void> owner_;
  std::span<const std::byte> bytes_;
};

}  // namespace pcbmerge
