#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>

namespace pcbmerge {

enum class DType : std::uint8_t { F32, F16, BF16, F64, I64, I32, U8, Bool };

// Safetensors spelling ("F32", "BF16", ...).
std::string_view dtype_name(DType dtype) noexcept;
std::optional<DType> parse_dtype(std::string_view name) noexcept;

std::size_t dtype_size(DType dtype) noexcept;

// Only floating-point tensors take part in merging.
constexpr bool is_floating(DType dtype) noexcept {
  return dtype == DType::F32 || dtype == DType::F16 || dtype == DType::BF16 ||
         dtype == DType::F64;
}

// IEEE binary16 / bfloat16 conversions. Narrowing rounds to nearest even.
float half_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_half(float value) noexcept;
float bf16_to_float(std::uint16_t bits) noexcept;
std::uint16_t float_to_bf16(float value) noexcept;

}  // namespace pcbmerge
