#include "pcbmerge/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

#include "pcbmerge/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are read in place as little-endian");

namespace pcbmerge {

std::size_t shape_numel(const Shape& shape) noexcept {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::from_shared(DType dtype, Shape shape, std::shared_ptr<const void> owner,
                           std::span<const std::byte> bytes) {
  const std::size_t numel = shape_numel(shape);
  if (bytes.size() != numel * dtype_size(dtype)) {
    fail(ErrorCode::MalformedHeader, "tensor byte size " + std::to_string(bytes.size()) +
                                         " does not match shape " + shape_to_string(shape) +
                                         " of dtype " + std::string(dtype_name(dtype)));
  }
  Tensor t;
  t.dtype_ = dtype;
  t.shape_ = std::move(shape);
  t.numel_ = numel;
  t.owner_ = std::move(owner);
  t.bytes_ = bytes;
  return t;
}

Tensor Tensor::from_bytes(DType dtype, Shape shape, std::vector<std::byte> bytes) {
  auto owned = std::make_shared<const std::vector<std::byte>>(std::move(bytes));
  std::span<const std::byte> view(owned->data(), owned->size());
  return from_shared(dtype, std::move(shape), std::move(owned), view);
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
  auto owned = std::make_shared<const std::vector<float>>(std::move(values));
  std::span<const std::byte> view(reinterpret_cast<const std::byte*>(owned->data()),
                                  owned->size() * sizeof(float));
  return from_shared(DType::F32, std::move(shape), std::move(owned), view);
}

Tensor Tensor::from_f64(Shape shape, std::span<const double> values) {
  std::vector<std::byte> bytes(values.size() * sizeof(double));
  if (!bytes.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
  return from_bytes(DType::F64, std::move(shape), std::move(bytes));
}

Tensor Tensor::from_f32_as(DType dtype, Shape shape, std::span<const float> values) {
  switch (dtype) {
    case DType::F32:
      return from_f32(std::move(shape), std::vector<float>(values.begin(), values.end()));
    case DType::F64: {
      std::vector<double> wide(values.begin(), values.end());
      return from_f64(std::move(shape), wide);
    }
    case DType::F16:
    case DType::BF16: {
      std::vector<std::byte> bytes(values.size() * 2);
      for (std::size_t i = 0; i < values.size(); ++i) {
        const std::uint16_t h =
            dtype == DType::F16 ? float_to_half(values[i]) : float_to_bf16(values[i]);
        std::memcpy(bytes.data() + 2 * i, &h, 2);
      }
      return from_bytes(dtype, std::move(shape), std::move(bytes));
    }
    default:
      fail(ErrorCode::UnsupportedDtype,
           "cannot store float values as " + std::string(dtype_name(dtype)));
  }
}

namespace {

template <typename Out>
void convert_range(DType dtype, const std::byte* src, std::span<Out> out) {
  const std::size_t n = out.size();
  switch (dtype) {
    case DType::F32:
      if constexpr (std::is_same_v<Out, float>) {
        std::memcpy(out.data(), src, n * 4);
      } else {
        for (std::size_t i = 0; i < n; ++i) {
          float v;
          std::memcpy(&v, src + 4 * i, 4);
          out[i] = v;
        }
      }
      return;
    case DType::F64:
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, src + 8 * i, 8);
        out[i] = static_cast<Out>(v);
      }
      return;
    case DType::F16:
    case DType::BF16:
      for (std::size_t i = 0; i < n; ++i) {
        std::uint16_t h;
        std::memcpy(&h, src + 2 * i, 2);
        out[i] = dtype == DType::F16 ? half_to_float(h) : bf16_to_float(h);
      }
      return;
    default:
      fail(ErrorCode::UnsupportedDtype,
           "cannot read " + std::string(dtype_name(dtype)) + " tensor as float");
  }
}

}  // namespace

void Tensor::read_f32(std::size_t begin, std::span<float> out) const {
  if (begin + out.size() > numel_) fail(ErrorCode::LengthMismatch, "tensor read out of range");
  if (out.empty()) return;
  convert_range(dtype_, bytes_.data() + begin * dtype_size(dtype_), out);
}

void Tensor::read_f64(std::size_t begin, std::span<double> out) const {
  if (begin + out.size() > numel_) fail(ErrorCode::LengthMismatch, "tensor read out of range");
  if (out.empty()) return;
  convert_range(dtype_, bytes_.data() + begin * dtype_size(dtype_), out);
}

std::vector<float> Tensor::to_f32() const {
  std::vector<float> out(numel_);
  read_f32(0, out);
  return out;
}

bool Tensor::operator==(const Tensor& other) const noexcept {
  return dtype_ == other.dtype_ && shape_ == other.shape_ &&
         std::equal(bytes_.begin(), bytes_.end(), other.bytes_.begin(), other.bytes_.end());
}

}  // namespace pcbmerge
