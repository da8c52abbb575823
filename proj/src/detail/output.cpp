#include "detail/output.hpp"

#include <algorithm>
#include <vector>

#include "detail/parallel.hpp"
#include "pcbmerge/error.hpp"

namespace pcbmerge::detail {

Tensor add_delta(const Tensor& base, std::span<const double> delta) {
  if (delta.size() != base.numel()) {
    fail(ErrorCode::ShapeMismatch, "delta length " + std::to_string(delta.size()) +
                                       " does not match tensor of " + std::to_string(base.numel()));
  }
  const std::size_t n = base.numel();
  if (base.dtype() == DType::F64) {
    std::vector<double> out(n);
    base.read_f64(0, out);
    for (std::size_t d = 0; d < n; ++d) out[d] += delta[d];
    return Tensor::from_f64(base.shape(), out);
  }
  std::vector<float> out(n);
  for_each_chunk(n, [&](std::size_t, std::size_t b, std::size_t e) {
    std::vector<double> pre(e - b);
    base.read_f64(b, pre);
    for (std::size_t d = b; d < e; ++d) out[d] = static_cast<float>(pre[d - b] + delta[d]);
  });
  if (base.dtype() == DType::F32) return Tensor::from_f32(base.shape(), std::move(out));
  return Tensor::from_f32_as(base.dtype(), base.shape(), out);
}

}  // namespace pcbmerge::detail
