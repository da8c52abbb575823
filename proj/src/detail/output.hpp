#pragma once

#include <span>

#include "pcbmerge/tensor.hpp"

namespace pcbmerge::detail {

// base + delta evaluated in f64, stored in base's dtype (f16/bf16 narrow from
// f32 with round-to-nearest-even).
Tensor add_delta(const Tensor& base, std::span<const double> delta);

}  // namespace pcbmerge::detail
