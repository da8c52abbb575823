#pragma once

#include <cstddef>
#include <optional>
#include <string_view>

namespace pcbmerge {

// The element set over which normalization, softmax and top-k selection run:
// each named tensor on its own, or every mergeable element as one vector.
enum class Granularity { PerTensor, Global };

std::string_view granularity_name(Granularity g) noexcept;
std::optional<Granularity> parse_granularity(std::string_view name) noexcept;

// D - floor((1 - ratio) * D): elements kept per unit by a mask of ratio r.
// Floors and ceilings absorb sub-ulp error so decimal ratios behave exactly.
std::size_t mask_keep_count(std::size_t unit_size, double ratio) noexcept;

// ceil(fraction * D): elements kept per unit by magnitude trimming.
std::size_t trim_keep_count(std::size_t unit_size, double fraction) noexcept;

}  // namespace pcbmerge
