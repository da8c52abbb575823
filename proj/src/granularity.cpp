#include "pcbmerge/granularity.hpp"

#include <algorithm>
#include <cmath>

namespace pcbmerge {

std::string_view granularity_name(Granularity g) noexcept {
  return g == Granularity::PerTensor ? "per_tensor" : "global";
}

std::optional<Granularity> parse_granularity(std::string_view name) noexcept {
  if (name == "per_tensor" || name == "per-tensor" || name == "tensor") return Granularity::PerTensor;
  if (name == "global") return Granularity::Global;
  return std::nullopt;
}

namespace {

double slack(double x) { return 1e-9 + 1e-12 * std::fabs(x); }

}  // namespace

std::size_t mask_keep_count(std::size_t unit_size, double ratio) noexcept {
  if (unit_size == 0) return 0;
  const double dropped_exact = (1.0 - ratio) * static_cast<double>(unit_size);
  const double dropped = std::floor(dropped_exact + slack(dropped_exact));
  const auto drop = static_cast<std::size_t>(std::clamp(dropped, 0.0, static_cast<double>(unit_size - 1)));
  return unit_size - drop;
}

std::size_t trim_keep_count(std::size_t unit_size, double fraction) noexcept {
  if (unit_size == 0) return 0;
  const double kept_exact = fraction * static_cast<double>(unit_size);
  const double kept = std::ceil(kept_exact - slack(kept_exact));
  return static_cast<std::size_t>(std::clamp(kept, 1.0, static_cast<double>(unit_size)));
}

}  // namespace pcbmerge
