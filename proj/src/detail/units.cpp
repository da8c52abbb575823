#include "detail/units.hpp"

#include <algorithm>

namespace pcbmerge::detail {

std::vector<Unit> make_units(const std::vector<std::pair<std::string, std::size_t>>& tensors,
                             Granularity granularity) {
  std::vector<Unit> units;
  if (granularity == Granularity::PerTensor) {
    units.reserve(tensors.size());
    for (const auto& [name, count] : tensors) {
      Unit u;
      u.segments.push_back({name, 0, count});
      u.size = count;
      units.push_back(std::move(u));
    }
    return units;
  }
  Unit all;
  for (const auto& [name, count] : tensors) {
    all.segments.push_back({name, all.size, count});
    all.size += count;
  }
  if (!all.segments.empty()) units.push_back(std::move(all));
  return units;
}

void DeltaSegment::read(std::size_t begin, std::span<double> out, std::span<double> scratch) const {
  if (!finetuned) {
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = materialized[begin + k];
    return;
  }
  finetuned->read_f64(begin, out);
  auto pre = scratch.first(out.size());
  pretrained->read_f64(begin, pre);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] -= pre[k];
}

void read_unit(const Unit& unit, const TaskUnit& task, std::size_t begin, std::span<double> out,
               std::span<double> scratch) {
  const std::size_t end = begin + out.size();
  // segments are sorted by offset; find the first one that overlaps
  auto it = std::upper_bound(unit.segments.begin(), unit.segments.end(), begin,
                             [](std::size_t pos, const Segment& s) { return pos < s.offset; });
  std::size_t si = static_cast<std::size_t>(it - unit.segments.begin()) - 1;
  std::size_t pos = begin;
  while (pos < end) {
    const Segment& seg = unit.segments[si];
    const std::size_t local = pos - seg.offset;
    const std::size_t take = std::min(end, seg.offset + seg.count) - pos;
    if (take > 0) task[si].read(local, out.subspan(pos - begin, take), scratch);
    pos += take;
    ++si;
  }
}

}  // namespace pcbmerge::detail
