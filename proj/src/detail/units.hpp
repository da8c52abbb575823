#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "pcbmerge/granularity.hpp"
#include "pcbmerge/tensor.hpp"

namespace pcbmerge::detail {

// A named tensor laid out at `offset` inside its unit.
struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

struct Unit {
  std::vector<Segment> segments;
  std::size_t size = 0;
};

// `tensors` is (name, element count) in canonical order.
std::vector<Unit> make_units(const std::vector<std::pair<std::string, std::size_t>>& tensors,
                             Granularity granularity);

template <typename T>
std::vector<std::pair<std::string, std::size_t>> layout_of(const std::map<std::string, std::vector<T>>& m) {
  std::vector<std::pair<std::string, std::size_t>> out;
  out.reserve(m.size());
  for (const auto& [name, v] : m) out.emplace_back(name, v.size());
  return out;
}

// One task's delta over one tensor: either a materialized f32 delta or the
// difference of two stored tensors, read lazily in f64.
struct DeltaSegment {
  std::span<const float> materialized;
  const Tensor* finetuned = nullptr;
  const Tensor* pretrained = nullptr;

  void read(std::size_t begin, std::span<double> out, std::span<double> scratch) const;
};

// Deltas of one task over every segment of a unit, aligned with Unit::segments.
using TaskUnit = std::vector<DeltaSegment>;

// Fills `out` with the task's deltas for unit elements [begin, begin + out.size()).
// `scratch` must be at least out.size() long.
void read_unit(const Unit& unit, const TaskUnit& task, std::size_t begin, std::span<double> out,
               std::span<double> scratch);

// Scatter unit-flat values into a per-tensor map.
template <typename T, typename U>
void scatter(const Unit& unit, std::span<const U> flat, std::map<std::string, std::vector<T>>& out) {
  for (const auto& seg : unit.segments) {
    auto& dst = out[seg.name];
    dst.assign(flat.begin() + static_cast<std::ptrdiff_t>(seg.offset),
               flat.begin() + static_cast<std::ptrdiff_t>(seg.offset + seg.count));
  }
}

// Gather per-tensor values into unit-flat order.
template <typename T, typename U>
void gather(const Unit& unit, const std::map<std::string, std::vector<U>>& in, std::span<T> flat) {
  for (const auto& seg : unit.segments) {
    const auto& src = in.at(seg.name);
    std::copy(src.begin(), src.end(), flat.begin() + static_cast<std::ptrdiff_t>(seg.offset));
  }
}

}  // namespace pcbmerge::detail
