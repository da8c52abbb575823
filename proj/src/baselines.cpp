#include "pcbmerge/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "detail/output.hpp"
#include "detail/units.hpp"
#include "pcbmerge/error.hpp"

namespace pcbmerge {

namespace {

void require_consistent(const Checkpoint& pretrained, std::span<const TaskVector> tvs) {
  if (tvs.empty()) fail(ErrorCode::InvalidArgument, "at least one task vector is required");
  for (const auto& tv : tvs) require_same_layout(tvs[0], tv);
  for (const auto& [name, delta] : tvs[0].deltas) {
    if (!pretrained.contains(name) || pretrained.at(name).numel() != delta.size()) {
      fail(ErrorCode::ShapeMismatch, "task vector tensor '" + name + "' does not match the pretrained checkpoint");
    }
  }
}

Checkpoint with_deltas(const Checkpoint& pretrained, const std::map<std::string, std::vector<double>>& deltas) {
  Checkpoint out;
  out.header_metadata = pretrained.header_metadata;
  out.tensors = pretrained.tensors;
  for (const auto& [name, delta] : deltas) out.tensors[name] = detail::add_delta(pretrained.at(name), delta);
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

Checkpoint average_merge(std::span<const Checkpoint> ckpts) {
  if (ckpts.empty()) fail(ErrorCode::InvalidArgument, "at least one checkpoint is required");
  const TensorSchema schema = validate_compatibility(ckpts);
  Checkpoint out;
  out.header_metadata = ckpts[0].header_metadata;
  out.tensors = ckpts[0].tensors;
  const double n = static_cast<double>(ckpts.size());
  for (const auto& [name, entry] : schema.entries) {
    if (!entry.mergeable) continue;
    const Tensor& first = ckpts[0].at(name);
    std::vector<double> sum(first.numel(), 0.0), buf(first.numel());
    for (const auto& c : ckpts) {
      c.at(name).read_f64(0, buf);
      for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += buf[d];
    }
    if (first.dtype() == DType::F64) {
      for (double& v : sum) v /= n;
      out.tensors[name] = Tensor::from_f64(first.shape(), sum);
    } else {
      std::vector<float> mean(sum.size());
      for (std::size_t d = 0; d < sum.size(); ++d) mean[d] = static_cast<float>(sum[d] / n);
      out.tensors[name] = Tensor::from_f32_as(first.dtype(), first.shape(), mean);
    }
  }
  return out;
}

Checkpoint task_arithmetic_merge(const Checkpoint& pretrained, std::span<const TaskVector> tvs, float lambda) {
  require_consistent(pretrained, tvs);
  std::map<std::string, std::vector<double>> deltas;
  for (const auto& [name, first] : tvs[0].deltas) {
    std::vector<double> sum(first.size(), 0.0);
    for (const auto& tv : tvs) {
      const auto& tau = tv.deltas.at(name);
      for (std::size_t d = 0; d < sum.size(); ++d) sum[d] += tau[d];
    }
    for (double& v : sum) v *= lambda;
    deltas.emplace(name, std::move(sum));
  }
  return with_deltas(pretrained, deltas);
}

TaskVector ties_trim(const TaskVector& tv, double keep_fraction, Granularity granularity) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "trim keep fraction must lie in (0, 1]");
  }
  TaskVector out;
  out.schema = tv.schema;
  out.label = tv.label;
  for (const auto& unit : detail::make_units(detail::layout_of(tv.deltas), granularity)) {
    std::vector<float> flat(unit.size);
    detail::gather(unit, tv.deltas, std::span<float>(flat));
    const std::size_t k = trim_keep_count(unit.size, keep_fraction);
    if (k < unit.size) {
      std::vector<float> mags(unit.size);
      for (std::size_t d = 0; d < unit.size; ++d) mags[d] = std::fabs(flat[d]);
      auto nth = mags.begin() + static_cast<std::ptrdiff_t>(unit.size - k);
      std::nth_element(mags.begin(), nth, mags.end());
      const float threshold = *nth;
      std::size_t above = 0;
      for (float v : flat) above += std::fabs(v) > threshold;
      std::size_t ties_left = k - above;
      for (float& v : flat) {
        const float a = std::fabs(v);
        if (a > threshold) continue;
        if (a == threshold && ties_left > 0) {
          --ties_left;
          continue;
        }
        v = 0.0f;
      }
    }
    detail::scatter(unit, std::span<const float>(flat), out.deltas);
  }
  return out;
}

Checkpoint ties_merge(const Checkpoint& pretrained, std::span<const TaskVector> tvs, const TiesConfig& cfg) {
  require_consistent(pretrained, tvs);
  std::vector<TaskVector> trimmed;
  trimmed.reserve(tvs.size());
  for (const auto& tv : tvs) trimmed.push_back(ties_trim(tv, cfg.keep_fraction, cfg.granularity));

  std::map<std::string, std::vector<double>> deltas;
  for (const auto& [name, first] : trimmed[0].deltas) {
    const std::size_t size = first.size();
    std::vector<const std::vector<float>*> columns;
    for (const auto& t : trimmed) columns.push_back(&t.deltas.at(name));
    std::vector<double> merged(size, 0.0);
    for (std::size_t d = 0; d < size; ++d) {
      double total = 0.0;
      for (const auto* c : columns) total += (*c)[d];
      const bool positive = total >= 0.0;
      double sum = 0.0;
      std::size_t count = 0;
      for (const auto* c : columns) {
        const float v = (*c)[d];
        if (v != 0.0f && (v > 0.0f) == positive) {
          sum += v;
          ++count;
        }
      }
      merged[d] = count ? cfg.lambda * (sum / static_cast<double>(count)) : 0.0;
    }
    deltas.emplace(name, std::move(merged));
  }
  return with_deltas(pretrained, deltas);
}

double dare_uniform(std::uint64_t seed, std::string_view tensor, std::uint64_t index) noexcept {
  const std::uint64_t key = splitmix64(splitmix64(seed ^ fnv1a(tensor)) + index);
  return static_cast<double>(key >> 11) * 0x1.0p-53;
}

TaskVector dare_preprocess(const TaskVector& tv, const DareConfig& cfg) {
  if (!(cfg.drop_rate >= 0.0 && cfg.drop_rate < 1.0)) {
    fail(ErrorCode::InvalidArgument, "DARE drop rate must lie in [0, 1)");
  }
  if (cfg.drop_rate == 0.0) return tv;
  const float scale = static_cast<float>(1.0 / (1.0 - cfg.drop_rate));
  TaskVector out;
  out.schema = tv.schema;
  out.label = tv.label;
  for (const auto& [name, delta] : tv.deltas) {
    std::vector<float> kept(delta.size());
    for (std::size_t d = 0; d < delta.size(); ++d) {
      kept[d] = dare_uniform(cfg.seed, name, d) < cfg.drop_rate ? 0.0f : delta[d] * scale;
    }
    out.deltas.emplace(name, std::move(kept));
  }
  return out;
}

}  // namespace pcbmerge
