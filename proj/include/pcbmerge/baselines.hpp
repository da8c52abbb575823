#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "pcbmerge/checkpoint.hpp"
#include "pcbmerge/granularity.hpp"
#include "pcbmerge/task_vector.hpp"

namespace pcbmerge {

// Element-wise mean of the checkpoints' float tensors; everything else is
// copied from the first checkpoint.
Checkpoint average_merge(std::span<const Checkpoint> ckpts);

// theta_pre + lambda * sum_i tau_i.
Checkpoint task_arithmetic_merge(const Checkpoint& pretrained, std::span<const TaskVector> tvs, float lambda);

struct TiesConfig {
  // Fraction of entries kept per unit by magnitude (ceil(k * D)).
  double keep_fraction = 0.2;
  float lambda = 1.0f;
  Granularity granularity = Granularity::PerTensor;
};

// Trim, elect sign (sum of trimmed values; an exact zero sum elects +), then
// the mean of the trimmed values that agree with the elected sign.
Checkpoint ties_merge(const Checkpoint& pretrained, std::span<const TaskVector> tvs, const TiesConfig& cfg);

// Trimmed copy of a task vector: all but the top ceil(k * D) magnitudes per
// unit set to zero, ties keeping lower flat indices.
TaskVector ties_trim(const TaskVector& tv, double keep_fraction, Granularity granularity);

struct DareConfig {
  double drop_rate = 0.0;  // p in [0, 1)
  std::uint64_t seed = 0;
};

// Drops each element with probability p and scales survivors by 1 / (1 - p).
// The draw for an element depends only on (seed, tensor name, flat index).
TaskVector dare_preprocess(const TaskVector& tv, const DareConfig& cfg);

// The uniform variate in [0, 1) DARE uses for one element.
double dare_uniform(std::uint64_t seed, std::string_view tensor, std::uint64_t index) noexcept;

}  // namespace pcbmerge
