#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pcbmerge/checkpoint.hpp"

namespace pcbmerge {

// tau = theta_finetuned - theta_pretrained over the mergeable entries of a
// shared schema, stored flat (row-major) in f32.
struct TaskVector {
  std::map<std::string, std::vector<float>> deltas;
  std::shared_ptr<const TensorSchema> schema;
  std::string label;

  std::size_t numel() const;
};

TaskVector compute_task_vector(const Checkpoint& finetuned, const Checkpoint& pretrained,
                               std::string label = {});

// Task vectors for every fine-tuned checkpoint against one shared schema.
std::vector<TaskVector> compute_task_vectors(const Checkpoint& pretrained,
                                             std::span<const Checkpoint> finetuned,
                                             MissingPolicy policy = MissingPolicy::Error);

// theta_pre + lambda * delta in f32, cast back to the pretrained dtype.
// Tensors outside the delta are copied from `pretrained` unchanged.
Checkpoint apply_delta(const Checkpoint& pretrained, const TaskVector& delta, float lambda);

struct TensorStats {
  double l2_norm = 0.0;
  double max_abs = 0.0;
  double fraction_zero = 0.0;
  std::size_t element_count = 0;
};

struct VectorStats {
  std::map<std::string, TensorStats> per_tensor;
  TensorStats global;
};

// Entries with |x| < kZeroThreshold count as zero.
inline constexpr double kZeroThreshold = 1e-12;

VectorStats vector_stats(const TaskVector& tv);

// Cosine over the concatenation of all entries. Throws ZeroVector when either
// side has no nonzero element.
float cosine_similarity(const TaskVector& a, const TaskVector& b);

// Throws SchemaMismatch unless both vectors cover the same names and sizes.
void require_same_layout(const TaskVector& a, const TaskVector& b);

}  // namespace pcbmerge
