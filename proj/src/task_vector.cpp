#include "pcbmerge/task_vector.hpp"

#include <cmath>

#include "pcbmerge/error.hpp"

namespace pcbmerge {

std::size_t TaskVector::numel() const {
  std::size_t n = 0;
  for (const auto& [name, d] : deltas) n += d.size();
  return n;
}

namespace {

TaskVector delta_over_schema(const Checkpoint& finetuned, const Checkpoint& pretrained,
                             std::shared_ptr<const TensorSchema> schema, std::string label) {
  TaskVector tv;
  tv.schema = schema;
  tv.label = std::move(label);
  for (const auto& [name, entry] : schema->entries) {
    if (!entry.mergeable) continue;
    std::vector<float> ft = finetuned.at(name).to_f32();
    const std::vector<float> pre = pretrained.at(name).to_f32();
    for (std::size_t d = 0; d < ft.size(); ++d) ft[d] -= pre[d];
    tv.deltas.emplace(name, std::move(ft));
  }
  return tv;
}

}  // namespace

TaskVector compute_task_vector(const Checkpoint& finetuned, const Checkpoint& pretrained,
                               std::string label) {
  const Checkpoint pair[] = {pretrained, finetuned};
  auto schema = std::make_shared<const TensorSchema>(validate_compatibility(pair));
  return delta_over_schema(finetuned, pretrained, std::move(schema), std::move(label));
}

std::vector<TaskVector> compute_task_vectors(const Checkpoint& pretrained,
                                             std::span<const Checkpoint> finetuned,
                                             MissingPolicy policy) {
  std::vector<Checkpoint> all;
  all.reserve(finetuned.size() + 1);
  all.push_back(pretrained);
  all.insert(all.end(), finetuned.begin(), finetuned.end());
  auto schema = std::make_shared<const TensorSchema>(validate_compatibility(all, policy));

  std::vector<TaskVector> out;
  out.reserve(finetuned.size());
  for (std::size_t i = 0; i < finetuned.size(); ++i) {
    out.push_back(delta_over_schema(finetuned[i], pretrained, schema, "task" + std::to_string(i)));
  }
  return out;
}

Checkpoint apply_delta(const Checkpoint& pretrained, const TaskVector& delta, float lambda) {
  Checkpoint out;
  out.header_metadata = pretrained.header_metadata;
  for (const auto& [name, t] : pretrained.tensors) {
    auto it = delta.deltas.find(name);
    if (it == delta.deltas.end()) {
      out.tensors.emplace(name, t);
      continue;
    }
    if (it->second.size() != t.numel()) {
      fail(ErrorCode::ShapeMismatch, "delta for '" + name + "' has " +
                                         std::to_string(it->second.size()) + " elements, tensor has " +
                                         std::to_string(t.numel()));
    }
    std::vector<float> values = t.to_f32();
    for (std::size_t d = 0; d < values.size(); ++d) values[d] += lambda * it->second[d];
    out.tensors.emplace(name, Tensor::from_f32_as(t.dtype(), t.shape(), values));
  }
  for (const auto& [name, d] : delta.deltas) {
    if (!pretrained.contains(name)) {
      fail(ErrorCode::ShapeMismatch, "delta tensor '" + name + "' is absent from the pretrained checkpoint");
    }
  }
  return out;
}

namespace {

struct Accumulator {
  double sum_sq = 0.0;
  double max_abs = 0.0;
  std::size_t zeros = 0;
  std::size_t count = 0;

  void add(float x) {
    const double a = std::fabs(static_cast<double>(x));
    sum_sq += a * a;
    max_abs = std::max(max_abs, a);
    zeros += a < kZeroThreshold;
    ++count;
  }
  TensorStats finish() const {
    return {std::sqrt(sum_sq), max_abs, count ? static_cast<double>(zeros) / count : 0.0, count};
  }
};

}  // namespace

VectorStats vector_stats(const TaskVector& tv) {
  VectorStats stats;
  Accumulator global;
  for (const auto& [name, d] : tv.deltas) {
    Accumulator local;
    for (float x : d) {
      local.add(x);
      global.add(x);
    }
    stats.per_tensor.emplace(name, local.finish());
  }
  stats.global = global.finish();
  return stats;
}

void require_same_layout(const TaskVector& a, const TaskVector& b) {
  if (a.deltas.size() != b.deltas.size()) {
    fail(ErrorCode::SchemaMismatch, "task vectors cover different tensor sets");
  }
  for (auto ia = a.deltas.begin(), ib = b.deltas.begin(); ia != a.deltas.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.size() != ib->second.size()) {
      fail(ErrorCode::SchemaMismatch, "task vectors disagree on tensor '" + ia->first + "'");
    }
  }
}

float cosine_similarity(const TaskVector& a, const TaskVector& b) {
  require_same_layout(a, b);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (auto ia = a.deltas.begin(), ib = b.deltas.begin(); ia != a.deltas.end(); ++ia, ++ib) {
    const auto& x = ia->second;
    const auto& y = ib->second;
    for (std::size_t d = 0; d < x.size(); ++d) {
      dot += static_cast<double>(x[d]) * y[d];
      na += static_cast<double>(x[d]) * x[d];
      nb += static_cast<double>(y[d]) * y[d];
    }
  }
  if (na == 0.0 || nb == 0.0) {
    fail(ErrorCode::ZeroVector, "cosine similarity of an all-zero task vector ('" +
                                    (na == 0.0 ? a.label : b.label) + "')");
  }
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return static_cast<float>(std::clamp(c, -1.0, 1.0));
}

}  // namespace pcbmerge
