#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcbmerge/checkpoint.hpp"
#include "pcbmerge/granularity.hpp"
#include "pcbmerge/task_vector.hpp"

namespace pcbmerge {

// Parameter Competition Balancing.
//
// For task vectors tau_1..tau_n the merge scores every element twice:
//   intra_i = softmax(N * norm(tau_i * tau_i))
//   inter_i = sum_j softmax(norm(tau_i * tau_j))
// where norm(x) = x / max|x| and both run per granularity unit. The product
// beta_i = intra_i * inter_i is masked to its top D - floor((1 - r) D) entries
// per unit, and the merged delta is the beta-weighted mean
//   tau_m = sum_i(beta_hat_i * lambda_i * tau_i) / sum_i beta_hat_i
// with tau_m = 0 wherever every task masked the element out.
//
// Score arithmetic runs in f64; stored deltas are read as f64 as well.

enum class BalanceKind { Intra, Inter, Combined, Masked };

struct BalanceMatrix {
  std::map<std::string, std::vector<double>> scores;
  BalanceKind kind = BalanceKind::Combined;
};

struct Mask {
  std::map<std::string, std::vector<std::uint8_t>> bits;
  double ratio = 1.0;
};

struct PcbConfig {
  float lambda = 1.0f;
  std::optional<std::vector<float>> per_task_lambdas;
  double mask_ratio = 0.2;
  Granularity granularity = Granularity::PerTensor;
  // Overrides the task count used to sharpen intra-balancing.
  std::optional<int> regulator_n;
  bool enable_intra = true;
  bool enable_inter = true;
  bool enable_drop = true;
  bool enable_rescale = true;
  // false feeds raw tau_i * tau_j products to the inter softmax.
  bool inter_normalize = true;
  std::uint64_t seed = 0;
  // When set, per-tensor score statistics are written as JSON lines.
  std::ostream* score_dump = nullptr;

  // Throws InvalidArgument on out-of-range values.
  void validate(std::size_t n_tasks) const;
};

// Per-tensor fraction of elements each task kept after masking.
struct PcbDiagnostics {
  std::map<std::string, std::vector<double>> kept_fraction;
};

// x / max|x|; the zero vector maps to itself.
std::vector<float> normalize(std::span<const float> x);

BalanceMatrix intra_balance(const TaskVector& tv, int n_tasks,
                            Granularity granularity = Granularity::PerTensor);

// `task` indexes the member of `all` being scored; the sum includes j == task.
BalanceMatrix inter_balance(std::size_t task, std::span<const TaskVector> all,
                            Granularity granularity = Granularity::PerTensor,
                            bool normalize_products = true);

struct BalanceToggles {
  bool enable_intra = true;
  bool enable_inter = true;
};

BalanceMatrix combine_scores(const BalanceMatrix& intra, const BalanceMatrix& inter,
                             BalanceToggles toggles = {});

// Exactly mask_keep_count(D, ratio) highest scores per unit; ties at the
// threshold keep lower flat indices first.
Mask build_mask(const BalanceMatrix& beta, double ratio,
                Granularity granularity = Granularity::PerTensor);

BalanceMatrix apply_mask(const BalanceMatrix& beta, const Mask& mask);

// sum_i(beta_hat_i * lambda_i * tau_i) / sum_i beta_hat_i, zero where the
// denominator vanishes.
TaskVector fuse(std::span<const TaskVector> tvs, std::span<const BalanceMatrix> masked_betas,
                std::span<const float> lambdas);

// End-to-end merge: task vectors, balancing, drop, rescale, and
// theta_pre + lambda * tau_m. Non-float tensors are copied from `pretrained`.
Checkpoint pcb_merge(const Checkpoint& pretrained, std::span<const Checkpoint> finetuned,
                     const PcbConfig& cfg, PcbDiagnostics* diagnostics = nullptr);

// Same pipeline over precomputed (e.g. DARE-preprocessed) task vectors.
Checkpoint pcb_merge(const Checkpoint& pretrained, std::span<const TaskVector> tvs,
                     const PcbConfig& cfg, PcbDiagnostics* diagnostics = nullptr);

}  // namespace pcbmerge
