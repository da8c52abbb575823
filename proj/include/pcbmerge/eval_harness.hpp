#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pcbmerge/checkpoint.hpp"

namespace pcbmerge {

// ---------------------------------------------------------------------------
// External scoring
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointPlaceholder = "{checkpoint}";

// A shell command that scores a checkpoint; `{checkpoint}` is replaced by the
// (shell-quoted) file path. Higher scores are better.
struct ExternalEvaluator {
  std::string command_template;
  int timeout_seconds = 600;
  std::filesystem::path working_dir;

  void validate() const;
};

// Runs the command and returns the score from the last parsable stdout line,
// either "score: <float>" or a bare float.
double evaluate_external(const ExternalEvaluator& ev, const std::filesystem::path& checkpoint_path);

// Score parsing on its own; throws UnparsableOutput when no line parses.
double parse_score_output(std::string_view stdout_text);

struct ScratchOptions {
  std::filesystem::path dir;
  bool keep = false;
};

// $PCBMERGE_SCRATCH_DIR, or <tmp>/pcbmerge.
std::filesystem::path default_scratch_dir();

// Saves `ckpt` under a unique name in the scratch directory, scores it, and
// removes the file afterwards unless `keep` is set or scoring failed.
double evaluate_checkpoint(const ExternalEvaluator& ev, const Checkpoint& ckpt, const ScratchOptions& scratch);

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

// Name of the single tensor every synthetic checkpoint holds.
inline constexpr const char* kSyntheticTensor = "weight";

// Desk-scale multi-task problem: a pretrained point and n task optima that
// differ from it on sparse supports. A shared core of round(overlap * m)
// coordinates belongs to every task; the remaining m - core coordinates of
// each task are private, where m = ceil(sparsity * D).
struct SyntheticSuite {
  Checkpoint pretrained;
  std::vector<Checkpoint> task_checkpoints;
  std::vector<std::vector<float>> task_optima;
  std::size_t dim = 0;
  double sparsity = 0.0;
  double overlap = 0.0;
  std::vector<std::vector<std::size_t>> supports;
  std::uint64_t seed = 0;
};

SyntheticSuite gen_synthetic_suite(std::size_t n_tasks, std::size_t dim, double sparsity, double overlap,
                                   std::uint64_t seed);

struct SyntheticScore {
  // loss_i = ||theta_merged - theta_i*||^2 over supports[i]
  std::vector<double> per_task;
  double mean_loss = 0.0;
  // -mean_loss
  double fitness = 0.0;
};

SyntheticScore score_synthetic(const SyntheticSuite& suite, const Checkpoint& merged);

}  // namespace pcbmerge
