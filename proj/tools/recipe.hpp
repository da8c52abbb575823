#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pcbmerge/checkpoint.hpp"
#include "pcbmerge/granularity.hpp"
#include "pcbmerge/pcb.hpp"
#include "pcbmerge/task_vector.hpp"

namespace pcbmerge::cli {

enum class Method { Average, TaskArithmetic, Ties, Pcb };

std::optional<Method> parse_method(std::string_view name) noexcept;
std::string_view method_name(Method m) noexcept;

// Raw merge flags as parsed; unset optionals fall back to method defaults.
struct MergeRecipe {
  std::string method = "pcb";
  std::optional<double> dare;
  std::string pretrained;
  std::vector<std::string> models;
  std::optional<double> lambda;
  std::vector<double> lambdas;
  std::optional<double> ratio;
  std::optional<double> trim;
  std::string granularity = "per_tensor";
  bool no_drop = false;
  bool no_rescale = false;
  bool no_intra = false;
  bool no_inter = false;
  std::optional<int> regulator_n;
  std::uint64_t seed = 0;
  std::string dump_scores;
};

// Validated recipe with every default resolved.
struct MergePlan {
  Method method = Method::Pcb;
  Granularity granularity = Granularity::PerTensor;
  double lambda = 1.0;
  std::vector<double> lambdas;
  // Mask ratio r for pcb, trim keep fraction k for ties.
  double ratio = 0.2;
  std::optional<double> dare;
  bool intra = true;
  bool inter = true;
  bool drop = true;
  bool rescale = true;
  std::optional<int> regulator_n;
  std::uint64_t seed = 0;

  bool uses_pretrained() const noexcept { return method != Method::Average; }
  bool uses_lambda() const noexcept { return method != Method::Average; }
  nlohmann::json to_json() const;
};

// Checks method-specific flags without touching the filesystem.
// `default_ratio` applies to r and k when neither --ratio nor --trim is set.
MergePlan make_plan(const MergeRecipe& recipe, double default_ratio = 0.2);

// Applies a bench method label ("pcb", "ties", "pcb-no-drop", "dare-pcb", ...)
// on top of a base plan.
MergePlan plan_for_label(std::string_view label, const MergePlan& base);
std::vector<std::string> known_labels();

struct MergeInputs {
  const Checkpoint* pretrained = nullptr;
  std::span<const Checkpoint> models;
  // Materialized only when the method or DARE needs them; pcb without DARE
  // streams deltas straight from the checkpoints.
  std::vector<TaskVector> task_vectors;
};

void prepare_task_vectors(const MergePlan& plan, MergeInputs& inputs);

// One merge with per-task coefficients (`lambdas.size()` equals the model
// count, or is empty to use the plan's).
Checkpoint execute_merge(const MergePlan& plan, const MergeInputs& inputs, std::span<const double> lambdas,
                         PcbDiagnostics* diagnostics = nullptr, std::ostream* score_dump = nullptr);

struct SyntheticSpec {
  std::size_t n = 0;
  std::size_t dim = 0;
  double sparsity = 0.0;
  double overlap = 0.0;
  std::optional<std::uint64_t> seed;
};

// "n=2,D=64,s=0.1[,overlap=0.5][,seed=7]"
SyntheticSpec parse_synthetic_spec(std::string_view text);

// "lo:hi"
std::pair<double, double> parse_range(std::string_view text);

}  // namespace pcbmerge::cli
