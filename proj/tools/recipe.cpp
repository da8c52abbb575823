#include "recipe.hpp"

#include <charconv>
#include <cmath>
#include <map>

#include "pcbmerge/baselines.hpp"
#include "pcbmerge/error.hpp"

namespace pcbmerge::cli {

namespace {

[[noreturn]] void invalid(const std::string& msg) { fail(ErrorCode::InvalidArgument, msg); }

double parse_number(std::string_view text, std::string_view what) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
    invalid("cannot parse " + std::string(what) + " from '" + std::string(text) + "'");
  }
  return v;
}

std::size_t parse_count(std::string_view text, std::string_view what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    invalid("cannot parse " + std::string(what) + " from '" + std::string(text) + "'");
  }
  return v;
}

std::vector<float> to_float(std::span<const double> values) {
  return {values.begin(), values.end()};
}

std::vector<TaskVector> scaled(std::span<const TaskVector> tvs, std::span<const double> lambdas) {
  std::vector<TaskVector> out(tvs.begin(), tvs.end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto f = static_cast<float>(lambdas[i]);
    for (auto& [name, delta] : out[i].deltas) {
      for (float& v : delta) v *= f;
    }
  }
  return out;
}

bool all_equal(std::span<const double> v) {
  for (double x : v) {
    if (x != v.front()) return false;
  }
  return true;
}

}  // namespace

std::optional<Method> parse_method(std::string_view name) noexcept {
  if (name == "average") return Method::Average;
  if (name == "task-arithmetic" || name == "task_arithmetic") return Method::TaskArithmetic;
  if (name == "ties") return Method::Ties;
  if (name == "pcb") return Method::Pcb;
  return std::nullopt;
}

std::string_view method_name(Method m) noexcept {
  switch (m) {
    case Method::Average: return "average";
    case Method::TaskArithmetic: return "task-arithmetic";
    case Method::Ties: return "ties";
    case Method::Pcb: return "pcb";
  }
  return "?";
}

nlohmann::json MergePlan::to_json() const {
  nlohmann::json j;
  j["method"] = method_name(method);
  if (uses_lambda()) {
    if (lambdas.empty()) {
      j["lambda"] = lambda;
    } else {
      j["lambdas"] = lambdas;
    }
  }
  if (method == Method::Pcb) {
    j["ratio"] = ratio;
    j["granularity"] = granularity_name(granularity);
    j["intra"] = intra;
    j["inter"] = inter;
    j["drop"] = drop;
    j["rescale"] = rescale;
    if (regulator_n) j["regulator_n"] = *regulator_n;
  } else if (method == Method::Ties) {
    j["trim"] = ratio;
    j["granularity"] = granularity_name(granularity);
  }
  if (dare) j["dare"] = *dare;
  j["seed"] = seed;
  return j;
}

MergePlan make_plan(const MergeRecipe& r, double default_ratio) {
  MergePlan plan;
  const auto method = parse_method(r.method);
  if (!method) invalid("unknown method '" + r.method + "' (average, task-arithmetic, ties, pcb)");
  plan.method = *method;
  plan.seed = r.seed;

  const auto gran = parse_granularity(r.granularity);
  if (!gran) invalid("unknown granularity '" + r.granularity + "' (per_tensor, global)");
  plan.granularity = *gran;

  const bool is_pcb = plan.method == Method::Pcb;
  const bool is_ties = plan.method == Method::Ties;

  if (!plan.uses_lambda() && (r.lambda || !r.lambdas.empty())) invalid("average takes no lambda");
  if (r.lambda && !r.lambdas.empty()) invalid("--lambda and --lambdas are mutually exclusive");
  if (r.lambda) {
    if (!(std::isfinite(*r.lambda) && *r.lambda >= 0.0)) invalid("lambda must be finite and non-negative");
    plan.lambda = *r.lambda;
  }
  for (double l : r.lambdas) {
    if (!(std::isfinite(l) && l >= 0.0)) invalid("per-task lambdas must be finite and non-negative");
  }
  plan.lambdas = r.lambdas;
  if (!r.lambdas.empty() && !r.models.empty() && r.lambdas.size() != r.models.size()) {
    invalid("--lambdas has " + std::to_string(r.lambdas.size()) + " values for " + std::to_string(r.models.size()) +
            " models");
  }

  if (r.trim && !is_ties) invalid("--trim applies to the ties method only");
  if (r.ratio && !is_pcb && !is_ties) invalid("--ratio applies to the pcb and ties methods only");
  if (r.ratio && r.trim) invalid("--ratio and --trim are mutually exclusive");
  plan.ratio = r.trim ? *r.trim : r.ratio ? *r.ratio : default_ratio;
  if (!(plan.ratio > 0.0 && plan.ratio <= 1.0)) invalid("ratio must lie in (0, 1]");

  if (!is_pcb && (r.no_drop || r.no_rescale || r.no_intra || r.no_inter)) {
    invalid("ablation toggles apply to the pcb method only");
  }
  if (!is_pcb && r.regulator_n) invalid("--regulator-n applies to the pcb method only");
  if (!is_pcb && !r.dump_scores.empty()) invalid("--dump-scores applies to the pcb method only");
  if (r.regulator_n && *r.regulator_n < 1) invalid("--regulator-n must be at least 1");
  plan.intra = !r.no_intra;
  plan.inter = !r.no_inter;
  plan.drop = !r.no_drop;
  plan.rescale = !r.no_rescale;
  plan.regulator_n = r.regulator_n;

  if (r.dare) {
    if (plan.method == Method::Average) invalid("--dare needs task vectors; average has none");
    if (!(*r.dare >= 0.0 && *r.dare < 1.0)) invalid("--dare rate must lie in [0, 1)");
    plan.dare = r.dare;
  }
  return plan;
}

std::vector<std::string> known_labels() {
  return {"average", "task-arithmetic", "ties", "pcb", "pcb-no-drop", "pcb-no-rescale", "pcb-no-intra",
          "pcb-no-inter"};
}

MergePlan plan_for_label(std::string_view label, const MergePlan& base) {
  MergePlan plan = base;
  plan.intra = plan.inter = plan.drop = plan.rescale = true;
  if (auto m = parse_method(label)) {
    plan.method = *m;
  } else if (label.substr(0, 4) == "pcb-") {
    plan.method = Method::Pcb;
    const auto toggle = label.substr(4);
    if (toggle == "no-drop") {
      plan.drop = false;
    } else if (toggle == "no-rescale") {
      plan.rescale = false;
    } else if (toggle == "no-intra") {
      plan.intra = false;
    } else if (toggle == "no-inter") {
      plan.inter = false;
    } else {
      invalid("unknown bench method '" + std::string(label) + "'");
    }
  } else {
    invalid("unknown bench method '" + std::string(label) + "'");
  }
  if (plan.method == Method::Average) plan.dare.reset();
  return plan;
}

void prepare_task_vectors(const MergePlan& plan, MergeInputs& inputs) {
  if (!plan.uses_pretrained()) return;
  if (plan.method == Method::Pcb && !plan.dare) return;
  inputs.task_vectors = compute_task_vectors(*inputs.pretrained, inputs.models);
  if (plan.dare) {
    for (std::size_t i = 0; i < inputs.task_vectors.size(); ++i) {
      inputs.task_vectors[i] = dare_preprocess(inputs.task_vectors[i], {*plan.dare, plan.seed + i});
    }
  }
}

Checkpoint execute_merge(const MergePlan& plan, const MergeInputs& inputs, std::span<const double> lambdas,
                         PcbDiagnostics* diagnostics, std::ostream* score_dump) {
  const std::size_t n = inputs.models.size();
  std::vector<double> coeffs(lambdas.begin(), lambdas.end());
  if (coeffs.empty()) coeffs = plan.lambdas.empty() ? std::vector<double>(n, plan.lambda) : plan.lambdas;
  if (coeffs.size() != n) invalid("expected " + std::to_string(n) + " coefficients, got " + std::to_string(coeffs.size()));

  switch (plan.method) {
    case Method::Average:
      return average_merge(inputs.models);
    case Method::TaskArithmetic:
      if (all_equal(coeffs)) return task_arithmetic_merge(*inputs.pretrained, inputs.task_vectors, static_cast<float>(coeffs[0]));
      return task_arithmetic_merge(*inputs.pretrained, scaled(inputs.task_vectors, coeffs), 1.0f);
    case Method::Ties: {
      TiesConfig cfg{plan.ratio, 1.0f, plan.granularity};
      if (all_equal(coeffs)) {
        cfg.lambda = static_cast<float>(coeffs[0]);
        return ties_merge(*inputs.pretrained, inputs.task_vectors, cfg);
      }
      return ties_merge(*inputs.pretrained, scaled(inputs.task_vectors, coeffs), cfg);
    }
    case Method::Pcb: {
      PcbConfig cfg;
      cfg.per_task_lambdas = to_float(coeffs);
      cfg.mask_ratio = plan.ratio;
      cfg.granularity = plan.granularity;
      cfg.regulator_n = plan.regulator_n;
      cfg.enable_intra = plan.intra;
      cfg.enable_inter = plan.inter;
      cfg.enable_drop = plan.drop;
      cfg.enable_rescale = plan.rescale;
      cfg.seed = plan.seed;
      cfg.score_dump = score_dump;
      if (plan.dare) return pcb_merge(*inputs.pretrained, std::span<const TaskVector>(inputs.task_vectors), cfg, diagnostics);
      return pcb_merge(*inputs.pretrained, inputs.models, cfg, diagnostics);
    }
  }
  invalid("unsupported method");
}

SyntheticSpec parse_synthetic_spec(std::string_view text) {
  SyntheticSpec spec;
  std::map<std::string, std::string> fields;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto comma = text.find(',', pos);
    if (comma == std::string_view::npos) comma = text.size();
    const auto item = text.substr(pos, comma - pos);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos || eq == 0) invalid("synthetic spec items look like key=value, got '" + std::string(item) + "'");
    if (!fields.emplace(std::string(item.substr(0, eq)), std::string(item.substr(eq + 1))).second) {
      invalid("synthetic spec repeats '" + std::string(item.substr(0, eq)) + "'");
    }
    pos = comma + 1;
  }
  for (const auto& [key, value] : fields) {
    if (key == "n") {
      spec.n = parse_count(value, "n");
    } else if (key == "D") {
      spec.dim = parse_count(value, "D");
    } else if (key == "s") {
      spec.sparsity = parse_number(value, "s");
    } else if (key == "overlap") {
      spec.overlap = parse_number(value, "overlap");
    } else if (key == "seed") {
      spec.seed = parse_count(value, "seed");
    } else {
      invalid("unknown synthetic spec key '" + key + "' (n, D, s, overlap, seed)");
    }
  }
  if (!fields.count("n") || !fields.count("D") || !fields.count("s")) invalid("synthetic spec needs n, D and s");
  if (spec.n < 1 || spec.dim < 1) invalid("synthetic spec needs n >= 1 and D >= 1");
  if (!(spec.sparsity > 0.0 && spec.sparsity <= 1.0)) invalid("synthetic sparsity must lie in (0, 1]");
  if (!(spec.overlap >= 0.0 && spec.overlap <= 1.0)) invalid("synthetic overlap must lie in [0, 1]");
  return spec;
}

std::pair<double, double> parse_range(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) invalid("range must look like lo:hi, got '" + std::string(text) + "'");
  const double lo = parse_number(text.substr(0, colon), "range lower bound");
  const double hi = parse_number(text.substr(colon + 1), "range upper bound");
  if (!(lo < hi)) invalid("range lower bound must be below the upper bound");
  return {lo, hi};
}

}  // namespace pcbmerge::cli
