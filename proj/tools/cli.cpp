#include "cli.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcbmerge/coeff_search.hpp"
#include "pcbmerge/error.hpp"
#include "pcbmerge/eval_harness.hpp"
#include "pcbmerge/task_vector.hpp"
#include "recipe.hpp"

namespace pcbmerge::cli {

namespace {

using nlohmann::json;
using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

[[noreturn]] void invalid(const std::string& msg) { fail(ErrorCode::InvalidArgument, msg); }

// Shortest round-trip text for a double.
std::string num(double v) { return json(v).dump(); }

void emit_error(std::ostream& err, std::string_view code, std::string_view category, std::string_view message,
                int exit_code) {
  json j;
  j["error"] = {{"code", code}, {"category", category}, {"message", message}};
  j["exit_code"] = exit_code;
  err << j.dump() << '\n';
}

int exit_code_for(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Validation: return kExitValidation;
    case ErrorCategory::Io: return kExitIo;
    case ErrorCategory::Fitness: return kExitFitness;
  }
  return kExitValidation;
}

std::string_view category_name(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::Validation: return "validation";
    case ErrorCategory::Io: return "io";
    case ErrorCategory::Fitness: return "fitness";
  }
  return "validation";
}

// JSON config files. Top-level scalar and array keys belong to the selected
// subcommand; an object-valued key names a section for that subcommand.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* root) : root_(root) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    return dump_app(app, default_also).dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    json doc;
    try {
      doc = json::parse(input);
    } catch (const json::exception& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw CLI::ConversionError("config file must hold a JSON object");

    std::vector<std::string> active;
    if (const auto subs = root_->get_subcommands(); !subs.empty()) active.push_back(subs.front()->get_name());

    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : doc.items()) {
      if (value.is_object()) {
        for (const auto& [inner, inner_value] : value.items()) items.push_back(make_item({key}, inner, inner_value));
      } else {
        items.push_back(make_item(active, key, value));
      }
    }
    return items;
  }

 private:
  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    if (v.is_number()) return v.dump();
    throw CLI::ConversionError("config values must be strings, numbers, booleans or arrays of those");
  }

  static CLI::ConfigItem make_item(std::vector<std::string> parents, const std::string& name, const json& value) {
    CLI::ConfigItem item;
    item.parents = std::move(parents);
    item.name = name;
    if (value.is_array()) {
      for (const auto& v : value) item.inputs.push_back(scalar(v));
    } else {
      item.inputs.push_back(scalar(value));
    }
    return item;
  }

  static json dump_app(const CLI::App* app, bool default_also) {
    json j = json::object();
    for (const CLI::Option* opt : app->get_options()) {
      if (!opt->get_configurable() || opt->get_lnames().empty()) continue;
      const auto& name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& res = opt->results();
        j[name] = res.size() == 1 ? json(res.front()) : json(res);
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    for (const CLI::App* sub : app->get_subcommands([](const CLI::App*) { return true; })) {
      if (auto inner = dump_app(sub, default_also); !inner.empty()) j[sub->get_name()] = inner;
    }
    return j;
  }

  const CLI::App* root_;
};

void add_merge_options(CLI::App* sub, MergeRecipe& r, bool with_method) {
  if (with_method) sub->add_option("--method", r.method, "average | task-arithmetic | ties | pcb")->capture_default_str();
  sub->add_option("--lambda", r.lambda, "Scaling coefficient applied to every task (default 1)");
  sub->add_option("--ratio", r.ratio, "Mask ratio r for pcb, trim keep fraction k for ties");
  sub->add_option("--trim", r.trim, "Trim keep fraction k (ties)");
  sub->add_option("--granularity", r.granularity, "per_tensor | global")->capture_default_str();
  sub->add_option("--regulator-n", r.regulator_n, "Intra-balancing regulator N (default: task count)");
  sub->add_option("--dare", r.dare, "DARE drop rate applied to task vectors before merging");
  sub->add_option("--seed", r.seed, "Seed for DARE and synthetic suites")->capture_default_str();
}

void add_file_options(CLI::App* sub, MergeRecipe& r) {
  sub->add_option("--pretrained", r.pretrained, "Pretrained checkpoint (.safetensors)");
  sub->add_option("--models", r.models, "Fine-tuned checkpoints")->expected(1, -1);
}

void add_toggles(CLI::App* sub, MergeRecipe& r) {
  sub->add_flag("--no-drop", r.no_drop, "Keep every entry (skip the balance mask)");
  sub->add_flag("--no-rescale", r.no_rescale, "Fuse masked entries with unit weights");
  sub->add_flag("--no-intra", r.no_intra, "Disable intra-balancing");
  sub->add_flag("--no-inter", r.no_inter, "Disable inter-balancing");
}

json file_config(const MergePlan& plan, const MergeRecipe& r) {
  json j = plan.to_json();
  if (plan.uses_pretrained()) j["pretrained"] = r.pretrained;
  j["models"] = r.models;
  return j;
}

struct LoadedInputs {
  Checkpoint pretrained;
  std::vector<Checkpoint> models;
  MergeInputs inputs;
};

std::unique_ptr<LoadedInputs> load_inputs(const MergePlan& plan, const MergeRecipe& r) {
  auto loaded = std::make_unique<LoadedInputs>();
  if (plan.uses_pretrained()) loaded->pretrained = load_checkpoint(r.pretrained);
  for (const auto& m : r.models) loaded->models.push_back(load_checkpoint(m));
  loaded->inputs.pretrained = plan.uses_pretrained() ? &loaded->pretrained : nullptr;
  loaded->inputs.models = loaded->models;
  prepare_task_vectors(plan, loaded->inputs);
  return loaded;
}

void require_file_inputs(const MergePlan& plan, const MergeRecipe& r) {
  if (r.models.empty()) invalid("--models needs at least one checkpoint");
  if (plan.uses_pretrained() && r.pretrained.empty()) {
    invalid("--pretrained is required for method " + std::string(method_name(plan.method)));
  }
  if (!plan.uses_pretrained() && !r.pretrained.empty()) invalid("average does not use --pretrained");
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

struct MergeFlags {
  MergeRecipe recipe;
  std::string out;
};

int cmd_merge(const MergeFlags& f, std::ostream& out) {
  const auto t0 = Clock::now();
  const MergePlan plan = make_plan(f.recipe);
  require_file_inputs(plan, f.recipe);

  std::ofstream dump;
  if (!f.recipe.dump_scores.empty()) {
    dump.open(f.recipe.dump_scores);
    if (!dump) fail(ErrorCode::IoFailure, "cannot open score dump file " + f.recipe.dump_scores);
  }
  const auto loaded = load_inputs(plan, f.recipe);
  PcbDiagnostics diag;
  const Checkpoint merged = execute_merge(plan, loaded->inputs, {}, &diag, dump.is_open() ? &dump : nullptr);
  save_checkpoint(merged, f.out);

  json summary;
  summary["command"] = "merge";
  summary["method"] = method_name(plan.method);
  summary["config"] = file_config(plan, f.recipe);
  summary["config"]["out"] = f.out;
  if (plan.method == Method::Pcb) summary["kept_fraction"] = diag.kept_fraction;
  summary["output"] = f.out;
  summary["wall_ms"] = ms_since(t0);
  out << summary.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

struct SearchFlags {
  MergeRecipe recipe;
  std::string eval_cmd;
  std::string synthetic;
  std::size_t budget = 500;
  std::string range = "0.8:2.5";
  std::optional<double> grid;
  int timeout = 600;
  std::string working_dir;
  std::size_t jobs = 1;
  std::string scratch_dir;
  bool keep_scratch = false;
  std::string report;
  std::string out;
};

json history_json(const FitnessReport& report) {
  json h = json::array();
  for (const auto& [params, fitness] : report.history) h.push_back({{"params", params}, {"fitness", fitness}});
  return h;
}

int cmd_search(const SearchFlags& f, std::ostream& out) {
  const auto t0 = Clock::now();
  const bool synthetic = !f.synthetic.empty();
  if (synthetic == !f.eval_cmd.empty()) invalid("search needs exactly one of --eval-cmd or --synthetic");
  if (f.recipe.lambda || !f.recipe.lambdas.empty()) invalid("search chooses lambda; drop --lambda/--lambdas");

  std::optional<SyntheticSpec> spec;
  if (synthetic) {
    spec = parse_synthetic_spec(f.synthetic);
    if (!f.recipe.pretrained.empty() || !f.recipe.models.empty()) {
      invalid("--synthetic builds its own checkpoints; drop --pretrained/--models");
    }
  }
  const MergePlan plan = make_plan(f.recipe, spec ? spec->sparsity : 0.2);
  if (!plan.uses_lambda()) invalid("search needs a method with lambda coefficients");
  if (!synthetic) require_file_inputs(plan, f.recipe);

  const auto [lo, hi] = parse_range(f.range);
  if (f.grid && !(*f.grid > 0.0)) invalid("--grid step must be positive");
  if (!f.grid && f.budget < 1) invalid("--budget must be at least 1");
  if (f.jobs < 1) invalid("--jobs must be at least 1");

  ExternalEvaluator evaluator{f.eval_cmd, f.timeout, f.working_dir};
  if (!synthetic) evaluator.validate();
  const ScratchOptions scratch{f.scratch_dir.empty() ? default_scratch_dir() : std::filesystem::path(f.scratch_dir),
                               f.keep_scratch};

  // Inputs
  std::optional<SyntheticSuite> suite;
  std::unique_ptr<LoadedInputs> loaded;
  MergeInputs inputs;
  if (synthetic) {
    suite = gen_synthetic_suite(spec->n, spec->dim, spec->sparsity, spec->overlap, spec->seed.value_or(f.recipe.seed));
    inputs.pretrained = &suite->pretrained;
    inputs.models = suite->task_checkpoints;
    prepare_task_vectors(plan, inputs);
  } else {
    loaded = load_inputs(plan, f.recipe);
    inputs = std::move(loaded->inputs);
  }
  const std::size_t n = inputs.models.size();

  auto coefficients = [n](std::span<const double> params) {
    return params.size() == 1 ? std::vector<double>(n, params[0]) : std::vector<double>(params.begin(), params.end());
  };
  const Fitness fitness = [&](std::span<const double> params) {
    const Checkpoint merged = execute_merge(plan, inputs, coefficients(params));
    return synthetic ? score_synthetic(*suite, merged).fitness : evaluate_checkpoint(evaluator, merged, scratch);
  };

  FitnessReport report;
  json summary;
  summary["command"] = "search";
  if (f.grid) {
    const auto candidates = grid_candidates(lo, hi, *f.grid);
    report = grid_search(candidates, 1, fitness);
    summary["strategy"] = "grid";
    summary["candidates"] = candidates.size();
  } else {
    report = cma_search(SearchSpace{n, lo, hi}, fitness, f.budget, f.recipe.seed, {std::nullopt, f.jobs});
    summary["strategy"] = "cma-es";
    summary["budget"] = f.budget;
  }

  MergePlan best_plan = plan;
  best_plan.lambdas = coefficients(report.best_params);
  json config = synthetic ? plan.to_json() : file_config(plan, f.recipe);
  config["range"] = {lo, hi};
  if (f.grid) config["grid"] = *f.grid;
  if (synthetic) {
    config["synthetic"] = {{"n", spec->n},
                           {"D", spec->dim},
                           {"s", spec->sparsity},
                           {"overlap", spec->overlap},
                           {"seed", suite->seed}};
  } else {
    config["eval_cmd"] = f.eval_cmd;
  }
  summary["config"] = config;
  summary["best_params"] = report.best_params;
  summary["best_fitness"] = report.best_fitness;
  summary["best_recipe"] = best_plan.to_json();
  summary["evaluations_used"] = report.evaluations_used;
  summary["samples_drawn"] = report.samples_drawn;

  if (!f.out.empty()) {
    save_checkpoint(execute_merge(plan, inputs, best_plan.lambdas), f.out);
    summary["output"] = f.out;
  }
  if (!f.report.empty()) {
    json full = summary;
    full["history"] = history_json(report);
    std::ofstream file(f.report);
    if (!(file << full.dump(2) << '\n')) fail(ErrorCode::IoFailure, "cannot write report " + f.report);
    summary["report"] = f.report;
  }
  summary["wall_ms"] = ms_since(t0);
  out << summary.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchFlags {
  std::vector<std::size_t> n{4};
  std::size_t dim = 512;
  double sparsity = 0.1;
  double overlap = 0.5;
  std::vector<std::uint64_t> seeds;
  std::optional<std::size_t> num_seeds;
  std::vector<std::string> methods{"average", "task-arithmetic", "ties", "pcb"};
  MergeRecipe recipe;
  std::string csv = "bench.csv";
  std::size_t jobs = 1;
};

struct BenchRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  SyntheticScore score;
  double wall_ms = 0.0;
};

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void run_cells(std::size_t count, std::size_t jobs, const std::function<void(std::size_t)>& cell) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        cell(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::min(jobs, count);
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

int cmd_bench(const BenchFlags& f, std::ostream& out, std::ostream& err) {
  const auto t0 = Clock::now();
  if (f.n.empty()) invalid("--n needs at least one task count");
  if (f.methods.empty()) invalid("--methods needs at least one method");
  if (f.jobs < 1) invalid("--jobs must be at least 1");
  if (f.num_seeds && !f.seeds.empty()) invalid("--seeds and --num-seeds are mutually exclusive");
  std::vector<std::uint64_t> seeds = f.seeds;
  if (f.num_seeds) {
    for (std::uint64_t s = 0; s < *f.num_seeds; ++s) seeds.push_back(s);
  }
  if (seeds.empty()) seeds.push_back(f.recipe.seed);

  // Validate every label before building suites.
  MergeRecipe base_recipe = f.recipe;
  base_recipe.method = "pcb";
  base_recipe.trim.reset();
  const MergePlan base = make_plan(base_recipe, f.sparsity);
  std::vector<MergePlan> plans;
  for (const auto& label : f.methods) {
    MergePlan p = plan_for_label(label, base);
    if (p.method == Method::Ties) {
      p.ratio = f.recipe.trim.value_or(f.recipe.ratio.value_or(f.sparsity));
      if (!(p.ratio > 0.0 && p.ratio <= 1.0)) invalid("trim keep fraction must lie in (0, 1]");
    }
    plans.push_back(p);
  }

  std::vector<SyntheticSuite> suites;
  for (std::size_t n : f.n) {
    for (std::uint64_t seed : seeds) suites.push_back(gen_synthetic_suite(n, f.dim, f.sparsity, f.overlap, seed));
  }

  // Task vectors per suite and plan family are prepared inside each cell.
  std::vector<BenchRow> rows(suites.size() * plans.size());
  run_cells(rows.size(), f.jobs, [&](std::size_t i) {
    const auto& suite = suites[i / plans.size()];
    MergePlan plan = plans[i % plans.size()];
    plan.seed = suite.seed;
    const auto c0 = Clock::now();
    MergeInputs inputs;
    inputs.pretrained = &suite.pretrained;
    inputs.models = suite.task_checkpoints;
    prepare_task_vectors(plan, inputs);
    const Checkpoint merged = execute_merge(plan, inputs, {});
    BenchRow& row = rows[i];
    row.method = f.methods[i % plans.size()];
    row.seed = suite.seed;
    row.n = suite.task_checkpoints.size();
    row.score = score_synthetic(suite, merged);
    row.wall_ms = ms_since(c0);
  });

  // CSV
  {
    std::ofstream csv(f.csv);
    if (!csv) fail(ErrorCode::IoFailure, "cannot write CSV " + f.csv);
    csv << "method,seed,n,D,s,overlap,mean_loss,per_task_losses,wall_ms\n";
    for (const auto& r : rows) {
      std::string losses;
      for (std::size_t t = 0; t < r.score.per_task.size(); ++t) losses += (t ? ";" : "") + num(r.score.per_task[t]);
      csv << r.method << ',' << r.seed << ',' << r.n << ',' << f.dim << ',' << num(f.sparsity) << ','
          << num(f.overlap) << ',' << num(r.score.mean_loss) << ',' << losses << ',' << num(r.wall_ms) << '\n';
    }
    if (!csv) fail(ErrorCode::IoFailure, "cannot write CSV " + f.csv);
  }

  // Human table on stderr
  std::ostringstream table;
  table << std::left << std::setw(18) << "method" << std::right << std::setw(4) << "n" << std::setw(8) << "seed"
        << std::setw(16) << "mean_loss" << std::setw(11) << "wall_ms" << '\n';
  for (const auto& r : rows) {
    table << std::left << std::setw(18) << r.method << std::right << std::setw(4) << r.n << std::setw(8) << r.seed
          << std::setw(16) << std::setprecision(6) << std::scientific << r.score.mean_loss << std::setw(11)
          << std::fixed << std::setprecision(2) << r.wall_ms << '\n';
  }

  json summary_rows = json::array();
  json medians = json::array();
  for (std::size_t n : f.n) {
    for (const auto& label : f.methods) {
      std::vector<double> losses;
      for (const auto& r : rows) {
        if (r.n == n && r.method == label) losses.push_back(r.score.mean_loss);
      }
      medians.push_back({{"method", label}, {"n", n}, {"median_loss", median(losses)}});
    }
  }
  for (const auto& r : rows) {
    summary_rows.push_back({{"method", r.method},
                            {"seed", r.seed},
                            {"n", r.n},
                            {"mean_loss", r.score.mean_loss},
                            {"per_task_losses", r.score.per_task},
                            {"wall_ms", r.wall_ms}});
  }
  err << table.str();

  json config = base.to_json();
  config.erase("method");
  config["methods"] = f.methods;
  config["n"] = f.n;
  config["D"] = f.dim;
  config["s"] = f.sparsity;
  config["overlap"] = f.overlap;
  config["seeds"] = seeds;
  json summary;
  summary["command"] = "bench";
  summary["config"] = config;
  summary["rows"] = summary_rows;
  summary["medians"] = medians;
  summary["csv"] = f.csv;
  summary["wall_ms"] = ms_since(t0);
  out << summary.dump() << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectFlags {
  std::vector<std::string> paths;
  std::string pretrained;
};

json tensor_stats(const Tensor& t) {
  constexpr std::size_t kBlock = 1 << 16;
  std::vector<double> buf(std::min(kBlock, t.numel()));
  double sq = 0.0, max_abs = 0.0;
  std::size_t zeros = 0;
  for (std::size_t begin = 0; begin < t.numel(); begin += kBlock) {
    const std::size_t len = std::min(kBlock, t.numel() - begin);
    t.read_f64(begin, std::span<double>(buf.data(), len));
    for (std::size_t k = 0; k < len; ++k) {
      const double a = std::abs(buf[k]);
      sq += a * a;
      max_abs = std::max(max_abs, a);
      zeros += a <= kZeroThreshold;
    }
  }
  return {{"l2_norm", std::sqrt(sq)},
          {"max_abs", max_abs},
          {"fraction_zero", t.numel() ? static_cast<double>(zeros) / static_cast<double>(t.numel()) : 0.0}};
}

int cmd_inspect(const InspectFlags& f, std::ostream& out) {
  std::vector<Checkpoint> ckpts;
  for (const auto& p : f.paths) ckpts.push_back(load_checkpoint(p));

  json files = json::array();
  for (std::size_t i = 0; i < ckpts.size(); ++i) {
    json tensors = json::array();
    for (const auto& [name, t] : ckpts[i].tensors) {
      json entry = {{"name", name}, {"dtype", dtype_name(t.dtype())}, {"shape", t.shape()}, {"numel", t.numel()}};
      if (is_floating(t.dtype())) entry["stats"] = tensor_stats(t);
      tensors.push_back(entry);
    }
    json file = {{"path", f.paths[i]}, {"tensors", tensors}};
    if (ckpts[i].header_metadata) file["metadata"] = *ckpts[i].header_metadata;
    files.push_back(file);
  }
  json summary;
  summary["command"] = "inspect";
  summary["files"] = files;

  if (!f.pretrained.empty()) {
    const Checkpoint pre = load_checkpoint(f.pretrained);
    const auto tvs = compute_task_vectors(pre, ckpts);
    json vectors = json::array();
    for (std::size_t i = 0; i < tvs.size(); ++i) {
      const auto stats = vector_stats(tvs[i]);
      json per_tensor = json::object();
      for (const auto& [name, s] : stats.per_tensor) {
        per_tensor[name] = {{"l2_norm", s.l2_norm}, {"max_abs", s.max_abs}, {"fraction_zero", s.fraction_zero}};
      }
      vectors.push_back({{"path", f.paths[i]},
                         {"l2_norm", stats.global.l2_norm},
                         {"max_abs", stats.global.max_abs},
                         {"sparsity", stats.global.fraction_zero},
                         {"per_tensor", per_tensor}});
    }
    json cosine = json::array();
    for (const auto& a : tvs) {
      json row = json::array();
      for (const auto& b : tvs) {
        try {
          row.push_back(cosine_similarity(a, b));
        } catch (const Error& e) {
          if (e.code() != ErrorCode::ZeroVector) throw;
          row.push_back(nullptr);
        }
      }
      cosine.push_back(row);
    }
    summary["pretrained"] = f.pretrained;
    summary["task_vectors"] = vectors;
    summary["cosine"] = cosine;
  }
  out << summary.dump() << '\n';
  return kExitOk;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    const int code = exit_code_for(e.category());
    emit_error(err, error_code_name(e.code()), category_name(e.category()), e.what(), code);
    return code;
  } catch (const std::filesystem::filesystem_error& e) {
    emit_error(err, "IoFailure", "io", e.what(), kExitIo);
    return kExitIo;
  } catch (const std::exception& e) {
    emit_error(err, "InternalError", "internal", e.what(), 1);
    return 1;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Merge fine-tuned checkpoints of one pretrained model", "pcbmerge"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "JSON config file; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.allow_config_extras(CLI::config_extras_mode::error);

  MergeFlags merge_flags;
  auto* merge = app.add_subcommand("merge", "Merge checkpoints and write the result");
  add_merge_options(merge, merge_flags.recipe, true);
  add_file_options(merge, merge_flags.recipe);
  add_toggles(merge, merge_flags.recipe);
  merge->add_option("--lambdas", merge_flags.recipe.lambdas, "Per-task coefficients")->delimiter(',');
  merge->add_option("--dump-scores", merge_flags.recipe.dump_scores, "Write per-unit balance statistics (JSON lines)");
  merge->add_option("--out", merge_flags.out, "Output checkpoint")->required();

  SearchFlags search_flags;
  auto* search = app.add_subcommand("search", "Search merging coefficients against a fitness source");
  add_merge_options(search, search_flags.recipe, true);
  add_file_options(search, search_flags.recipe);
  add_toggles(search, search_flags.recipe);
  search->add_option("--eval-cmd", search_flags.eval_cmd, "Scoring command containing {checkpoint}");
  search->add_option("--synthetic", search_flags.synthetic, "Synthetic suite, e.g. n=2,D=64,s=0.1[,overlap=0.5]");
  search->add_option("--budget", search_flags.budget, "CMA-ES sample budget")->capture_default_str();
  search->add_option("--range", search_flags.range, "Coefficient range lo:hi")->capture_default_str();
  search->add_option("--grid", search_flags.grid, "Uniform-lambda grid search with this step");
  search->add_option("--timeout", search_flags.timeout, "Seconds per evaluation")->capture_default_str();
  search->add_option("--working-dir", search_flags.working_dir, "Working directory of the scoring command");
  search->add_option("--jobs", search_flags.jobs, "Concurrent evaluations")->capture_default_str();
  search->add_option("--scratch-dir", search_flags.scratch_dir,
                     "Directory for candidate checkpoints (default $PCBMERGE_SCRATCH_DIR or <tmp>/pcbmerge)");
  search->add_flag("--keep-scratch", search_flags.keep_scratch, "Keep candidate checkpoints after scoring");
  search->add_option("--report", search_flags.report, "Write the search report with history (JSON)");
  search->add_option("--out", search_flags.out, "Write the best merged checkpoint");

  BenchFlags bench_flags;
  auto* bench = app.add_subcommand("bench", "Compare methods on synthetic suites");
  add_merge_options(bench, bench_flags.recipe, false);
  bench->add_option("--n", bench_flags.n, "Task counts")->delimiter(',')->capture_default_str();
  bench->add_option("--dim,-D", bench_flags.dim, "Dimension D")->capture_default_str();
  bench->add_option("--sparsity,-s", bench_flags.sparsity, "Support fraction s")->capture_default_str();
  bench->add_option("--overlap", bench_flags.overlap, "Shared support fraction")->capture_default_str();
  bench->add_option("--seeds", bench_flags.seeds, "Suite seeds")->delimiter(',');
  bench->add_option("--num-seeds", bench_flags.num_seeds, "Use seeds 0..K-1");
  bench->add_option("--methods", bench_flags.methods, "Methods: " + CLI::detail::join(known_labels(), ", "))
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--csv", bench_flags.csv, "CSV output path")->capture_default_str();
  bench->add_option("--jobs", bench_flags.jobs, "Concurrent cells")->capture_default_str();

  InspectFlags inspect_flags;
  auto* inspect = app.add_subcommand("inspect", "Print schema, statistics and task-vector similarity");
  inspect->add_option("paths", inspect_flags.paths, "Checkpoints")->required()->expected(1, -1);
  inspect->add_option("--pretrained", inspect_flags.pretrained, "Pretrained checkpoint for task-vector analysis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return kExitOk;
    }
    emit_error(err, e.get_name(), "validation", e.what(), kExitValidation);
    return kExitValidation;
  } catch (const std::exception& e) {
    emit_error(err, "InvalidArgument", "validation", e.what(), kExitValidation);
    return kExitValidation;
  }

  if (merge->parsed()) return guarded(err, [&] { return cmd_merge(merge_flags, out); });
  if (search->parsed()) return guarded(err, [&] { return cmd_search(search_flags, out); });
  if (bench->parsed()) return guarded(err, [&] { return cmd_bench(bench_flags, out, err); });
  return guarded(err, [&] { return cmd_inspect(inspect_flags, out); });
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"pcbmerge"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace pcbmerge::cli
