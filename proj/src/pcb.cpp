#include "pcbmerge/pcb.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "detail/output.hpp"
#include "detail/parallel.hpp"
#include "detail/units.hpp"
#include "pcbmerge/error.hpp"

namespace pcbmerge {

namespace {

using detail::for_each_chunk;
using detail::TaskUnit;
using detail::Unit;

struct ChunkBuffers {
  std::vector<double> a, b, scratch;
};

ChunkBuffers& chunk_buffers() {
  thread_local ChunkBuffers buffers{std::vector<double>(detail::kChunk),
                                    std::vector<double>(detail::kChunk),
                                    std::vector<double>(detail::kChunk)};
  return buffers;
}

double ordered_sum(const std::vector<double>& parts) {
  return std::accumulate(parts.begin(), parts.end(), 0.0);
}

double ordered_max(const std::vector<double>& parts) {
  double m = 0.0;
  for (double p : parts) m = std::max(m, p);
  return m;
}

// out = softmax(n_reg * norm(tau * tau)) over the unit.
void intra_scores(const Unit& unit, const TaskUnit& task, double n_reg, std::span<double> out) {
  const std::size_t chunks = detail::chunk_count(unit.size);
  std::vector<double> parts(chunks);
  for_each_chunk(unit.size, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& buf = chunk_buffers();
    std::span<double> x(buf.a.data(), e - b);
    detail::read_unit(unit, task, b, x, buf.scratch);
    double m = 0.0;
    for (double v : x) m = std::max(m, v * v);
    parts[c] = m;
  });
  const double max_sq = ordered_max(parts);
  // the largest normalized entry is exactly 1, so the softmax shift is n_reg
  const double shift = max_sq > 0.0 ? n_reg : 0.0;

  for_each_chunk(unit.size, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& buf = chunk_buffers();
    std::span<double> x(buf.a.data(), e - b);
    detail::read_unit(unit, task, b, x, buf.scratch);
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double arg = max_sq > 0.0 ? n_reg * (x[k] * x[k] / max_sq) : 0.0;
      const double v = std::exp(arg - shift);
      out[b + k] = v;
      s += v;
    }
    parts[c] = s;
  });
  const double total = ordered_sum(parts);
  for_each_chunk(unit.size, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t d = b; d < e; ++d) out[d] /= total;
  });
}

// acc += softmax(norm(tau_i * tau_j)); `tmp` is unit-sized scratch.
void add_inter_summand(const Unit& unit, const TaskUnit& ti, const TaskUnit& tj, bool normalize_products,
                       std::span<double> acc, std::span<double> tmp) {
  const std::size_t chunks = detail::chunk_count(unit.size);
  std::vector<double> part_abs(chunks), part_max(chunks, -HUGE_VAL), parts(chunks);
  for_each_chunk(unit.size, [&](std::size_t c, std::size_t b, std::size_t e) {
    auto& buf = chunk_buffers();
    std::span<double> x(buf.a.data(), e - b), y(buf.b.data(), e - b);
    detail::read_unit(unit, ti, b, x, buf.scratch);
    if (&ti == &tj) {
      std::copy(x.begin(), x.end(), y.begin());
    } else {
      detail::read_unit(unit, tj, b, y, buf.scratch);
    }
    double m = 0.0, top = -HUGE_VAL;
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double p = x[k] * y[k];
      tmp[b + k] = p;
      m = std::max(m, std::fabs(p));
      top = std::max(top, p);
    }
    part_abs[c] = m;
    part_max[c] = top;
  });
  const double max_abs = ordered_max(part_abs);
  double top = -HUGE_VAL;
  for (double p : part_max) top = std::max(top, p);

  double shift = top;
  double scale = 1.0;
  if (normalize_products) {
    scale = max_abs;
    shift = max_abs > 0.0 ? top / max_abs : 0.0;
  }
  for_each_chunk(unit.size, [&](std::size_t c, std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t d = b; d < e; ++d) {
      double arg = tmp[d];
      if (normalize_products) arg = max_abs > 0.0 ? arg / scale : 0.0;
      const double v = std::exp(arg - shift);
      tmp[d] = v;
      s += v;
    }
    parts[c] = s;
  });
  const double total = ordered_sum(parts);
  for_each_chunk(unit.size, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t d = b; d < e; ++d) acc[d] += tmp[d] / total;
  });
}

// keep[d] = 1 for exactly `k` largest scores; ties keep lower indices.
void select_top_k(std::span<const double> scores, std::size_t k, std::span<double> scratch,
                  std::span<std::uint8_t> keep) {
  const std::size_t n = scores.size();
  if (k >= n) {
    std::fill(keep.begin(), keep.end(), std::uint8_t{1});
    return;
  }
  if (k == 0) {
    std::fill(keep.begin(), keep.end(), std::uint8_t{0});
    return;
  }
  std::copy(scores.begin(), scores.end(), scratch.begin());
  auto nth = scratch.begin() + static_cast<std::ptrdiff_t>(n - k);
  std::nth_element(scratch.begin(), nth, scratch.begin() + static_cast<std::ptrdiff_t>(n));
  const double threshold = *nth;
  std::size_t above = 0;
  for (double s : scores) above += s > threshold;
  std::size_t ties_left = k - above;
  for (std::size_t d = 0; d < n; ++d) {
    if (scores[d] > threshold) {
      keep[d] = 1;
    } else if (scores[d] == threshold && ties_left > 0) {
      keep[d] = 1;
      --ties_left;
    } else {
      keep[d] = 0;
    }
  }
}

void dump_unit_stats(std::ostream& os, std::size_t task, const Unit& unit, std::span<const double> beta,
                     std::span<const std::uint8_t> keep) {
  for (const auto& seg : unit.segments) {
    if (seg.count == 0) continue;
    auto s = beta.subspan(seg.offset, seg.count);
    auto m = keep.subspan(seg.offset, seg.count);
    const double total = std::accumulate(s.begin(), s.end(), 0.0);
    double entropy = 0.0;
    for (double v : s) {
      const double p = v / total;
      if (p > 0.0) entropy -= p * std::log(p);
    }
    nlohmann::ordered_json line;
    line["task"] = task;
    line["tensor"] = seg.name;
    line["min"] = *std::min_element(s.begin(), s.end());
    line["max"] = *std::max_element(s.begin(), s.end());
    line["entropy"] = entropy;
    line["kept_fraction"] = static_cast<double>(std::count(m.begin(), m.end(), 1)) / seg.count;
    os << line.dump() << '\n';
  }
}

// Runs the full balancing pipeline on one unit and returns tau_m (already
// scaled by the per-task coefficients).
std::vector<double> merge_unit(const Unit& unit, const std::vector<TaskUnit>& tasks, const PcbConfig& cfg,
                               std::span<const double> lambdas, PcbDiagnostics* diagnostics) {
  const std::size_t n = tasks.size();
  const std::size_t size = unit.size;
  const double n_reg = static_cast<double>(cfg.regulator_n.value_or(static_cast<int>(n)));
  const std::size_t keep_count = cfg.enable_drop ? mask_keep_count(size, cfg.mask_ratio) : size;

  std::vector<double> beta(size), acc, tmp(size), num(size, 0.0), den(size, 0.0);
  std::vector<std::uint8_t> keep(size);
  if (cfg.enable_inter) acc.resize(size);

  for (std::size_t i = 0; i < n; ++i) {
    if (cfg.enable_intra) {
      intra_scores(unit, tasks[i], n_reg, beta);
    } else {
      std::fill(beta.begin(), beta.end(), 1.0);
    }
    if (cfg.enable_inter) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        add_inter_summand(unit, tasks[i], tasks[j], cfg.inter_normalize, acc, tmp);
      }
      for_each_chunk(size, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t d = b; d < e; ++d) beta[d] *= acc[d];
      });
    }
    select_top_k(beta, keep_count, tmp, keep);

    if (cfg.score_dump) dump_unit_stats(*cfg.score_dump, i, unit, beta, keep);
    if (diagnostics) {
      for (const auto& seg : unit.segments) {
        auto& slot = diagnostics->kept_fraction[seg.name];
        slot.resize(n);
        const auto first = keep.begin() + static_cast<std::ptrdiff_t>(seg.offset);
        slot[i] = seg.count ? static_cast<double>(std::count(first, first + static_cast<std::ptrdiff_t>(seg.count), 1)) / seg.count
                            : 1.0;
      }
    }

    const double lambda = lambdas[i];
    for_each_chunk(size, [&](std::size_t, std::size_t b, std::size_t e) {
      auto& buf = chunk_buffers();
      std::span<double> x(buf.a.data(), e - b);
      detail::read_unit(unit, tasks[i], b, x, buf.scratch);
      for (std::size_t d = b; d < e; ++d) {
        if (!keep[d]) continue;
        // without rescaling every surviving entry carries unit weight (disjoint mean)
        const double w = cfg.enable_rescale ? beta[d] : 1.0;
        num[d] += w * lambda * x[d - b];
        den[d] += w;
      }
    });
  }

  for_each_chunk(size, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t d = b; d < e; ++d) num[d] = den[d] > 0.0 ? num[d] / den[d] : 0.0;
  });
  return num;
}

std::vector<double> resolve_lambdas(const PcbConfig& cfg, std::size_t n) {
  if (cfg.per_task_lambdas) {
    return std::vector<double>(cfg.per_task_lambdas->begin(), cfg.per_task_lambdas->end());
  }
  return std::vector<double>(n, static_cast<double>(cfg.lambda));
}

Checkpoint run_pipeline(const Checkpoint& pretrained,
                        const std::vector<std::pair<std::string, std::size_t>>& layout,
                        const std::vector<std::map<std::string, detail::DeltaSegment>>& sources,
                        const PcbConfig& cfg, PcbDiagnostics* diagnostics) {
  cfg.validate(sources.size());
  const auto lambdas = resolve_lambdas(cfg, sources.size());

  Checkpoint out;
  out.header_metadata = pretrained.header_metadata;
  out.tensors = pretrained.tensors;
  for (const Unit& unit : detail::make_units(layout, cfg.granularity)) {
    std::vector<TaskUnit> tasks(sources.size());
    for (std::size_t i = 0; i < sources.size(); ++i) {
      for (const auto& seg : unit.segments) tasks[i].push_back(sources[i].at(seg.name));
    }
    const auto merged = merge_unit(unit, tasks, cfg, lambdas, diagnostics);
    for (const auto& seg : unit.segments) {
      const Tensor& base = pretrained.at(seg.name);
      out.tensors[seg.name] =
          detail::add_delta(base, std::span<const double>(merged).subspan(seg.offset, seg.count));
    }
  }
  return out;
}

TaskUnit materialized_unit(const Unit& unit, const TaskVector& tv) {
  TaskUnit t;
  for (const auto& seg : unit.segments) t.push_back({tv.deltas.at(seg.name), nullptr, nullptr});
  return t;
}

}  // namespace

void PcbConfig::validate(std::size_t n_tasks) const {
  if (n_tasks == 0) fail(ErrorCode::InvalidArgument, "at least one task is required");
  if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "mask ratio must lie in (0, 1], got " + std::to_string(mask_ratio));
  }
  if (!std::isfinite(lambda)) fail(ErrorCode::InvalidArgument, "lambda must be finite");
  if (per_task_lambdas) {
    if (per_task_lambdas->size() != n_tasks) {
      fail(ErrorCode::LengthMismatch, "expected " + std::to_string(n_tasks) + " per-task lambdas, got " +
                                          std::to_string(per_task_lambdas->size()));
    }
    for (float l : *per_task_lambdas) {
      if (!std::isfinite(l)) fail(ErrorCode::InvalidArgument, "per-task lambdas must be finite");
    }
  }
  if (regulator_n && *regulator_n < 1) fail(ErrorCode::InvalidArgument, "regulator N must be >= 1");
}

std::vector<float> normalize(std::span<const float> x) {
  float m = 0.0f;
  for (float v : x) m = std::max(m, std::fabs(v));
  std::vector<float> out(x.size(), 0.0f);
  if (m > 0.0f) {
    for (std::size_t d = 0; d < x.size(); ++d) out[d] = x[d] / m;
  }
  return out;
}

BalanceMatrix intra_balance(const TaskVector& tv, int n_tasks, Granularity granularity) {
  if (n_tasks < 1) fail(ErrorCode::InvalidArgument, "n_tasks must be >= 1");
  BalanceMatrix out;
  out.kind = BalanceKind::Intra;
  for (const Unit& unit : detail::make_units(detail::layout_of(tv.deltas), granularity)) {
    std::vector<double> flat(unit.size);
    intra_scores(unit, materialized_unit(unit, tv), static_cast<double>(n_tasks), flat);
    detail::scatter(unit, std::span<const double>(flat), out.scores);
  }
  return out;
}

BalanceMatrix inter_balance(std::size_t task, std::span<const TaskVector> all, Granularity granularity,
                            bool normalize_products) {
  if (task >= all.size()) fail(ErrorCode::InvalidArgument, "task index out of range");
  for (const auto& tv : all) require_same_layout(all[task], tv);
  BalanceMatrix out;
  out.kind = BalanceKind::Inter;
  for (const Unit& unit : detail::make_units(detail::layout_of(all[task].deltas), granularity)) {
    std::vector<double> acc(unit.size, 0.0), tmp(unit.size);
    const TaskUnit ti = materialized_unit(unit, all[task]);
    for (const auto& other : all) {
      const TaskUnit tj = materialized_unit(unit, other);
      add_inter_summand(unit, ti, tj, normalize_products, acc, tmp);
    }
    detail::scatter(unit, std::span<const double>(acc), out.scores);
  }
  return out;
}

namespace {

void require_same_scores_layout(const BalanceMatrix& a, const BalanceMatrix& b) {
  if (a.scores.size() != b.scores.size()) fail(ErrorCode::SchemaMismatch, "score matrices cover different tensors");
  for (auto ia = a.scores.begin(), ib = b.scores.begin(); ia != a.scores.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.size() != ib->second.size()) {
      fail(ErrorCode::SchemaMismatch, "score matrices disagree on tensor '" + ia->first + "'");
    }
  }
}

}  // namespace

BalanceMatrix combine_scores(const BalanceMatrix& intra, const BalanceMatrix& inter, BalanceToggles toggles) {
  require_same_scores_layout(intra, inter);
  BalanceMatrix out;
  out.kind = BalanceKind::Combined;
  for (const auto& [name, a] : intra.scores) {
    const auto& b = inter.scores.at(name);
    std::vector<double> c(a.size(), 1.0);
    for (std::size_t d = 0; d < a.size(); ++d) {
      if (toggles.enable_intra) c[d] *= a[d];
      if (toggles.enable_inter) c[d] *= b[d];
    }
    out.scores.emplace(name, std::move(c));
  }
  return out;
}

Mask build_mask(const BalanceMatrix& beta, double ratio, Granularity granularity) {
  if (!(ratio > 0.0 && ratio <= 1.0)) {
    fail(ErrorCode::InvalidArgument, "mask ratio must lie in (0, 1], got " + std::to_string(ratio));
  }
  Mask mask;
  mask.ratio = ratio;
  for (const Unit& unit : detail::make_units(detail::layout_of(beta.scores), granularity)) {
    std::vector<double> flat(unit.size), scratch(unit.size);
    std::vector<std::uint8_t> keep(unit.size);
    detail::gather(unit, beta.scores, std::span<double>(flat));
    select_top_k(flat, mask_keep_count(unit.size, ratio), scratch, keep);
    detail::scatter(unit, std::span<const std::uint8_t>(keep), mask.bits);
  }
  return mask;
}

BalanceMatrix apply_mask(const BalanceMatrix& beta, const Mask& mask) {
  BalanceMatrix out;
  out.kind = BalanceKind::Masked;
  for (const auto& [name, s] : beta.scores) {
    const auto& bits = mask.bits.at(name);
    if (bits.size() != s.size()) fail(ErrorCode::SchemaMismatch, "mask does not match scores for '" + name + "'");
    std::vector<double> masked(s.size());
    for (std::size_t d = 0; d < s.size(); ++d) masked[d] = bits[d] ? s[d] : 0.0;
    out.scores.emplace(name, std::move(masked));
  }
  return out;
}

TaskVector fuse(std::span<const TaskVector> tvs, std::span<const BalanceMatrix> masked_betas,
                std::span<const float> lambdas) {
  if (tvs.empty()) fail(ErrorCode::InvalidArgument, "nothing to fuse");
  if (tvs.size() != masked_betas.size() || tvs.size() != lambdas.size()) {
    fail(ErrorCode::LengthMismatch, "fuse needs one score matrix and one lambda per task vector");
  }
  for (const auto& tv : tvs) require_same_layout(tvs[0], tv);

  TaskVector out;
  out.schema = tvs[0].schema;
  out.label = "merged";
  for (const auto& [name, first] : tvs[0].deltas) {
    std::vector<double> num(first.size(), 0.0), den(first.size(), 0.0);
    for (std::size_t i = 0; i < tvs.size(); ++i) {
      const auto& tau = tvs[i].deltas.at(name);
      auto it = masked_betas[i].scores.find(name);
      if (it == masked_betas[i].scores.end() || it->second.size() != tau.size()) {
        fail(ErrorCode::SchemaMismatch, "score matrix does not cover tensor '" + name + "'");
      }
      for (std::size_t d = 0; d < tau.size(); ++d) {
        const double w = it->second[d];
        if (w < 0.0) fail(ErrorCode::InvalidArgument, "masked scores must be nonnegative");
        num[d] += w * static_cast<double>(lambdas[i]) * tau[d];
        den[d] += w;
      }
    }
    std::vector<float> merged(first.size());
    for (std::size_t d = 0; d < merged.size(); ++d) {
      merged[d] = den[d] > 0.0 ? static_cast<float>(num[d] / den[d]) : 0.0f;
    }
    out.deltas.emplace(name, std::move(merged));
  }
  return out;
}

Checkpoint pcb_merge(const Checkpoint& pretrained, std::span<const Checkpoint> finetuned, const PcbConfig& cfg,
                     PcbDiagnostics* diagnostics) {
  if (finetuned.empty()) fail(ErrorCode::InvalidArgument, "at least one fine-tuned checkpoint is required");
  std::vector<Checkpoint> all;
  all.reserve(finetuned.size() + 1);
  all.push_back(pretrained);
  all.insert(all.end(), finetuned.begin(), finetuned.end());
  const TensorSchema schema = validate_compatibility(all);

  std::vector<std::pair<std::string, std::size_t>> layout;
  for (const auto& [name, e] : schema.entries) {
    if (e.mergeable) layout.emplace_back(name, shape_numel(e.shape));
  }
  std::vector<std::map<std::string, detail::DeltaSegment>> sources(finetuned.size());
  for (std::size_t i = 0; i < finetuned.size(); ++i) {
    for (const auto& [name, count] : layout) {
      sources[i].emplace(name, detail::DeltaSegment{{}, &finetuned[i].at(name), &pretrained.at(name)});
    }
  }
  return run_pipeline(pretrained, layout, sources, cfg, diagnostics);
}

Checkpoint pcb_merge(const Checkpoint& pretrained, std::span<const TaskVector> tvs, const PcbConfig& cfg,
                     PcbDiagnostics* diagnostics) {
  if (tvs.empty()) fail(ErrorCode::InvalidArgument, "at least one task vector is required");
  for (const auto& tv : tvs) require_same_layout(tvs[0], tv);
  const auto layout = detail::layout_of(tvs[0].deltas);
  for (const auto& [name, count] : layout) {
    if (!pretrained.contains(name) || pretrained.at(name).numel() != count) {
      fail(ErrorCode::ShapeMismatch, "task vector tensor '" + name + "' does not match the pretrained checkpoint");
    }
  }
  std::vector<std::map<std::string, detail::DeltaSegment>> sources(tvs.size());
  for (std::size_t i = 0; i < tvs.size(); ++i) {
    for (const auto& [name, delta] : tvs[i].deltas) {
      sources[i].emplace(name, detail::DeltaSegment{delta, nullptr, nullptr});
    }
  }
  return run_pipeline(pretrained, layout, sources, cfg, diagnostics);
}

}  // namespace pcbmerge
