// Runs the acceptance criteria and prints one PASS/FAIL line per criterion.
// Usage: acceptance [criterion ids...]   (all when none given)

#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracle.hpp"
#include "pcbmerge/baselines.hpp"
#include "pcbmerge/checkpoint.hpp"
#include "pcbmerge/coeff_search.hpp"
#include "pcbmerge/eval_harness.hpp"
#include "pcbmerge/pcb.hpp"

using namespace pcbmerge;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, a, b, c);
  return buf;
}

double max_abs_diff(const std::vector<float>& got, const oracle::Vec& want) {
  double worst = 0.0;
  for (std::size_t d = 0; d < got.size(); ++d) worst = std::max(worst, std::fabs(double(got[d]) - want[d]));
  return worst;
}

// Fine-tuned values for a random instance: a mix of zero deltas, repeated
// magnitudes and continuous values.
std::vector<float> random_delta(std::mt19937_64& rng, std::size_t D) {
  std::uniform_int_distribution<int> kind(0, 3), level(-4, 4);
  std::uniform_real_distribution<float> cont(-2.0f, 2.0f);
  std::vector<float> tau(D);
  for (auto& t : tau) {
    switch (kind(rng)) {
      case 0: t = 0.0f; break;
      case 1: t = 0.5f * static_cast<float>(level(rng)); break;
      default: t = cont(rng);
    }
  }
  return tau;
}

// ---------------------------------------------------------------------------

Outcome oracle_equivalence() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> dim(1, 16), tasks(1, 3);
  const double ratios[] = {0.1, 0.2, 0.3, 0.5, 1.0};
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t D = static_cast<std::size_t>(dim(rng));
    const std::size_t n = static_cast<std::size_t>(tasks(rng));
    const auto pre = fixtures::uniform_values(rng, D, -1, 1);
    std::vector<Checkpoint> fts;
    std::vector<oracle::Vec> taus;
    for (std::size_t i = 0; i < n; ++i) {
      const auto tau = random_delta(rng, D);
      std::vector<float> ft(D);
      oracle::Vec t(D);
      for (std::size_t d = 0; d < D; ++d) {
        ft[d] = pre[d] + tau[d];
        t[d] = double(ft[d]) - double(pre[d]);
      }
      fts.push_back(fixtures::make_ckpt({{"w", ft}}));
      taus.push_back(t);
    }
    PcbConfig cfg;
    cfg.mask_ratio = ratios[trial % 5];
    cfg.per_task_lambdas = fixtures::uniform_values(rng, n, 0.8f, 2.5f);
    oracle::PcbOptions o;
    o.ratio = cfg.mask_ratio;
    const auto merged = fixtures::values_of(pcb_merge(fixtures::make_ckpt({{"w", pre}}), fts, cfg), "w");
    const oracle::Vec delta =
        oracle::pcb_delta(taus, oracle::Vec(cfg.per_task_lambdas->begin(), cfg.per_task_lambdas->end()), o);
    oracle::Vec want(D);
    for (std::size_t d = 0; d < D; ++d) want[d] = pre[d] + delta[d];
    worst = std::max(worst, max_abs_diff(merged, want));
  }
  return {worst <= 1e-6, fmt("200 instances, max |error| %.2e (limit 1e-6)", worst)};
}

Outcome single_task_identity() {
  std::mt19937_64 rng(2);
  int mismatches = 0, checked = 0;
  for (DType dt : {DType::F32, DType::F16, DType::BF16}) {
    for (int trial = 0; trial < 20; ++trial) {
      Checkpoint pre, ft;
      for (const char* name : {"a", "b"}) {
        const std::size_t D = 1 + rng() % 300;
        pre.tensors.emplace(name, Tensor::from_f32_as(dt, {D}, fixtures::uniform_values(rng, D, -3, 3)));
        ft.tensors.emplace(name, Tensor::from_f32_as(dt, {D}, fixtures::uniform_values(rng, D, -3, 3)));
      }
      PcbConfig cfg;
      cfg.mask_ratio = 1.0;
      cfg.lambda = 1.0f;
      const Checkpoint merged = pcb_merge(pre, std::vector<Checkpoint>{ft}, cfg);
      for (const auto& [name, t] : ft.tensors) {
        ++checked;
        mismatches += !(merged.at(name) == t);
      }
    }
  }
  return {mismatches == 0, fmt("%.0f of %.0f tensors bitwise identical (f32, f16, bf16)", checked - mismatches, checked)};
}

Outcome disjoint_exactness() {
  double worst_pcb = 0.0, worst_rel = 0.0;
  for (std::size_t n : {2, 4}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const SyntheticSuite suite = gen_synthetic_suite(n, 1024, 0.05, 0.0, seed);
      PcbConfig cfg;
      cfg.lambda = 1.0f;
      cfg.mask_ratio = 0.05;
      worst_pcb = std::max(worst_pcb, score_synthetic(suite, pcb_merge(suite.pretrained, suite.task_checkpoints, cfg)).mean_loss);
      const double avg = score_synthetic(suite, average_merge(suite.task_checkpoints)).mean_loss;
      const auto pre = fixtures::values_of(suite.pretrained, kSyntheticTensor);
      const double shrink = (1.0 - 1.0 / double(n)) * (1.0 - 1.0 / double(n));
      double closed = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t d : suite.supports[i]) {
          const double tau = double(suite.task_optima[i][d]) - double(pre[d]);
          closed += shrink * tau * tau;
        }
      }
      closed /= double(n);
      worst_rel = std::max(worst_rel, std::fabs(avg - closed) / closed);
    }
  }
  return {worst_pcb <= 1e-10 && worst_rel <= 0.01,
          fmt("pcb max mean loss %.2e (limit 1e-10); average off closed form by %.2e (limit 1e-2)", worst_pcb, worst_rel)};
}

Outcome mask_cardinality() {
  std::mt19937_64 rng(4);
  const int percents[] = {5, 10, 20, 50, 100};
  int wrong = 0, unstable = 0, units = 0;
  for (int p : percents) {
    for (int trial = 0; trial < 100; ++trial) {
      BalanceMatrix beta;
      beta.kind = BalanceKind::Combined;
      for (const char* name : {"a", "b", "c"}) {
        const std::size_t D = 1 + rng() % 200;
        std::vector<double> v(D);
        // every other trial draws from four values so ties are everywhere
        if (trial % 2) {
          for (auto& x : v) x = 0.25 * double(1 + rng() % 4);
        } else {
          for (auto& x : v) x = std::uniform_real_distribution<double>(0, 1)(rng);
        }
        beta.scores.emplace(name, std::move(v));
      }
      const double r = p / 100.0;
      const Mask first = build_mask(beta, r);
      for (int rerun = 0; rerun < 2; ++rerun) unstable += !(build_mask(beta, r).bits == first.bits);
      for (const auto& [name, bits] : first.bits) {
        ++units;
        const std::size_t D = bits.size();
        const std::size_t expected = D - static_cast<std::size_t>((100 - p) * D / 100);
        const auto kept = static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
        wrong += kept != expected;
      }
    }
  }
  return {wrong == 0 && unstable == 0,
          fmt("%.0f units, %.0f wrong counts, %.0f unstable reruns", units, wrong, unstable)};
}

Outcome balance_invariants() {
  std::mt19937_64 rng(5);
  double worst_intra = 0.0, worst_inter = 0.0;
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + trial % 4;
    const std::size_t D = 2 + rng() % 300;
    std::vector<TaskVector> tvs;
    for (std::size_t i = 0; i < n; ++i) {
      auto v = fixtures::uniform_values(rng, D, -3, 3);
      v[0] = 0.0f;  // guarantees a non-constant input
      v[1] = 3.0f;
      tvs.push_back(fixtures::make_tv({{"w", v}}));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto intra = intra_balance(tvs[i], static_cast<int>(n)).scores.at("w");
      const auto inter = inter_balance(i, tvs).scores.at("w");
      worst_intra = std::max(worst_intra, std::fabs(std::accumulate(intra.begin(), intra.end(), 0.0) - 1.0));
      worst_inter = std::max(worst_inter, std::fabs(std::accumulate(inter.begin(), inter.end(), 0.0) - double(n)) / double(n));
    }
    double prev = HUGE_VAL;
    for (int N : {1, 2, 4}) {
      const double h = oracle::entropy(intra_balance(tvs[0], N).scores.at("w"));
      violations += !(h < prev);
      prev = h;
    }
  }
  return {worst_intra <= 1e-6 && worst_inter <= 1e-6 && violations == 0,
          fmt("intra sum error %.2e, inter sum error per task %.2e, entropy violations %.0f", worst_intra, worst_inter,
              violations)};
}

Outcome order_invariance() {
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + trial % 4;
    const std::size_t D = 1 + rng() % 64;
    const auto pre = fixtures::uniform_values(rng, D, -1, 1);
    std::vector<Checkpoint> fts;
    for (std::size_t i = 0; i < n; ++i) {
      auto tau = random_delta(rng, D);
      for (std::size_t d = 0; d < D; ++d) tau[d] += pre[d];
      fts.push_back(fixtures::make_ckpt({{"w", tau}, {"v", fixtures::uniform_values(rng, 5, -1, 1)}}));
    }
    PcbConfig cfg;
    cfg.mask_ratio = 0.2 + 0.1 * (trial % 5);
    cfg.per_task_lambdas = fixtures::uniform_values(rng, n, 0.8f, 2.5f);
    const Checkpoint base_pre = fixtures::make_ckpt({{"w", pre}, {"v", std::vector<float>(5, 0.0f)}});
    const Checkpoint base = pcb_merge(base_pre, fts, cfg);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Checkpoint> pfts;
    PcbConfig pcfg = cfg;
    pcfg.per_task_lambdas->clear();
    for (std::size_t k : perm) {
      pfts.push_back(fts[k]);
      pcfg.per_task_lambdas->push_back((*cfg.per_task_lambdas)[k]);
    }
    const Checkpoint permuted = pcb_merge(base_pre, pfts, pcfg);
    for (const char* name : {"w", "v"}) {
      const auto x = fixtures::values_of(base, name), y = fixtures::values_of(permuted, name);
      for (std::size_t d = 0; d < x.size(); ++d) worst = std::max(worst, double(std::fabs(x[d] - y[d])));
    }
  }
  return {worst <= 1e-6, fmt("50 instances, max element change %.2e (limit 1e-6)", worst)};
}

Outcome ties_equivalence() {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<int> dim(1, 16), tasks(1, 3);
  const double keeps[] = {0.1, 0.2, 0.25, 0.5, 1.0};
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t D = static_cast<std::size_t>(dim(rng));
    const std::size_t n = static_cast<std::size_t>(tasks(rng));
    std::vector<TaskVector> tvs;
    std::vector<oracle::Vec> taus;
    for (std::size_t i = 0; i < n; ++i) {
      const auto tau = random_delta(rng, D);
      tvs.push_back(fixtures::make_tv({{"w", tau}}));
      taus.emplace_back(tau.begin(), tau.end());
    }
    TiesConfig cfg;
    cfg.keep_fraction = keeps[trial % 5];
    cfg.lambda = std::uniform_real_distribution<float>(0.5f, 2.0f)(rng);
    const auto got = fixtures::values_of(ties_merge(fixtures::make_ckpt({{"w", std::vector<float>(D, 0.0f)}}), tvs, cfg), "w");
    const oracle::Vec want = oracle::ties_delta(taus, cfg.keep_fraction, cfg.lambda);
    double err = max_abs_diff(got, want);
    if (std::isnan(err)) err = HUGE_VAL;
    worst = std::max(worst, err);
  }
  return {worst <= 1e-6, fmt("200 instances, max |error| %.2e (limit 1e-6)", worst)};
}

Outcome dare_unbiasedness() {
  const std::vector<float> tau{2.0f, -4.0f, 0.5f, -0.125f, 7.0f, 1.0f};
  const TaskVector tv = fixtures::make_tv({{"w", tau}});
  const int draws = 100000;
  double worst_z = 0.0;
  for (double p : {0.5, 0.9}) {
    std::vector<double> sum(tau.size(), 0.0);
    for (int s = 0; s < draws; ++s) {
      const auto out = dare_preprocess(tv, DareConfig{p, static_cast<std::uint64_t>(s)}).deltas.at("w");
      for (std::size_t d = 0; d < tau.size(); ++d) sum[d] += out[d];
    }
    for (std::size_t d = 0; d < tau.size(); ++d) {
      const double se = std::fabs(tau[d]) * std::sqrt(p / (1.0 - p) / draws);
      worst_z = std::max(worst_z, std::fabs(sum[d] / draws - tau[d]) / se);
    }
  }
  return {worst_z <= 3.0, fmt("10^5 draws at p = 0.5 and 0.9, worst deviation %.2f standard errors (limit 3)", worst_z)};
}

Outcome cma_convergence() {
  const Fitness sphere = [](std::span<const double> x) {
    double f = 0.0;
    for (double v : x) f -= v * v;
    return f;
  };
  const Fitness rosenbrock = [](std::span<const double> x) {
    const double a = 1.0 - x[0], b = x[1] - x[0] * x[0];
    return -(a * a + 100.0 * b * b);
  };
  const auto s1 = cma_search(SearchSpace{3, -5, 5}, sphere, 3000, 0);
  const auto s2 = cma_search(SearchSpace{3, -5, 5}, sphere, 3000, 0);
  const auto r1 = cma_search(SearchSpace{2, -5, 5}, rosenbrock, 20000, 0);
  const auto r2 = cma_search(SearchSpace{2, -5, 5}, rosenbrock, 20000, 0);
  const bool deterministic = s1.history == s2.history && r1.history == r2.history;
  return {s1.best_fitness > -1e-8 && r1.best_fitness > -1e-6 && deterministic,
          fmt("sphere %.2e (limit -1e-8), rosenbrock %.2e (limit -1e-6), reruns identical: ", s1.best_fitness,
              r1.best_fitness) +
              (deterministic ? "yes" : "no")};
}

Outcome search_beats_grid() {
  const auto grid = grid_candidates(0.8, 2.5, 0.1);
  int wins = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SyntheticSuite suite = gen_synthetic_suite(3, 512, 0.1, 0.5, seed);
    const Fitness fitness = [&](std::span<const double> x) {
      PcbConfig cfg;
      cfg.mask_ratio = 0.1;
      cfg.per_task_lambdas = std::vector<float>(x.begin(), x.end());
      return score_synthetic(suite, pcb_merge(suite.pretrained, suite.task_checkpoints, cfg)).fitness;
    };
    const auto g = grid_search(grid, 3, fitness);
    const auto c = cma_search(SearchSpace{3, 0.8, 2.5}, fitness, 500, seed);
    wins += c.best_fitness >= g.best_fitness;
    detail << (seed ? ", " : "") << "seed " << seed << ": " << fmt("%.2f vs %.2f", c.best_fitness, g.best_fitness);
  }
  return {wins == 5, fmt("search >= grid on %.0f of 5 seeds (", wins) + detail.str() + ")"};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Outcome ablation_ordering() {
  struct Variant {
    const char* name;
    bool intra, inter, drop, rescale;
  };
  const Variant variants[] = {{"pcb", true, true, true, true},
                              {"no-drop", true, true, false, true},
                              {"no-rescale", true, true, true, false},
                              {"no-intra", false, true, true, true},
                              {"no-inter", true, false, true, true}};
  const int seeds = 20;
  std::map<std::string, std::vector<double>> loss;
  int best_or_tied = 0;
  for (int seed = 0; seed < seeds; ++seed) {
    const SyntheticSuite suite = gen_synthetic_suite(4, 512, 0.1, 0.5, static_cast<std::uint64_t>(seed));
    std::vector<double> row;
    for (const auto& v : variants) {
      PcbConfig cfg;
      cfg.mask_ratio = 0.1;
      cfg.enable_intra = v.intra;
      cfg.enable_inter = v.inter;
      cfg.enable_drop = v.drop;
      cfg.enable_rescale = v.rescale;
      row.push_back(score_synthetic(suite, pcb_merge(suite.pretrained, suite.task_checkpoints, cfg)).mean_loss);
      loss[v.name].push_back(row.back());
    }
    best_or_tied += *std::min_element(row.begin() + 1, row.end()) >= row[0];
  }
  std::printf("       %-12s %12s %12s\n", "variant", "median loss", "mean loss");
  bool medians_ok = true;
  const double full = median(loss["pcb"]);
  for (const auto& v : variants) {
    const auto& l = loss[v.name];
    const double m = median(l);
    medians_ok = medians_ok && full <= m;
    std::printf("       %-12s %12.4f %12.4f\n", v.name, m, std::accumulate(l.begin(), l.end(), 0.0) / l.size());
  }
  const double share = double(best_or_tied) / seeds;
  return {medians_ok && share >= 0.7,
          fmt("full pcb best or tied on %.0f of 20 seeds (need 14); median ordering holds: ", best_or_tied) +
              (medians_ok ? "yes" : "no")};
}

Outcome format_conformance() {
  fixtures::TempDir dir;
  std::mt19937_64 rng(12);
  int roundtrips = 0, identical = 0;
  for (int trial = 0; trial < 10; ++trial) {
    Checkpoint c;
    c.tensors.emplace("f32", Tensor::from_f32({3, 5}, fixtures::uniform_values(rng, 15, -2, 2)));
    c.tensors.emplace("f16", Tensor::from_f32_as(DType::F16, {7}, fixtures::uniform_values(rng, 7, -2, 2)));
    c.tensors.emplace("bf16", Tensor::from_f32_as(DType::BF16, {2, 2}, fixtures::uniform_values(rng, 4, -2, 2)));
    std::vector<std::byte> ids(8 * 3);
    for (auto& b : ids) b = static_cast<std::byte>(rng());
    c.tensors.emplace("ids", Tensor::from_bytes(DType::I64, {3}, ids));
    if (trial % 2) c.header_metadata = std::map<std::string, std::string>{{"format", "pt"}, {"trial", std::to_string(trial)}};
    const auto first = dir / "first.safetensors";
    const auto second = dir / "second.safetensors";
    save_checkpoint(c, first);
    save_checkpoint(load_checkpoint(first), second);
    ++roundtrips;
    identical += fixtures::read_bytes(first) == fixtures::read_bytes(second);
  }

  const auto payload = fixtures::f32_bytes({1.0f, 2.0f});
  const std::string good = R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}})";
  struct Corrupt {
    const char* name;
    std::vector<std::uint8_t> bytes;
    ErrorCode expected;
  };
  const Corrupt corrupt[] = {
      {"bad header length", fixtures::raw_safetensors(good, payload, good.size() + 100), ErrorCode::MalformedHeader},
      {"overlapping offsets",
       fixtures::raw_safetensors(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},)"
                                 R"("b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})",
                                 payload),
       ErrorCode::OverlappingOffsets},
      {"truncated payload", fixtures::raw_safetensors(good, fixtures::f32_bytes({1.0f})), ErrorCode::OverlappingOffsets},
      {"invalid dtype", fixtures::raw_safetensors(R"({"w":{"dtype":"F33","shape":[2],"data_offsets":[0,8]}})", payload),
       ErrorCode::UnsupportedDtype},
      {"oversized header", fixtures::raw_safetensors(good, payload, kMaxHeaderBytes + 1), ErrorCode::MalformedHeader},
  };
  int rejected = 0;
  std::string misses;
  for (const auto& c : corrupt) {
    fixtures::write_bytes(dir / "corrupt.safetensors", c.bytes);
    const auto code = fixtures::error_of([&] { load_checkpoint(dir / "corrupt.safetensors"); });
    if (code == c.expected) {
      ++rejected;
    } else {
      misses += std::string(" ") + c.name;
    }
  }
  return {identical == roundtrips && rejected == 5,
          fmt("%.0f of %.0f round trips byte-identical, %.0f of 5 corrupt files rejected", identical, roundtrips, rejected) +
              misses};
}

// Runs the merge in a child process so its peak resident set can be read
// from wait4 without the rest of this binary's allocations.
Outcome throughput() {
  constexpr std::size_t kTasks = 8;
  constexpr std::size_t kElems = 10'000'000;
  const double input_bytes = double(kTasks + 1) * kElems * sizeof(float);
  int fds[2];
  if (pipe(fds) != 0) return {false, "pipe failed"};
  const pid_t pid = fork();
  if (pid < 0) return {false, "fork failed"};
  if (pid == 0) {
    close(fds[0]);
    std::mt19937_64 rng(13);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<float> pre(kElems);
    for (auto& v : pre) v = normal(rng);
    Checkpoint pretrained;
    pretrained.tensors.emplace("w", Tensor::from_f32({kElems}, pre));
    std::vector<float>().swap(pre);
    auto schema = std::make_shared<TensorSchema>();
    schema->entries.emplace("w", SchemaEntry{{kElems}, DType::F32, true});
    std::vector<TaskVector> tvs(kTasks);
    for (std::size_t i = 0; i < kTasks; ++i) {
      auto& delta = tvs[i].deltas["w"];
      delta.resize(kElems);
      for (auto& v : delta) v = normal(rng);
      tvs[i].schema = schema;
      tvs[i].label = "task" + std::to_string(i);
    }
    const auto t0 = Clock::now();
    PcbConfig cfg;
    const Checkpoint merged = pcb_merge(pretrained, std::span<const TaskVector>(tvs), cfg);
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool sane = merged.at("w").numel() == kElems;
    const double msg[2] = {seconds, sane ? 1.0 : 0.0};
    (void)!write(fds[1], msg, sizeof msg);
    _exit(0);
  }
  close(fds[1]);
  double msg[2] = {-1.0, 0.0};
  const bool got = read(fds[0], msg, sizeof msg) == static_cast<ssize_t>(sizeof msg);
  close(fds[0]);
  int status = 0;
  rusage usage{};
  wait4(pid, &status, 0, &usage);
  if (!got || !WIFEXITED(status) || WEXITSTATUS(status) != 0) return {false, "merge child failed"};
  const double peak = double(usage.ru_maxrss) * 1024.0;
  const bool pass = msg[0] < 30.0 && peak < 3.0 * input_bytes && msg[1] == 1.0;
  return {pass, fmt("merge %.2f s (limit 30), peak RSS %.0f MB vs 3x input %.0f MB", msg[0], peak / 1e6,
                    3.0 * input_bytes / 1e6)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "equation-oracle equivalence", 5, oracle_equivalence},
      {2, "single-task identity", 1, single_task_identity},
      {3, "disjoint-support exactness", 5, disjoint_exactness},
      {4, "mask cardinality and tie determinism", 2, mask_cardinality},
      {5, "softmax and balance invariants", 2, balance_invariants},
      {6, "task-order invariance", 3, order_invariance},
      {7, "TIES brute-force equivalence", 3, ties_equivalence},
      {8, "DARE unbiasedness", 10, dare_unbiasedness},
      {9, "CMA-ES convergence", 10, cma_convergence},
      {10, "search beats grid on overlapping suites", 60, search_beats_grid},
      {11, "ablation ordering", 60, ablation_ordering},
      {12, "checkpoint format conformance", 1, format_conformance},
      {13, "throughput sanity", 120, throughput},
  };
  std::set<int> wanted;
  for (int a = 1; a < argc; ++a) wanted.insert(std::atoi(argv[a]));

  int failed = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_time = seconds < c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::printf("[%s] %2d %s: %s; %.2f s (limit %.0f s)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                seconds, c.limit_seconds);
    std::fflush(stdout);
  }
  std::printf("%d criteria failed\n", failed);
  return failed ? 1 : 0;
}
