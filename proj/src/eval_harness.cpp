#include "pcbmerge/eval_harness.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <random>

#include "pcbmerge/error.hpp"
#include "pcbmerge/granularity.hpp"

namespace pcbmerge {

namespace {

std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'') {
      out += "'\\''";
    } else {
      out += c;
    }
  }
  return out + "'";
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::optional<double> parse_float(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

struct ProcessResult {
  int exit_code = 0;
  bool timed_out = false;
  std::string out;
  std::string err;
};

ProcessResult run_shell(const std::string& command, const std::filesystem::path& cwd, int timeout_seconds) {
  int out_pipe[2], err_pipe[2];
  if (::pipe2(out_pipe, O_CLOEXEC) != 0 || ::pipe2(err_pipe, O_CLOEXEC) != 0) {
    fail(ErrorCode::FitnessFailure, std::string("cannot create pipes: ") + std::strerror(errno));
  }
  const pid_t pid = ::fork();
  if (pid < 0) fail(ErrorCode::FitnessFailure, std::string("fork failed: ") + std::strerror(errno));
  if (pid == 0) {
    ::setpgid(0, 0);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::dup2(err_pipe[1], STDERR_FILENO);
    if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) _exit(127);
    ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
    _exit(127);
  }
  ::close(out_pipe[1]);
  ::close(err_pipe[1]);

  ProcessResult result;
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(timeout_seconds);
  pollfd fds[2] = {{out_pipe[0], POLLIN, 0}, {err_pipe[0], POLLIN, 0}};
  int open_fds = 2;
  char buf[4096];
  while (open_fds > 0) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      result.timed_out = true;
      break;
    }
    const int ready = ::poll(fds, 2, static_cast<int>(std::min<long long>(left.count(), 1000)));
    if (ready < 0 && errno != EINTR) break;
    for (int k = 0; k < 2; ++k) {
      if (fds[k].fd < 0 || !(fds[k].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const ssize_t got = ::read(fds[k].fd, buf, sizeof buf);
      if (got > 0) {
        (k == 0 ? result.out : result.err).append(buf, static_cast<std::size_t>(got));
      } else {
        ::close(fds[k].fd);
        fds[k].fd = -1;
        --open_fds;
      }
    }
  }
  if (result.timed_out) ::kill(-pid, SIGKILL);
  for (auto& f : fds) {
    if (f.fd >= 0) ::close(f.fd);
  }
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (WIFEXITED(status)) {
    result.exit_code = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    result.exit_code = 128 + WTERMSIG(status);
  }
  return result;
}

std::uint64_t next_u64(std::mt19937_64& rng) { return rng(); }

double normal(std::mt19937_64& rng) {
  double u1;
  do {
    u1 = static_cast<double>(next_u64(rng) >> 11) * 0x1.0p-53;
  } while (u1 <= 0.0);
  const double u2 = static_cast<double>(next_u64(rng) >> 11) * 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

// Uniform integer in [0, bound) via the multiply-shift map.
std::size_t below(std::mt19937_64& rng, std::size_t bound) {
  return static_cast<std::size_t>((static_cast<unsigned __int128>(next_u64(rng)) * bound) >> 64);
}

}  // namespace

void ExternalEvaluator::validate() const {
  const auto first = command_template.find(kCheckpointPlaceholder);
  if (first == std::string::npos ||
      command_template.find(kCheckpointPlaceholder, first + 1) != std::string::npos) {
    fail(ErrorCode::InvalidArgument, "evaluator command must contain {checkpoint} exactly once");
  }
  if (timeout_seconds <= 0) fail(ErrorCode::InvalidArgument, "evaluator timeout must be positive");
}

double parse_score_output(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto end = nl == std::string_view::npos ? text.size() : nl;
    lines.push_back(text.substr(pos, end - pos));
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
    const auto line = trim(*it);
    if (line.empty()) continue;
    if (line.substr(0, 6) == "score:") {
      if (auto v = parse_float(line.substr(6))) return *v;
      continue;
    }
    if (auto v = parse_float(line)) return *v;
  }
  fail(ErrorCode::UnparsableOutput, "evaluator output has no 'score: <float>' or bare float line");
}

double evaluate_external(const ExternalEvaluator& ev, const std::filesystem::path& checkpoint_path) {
  ev.validate();
  if (!std::filesystem::exists(checkpoint_path)) {
    fail(ErrorCode::IoFailure, "checkpoint to evaluate does not exist: " + checkpoint_path.string());
  }
  std::string command = ev.command_template;
  command.replace(command.find(kCheckpointPlaceholder), kCheckpointPlaceholder.size(),
                  shell_quote(checkpoint_path.string()));

  const ProcessResult r = run_shell(command, ev.working_dir, ev.timeout_seconds);
  if (r.timed_out) {
    fail(ErrorCode::Timeout, "evaluator exceeded " + std::to_string(ev.timeout_seconds) + " s: " + command);
  }
  if (r.exit_code != 0) {
    const std::string tail = r.err.size() > 2000 ? r.err.substr(r.err.size() - 2000) : r.err;
    fail(ErrorCode::NonZeroExit, "evaluator exited with code " + std::to_string(r.exit_code) + ": " + tail);
  }
  return parse_score_output(r.out);
}

std::filesystem::path default_scratch_dir() {
  if (const char* env = std::getenv("PCBMERGE_SCRATCH_DIR"); env && *env) return env;
  return std::filesystem::temp_directory_path() / "pcbmerge";
}

double evaluate_checkpoint(const ExternalEvaluator& ev, const Checkpoint& ckpt, const ScratchOptions& scratch) {
  static std::atomic<std::uint64_t> counter{0};
  const auto dir = scratch.dir.empty() ? default_scratch_dir() : scratch.dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create scratch directory " + dir.string());
  const auto path = dir / ("candidate-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + ".safetensors");
  save_checkpoint(ckpt, path);
  const double score = evaluate_external(ev, path);
  if (!scratch.keep) std::filesystem::remove(path, ec);
  return score;
}

SyntheticSuite gen_synthetic_suite(std::size_t n_tasks, std::size_t dim, double sparsity, double overlap,
                                   std::uint64_t seed) {
  if (n_tasks < 1) fail(ErrorCode::InvalidArgument, "synthetic suite needs at least one task");
  if (dim < 1) fail(ErrorCode::InvalidArgument, "synthetic suite needs D >= 1");
  if (!(sparsity > 0.0 && sparsity <= 1.0)) fail(ErrorCode::InvalidArgument, "sparsity must lie in (0, 1]");
  if (!(overlap >= 0.0 && overlap <= 1.0)) fail(ErrorCode::InvalidArgument, "overlap must lie in [0, 1]");

  const std::size_t m = trim_keep_count(dim, sparsity);
  const auto shared = static_cast<std::size_t>(std::llround(overlap * static_cast<double>(m)));
  const std::size_t needed = shared + n_tasks * (m - shared);
  if (needed > dim) {
    fail(ErrorCode::InfeasibleSupports, "supports need " + std::to_string(needed) + " coordinates but D = " +
                                            std::to_string(dim));
  }

  SyntheticSuite suite;
  suite.dim = dim;
  suite.sparsity = sparsity;
  suite.overlap = overlap;
  suite.seed = seed;

  std::mt19937_64 rng(seed);
  std::vector<float> pre(dim);
  for (auto& v : pre) v = static_cast<float>(normal(rng));

  std::vector<std::size_t> perm(dim);
  for (std::size_t i = 0; i < dim; ++i) perm[i] = i;
  for (std::size_t i = dim - 1; i > 0; --i) std::swap(perm[i], perm[below(rng, i + 1)]);

  const Shape shape{dim};
  suite.pretrained.tensors.emplace(kSyntheticTensor, Tensor::from_f32(shape, pre));
  for (std::size_t t = 0; t < n_tasks; ++t) {
    std::vector<std::size_t> support(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(shared));
    const auto priv = perm.begin() + static_cast<std::ptrdiff_t>(shared + t * (m - shared));
    support.insert(support.end(), priv, priv + static_cast<std::ptrdiff_t>(m - shared));
    std::sort(support.begin(), support.end());

    std::vector<float> theta = pre;
    for (std::size_t d : support) {
      double tau = 0.0;
      while (tau == 0.0) tau = 3.0 * normal(rng);
      theta[d] = static_cast<float>(pre[d] + tau);
    }
    Checkpoint ckpt;
    ckpt.tensors.emplace(kSyntheticTensor, Tensor::from_f32(shape, theta));
    suite.task_checkpoints.push_back(std::move(ckpt));
    suite.task_optima.push_back(std::move(theta));
    suite.supports.push_back(std::move(support));
  }
  return suite;
}

SyntheticScore score_synthetic(const SyntheticSuite& suite, const Checkpoint& merged) {
  auto it = merged.tensors.find(kSyntheticTensor);
  if (it == merged.tensors.end() || it->second.numel() != suite.dim || !is_floating(it->second.dtype())) {
    fail(ErrorCode::SchemaMismatch, "merged checkpoint does not match the synthetic suite schema");
  }
  std::vector<double> values(suite.dim);
  it->second.read_f64(0, values);

  SyntheticScore score;
  for (std::size_t t = 0; t < suite.supports.size(); ++t) {
    double loss = 0.0;
    for (std::size_t d : suite.supports[t]) {
      const double diff = values[d] - static_cast<double>(suite.task_optima[t][d]);
      loss += diff * diff;
    }
    score.per_task.push_back(loss);
  }
  double total = 0.0;
  for (double l : score.per_task) total += l;
  score.mean_loss = score.per_task.empty() ? 0.0 : total / static_cast<double>(score.per_task.size());
  score.fitness = -score.mean_loss;
  return score;
}

}  // namespace pcbmerge
