// Acceptance suite: one PASS/FAIL line per criterion. `--only N` runs a single
// criterion; the exit status is nonzero if any selected criterion fails.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cqsa/divide.hpp"
#include "cqsa/errors.hpp"
#include "cqsa/kernel.hpp"
#include "cqsa/oracle.hpp"
#include "cqsa/quorum.hpp"
#include "cqsa/rng.hpp"
#include "cqsa/scheduler.hpp"

namespace {

using namespace cqsa;

struct Outcome {
  bool pass = true;
  std::string detail;
  std::vector<std::string> failures;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
};

// ---- 1 ----

Outcome exact_coverage() {
  Outcome out;
  const std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>> sets = {
      {7, {0, 1, 3}}, {7, {0, 1, 5}}, {13, {0, 1, 3, 9}}, {21, {0, 1, 4, 14, 16}}};
  int configs = 0;
  for (const auto& [c, offsets] : sets) {
    const auto set = InterestSet::create(offsets, c);
    for (std::int64_t itr : {1, 2}) {
      const std::int64_t base = *checked_power(c, itr);
      for (std::int64_t n : {base, base + 5, 3 * base + 1}) {
        const auto report = coverage_check(build_subseq(n, itr, set), n);
        ++configs;
        out.require(report.pass, fmt::format("{} itr={} N={}: counts in [{}, {}]", to_string(set), itr, n,
                                             report.min_count, report.max_count));
      }
    }
  }
  out.detail = fmt::format("{} configurations, every ordered pair covered once", configs);
  return out;
}

// ---- 2, 3 ----

struct Instance {
  std::int64_t n, batch, heads, dim, c, itr;
};

// N in {7, 21, 49, 147}, B,H in {1,2}, D in {2,8}. itr=3 needs N >= c^3, so
// those instances use c=3.
const std::vector<Instance> kGrid = {
    {7, 1, 1, 2, 7, 1},    {7, 2, 1, 8, 7, 1},    {7, 1, 2, 2, 3, 1},    {7, 2, 2, 8, 7, 1},
    {21, 1, 1, 2, 7, 1},   {21, 1, 2, 8, 7, 1},   {21, 2, 1, 2, 3, 2},   {21, 2, 2, 8, 13, 1},
    {49, 1, 1, 2, 7, 1},   {49, 1, 1, 8, 7, 2},   {49, 2, 1, 2, 7, 2},   {49, 1, 2, 8, 3, 3},
    {49, 2, 2, 2, 21, 1},  {49, 2, 2, 8, 7, 2},   {147, 1, 1, 2, 7, 1},  {147, 1, 1, 8, 7, 2},
    {147, 2, 1, 2, 3, 3},  {147, 1, 2, 8, 13, 1}, {147, 2, 2, 8, 7, 2},  {147, 2, 2, 2, 3, 3}};

struct InstanceData {
  Tensor4<double> q, k, v, d_out;
  InterestSet set;
  double scale;
};

InstanceData make_instance(const Instance& in, std::size_t index) {
  const Shape4 s{in.batch, in.heads, in.n, in.dim};
  const std::uint64_t seed = 1000 + 17 * index;
  std::int64_t l = 1;
  while (chunk_count_for(l) < in.c) ++l;
  return {random_tensor<double>(s, seed), random_tensor<double>(s, seed + 1),
          random_tensor<double>(s, seed + 2), random_tensor<double>(s, seed + 3),
          *builtin_interest_set(l), default_scale<double>(in.dim)};
}

std::string describe(const Instance& in) {
  return fmt::format("N={} B={} H={} D={} c={} itr={}", in.n, in.batch, in.heads, in.dim, in.c, in.itr);
}

Outcome forward_exactness() {
  Outcome out;
  double worst = 0.0;
  for (std::size_t i = 0; i < kGrid.size(); ++i) {
    const auto& in = kGrid[i];
    const auto d = make_instance(in, i);
    const auto fwd = forward(d.q, d.k, d.v, in.itr, d.set, {}, d.scale);
    const double err = max_relative_error(fwd.out, oracle::dense_attention(d.q, d.k, d.v, d.scale));
    worst = std::max(worst, err);
    out.require(err <= 1e-10, fmt::format("{}: rel err {:.3e}", describe(in), err));
  }
  out.detail = fmt::format("{} instances, max rel err {:.3e} (tol 1e-10)", kGrid.size(), worst);
  return out;
}

Outcome backward_exactness() {
  Outcome out;
  double worst_exact = 0.0;
  double worst_fd = 0.0;
  for (std::size_t i = 0; i < kGrid.size(); ++i) {
    const auto& in = kGrid[i];
    const auto d = make_instance(in, i);
    const auto fwd = forward(d.q, d.k, d.v, in.itr, d.set, {}, d.scale);
    const auto g = backward(fwd.ctx, d.d_out).grads;
    const auto exact = oracle::dense_attention_grads(d.q, d.k, d.v, d.d_out, d.scale);
    const auto fd = oracle::finite_diff_grads(d.q, d.k, d.v, d.d_out, d.scale, 1e-6);
    const std::pair<const char*, std::array<const Tensor4<double>*, 3>> rows[] = {
        {"dQ", {&g.dq, &exact.dq, &fd.dq}}, {"dK", {&g.dk, &exact.dk, &fd.dk}}, {"dV", {&g.dv, &exact.dv, &fd.dv}}};
    for (const auto& [name, t] : rows) {
      const double e_exact = max_relative_error(*t[0], *t[1]);
      const double e_fd = max_relative_error(*t[0], *t[2]);
      worst_exact = std::max(worst_exact, e_exact);
      worst_fd = std::max(worst_fd, e_fd);
      out.require(e_exact <= 1e-10, fmt::format("{} {} vs analytic: {:.3e}", describe(in), name, e_exact));
      out.require(e_fd <= 1e-5, fmt::format("{} {} vs finite diff: {:.3e}", describe(in), name, e_fd));
    }
  }
  out.detail = fmt::format("{} instances, max rel err {:.3e} vs analytic (tol 1e-10), {:.3e} vs central "
                           "differences h=1e-6 (tol 1e-5)",
                           kGrid.size(), worst_exact, worst_fd);
  return out;
}

// ---- 4 ----

// Nonzero differences hit more than once, for the failure message.
std::string repeated_differences(const std::vector<std::int64_t>& offsets, std::int64_t c) {
  std::vector<int> hits(static_cast<std::size_t>(c), 0);
  for (auto a : offsets) {
    for (auto b : offsets) {
      if (a != b) ++hits[static_cast<std::size_t>(((a - b) % c + c) % c)];
    }
  }
  std::vector<std::string> parts;
  for (std::int64_t d = 1; d < c; ++d) {
    if (hits[d] > 1) parts.push_back(fmt::format("{}x{}", d, hits[d]));
  }
  const auto shown = std::min<std::size_t>(parts.size(), 6);
  return fmt::format("{} repeated, e.g. {}", parts.size(),
                     fmt::join(parts.begin(), parts.begin() + static_cast<std::ptrdiff_t>(shown), " "));
}

Outcome difference_sets() {
  Outcome out;
  // Reference table as published, l = 3..12 (l = 1, 2 are the trivial sets).
  const std::vector<std::pair<std::int64_t, std::vector<std::int64_t>>> table = {
      {1, {0}},
      {3, {0, 1}},
      {7, {0, 1, 3}},
      {13, {0, 1, 3, 9}},
      {21, {0, 1, 4, 14, 16}},
      {31, {0, 1, 3, 8, 12, 18}},
      {57, {0, 1, 3, 13, 32, 36, 43, 52}},
      {73, {0, 1, 3, 7, 15, 31, 36, 54, 63}},
      {91, {0, 1, 3, 9, 27, 49, 56, 61, 77, 81}},
      {133, {0, 1, 4, 12, 21, 26, 45, 68, 84, 96, 98, 126}}};
  int accepted = 0;
  for (const auto& [c, offsets] : table) {
    const bool ok = validate_interest_set(offsets, c);
    out.require(ok, fmt::format("table set c={} l={} is not a difference set: differences {}", c,
                                offsets.size(), repeated_differences(offsets, c)));
    if (!ok) continue;
    ++accepted;
    if (offsets.size() >= 3) {
      const auto paired = paired_interest_set(InterestSet::create(offsets, c));
      out.require(validate_interest_set(paired.offsets(), c), fmt::format("paired set of c={} invalid", c));
    }
  }
  const auto s7 = search_interest_set(7, 3);
  out.require(s7 && s7->offsets()[2] == 3 && s7->size() == 3, "search(c=7) != (0,1,3)");
  const auto s13 = search_interest_set(13, 4);
  out.require(s13 && *s13 == InterestSet::create({0, 1, 3, 9}, 13), "search(c=13) != (0,1,3,9)");
  out.require(!search_interest_set(43, 7).has_value(), "search(c=43) found a set");
  out.detail = fmt::format("{}/{} table sets valid; search (0,1,3), (0,1,3,9), none for c=43", accepted,
                           table.size());
  return out;
}

// ---- 5, 6 ----

struct TableRow {
  std::int64_t itr;
  double n_shown;  // as printed, rounded
  double mem_fwd, hours_fwd, mem_bwd, hours_bwd;
};

const std::vector<TableRow> kTable = {{5, 14.5e6, 21.08, 9510, 41.79, 23411},
                                      {6, 6.20e6, 9.09, 12138, 17.93, 30075},
                                      {7, 2.66e6, 3.94, 15621, 7.68, 38497},
                                      {8, 1.14e6, 1.75, 20817, 3.32, 50556},
                                      {9, 488e3, 0.80, 28824, 1.43, 67256}};

const DivideShape kShape{7, 3};
constexpr std::int64_t kBillion = 1'000'000'000;

Outcome table_memory() {
  Outcome out;
  const auto fwd = preset_model("a100-fp16-fa-fwd");
  const auto bwd = preset_model("a100-fp16-fa-bwd");
  double worst = 0.0;
  for (const auto& row : kTable) {
    const double x = subsequence_length(1e9, row.itr, kShape);
    for (const auto& [model, published] : {std::pair{fwd, row.mem_fwd}, std::pair{bwd, row.mem_bwd}}) {
      const double mem = predict(model, x).mem_gib;
      const double dev = (mem - published) / published;
      worst = std::max(worst, std::abs(dev));
      out.require(std::abs(dev) <= 0.02, fmt::format("itr={} {}: {:.3f} GiB vs {} ({:+.2f}%)", row.itr,
                                                     to_string(model.pass), mem, published, 100 * dev));
    }
  }
  out.detail = fmt::format("10 cells, max deviation {:.2f}% (tol 2%); itr=5 bwd {:.2f} GiB vs 41.79",
                           100 * worst, predict(bwd, subsequence_length(1e9, 5, kShape)).mem_gib);
  return out;
}

Outcome table_hours() {
  Outcome out;
  const auto fwd = preset_model("a100-fp16-fa-fwd");
  const auto bwd = preset_model("a100-fp16-fa-bwd");
  double worst = 0.0;
  for (const auto& row : kTable) {
    const double x = subsequence_length(1e9, row.itr, kShape);
    out.require(std::abs(x - row.n_shown) / row.n_shown <= 0.01,
                fmt::format("itr={} length {:.0f} vs shown {:.0f}", row.itr, x, row.n_shown));
    for (const auto& [model, published] : {std::pair{fwd, row.hours_fwd}, std::pair{bwd, row.hours_bwd}}) {
      const double hours = estimate_gpu_hours(kBillion, row.itr, model, kShape);
      const double dev = (hours - published) / published;
      worst = std::max(worst, std::abs(dev));
      out.require(std::abs(dev) <= 0.05, fmt::format("itr={} {}: {:.0f} h vs {} ({:+.2f}%)", row.itr,
                                                     to_string(model.pass), hours, published, 100 * dev));
    }
  }
  out.detail = fmt::format("10 cells, max deviation {:.2f}% (tol 5%); itr=5 length {:.0f}", 100 * worst,
                           subsequence_length(1e9, 5, kShape));
  return out;
}

// ---- 7 ----

Outcome granularity() {
  Outcome out;
  const auto fwd = preset_model("a100-fp16-fa-fwd");
  const auto bwd = preset_model("a100-fp16-fa-bwd");
  const auto serial = optimal_granularity(fwd, kBillion, GranularityMode::serial, kShape);
  out.require(serial.kind == ExtremumKind::maximum, "serial fwd is not a maximum");
  out.require(serial.x_star && std::abs(*serial.x_star - 70766) <= 0.01 * 70766, "serial fwd x off");
  out.require(serial.itr_star && std::abs(*serial.itr_star - 11.28) <= 0.05, "serial fwd itr off");
  const auto capped = optimal_granularity(bwd, kBillion, GranularityMode::capped_parallel, kShape);
  out.require(capped.kind == ExtremumKind::minimum, "capped bwd is not a minimum");
  out.require(capped.x_star && std::abs(*capped.x_star - 65894) <= 0.01 * 65894, "capped bwd x off");
  out.require(capped.itr_star && std::abs(*capped.itr_star - 11.36) <= 0.05, "capped bwd itr off");
  const auto mono = optimal_granularity(fwd, kBillion, GranularityMode::capped_parallel, kShape);
  out.require(mono.kind == ExtremumKind::monotone_increasing, "capped fwd is not monotone increasing");
  out.detail = fmt::format("serial fwd {} x={:.1f} itr={:.3f}; capped bwd {} x={:.1f} itr={:.3f}; capped fwd {}",
                           to_string(serial.kind), serial.x_star.value_or(NAN), serial.itr_star.value_or(NAN),
                           to_string(capped.kind), capped.x_star.value_or(NAN), capped.itr_star.value_or(NAN),
                           to_string(mono.kind));
  return out;
}

// ---- 8 ----

Outcome guardrail() {
  Outcome out;
  const auto fwd = preset_model("a100-fp16-fa-fwd");
  auto mem = [&](std::int64_t itr) { return predict(fwd, subsequence_length(1e9, itr, kShape)).mem_gib; };
  const auto run = GuardrailPhase::running;
  using E = GuardrailEvent;

  const auto generous = simulate_guardrail(kBillion, 80.0, fwd, kShape, 5, 3);
  out.require(generous.events == std::vector<TraceEvent>{{E::start, 5, 3, run, 0, 0, mem(5)},
                                                         {E::complete, 5, 3, run, 5603, 16807, mem(5)}},
              "generous-budget trace differs");

  const auto shrinking = simulate_guardrail(kBillion, 1.5 * mem(5), fwd, kShape, 5, 4);
  out.require(shrinking.events == std::vector<TraceEvent>{{E::start, 5, 4, run, 0, 0, mem(5)},
                                                          {E::oom_evict, 5, 3, run, 1, 1, mem(5)},
                                                          {E::oom_evict, 5, 2, run, 2, 2, mem(5)},
                                                          {E::oom_evict, 5, 1, run, 3, 3, mem(5)},
                                                          {E::complete, 5, 1, run, 16807, 16807, mem(5)}},
              "n_cap decrement trace differs");

  const auto escalating = simulate_guardrail(kBillion, 20.0, fwd, kShape, 5, 1);
  out.require(escalating.events ==
                  std::vector<TraceEvent>{{E::start, 5, 1, run, 0, 0, mem(5)},
                                          {E::oom_evict, 5, 1, run, 1, 0, mem(5)},
                                          {E::escalate, 6, 1, GuardrailPhase::calibrating, 1, 0, mem(6)},
                                          {E::calibrate, 6, 2, run, 2, 1, mem(6)},
                                          {E::complete, 6, 2, run, 58826, 117649, mem(6)}},
              "escalation trace differs");

  SplitMix64 rng(8);
  int finished = 0;
  int infeasible = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto& model = trial % 2 ? fwd : preset_model("a100-fp16-fa-bwd");
    const double budget = model.mem_intercept + rng.uniform(1e-3, 80.0);
    const auto n = static_cast<std::int64_t>(rng.uniform(1e3, 1e9));
    try {
      const auto t = simulate_guardrail(n, budget, model, kShape, 1 + trial % 3, 1 + trial % 5);
      out.require(t.events.back().event == E::complete && t.events.back().completed > 0,
                  fmt::format("trial {} did not complete", trial));
      ++finished;
    } catch (const InfeasibleError&) {
      ++infeasible;  // ran out of tokens to divide: terminates with an error
    }
  }
  out.detail = fmt::format("3 scenario traces exact; 500 random budgets > E: {} completed, {} infeasible "
                           "(N too short to divide further)",
                           finished, infeasible);
  return out;
}

// ---- 9 ----

Outcome invariance() {
  Outcome out;
  const Shape4 s{2, 2, 49, 8};
  const auto q = random_tensor<double>(s, 901), k = random_tensor<double>(s, 902);
  const auto v = random_tensor<double>(s, 903), d_out = random_tensor<double>(s, 904);
  const auto set = InterestSet::create({0, 1, 3}, 7);
  // Scale so the largest |logit| is exactly 10.
  double max_dot = 0.0;
  for (std::int64_t p = 0; p < s.planes(); ++p) {
    for (std::int64_t i = 0; i < s.tokens; ++i) {
      for (std::int64_t j = 0; j < s.tokens; ++j) {
        double dot = 0;
        for (std::int64_t d = 0; d < s.dim; ++d) dot += q.plane(p)[i * s.dim + d] * k.plane(p)[j * s.dim + d];
        max_dot = std::max(max_dot, std::abs(dot));
      }
    }
  }
  const double scale = 10.0 / max_dot;
  double worst_itr = 0.0;
  double worst_mode = 0.0;
  auto run = [&](std::int64_t itr, ExpMode mode) {
    auto fwd = forward(q, k, v, itr, set, {mode, ProbRetention::retain, 1}, scale);
    auto g = backward(fwd.ctx, d_out).grads;
    return std::array<Tensor4<double>, 4>{std::move(fwd.out), std::move(g.dq), std::move(g.dk), std::move(g.dv)};
  };
  const auto a = run(1, ExpMode::raw);
  const auto b = run(2, ExpMode::raw);
  const auto c = run(2, ExpMode::stabilized);
  const auto d = run(1, ExpMode::stabilized);
  const char* names[] = {"O", "dQ", "dK", "dV"};
  for (int i = 0; i < 4; ++i) {
    const double e_itr = max_relative_error(a[i], b[i]);
    const double e_mode = std::max(max_relative_error(b[i], c[i]), max_relative_error(a[i], d[i]));
    worst_itr = std::max(worst_itr, e_itr);
    worst_mode = std::max(worst_mode, e_mode);
    out.require(e_itr <= 1e-10, fmt::format("{} itr=1 vs itr=2: {:.3e}", names[i], e_itr));
    out.require(e_mode <= 1e-12, fmt::format("{} raw vs stabilized: {:.3e}", names[i], e_mode));
  }
  out.detail = fmt::format("N=49: itr 1 vs 2 max rel err {:.3e} (tol 1e-10); raw vs stabilized {:.3e} at "
                           "max |logit| 10 (tol 1e-12)",
                           worst_itr, worst_mode);
  return out;
}

struct Criterion {
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) {
      only = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--only N]\n", argv[0]);
      return 3;
    }
  }
  const std::vector<Criterion> criteria = {
      {"exact pair coverage", exact_coverage},
      {"forward exactness vs dense oracle", forward_exactness},
      {"backward exactness vs analytic and finite differences", backward_exactness},
      {"difference-set table, pairing and search", difference_sets},
      {"GPU-hour table: per-task memory", table_memory},
      {"GPU-hour table: estimated hours", table_hours},
      {"optimal granularity critical points", granularity},
      {"guardrail scenario traces and termination", guardrail},
      {"granularity and exp-mode invariance", invariance},
  };
  if (only < 0 || only > static_cast<int>(criteria.size())) {
    std::fprintf(stderr, "--only must be in 1..%zu\n", criteria.size());
    return 3;
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<int>(i + 1) != only) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.failures.push_back(fmt::format("exception: {}", e.what()));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    fmt::print("criterion {} [{}] {}: {} ({:.1f} s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].name,
               o.detail, secs);
    for (const auto& f : o.failures) fmt::print("    - {}\n", f);
    if (!o.pass) ++failed;
  }
  std::fflush(stdout);
  return failed == 0 ? 0 : 1;
}
