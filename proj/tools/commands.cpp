#include "commands.hpp"

#include <cmath>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "cqsa/divide.hpp"
#include "cqsa/errors.hpp"
#include "cqsa/kernel.hpp"
#include "cqsa/oracle.hpp"
#include "cqsa/quorum.hpp"
#include "cqsa/rng.hpp"
#include "cqsa/scheduler.hpp"
#include "cqsa/serialization.hpp"
#include "cqsa/tensor_file.hpp"

namespace cqsa::cli {
namespace {

struct SetArgs {
  std::int64_t c = 0;
  std::int64_t l = 0;
  std::vector<std::int64_t> offsets;
};

void add_set_options(CLI::App* cmd, SetArgs& a) {
  cmd->add_option("--c", a.c, "chunk count c = l(l-1)+1 (default 7)");
  cmd->add_option("--l", a.l, "interest-set size, uses the built-in table");
  cmd->add_option("--set", a.offsets, "explicit offsets, e.g. 0,1,3")->delimiter(',');
}

std::int64_t size_for_chunk_count(std::int64_t c) {
  for (std::int64_t l = 1; chunk_count_for(l) <= c; ++l) {
    if (chunk_count_for(l) == c) return l;
  }
  throw PreconditionError(fmt::format("c={} is not of the form l(l-1)+1", c));
}

InterestSet resolve_set(const SetArgs& a) {
  if (!a.offsets.empty()) {
    const std::int64_t c = a.c > 0 ? a.c : chunk_count_for(static_cast<std::int64_t>(a.offsets.size()));
    return InterestSet::create(a.offsets, c);
  }
  std::int64_t l = a.l;
  if (a.c > 0) {
    const std::int64_t from_c = size_for_chunk_count(a.c);
    if (l > 0 && l != from_c) throw PreconditionError(fmt::format("c={} needs l={}, got l={}", a.c, from_c, l));
    l = from_c;
  }
  if (l == 0) l = 3;
  if (l <= 12) {
    if (auto set = builtin_interest_set(l)) return *set;
    throw PreconditionError(fmt::format("no cyclic difference set exists for l={}", l));
  }
  if (auto set = search_interest_set(chunk_count_for(l), l)) return *set;
  throw PreconditionError(fmt::format("no cyclic difference set exists for l={}", l));
}

void emit(const Json& j, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << j.dump(2) << '\n';
    return;
  }
  std::ofstream f(path);
  if (!f) throw FormatError(fmt::format("cannot open '{}' for writing", path));
  f << j.dump(2) << '\n';
}

ExpMode parse_mode(const std::string& s) { return s == "stabilized" ? ExpMode::stabilized : ExpMode::raw; }

ProbRetention parse_retention(const std::string& s) {
  return s == "recompute" ? ProbRetention::recompute : ProbRetention::retain;
}

// ---- gen ----

struct GenArgs {
  std::vector<std::int64_t> shape;
  std::uint64_t seed = 0;
  double lo = -1.0;
  double hi = 1.0;
  std::string dtype = "f64";
  std::string out;
};

int cmd_gen(const GenArgs& a) {
  if (!(a.lo < a.hi) || !std::isfinite(a.lo) || !std::isfinite(a.hi)) {
    throw PreconditionError("--lo must be finite and below --hi");
  }
  const Shape4 shape{a.shape[0], a.shape[1], a.shape[2], a.shape[3]};
  if (a.dtype == "f32") {
    write_tensor_file(a.out, random_tensor<float>(shape, a.seed, a.lo, a.hi));
  } else {
    write_tensor_file(a.out, random_tensor<double>(shape, a.seed, a.lo, a.hi));
  }
  return kOk;
}

// ---- divide ----

struct DivideArgs {
  std::int64_t n = 0;
  std::int64_t itr = 1;
  SetArgs set;
  bool check = false;
  std::string out;
};

int cmd_divide(const DivideArgs& a, std::ostream& out, std::ostream& err) {
  const auto set = resolve_set(a.set);
  DividePlan plan{a.n, a.itr, set, build_subseq(a.n, a.itr, set)};
  Json j = to_json(plan);
  int code = kOk;
  if (a.check) {
    const auto report = coverage_check(plan.entries, a.n);
    j["coverage"] = {{"pass", report.pass}, {"min_count", report.min_count}, {"max_count", report.max_count}};
    if (report.first_violation) {
      j["coverage"]["first_violation"] = {report.first_violation->first, report.first_violation->second};
    }
    err << fmt::format("coverage {}: {} entries, pair counts in [{}, {}]\n",
                       report.pass ? "pass" : "FAIL", plan.entries.size(), report.min_count,
                       report.max_count);
    if (!report.pass) code = kVerifyFailed;
  }
  emit(j, a.out, out);
  return code;
}

// ---- attn / verify ----

struct KernelArgs {
  std::string q, k, v, d_out;
  std::int64_t itr = 1;
  SetArgs set;
  std::string plan;
  std::string mode = "raw";
  std::string retention = "retain";
  int workers = 1;
  std::optional<double> scale;
};

void add_kernel_options(CLI::App* cmd, KernelArgs& a) {
  cmd->add_option("--q", a.q, "query tensor file")->required();
  cmd->add_option("--k", a.k, "key tensor file")->required();
  cmd->add_option("--v", a.v, "value tensor file")->required();
  cmd->add_option("--do", a.d_out, "upstream gradient dO tensor file");
  cmd->add_option("--itr", a.itr, "divide granularity")->check(CLI::NonNegativeNumber);
  add_set_options(cmd, a.set);
  cmd->add_option("--plan", a.plan, "divide plan JSON; overrides --itr and the interest set");
  cmd->add_option("--mode", a.mode)->check(CLI::IsMember({"raw", "stabilized"}));
  cmd->add_option("--retention", a.retention)->check(CLI::IsMember({"retain", "recompute"}));
  cmd->add_option("--workers", a.workers)->check(CLI::PositiveNumber);
  cmd->add_option("--scale", a.scale, "logit scale, default 1/sqrt(D)");
}

template <typename T>
Tensor4<T> take(AnyTensor&& t, const std::string& name) {
  if (auto* p = std::get_if<Tensor4<T>>(&t)) return std::move(*p);
  throw FormatError(fmt::format("{} has a different dtype than --q", name));
}

template <typename T>
struct Inputs {
  Tensor4<T> q, k, v;
  std::optional<Tensor4<T>> d_out;
  std::vector<SubseqEntry> entries;
  T scale;
  KernelOptions options;
};

template <typename T>
Inputs<T> load_inputs(Tensor4<T> q, const KernelArgs& a) {
  Inputs<T> in{std::move(q), take<T>(read_tensor_file(a.k), a.k), take<T>(read_tensor_file(a.v), a.v),
               std::nullopt, {}, T(0), {}};
  if (!(in.k.shape() == in.q.shape()) || !(in.v.shape() == in.q.shape())) {
    throw PreconditionError("q, k and v must share one (B, H, N, D) shape");
  }
  if (!a.d_out.empty()) {
    in.d_out = take<T>(read_tensor_file(a.d_out), a.d_out);
    if (!(in.d_out->shape() == in.q.shape())) throw PreconditionError("dO must match the shape of q");
  }
  const std::int64_t n = in.q.shape().tokens;
  if (!a.plan.empty()) {
    auto plan = load_plan(a.plan);
    if (plan.n != n) throw PreconditionError(fmt::format("plan is for n={}, tensors have n={}", plan.n, n));
    in.entries = std::move(plan.entries);
  } else {
    in.entries = build_subseq(n, a.itr, resolve_set(a.set));
  }
  in.scale = a.scale ? static_cast<T>(*a.scale) : default_scale<T>(in.q.shape().dim);
  in.options.mode = parse_mode(a.mode);
  in.options.retention = parse_retention(a.retention);
  in.options.workers = a.workers;
  return in;
}

Json stats_json(const std::vector<EntryStats>& stats) {
  Json entries = Json::array();
  double total = 0.0;
  std::int64_t peak = 0;
  for (const auto& s : stats) {
    entries.push_back(to_json(s));
    total += s.seconds;
    peak = std::max(peak, s.resident_elements);
  }
  return {{"entries", entries}, {"total_seconds", total}, {"peak_resident_elements", peak}};
}

struct AttnArgs {
  KernelArgs kernel;
  std::string out;
  bool backward = false;
  std::string dq, dk, dv;
  std::string stats;
};

template <typename T>
int run_attn(Tensor4<T> q, const AttnArgs& a, std::ostream& out) {
  auto in = load_inputs(std::move(q), a.kernel);
  auto fwd = forward(in.q, in.k, in.v, std::move(in.entries), in.scale, in.options);
  write_tensor_file(a.out, fwd.out);
  Json stats = {{"forward", stats_json(fwd.stats)}};
  if (a.backward) {
    if (!in.d_out) throw PreconditionError("--backward needs --do");
    if (a.dq.empty() || a.dk.empty() || a.dv.empty()) {
      throw PreconditionError("--backward needs --dq, --dk and --dv output paths");
    }
    auto bwd = backward(fwd.ctx, *in.d_out);
    write_tensor_file(a.dq, bwd.grads.dq);
    write_tensor_file(a.dk, bwd.grads.dk);
    write_tensor_file(a.dv, bwd.grads.dv);
    stats["backward"] = stats_json(bwd.stats);
  }
  emit(stats, a.stats, out);
  return kOk;
}

struct VerifyArgs {
  KernelArgs kernel;
  double tol = 1e-10;
  bool finite_diff = false;
  double fd_h = 1e-6;
  double fd_tol = 1e-5;
  std::string out;
};

Json check(double error, double tol) { return {{"max_rel_error", error}, {"tol", tol}, {"pass", error <= tol}}; }

template <typename T>
int run_verify(Tensor4<T> q, const VerifyArgs& a, std::ostream& out, std::ostream& err) {
  auto in = load_inputs(std::move(q), a.kernel);
  auto fwd = forward(in.q, in.k, in.v, std::move(in.entries), in.scale, in.options);
  const auto ref = oracle::dense_attention(in.q, in.k, in.v, in.scale);
  Json report = {{"forward", check(max_relative_error(fwd.out, ref), a.tol)}};
  bool pass = report["forward"]["pass"].get<bool>();
  if (in.d_out) {
    const auto grads = backward(fwd.ctx, *in.d_out).grads;
    const auto exact = oracle::dense_attention_grads(in.q, in.k, in.v, *in.d_out, in.scale);
    report["backward"] = {{"dq", check(max_relative_error(grads.dq, exact.dq), a.tol)},
                          {"dk", check(max_relative_error(grads.dk, exact.dk), a.tol)},
                          {"dv", check(max_relative_error(grads.dv, exact.dv), a.tol)}};
    for (const char* g : {"dq", "dk", "dv"}) pass = pass && report["backward"][g]["pass"].get<bool>();
    if (a.finite_diff) {
      const auto fd = oracle::finite_diff_grads(in.q, in.k, in.v, *in.d_out, in.scale, static_cast<T>(a.fd_h));
      report["finite_diff"] = {{"h", a.fd_h},
                               {"dq", check(max_relative_error(grads.dq, fd.dq), a.fd_tol)},
                               {"dk", check(max_relative_error(grads.dk, fd.dk), a.fd_tol)},
                               {"dv", check(max_relative_error(grads.dv, fd.dv), a.fd_tol)}};
      for (const char* g : {"dq", "dk", "dv"}) pass = pass && report["finite_diff"][g]["pass"].get<bool>();
    }
  } else if (a.finite_diff) {
    throw PreconditionError("--fd needs --do");
  }
  report["pass"] = pass;
  emit(report, a.out, out);
  err << fmt::format("verify {}: forward max rel error {:.17g}\n", pass ? "pass" : "FAIL",
                     report["forward"]["max_rel_error"].get<double>());
  return pass ? kOk : kVerifyFailed;
}

// ---- plan ----

struct PlanArgs {
  std::int64_t n = 0;
  std::optional<double> budget;
  std::string model = "a100-fp16-fa-fwd";
  std::string models_file;
  SetArgs set;
  bool uniform = false, hybrid = false, guardrail = false, optimum = false, gpu_hours = false, csv = false;
  bool capped_parallel = false;
  std::int64_t n_parallel = 1;
  std::int64_t init_itr = 1;
  std::int64_t init_n_cap = 1;
  std::optional<std::int64_t> itr;
  std::int64_t max_itr = 20;
  std::string out;
};

CostModel resolve_model(const PlanArgs& a) {
  if (!a.models_file.empty()) {
    const auto models = load_models_json(a.models_file);
    const auto it = models.find(a.model);
    if (it == models.end()) throw PreconditionError(fmt::format("model '{}' not in {}", a.model, a.models_file));
    return it->second;
  }
  return preset_model(a.model);
}

double need_budget(const PlanArgs& a) {
  if (!a.budget) throw PreconditionError("this plan mode needs --budget");
  return *a.budget;
}

int cmd_plan(const PlanArgs& a, std::ostream& out) {
  const int modes = a.uniform + a.hybrid + a.guardrail + a.optimum + a.gpu_hours + a.csv;
  if (modes != 1) {
    throw PreconditionError("choose exactly one of --uniform, --hybrid, --guardrail, --optimum, --gpu-hours, --csv");
  }
  const auto model = resolve_model(a);
  const auto set = resolve_set(a.set);
  const auto shape = DivideShape::of(set);
  if (a.csv) {
    std::string text = "itr,x,mem_gib,time_s\n";
    for (const auto& r : plot_rows(a.n, model, shape, a.max_itr)) {
      text += fmt::format("{},{:.17g},{:.17g},{:.17g}\n", r.itr, r.length, r.mem_gib, r.time_s);
    }
    if (a.out.empty()) {
      out << text;
    } else {
      std::ofstream f(a.out);
      if (!f) throw FormatError(fmt::format("cannot open '{}' for writing", a.out));
      f << text;
    }
    return kOk;
  }
  Json j = {{"n", a.n}, {"model", to_json(model)}, {"interest_set", to_json(set)}};
  if (a.budget) j["budget_gib"] = *a.budget;
  if (a.uniform) {
    j["uniform"] = to_json(plan_uniform(a.n, need_budget(a), model, shape, a.n_parallel));
  } else if (a.hybrid) {
    j["hybrid"] = to_json(plan_hybrid(a.n, need_budget(a), model, set));
  } else if (a.guardrail) {
    j["guardrail"] = to_json(simulate_guardrail(a.n, need_budget(a), model, shape, a.init_itr, a.init_n_cap));
  } else if (a.optimum) {
    const auto mode = a.capped_parallel ? GranularityMode::capped_parallel : GranularityMode::serial;
    j["optimum"] = to_json(optimal_granularity(model, a.n, mode, shape));
  } else {
    const std::int64_t itr = a.itr ? *a.itr : plan_uniform(a.n, need_budget(a), model, shape).itr;
    const double np = static_cast<double>(a.n_parallel);
    j["gpu_hours"] = {{"itr", itr},
                      {"length", subsequence_length(static_cast<double>(a.n), itr, shape)},
                      {"n_parallel", a.n_parallel},
                      {"hours", estimate_gpu_hours(a.n, itr, model, shape, np)}};
  }
  emit(j, a.out, out);
  return kOk;
}

}  // namespace

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Exact CQS Divide attention: planning, execution, verification and scheduling"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "write a seeded uniform random tensor file");
  gen_cmd->add_option("--shape", gen.shape, "B,H,N,D")->delimiter(',')->expected(4)->required()
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--seed", gen.seed);
  gen_cmd->add_option("--lo", gen.lo);
  gen_cmd->add_option("--hi", gen.hi);
  gen_cmd->add_option("--dtype", gen.dtype)->check(CLI::IsMember({"f32", "f64"}));
  gen_cmd->add_option("--out", gen.out)->required();

  DivideArgs div;
  auto* div_cmd = app.add_subcommand("divide", "build the subsequence plan");
  div_cmd->add_option("--n", div.n, "sequence length")->required();
  div_cmd->add_option("--itr", div.itr)->check(CLI::NonNegativeNumber);
  add_set_options(div_cmd, div.set);
  div_cmd->add_flag("--check", div.check, "verify exact pair coverage");
  div_cmd->add_option("--out", div.out, "write JSON here instead of stdout");

  AttnArgs attn;
  auto* attn_cmd = app.add_subcommand("attn", "run forward (and backward) attention");
  add_kernel_options(attn_cmd, attn.kernel);
  attn_cmd->add_option("--out", attn.out, "output O tensor file")->required();
  attn_cmd->add_flag("--backward", attn.backward);
  attn_cmd->add_option("--dq", attn.dq);
  attn_cmd->add_option("--dk", attn.dk);
  attn_cmd->add_option("--dv", attn.dv);
  attn_cmd->add_option("--stats", attn.stats, "stats JSON path (default stdout)");

  VerifyArgs ver;
  auto* ver_cmd = app.add_subcommand("verify", "compare the kernel against the dense oracle");
  add_kernel_options(ver_cmd, ver.kernel);
  ver_cmd->add_option("--tol", ver.tol);
  ver_cmd->add_flag("--fd", ver.finite_diff, "also compare gradients to central differences");
  ver_cmd->add_option("--fd-h", ver.fd_h);
  ver_cmd->add_option("--fd-tol", ver.fd_tol);
  ver_cmd->add_option("--out", ver.out, "report path (default stdout)");

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan", "schedule what-ifs against a cost model");
  plan_cmd->add_option("--n", plan.n, "sequence length")->required()->check(CLI::PositiveNumber);
  plan_cmd->add_option("--budget", plan.budget, "device memory budget, GiB");
  plan_cmd->add_option("--model", plan.model, "preset or models.json entry name");
  plan_cmd->add_option("--models", plan.models_file, "models.json path");
  add_set_options(plan_cmd, plan.set);
  plan_cmd->add_flag("--uniform", plan.uniform);
  plan_cmd->add_flag("--hybrid", plan.hybrid);
  plan_cmd->add_flag("--guardrail", plan.guardrail);
  plan_cmd->add_flag("--optimum", plan.optimum);
  plan_cmd->add_flag("--gpu-hours", plan.gpu_hours);
  plan_cmd->add_flag("--csv", plan.csv, "emit itr,x,mem,time rows");
  auto* serial = plan_cmd->add_flag("--serial", "serial objective (default)");
  plan_cmd->add_flag("--capped-parallel", plan.capped_parallel)->excludes(serial);
  plan_cmd->add_option("--n-parallel", plan.n_parallel)->check(CLI::PositiveNumber);
  plan_cmd->add_option("--init-itr", plan.init_itr);
  plan_cmd->add_option("--init-ncap", plan.init_n_cap);
  plan_cmd->add_option("--itr", plan.itr);
  plan_cmd->add_option("--max-itr", plan.max_itr)->check(CLI::NonNegativeNumber);
  plan_cmd->add_option("--out", plan.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen(gen);
    if (*div_cmd) return cmd_divide(div, out, err);
    if (*plan_cmd) return cmd_plan(plan, out);
    if (*attn_cmd) {
      auto q = read_tensor_file(attn.kernel.q);
      return std::visit([&](auto&& t) { return run_attn(std::move(t), attn, out); }, std::move(q));
    }
    if (*ver_cmd) {
      auto q = read_tensor_file(ver.kernel.q);
      return std::visit([&](auto&& t) { return run_verify(std::move(t), ver, out, err); }, std::move(q));
    }
  } catch (const InfeasibleError& e) {
    err << "infeasible: " << e.what() << '\n';
    return kInfeasible;
  } catch (const NumericRangeError& e) {
    err << "error: " << e.what() << " (try --mode stabilized)\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace cqsa::cli
