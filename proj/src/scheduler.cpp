#include "cqsa/scheduler.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "cqsa/divide.hpp"
#include "cqsa/errors.hpp"

namespace cqsa {
namespace {

void check_budget(double budget_gib, const CostModel& model) {
  if (!(budget_gib > model.mem_intercept)) {
    throw InfeasibleError(fmt::format(
        "budget {} GiB does not exceed the per-task memory floor E = {} GiB", budget_gib,
        model.mem_intercept));
  }
}

void check_shape(const DivideShape& shape) {
  if (shape.l < 1 || shape.c != chunk_count_for(shape.l)) {
    throw PreconditionError(fmt::format("invalid divide shape c={} l={}", shape.c, shape.l));
  }
}

// Largest k with k * per_task <= budget (0 if one task does not fit).
std::int64_t tasks_that_fit(double budget, double per_task) {
  if (per_task > budget) return 0;
  constexpr double kMaxCap = 4.0e18;
  double k = std::floor(std::min(budget / per_task, kMaxCap));
  while ((k + 1.0) * per_task <= budget && k < kMaxCap) k += 1.0;
  while (k > 1.0 && k * per_task > budget) k -= 1.0;
  return static_cast<std::int64_t>(std::max(k, 1.0));
}

// Derivative numerator on x > 0: sign(objective'(x)) == sign(p(x)).
using Cubic = std::array<double, 4>;  // p(x) = a0 + a1 x + a2 x^2 + a3 x^3

double eval(const Cubic& p, double x) { return ((p[3] * x + p[2]) * x + p[1]) * x + p[0]; }

int sign_of(double v) { return (v > 0) - (v < 0); }

Cubic derivative_numerator(const CostModel& m, GranularityMode mode) {
  const double a = m.time_quad, b = m.time_lin, c = m.time_const;
  const double d = m.mem_slope, e = m.mem_intercept;
  if (mode == GranularityMode::serial) {
    // g(x) = A + B/x + C/x^2, x^3 g'(x) = -B x - 2C
    return {-2.0 * c, -b, 0.0, 0.0};
  }
  // f(x) = AD x + (AE + BD) + (BE + CD)/x + CE/x^2
  // x^3 f'(x) = AD x^3 - (BE + CD) x - 2CE
  return {-2.0 * c * e, -(b * e + c * d), 0.0, a * d};
}

// Stationary points of p inside (lo, hi).
std::vector<double> turning_points(const Cubic& p, double lo, double hi) {
  // p'(x) = a1 + 2 a2 x + 3 a3 x^2
  const double qa = 3.0 * p[3], qb = 2.0 * p[2], qc = p[1];
  std::vector<double> out;
  if (qa == 0.0) {
    if (qb != 0.0) out.push_back(-qc / qb);
  } else {
    const double disc = qb * qb - 4.0 * qa * qc;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      out.push_back((-qb - sq) / (2.0 * qa));
      out.push_back((-qb + sq) / (2.0 * qa));
    }
  }
  std::erase_if(out, [&](double x) { return !(x > lo && x < hi); });
  std::sort(out.begin(), out.end());
  return out;
}

double bisect(const Cubic& p, double lo, double hi) {
  int s_lo = sign_of(eval(p, lo));
  for (int i = 0; i < 400 && hi - lo > 1e-12 * hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    const int s_mid = sign_of(eval(p, mid));
    if (s_mid == 0) return mid;
    if (s_mid == s_lo) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

PassKind parse_pass(const std::string& s) {
  if (s == "forward" || s == "fwd") return PassKind::forward;
  if (s == "backward" || s == "bwd") return PassKind::backward;
  throw FormatError(fmt::format("unknown pass kind '{}'", s));
}

}  // namespace

CostModel fit_model(std::span<const CostSample> samples, PassKind pass) {
  if (samples.size() < 3) {
    throw PreconditionError(fmt::format("fit needs >= 3 samples, got {}", samples.size()));
  }
  const auto rows = static_cast<Eigen::Index>(samples.size());
  double scale = 0.0;
  for (const auto& s : samples) {
    if (!(s.length > 0.0)) throw PreconditionError("sample lengths must be positive");
    scale = std::max(scale, s.length);
  }
  // Columns are powers of x / scale to keep the design well conditioned.
  Eigen::MatrixXd quad(rows, 3);
  Eigen::VectorXd mem(rows), time(rows);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const double t = samples[i].length / scale;
    quad(i, 0) = t * t;
    quad(i, 1) = t;
    quad(i, 2) = 1.0;
    mem(i) = samples[i].mem_gib;
    time(i) = samples[i].time_s;
  }
  const Eigen::MatrixXd lin = quad.rightCols(2);
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_time(quad);
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr_mem(lin);
  if (qr_time.rank() < 3 || qr_mem.rank() < 2) {
    throw PreconditionError("rank-deficient fit: need at least 3 distinct sample lengths");
  }
  const Eigen::VectorXd tc = qr_time.solve(time);
  const Eigen::VectorXd mc = qr_mem.solve(mem);

  CostModel model;
  model.time_quad = tc(0) / (scale * scale);
  model.time_lin = tc(1) / scale;
  model.time_const = tc(2);
  model.mem_slope = mc(0) / scale;
  model.mem_intercept = mc(1);
  model.pass = pass;
  model.name = "fitted";
  return model;
}

CostPrediction predict(const CostModel& model, double x) {
  if (!(x > 0.0)) throw PreconditionError(fmt::format("length must be positive, got {}", x));
  return {model.mem_slope * x + model.mem_intercept,
          (model.time_quad * x + model.time_lin) * x + model.time_const};
}

CostModel preset_model(std::string_view name) {
  if (name == "a100-fp16-fa-fwd") {
    return {1.45e-6, 8.42e-2, 9.37e-12, 9.92e-7, -3.51e-2, PassKind::forward, std::string(name)};
  }
  if (name == "a100-fp16-fa-bwd") {
    return {2.88e-6, 1.36e-2, 2.38e-11, 4.81e-7, 8.84e-2, PassKind::backward, std::string(name)};
  }
  throw PreconditionError(fmt::format("unknown model preset '{}'", name));
}

std::vector<std::string> preset_names() { return {"a100-fp16-fa-fwd", "a100-fp16-fa-bwd"}; }

std::map<std::string, CostModel> load_models_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot open model file '{}'", path));
  std::map<std::string, CostModel> out;
  try {
    const auto doc = nlohmann::json::parse(in);
    for (const auto& [name, j] : doc.at("models").items()) {
      CostModel m;
      m.name = name;
      m.pass = parse_pass(j.at("pass").get<std::string>());
      m.mem_slope = j.at("mem").at("slope").get<double>();
      m.mem_intercept = j.at("mem").at("intercept").get<double>();
      m.time_quad = j.at("time").at("quad").get<double>();
      m.time_lin = j.at("time").at("lin").get<double>();
      m.time_const = j.at("time").at("const").get<double>();
      if (!(m.mem_slope > 0.0) || m.time_quad < 0.0) {
        throw FormatError(fmt::format("model '{}' needs mem.slope > 0 and time.quad >= 0", name));
      }
      out.emplace(name, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(fmt::format("bad model file '{}': {}", path, e.what()));
  }
  return out;
}

double subsequence_length(double n, std::int64_t itr, const DivideShape& shape) {
  return n * std::pow(shape.ratio(), static_cast<double>(itr));
}

UniformPlan plan_uniform(std::int64_t n, double budget_gib, const CostModel& model,
                         const DivideShape& shape, std::int64_t n_parallel) {
  check_shape(shape);
  check_budget(budget_gib, model);
  if (n < 1) throw PreconditionError("sequence length must be positive");
  if (n_parallel < 1) throw PreconditionError("n_parallel must be >= 1");
  for (std::int64_t itr = 0;; ++itr) {
    const auto total = checked_power(shape.c, itr);
    if (!total || *total > n) break;
    const double x = subsequence_length(static_cast<double>(n), itr, shape);
    const auto cost = predict(model, x);
    if (cost.mem_gib <= budget_gib) {
      UniformPlan plan;
      plan.itr = itr;
      plan.n_total = *total;
      plan.length = x;
      plan.per_task_mem = cost.mem_gib;
      plan.per_task_time = cost.time_s;
      plan.n_parallel = n_parallel;
      plan.est_wall_time = cost.time_s * static_cast<double>(*total) / static_cast<double>(n_parallel);
      return plan;
    }
    if (shape.c == 1) break;
  }
  throw InfeasibleError(fmt::format("no divide granularity fits {} tokens into {} GiB", n, budget_gib));
}

std::vector<const ScheduleNode*> ScheduleTree::leaves() const {
  std::vector<const ScheduleNode*> out;
  for (const auto& node : nodes) {
    if (node.is_leaf()) out.push_back(&node);
  }
  return out;
}

std::int64_t ScheduleTree::max_depth() const {
  std::int64_t d = 0;
  for (const auto& node : nodes) d = std::max(d, node.depth);
  return d;
}

ScheduleTree plan_hybrid(std::int64_t n, double budget_gib, const CostModel& model,
                         const InterestSet& set) {
  check_budget(budget_gib, model);
  if (n < 1) throw PreconditionError("sequence length must be positive");
  const std::int64_t c = set.chunk_count();
  ScheduleTree tree;

  auto expand = [&](auto&& self, std::int64_t length, std::int64_t depth,
                    std::vector<std::int64_t> quorum) -> std::int64_t {
    if (static_cast<std::int64_t>(tree.nodes.size()) >= kMaxScheduleNodes) {
      throw InfeasibleError(fmt::format("hybrid plan exceeds {} nodes", kMaxScheduleNodes));
    }
    const std::int64_t id = static_cast<std::int64_t>(tree.nodes.size());
    const auto cost = predict(model, static_cast<double>(length));
    ScheduleNode node;
    node.id = id;
    node.length = length;
    node.depth = depth;
    node.c = c;
    node.quorum = quorum;
    node.predicted_mem = cost.mem_gib;
    node.predicted_time = cost.time_s;
    tree.nodes.push_back(std::move(node));
    if (cost.mem_gib <= budget_gib) return id;
    if (length < c || c == 1) {
      throw InfeasibleError(fmt::format(
          "subsequence of {} tokens needs {} GiB and cannot be divided further", length,
          cost.mem_gib));
    }
    const auto layout = balanced_chunk_layout(length, c);
    std::vector<std::int64_t> children;
    for (std::int64_t q = 0; q < c; ++q) {
      std::int64_t child_len = 0;
      for (std::int64_t o : set.offsets()) child_len += layout.chunk_size(static_cast<std::size_t>((q + o) % c));
      auto child_quorum = quorum;
      child_quorum.push_back(q);
      children.push_back(self(self, child_len, depth + 1, std::move(child_quorum)));
    }
    tree.nodes[id].children = std::move(children);
    return id;
  };
  expand(expand, n, 0, {});
  return tree;
}

GuardrailTrace simulate_guardrail(std::int64_t n, double budget_gib, const CostModel& model,
                                  const DivideShape& shape, std::int64_t init_itr,
                                  std::int64_t init_n_cap) {
  check_shape(shape);
  check_budget(budget_gib, model);
  if (init_itr < 1 || init_n_cap < 1) throw PreconditionError("init itr and n_cap must be >= 1");

  GuardrailTrace trace;
  std::int64_t itr = init_itr;
  std::int64_t n_cap = init_n_cap;
  auto phase = GuardrailPhase::running;
  std::uint64_t round = 0;
  std::uint64_t completed = 0;

  auto level_tasks = [&](std::int64_t level) {
    const auto total = checked_power(shape.c, level);
    if (!total || *total > n) {
      throw InfeasibleError(fmt::format(
          "itr {} would split {} tokens into more than {} chunks per level", level, n, n));
    }
    return static_cast<std::uint64_t>(*total);
  };
  auto per_task_mem = [&] {
    return predict(model, subsequence_length(static_cast<double>(n), itr, shape)).mem_gib;
  };
  auto record = [&](GuardrailEvent ev) {
    trace.events.push_back({ev, itr, n_cap, phase, round, completed, per_task_mem()});
  };

  std::uint64_t pending = level_tasks(itr);
  record(GuardrailEvent::start);

  auto escalate = [&] {
    level_tasks(itr + 1);
    ++itr;
    pending *= static_cast<std::uint64_t>(shape.c);
    n_cap = 1;
    phase = GuardrailPhase::calibrating;
    record(GuardrailEvent::escalate);
  };
  auto finish = [&](std::uint64_t count) {
    pending -= count;
    completed += count;
    trace.completed_by_itr[itr] += count;
  };

  while (pending > 0) {
    const double mem = per_task_mem();
    if (phase == GuardrailPhase::calibrating) {
      ++round;
      if (mem > budget_gib) {
        ++trace.oom_count;
        record(GuardrailEvent::calibration_oom);
        escalate();
        continue;
      }
      finish(1);
      n_cap = tasks_that_fit(budget_gib, mem);
      phase = GuardrailPhase::running;
      record(GuardrailEvent::calibrate);
      continue;
    }
    const auto load = static_cast<std::uint64_t>(n_cap);
    const std::int64_t fit = tasks_that_fit(budget_gib, mem);
    const std::uint64_t fits = mem > budget_gib ? 0 : static_cast<std::uint64_t>(fit);
    if (std::min(load, pending) <= fits) {
      // No OOM is possible at this n_cap: run the remaining rounds in one step.
      round += (pending + load - 1) / load;
      finish(pending);
      continue;
    }
    ++round;
    finish(fits);
    ++trace.oom_count;
    if (n_cap > 1) {
      --n_cap;
      record(GuardrailEvent::oom_evict);
    } else {
      record(GuardrailEvent::oom_evict);
      escalate();
    }
  }
  record(GuardrailEvent::complete);
  trace.final_itr = itr;
  trace.final_n_cap = n_cap;
  trace.rounds = round;
  return trace;
}

double estimate_gpu_hours(std::int64_t n, std::int64_t itr, const CostModel& model,
                          const DivideShape& shape, double n_parallel) {
  check_shape(shape);
  if (itr < 0) throw PreconditionError("itr must be >= 0");
  if (!(n_parallel > 0.0)) throw PreconditionError("n_parallel must be positive");
  const double x = subsequence_length(static_cast<double>(n), itr, shape);
  const double tasks = std::pow(static_cast<double>(shape.c), static_cast<double>(itr));
  return predict(model, x).time_s * tasks / n_parallel / 3600.0;
}

double granularity_objective(const CostModel& m, GranularityMode mode, double x) {
  const auto cost = predict(m, x);
  const double g = cost.time_s / (x * x);
  return mode == GranularityMode::serial ? g : g * cost.mem_gib;
}

GranularityAnalysis optimal_granularity(const CostModel& model, std::int64_t n,
                                        GranularityMode mode, const DivideShape& shape) {
  check_shape(shape);
  if (model.time_quad == 0.0 && model.time_lin == 0.0) {
    throw PreconditionError("degenerate time model: A = B = 0");
  }
  if (n < 2) throw PreconditionError("sequence length must be >= 2");
  const Cubic p = derivative_numerator(model, mode);
  if (std::all_of(p.begin(), p.end(), [](double a) { return a == 0.0; })) {
    throw PreconditionError("objective is constant in x");
  }
  const double lo = 1.0;
  const double hi = static_cast<double>(n);
  std::vector<double> breaks = {lo};
  for (double t : turning_points(p, lo, hi)) breaks.push_back(t);
  breaks.push_back(hi);

  GranularityAnalysis out;
  out.mode = mode;
  const double log_ratio = std::log(shape.ratio());
  auto itr_of = [&](double x) { return std::log(x / hi) / log_ratio; };
  for (std::size_t i = 0; i + 1 < breaks.size(); ++i) {
    const int s_lo = sign_of(eval(p, breaks[i]));
    const int s_hi = sign_of(eval(p, breaks[i + 1]));
    if (s_lo == 0 || s_hi == 0 || s_lo == s_hi) continue;
    const double x = bisect(p, breaks[i], breaks[i + 1]);
    const auto kind = s_lo < 0 ? ExtremumKind::minimum : ExtremumKind::maximum;
    out.critical_points.push_back({x, itr_of(x), kind});
  }
  if (out.critical_points.empty()) {
    const double probe = std::sqrt(lo * hi);
    out.kind = eval(p, probe) > 0 ? ExtremumKind::monotone_increasing
                                  : ExtremumKind::monotone_decreasing;
    return out;
  }
  const CriticalPoint* chosen = &out.critical_points.front();
  for (const auto& cp : out.critical_points) {
    if (cp.kind == ExtremumKind::minimum) {
      chosen = &cp;
      break;
    }
  }
  out.kind = chosen->kind;
  out.x_star = chosen->x;
  out.itr_star = chosen->itr;
  return out;
}

std::vector<PlotRow> plot_rows(std::int64_t n, const CostModel& model, const DivideShape& shape,
                               std::int64_t max_itr) {
  check_shape(shape);
  std::vector<PlotRow> rows;
  for (std::int64_t itr = 0; itr <= max_itr; ++itr) {
    const double x = subsequence_length(static_cast<double>(n), itr, shape);
    const auto cost = predict(model, x);
    rows.push_back({itr, x, cost.mem_gib, cost.time_s});
  }
  return rows;
}

std::string_view to_string(PassKind kind) {
  return kind == PassKind::forward ? "forward" : "backward";
}

std::string_view to_string(GuardrailEvent event) {
  switch (event) {
    case GuardrailEvent::start: return "start";
    case GuardrailEvent::oom_evict: return "oom_evict";
    case GuardrailEvent::escalate: return "escalate";
    case GuardrailEvent::calibration_oom: return "calibration_oom";
    case GuardrailEvent::calibrate: return "calibrate";
    case GuardrailEvent::complete: return "complete";
  }
  return "unknown";
}

std::string_view to_string(GuardrailPhase phase) {
  return phase == GuardrailPhase::running ? "running" : "calibrating";
}

std::string_view to_string(ExtremumKind kind) {
  switch (kind) {
    case ExtremumKind::minimum: return "min";
    case ExtremumKind::maximum: return "max";
    case ExtremumKind::monotone_increasing: return "monotone_increasing";
    case ExtremumKind::monotone_decreasing: return "monotone_decreasing";
  }
  return "unknown";
}

std::string_view to_string(GranularityMode mode) {
  return mode == GranularityMode::serial ? "serial" : "capped_parallel";
}

}  // namespace cqsa
