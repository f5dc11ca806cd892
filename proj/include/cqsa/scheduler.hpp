#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cqsa/quorum.hpp"

namespace cqsa {

enum class PassKind { forward, backward };

/// Fitted per-subsequence cost: memory Mem(x) = slope*x + intercept (GiB),
/// time t(x) = quad*x^2 + lin*x + constant (seconds), x in tokens.
struct CostModel {
  double mem_slope = 0.0;      // D
  double mem_intercept = 0.0;  // E
  double time_quad = 0.0;      // A
  double time_lin = 0.0;       // B
  double time_const = 0.0;     // C
  PassKind pass = PassKind::forward;
  std::string name;
};

struct CostSample {
  double length = 0.0;
  double mem_gib = 0.0;
  double time_s = 0.0;
};

struct CostPrediction {
  double mem_gib = 0.0;
  double time_s = 0.0;
};

/// Chunk count c and interest-set size l of one divide step.
struct DivideShape {
  std::int64_t c = 7;
  std::int64_t l = 3;

  static DivideShape of(const InterestSet& set) { return {set.chunk_count(), set.size()}; }
  double ratio() const { return static_cast<double>(l) / static_cast<double>(c); }
};

/// Least squares: degree-1 memory, degree-2 time. Needs >= 3 distinct lengths.
CostModel fit_model(std::span<const CostSample> samples, PassKind pass);

CostPrediction predict(const CostModel& model, double x);

/// "a100-fp16-fa-fwd" and "a100-fp16-fa-bwd".
CostModel preset_model(std::string_view name);
std::vector<std::string> preset_names();

/// Reads {"models": {name: {"pass": ..., "mem": {...}, "time": {...}}}}.
std::map<std::string, CostModel> load_models_json(const std::string& path);

/// Subsequence length N (l/c)^itr, real-valued.
double subsequence_length(double n, std::int64_t itr, const DivideShape& shape);

struct UniformPlan {
  std::int64_t itr = 0;
  std::int64_t n_total = 1;
  double length = 0.0;
  double per_task_mem = 0.0;
  double per_task_time = 0.0;
  double est_wall_time = 0.0;
  std::int64_t n_parallel = 1;
};

/// Smallest itr >= 0 with Mem(N (l/c)^itr) <= budget and N >= c^itr.
/// Throws InfeasibleError if none exists.
UniformPlan plan_uniform(std::int64_t n, double budget_gib, const CostModel& model,
                         const DivideShape& shape, std::int64_t n_parallel = 1);

struct ScheduleNode {
  std::int64_t id = 0;
  std::int64_t length = 0;
  std::int64_t depth = 0;
  std::int64_t c = 0;                  // chunk count used to split this node
  std::vector<std::int64_t> quorum;    // path from the root
  std::vector<std::int64_t> children;  // node ids; empty for leaves
  double predicted_mem = 0.0;
  double predicted_time = 0.0;

  bool is_leaf() const { return children.empty(); }
};

/// Only leaves are executed; internal nodes document the divide history.
struct ScheduleTree {
  std::vector<ScheduleNode> nodes;  // nodes[0] is the root

  std::vector<const ScheduleNode*> leaves() const;
  std::int64_t max_depth() const;
};

inline constexpr std::int64_t kMaxScheduleNodes = 5'000'000;

/// Greedy depth-first split of every leaf whose predicted memory exceeds the
/// budget. Child lengths are the exact token counts of the balanced layout.
ScheduleTree plan_hybrid(std::int64_t n, double budget_gib, const CostModel& model,
                         const InterestSet& set);

enum class GuardrailEvent { start, oom_evict, escalate, calibration_oom, calibrate, complete };
enum class GuardrailPhase { running, calibrating };

struct TraceEvent {
  GuardrailEvent event = GuardrailEvent::start;
  std::int64_t itr = 0;
  std::int64_t n_cap = 1;
  GuardrailPhase phase = GuardrailPhase::running;
  std::uint64_t round = 0;
  std::uint64_t completed = 0;  // tasks finished so far, any depth
  double per_task_mem = 0.0;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct GuardrailTrace {
  std::vector<TraceEvent> events;
  std::int64_t final_itr = 0;
  std::int64_t final_n_cap = 1;
  std::uint64_t rounds = 0;
  std::uint64_t oom_count = 0;
  std::map<std::int64_t, std::uint64_t> completed_by_itr;
};

/// Replays the OOM guardrail against the memory model. Each round loads up to
/// n_cap tasks; the load that pushes resident memory past the budget is
/// evicted and requeued and n_cap drops by one. An OOM at n_cap = 1 raises
/// itr (re-dividing the pending tasks) and runs a calibration task alone,
/// which sets n_cap = floor(budget / per-task memory).
GuardrailTrace simulate_guardrail(std::int64_t n, double budget_gib, const CostModel& model,
                                  const DivideShape& shape, std::int64_t init_itr,
                                  std::int64_t init_n_cap);

/// t(N (l/c)^itr) * c^itr / n_parallel, in hours.
double estimate_gpu_hours(std::int64_t n, std::int64_t itr, const CostModel& model,
                          const DivideShape& shape, double n_parallel = 1.0);

enum class GranularityMode {
  serial,          // g(x) = t(x) / x^2, n_parallel = 1
  capped_parallel  // f(x) = t(x) Mem(x) / x^2, n_parallel = Mem_max / Mem(x)
};
enum class ExtremumKind { minimum, maximum, monotone_increasing, monotone_decreasing };

struct CriticalPoint {
  double x = 0.0;
  double itr = 0.0;
  ExtremumKind kind = ExtremumKind::minimum;
};

struct GranularityAnalysis {
  GranularityMode mode = GranularityMode::serial;
  ExtremumKind kind = ExtremumKind::monotone_increasing;
  std::optional<double> x_star;
  std::optional<double> itr_star;
  std::vector<CriticalPoint> critical_points;  // ascending x, within [1, N]
};

/// Objective value per mode (without the constant N^2 / Mem_max factors).
double granularity_objective(const CostModel& model, GranularityMode mode, double x);

/// Critical points of the objective on [1, N] via the derivative's numerator
/// polynomial (degree <= 3), bisected to 1e-12 relative.
GranularityAnalysis optimal_granularity(const CostModel& model, std::int64_t n,
                                        GranularityMode mode, const DivideShape& shape);

struct PlotRow {
  std::int64_t itr = 0;
  double length = 0.0;
  double mem_gib = 0.0;
  double time_s = 0.0;
};

/// One row per itr in [0, max_itr].
std::vector<PlotRow> plot_rows(std::int64_t n, const CostModel& model, const DivideShape& shape,
                               std::int64_t max_itr);

std::string_view to_string(PassKind kind);
std::string_view to_string(GuardrailEvent event);
std::string_view to_string(GuardrailPhase phase);
std::string_view to_string(ExtremumKind kind);
std::string_view to_string(GranularityMode mode);

}  // namespace cqsa
