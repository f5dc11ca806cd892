#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cqsa/divide.hpp"
#include "cqsa/kernel.hpp"
#include "cqsa/quorum.hpp"
#include "cqsa/scheduler.hpp"

// JSON views of plans, schedules and traces. nlohmann::json keeps object
// keys sorted, so dumps are stable for diffing.
namespace cqsa {

using Json = nlohmann::json;

struct DividePlan {
  std::int64_t n = 0;
  std::int64_t itr = 0;
  InterestSet set;
  std::vector<SubseqEntry> entries;
};

Json to_json(const InterestSet& set);

/// Token ids are stored as runs: [[begin, end), ...] in gather order.
Json to_json(const SubseqEntry& entry);

/// {"N", "c", "itr", "offsets", "entries": [{"quorum", "length",
/// "token_ids_runs", "mask_groups"}]}
Json to_json(const DividePlan& plan);

/// Throws FormatError on missing fields, bad runs or ids outside [0, n).
DividePlan plan_from_json(const Json& j);
DividePlan load_plan(const std::string& path);

Json to_json(const CostModel& model);
Json to_json(const UniformPlan& plan);
Json to_json(const ScheduleTree& tree);
Json to_json(const GuardrailTrace& trace);
Json to_json(const GranularityAnalysis& analysis);
Json to_json(const EntryStats& stats);

/// Runs of consecutive ids within the gather order (not sorted).
std::vector<Run> ordered_runs(std::span<const std::int64_t> ids);

}  // namespace cqsa
