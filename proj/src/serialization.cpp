#include "cqsa/serialization.hpp"

#include <fstream>

#include <fmt/format.h>

#include "cqsa/errors.hpp"

namespace cqsa {
namespace {

Json runs_to_json(std::span<const Run> runs) {
  Json out = Json::array();
  for (const auto& r : runs) out.push_back({r.begin, r.end});
  return out;
}

std::vector<Run> runs_from_json(const Json& j) {
  std::vector<Run> runs;
  for (const auto& r : j) {
    if (!r.is_array() || r.size() != 2) throw FormatError("run must be [begin, end]");
    Run run{r[0].get<std::int64_t>(), r[1].get<std::int64_t>()};
    if (run.end <= run.begin || run.begin < 0) {
      throw FormatError(fmt::format("empty or negative run [{}, {})", run.begin, run.end));
    }
    runs.push_back(run);
  }
  return runs;
}

}  // namespace

std::vector<Run> ordered_runs(std::span<const std::int64_t> ids) {
  std::vector<Run> runs;
  for (std::int64_t id : ids) {
    if (!runs.empty() && runs.back().end == id) {
      ++runs.back().end;
    } else {
      runs.push_back({id, id + 1});
    }
  }
  return runs;
}

Json to_json(const InterestSet& set) {
  return {{"c", set.chunk_count()}, {"offsets", set.offsets()}};
}

Json to_json(const SubseqEntry& entry) {
  Json groups = Json::array();
  for (const auto& g : entry.mask_groups) groups.push_back(runs_to_json(g));
  return {{"quorum", entry.quorum},
          {"length", entry.length()},
          {"token_ids_runs", runs_to_json(ordered_runs(entry.token_ids))},
          {"mask_groups", groups}};
}

Json to_json(const DividePlan& plan) {
  Json entries = Json::array();
  for (const auto& e : plan.entries) entries.push_back(to_json(e));
  return {{"N", plan.n},
          {"c", plan.set.chunk_count()},
          {"itr", plan.itr},
          {"offsets", plan.set.offsets()},
          {"entries", entries}};
}

DividePlan plan_from_json(const Json& j) {
  try {
    DividePlan plan{j.at("N").get<std::int64_t>(), j.at("itr").get<std::int64_t>(),
                    InterestSet::create(j.at("offsets").get<std::vector<std::int64_t>>(),
                                        j.at("c").get<std::int64_t>()),
                    {}};
    if (plan.n < 1 || plan.itr < 0) throw FormatError("plan needs n >= 1 and itr >= 0");
    for (const auto& je : j.at("entries")) {
      SubseqEntry e;
      e.quorum = je.at("quorum").get<std::vector<std::int64_t>>();
      for (const auto& r : runs_from_json(je.at("token_ids_runs"))) {
        if (r.end > plan.n) throw FormatError(fmt::format("token run [{}, {}) exceeds n", r.begin, r.end));
        for (std::int64_t id = r.begin; id < r.end; ++id) e.token_ids.push_back(id);
      }
      if (je.contains("mask_groups")) {
        for (const auto& jg : je.at("mask_groups")) {
          auto group = runs_from_json(jg);
          for (const auto& r : group) {
            if (r.end > e.length()) {
              throw FormatError(fmt::format("mask run [{}, {}) exceeds entry length {}", r.begin,
                                            r.end, e.length()));
            }
          }
          e.mask_groups.push_back(std::move(group));
        }
      }
      if (je.contains("length") && je.at("length").get<std::int64_t>() != e.length()) {
        throw FormatError("entry length disagrees with its token runs");
      }
      plan.entries.push_back(std::move(e));
    }
    return plan;
  } catch (const Json::exception& e) {
    throw FormatError(fmt::format("bad plan JSON: {}", e.what()));
  } catch (const PreconditionError& e) {
    throw FormatError(fmt::format("bad plan JSON: {}", e.what()));
  }
}

DividePlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(fmt::format("cannot open plan '{}'", path));
  try {
    return plan_from_json(Json::parse(in));
  } catch (const Json::exception& e) {
    throw FormatError(fmt::format("{}: {}", path, e.what()));
  }
}

Json to_json(const CostModel& m) {
  return {{"name", m.name},
          {"pass", to_string(m.pass)},
          {"mem", {{"slope", m.mem_slope}, {"intercept", m.mem_intercept}}},
          {"time", {{"quad", m.time_quad}, {"lin", m.time_lin}, {"const", m.time_const}}}};
}

Json to_json(const UniformPlan& p) {
  return {{"itr", p.itr},
          {"n_total", p.n_total},
          {"length", p.length},
          {"per_task_mem", p.per_task_mem},
          {"per_task_time", p.per_task_time},
          {"est_wall_time", p.est_wall_time},
          {"n_parallel", p.n_parallel}};
}

Json to_json(const ScheduleTree& tree) {
  Json nodes = Json::array();
  std::int64_t leaves = 0;
  for (const auto& n : tree.nodes) {
    leaves += n.is_leaf() ? 1 : 0;
    nodes.push_back({{"id", n.id},
                     {"length", n.length},
                     {"depth", n.depth},
                     {"c", n.c},
                     {"quorum", n.quorum},
                     {"children", n.children},
                     {"predicted_mem", n.predicted_mem},
                     {"predicted_time", n.predicted_time}});
  }
  return {{"node_count", tree.nodes.size()},
          {"leaf_count", leaves},
          {"max_depth", tree.max_depth()},
          {"nodes", nodes}};
}

Json to_json(const GuardrailTrace& trace) {
  Json events = Json::array();
  for (const auto& e : trace.events) {
    events.push_back({{"event", to_string(e.event)},
                      {"itr", e.itr},
                      {"n_cap", e.n_cap},
                      {"phase", to_string(e.phase)},
                      {"round", e.round},
                      {"completed", e.completed},
                      {"per_task_mem", e.per_task_mem}});
  }
  Json by_itr = Json::object();
  for (const auto& [itr, count] : trace.completed_by_itr) by_itr[std::to_string(itr)] = count;
  return {{"events", events},
          {"final_itr", trace.final_itr},
          {"final_n_cap", trace.final_n_cap},
          {"rounds", trace.rounds},
          {"oom_count", trace.oom_count},
          {"completed_by_itr", by_itr}};
}

Json to_json(const GranularityAnalysis& a) {
  Json points = Json::array();
  for (const auto& p : a.critical_points) {
    points.push_back({{"x", p.x}, {"itr", p.itr}, {"kind", to_string(p.kind)}});
  }
  Json out = {{"mode", to_string(a.mode)}, {"kind", to_string(a.kind)}, {"critical_points", points}};
  out["x_star"] = a.x_star ? Json(*a.x_star) : Json(nullptr);
  out["itr_star"] = a.itr_star ? Json(*a.itr_star) : Json(nullptr);
  return out;
}

Json to_json(const EntryStats& s) {
  return {{"quorum", s.quorum},
          {"length", s.length},
          {"seconds", s.seconds},
          {"resident_elements", s.resident_elements}};
}

}  // namespace cqsa
