#include "cqsa/divide.hpp"

#include <algorithm>
#include <limits>

#include <fmt/format.h>

#include "cqsa/errors.hpp"

namespace cqsa {

std::int64_t BinaryMask::zero_count() const {
  return static_cast<std::int64_t>(std::count(bits_.begin(), bits_.end(), 0));
}

ChunkLayout balanced_chunk_layout(std::int64_t length, std::int64_t c) {
  if (c < 1) throw PreconditionError(fmt::format("chunk count must be positive, got {}", c));
  if (length < c) {
    throw PreconditionError(fmt::format("cannot split {} tokens into {} non-empty chunks", length, c));
  }
  ChunkLayout layout;
  layout.length = length;
  layout.starts.reserve(static_cast<std::size_t>(c));
  layout.ends.reserve(static_cast<std::size_t>(c));
  const std::int64_t base = length / c;
  const std::int64_t extra = length % c;
  std::int64_t pos = 0;
  for (std::int64_t u = 0; u < c; ++u) {
    layout.starts.push_back(pos);
    pos += base + (u < extra ? 1 : 0);
    layout.ends.push_back(pos);
  }
  return layout;
}

std::optional<std::int64_t> checked_power(std::int64_t c, std::int64_t itr) {
  std::int64_t acc = 1;
  for (std::int64_t t = 0; t < itr; ++t) {
    if (acc > std::numeric_limits<std::int64_t>::max() / c) return std::nullopt;
    acc *= c;
  }
  return acc;
}

namespace {

struct Level {
  std::int64_t owner;
  std::vector<std::int64_t> chunks;
};

SubseqEntry build_entry(std::int64_t n, std::int64_t c, std::span<const std::int64_t> quorum,
                        std::span<const std::int64_t> offsets) {
  SubseqEntry entry;
  entry.quorum.assign(quorum.begin(), quorum.end());
  entry.token_ids.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) entry.token_ids[i] = i;

  // label_history[t][p]: chunk id at depth t of the token now at position p.
  std::vector<std::vector<std::int64_t>> label_history;
  std::vector<Level> levels;
  for (std::int64_t q : quorum) {
    const auto layout = balanced_chunk_layout(entry.length(), c);
    Level level{q, {}};
    std::vector<std::int64_t> gather;
    std::vector<std::int64_t> labels;
    for (std::int64_t o : offsets) {
      const std::int64_t u = (q + o) % c;
      level.chunks.push_back(u);
      for (std::int64_t p = layout.starts[u]; p < layout.ends[u]; ++p) {
        gather.push_back(p);
        labels.push_back(u);
      }
    }
    for (auto& history : label_history) {
      std::vector<std::int64_t> remapped(gather.size());
      for (std::size_t p = 0; p < gather.size(); ++p) remapped[p] = history[gather[p]];
      history = std::move(remapped);
    }
    label_history.push_back(std::move(labels));
    std::vector<std::int64_t> ids(gather.size());
    for (std::size_t p = 0; p < gather.size(); ++p) ids[p] = entry.token_ids[gather[p]];
    entry.token_ids = std::move(ids);
    levels.push_back(std::move(level));
  }

  for (std::size_t t = 0; t < levels.size(); ++t) {
    const auto& labels = label_history[t];
    for (std::int64_t chunk : levels[t].chunks) {
      if (chunk == levels[t].owner) continue;
      std::vector<std::int64_t> idx;
      for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] == chunk) idx.push_back(static_cast<std::int64_t>(p));
      }
      auto runs = indices_to_runs(idx);
      if (!runs.empty()) entry.mask_groups.push_back(std::move(runs));
    }
  }
  std::sort(entry.mask_groups.begin(), entry.mask_groups.end());
  entry.mask_groups.erase(std::unique(entry.mask_groups.begin(), entry.mask_groups.end()),
                          entry.mask_groups.end());
  return entry;
}

}  // namespace

std::vector<SubseqEntry> build_subseq(std::int64_t n, std::int64_t itr, const InterestSet& set) {
  const std::int64_t c = set.chunk_count();
  if (itr < 1) throw PreconditionError(fmt::format("itr must be >= 1, got {}", itr));
  const auto count = checked_power(c, itr);
  if (!count || n < *count) {
    throw PreconditionError(
        fmt::format("N = {} is smaller than c^itr = {}^{}; some chunk would be empty", n, c, itr));
  }
  std::vector<SubseqEntry> entries;
  entries.reserve(static_cast<std::size_t>(*count));
  std::vector<std::int64_t> quorum(static_cast<std::size_t>(itr), 0);
  for (std::int64_t k = 0; k < *count; ++k) {
    // Lexicographic odometer: the last coordinate varies fastest.
    std::int64_t rem = k;
    for (std::int64_t t = itr - 1; t >= 0; --t) {
      quorum[t] = rem % c;
      rem /= c;
    }
    entries.push_back(build_entry(n, c, quorum, set.offsets()));
  }
  return entries;
}

std::vector<SubseqEntry> build_subseq(std::int64_t n, std::int64_t c, std::int64_t itr,
                                      std::span<const std::int64_t> offsets) {
  return build_subseq(n, itr,
                      InterestSet::create(std::vector<std::int64_t>(offsets.begin(), offsets.end()), c));
}

std::vector<Run> indices_to_runs(std::span<const std::int64_t> indices) {
  std::vector<Run> runs;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (i > 0 && indices[i] <= indices[i - 1]) {
      throw PreconditionError("indices_to_runs requires sorted, distinct indices");
    }
    if (!runs.empty() && runs.back().end == indices[i]) {
      ++runs.back().end;
    } else {
      runs.push_back({indices[i], indices[i] + 1});
    }
  }
  return runs;
}

BinaryMask mask_from_runs(std::int64_t length, std::span<const RunGroup> groups) {
  if (length < 1) throw PreconditionError("mask length must be positive");
  BinaryMask mask(length);
  for (const auto& group : groups) {
    for (const Run& r : group) {
      if (r.begin < 0 || r.end > length || r.begin >= r.end) {
        throw PreconditionError(
            fmt::format("mask run [{}, {}) outside [0, {})", r.begin, r.end, length));
      }
    }
    for (const Run& rp : group) {
      for (std::int64_t p = rp.begin; p < rp.end; ++p) {
        for (const Run& rq : group) {
          for (std::int64_t q = rq.begin; q < rq.end; ++q) mask.clear(p, q);
        }
      }
    }
  }
  return mask;
}

CoverageReport coverage_check(std::span<const SubseqEntry> entries, std::int64_t n) {
  std::vector<std::uint32_t> counts(static_cast<std::size_t>(n * n), 0);
  for (const auto& entry : entries) {
    const auto mask = mask_from_runs(entry.length(), entry.mask_groups);
    for (std::int64_t p = 0; p < entry.length(); ++p) {
      const auto row = mask.row(p);
      const std::int64_t query = entry.token_ids[p];
      if (query < 0 || query >= n) {
        throw PreconditionError(fmt::format("token id {} outside [0, {})", query, n));
      }
      for (std::int64_t q = 0; q < entry.length(); ++q) {
        if (row[q]) ++counts[query * n + entry.token_ids[q]];
      }
    }
  }
  CoverageReport report;
  report.min_count = std::numeric_limits<std::uint32_t>::max();
  for (std::int64_t i = 0; i < n * n; ++i) {
    report.min_count = std::min(report.min_count, counts[i]);
    report.max_count = std::max(report.max_count, counts[i]);
    if (counts[i] != 1 && !report.first_violation) report.first_violation = {{i / n, i % n}};
  }
  report.pass = !report.first_violation.has_value();
  return report;
}

}  // namespace cqsa
