#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "cqsa/quorum.hpp"

namespace cqsa {

/// c contiguous chunks covering [0, length). The first (length mod c) chunks
/// hold one extra token.
struct ChunkLayout {
  std::vector<std::int64_t> starts;
  std::vector<std::int64_t> ends;  // exclusive
  std::int64_t length = 0;

  std::int64_t chunk_size(std::size_t u) const { return ends[u] - starts[u]; }
  std::size_t chunk_count() const { return starts.size(); }
};

ChunkLayout balanced_chunk_layout(std::int64_t length, std::int64_t c);

/// Half-open interval [begin, end) of local positions.
struct Run {
  std::int64_t begin = 0;
  std::int64_t end = 0;

  std::int64_t size() const { return end - begin; }
  friend auto operator<=>(const Run&, const Run&) = default;
};

/// Positions of one masked chunk occurrence, run-length encoded. The mask
/// zeroes the block group x group.
using RunGroup = std::vector<Run>;

/// One schedulable subsequence task.
struct SubseqEntry {
  std::vector<std::int64_t> quorum;     // (q_1, ..., q_itr)
  std::vector<std::int64_t> token_ids;  // global ids in gather order
  std::vector<RunGroup> mask_groups;    // sorted, unique

  std::int64_t length() const { return static_cast<std::int64_t>(token_ids.size()); }
};

/// Square 0/1 matrix, row-major.
class BinaryMask {
 public:
  explicit BinaryMask(std::int64_t n) : n_(n), bits_(static_cast<std::size_t>(n * n), 1) {}

  std::int64_t size() const noexcept { return n_; }
  bool operator()(std::int64_t p, std::int64_t q) const { return bits_[p * n_ + q] != 0; }
  void clear(std::int64_t p, std::int64_t q) { bits_[p * n_ + q] = 0; }
  std::span<const std::uint8_t> row(std::int64_t p) const {
    return std::span<const std::uint8_t>(bits_).subspan(static_cast<std::size_t>(p * n_),
                                                        static_cast<std::size_t>(n_));
  }
  std::int64_t zero_count() const;

 private:
  std::int64_t n_;
  std::vector<std::uint8_t> bits_;
};

/// Builds all c^itr subsequences in lexicographic quorum order. At every
/// depth the chunk equal to the quorum coordinate is the owner; every other
/// selected chunk contributes a mask group, remapped through later gathers.
std::vector<SubseqEntry> build_subseq(std::int64_t n, std::int64_t itr, const InterestSet& set);

/// Same, validating raw offsets against c first.
std::vector<SubseqEntry> build_subseq(std::int64_t n, std::int64_t c, std::int64_t itr,
                                      std::span<const std::int64_t> offsets);

/// Maximal runs of a sorted, distinct index list.
std::vector<Run> indices_to_runs(std::span<const std::int64_t> indices);

BinaryMask mask_from_runs(std::int64_t length, std::span<const RunGroup> groups);

struct CoverageReport {
  bool pass = false;
  std::uint32_t min_count = 0;
  std::uint32_t max_count = 0;
  std::optional<std::pair<std::int64_t, std::int64_t>> first_violation;  // (query, key)
};

/// Counts, for every ordered token pair, the entries in which both tokens
/// appear unmasked. Passes iff every count is exactly one.
CoverageReport coverage_check(std::span<const SubseqEntry> entries, std::int64_t n);

/// c^itr, or nullopt on 64-bit overflow.
std::optional<std::int64_t> checked_power(std::int64_t c, std::int64_t itr);

}  // namespace cqsa
