#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cqsa {

/// Cyclic (c, l, 1) difference set used as the base pattern of a cyclic
/// quorum system. Every nonzero residue mod c occurs exactly once as a
/// difference of two offsets, so the c cyclic shifts of the pattern cover
/// every pair of chunks exactly once.
///
/// Instances are always valid and canonical: offsets sorted ascending,
/// offsets[0] == 0 and c == l(l-1)+1.
class InterestSet {
 public:
  /// Validates and canonicalizes. Throws PreconditionError if the offsets are
  /// not a planar difference set for c.
  static InterestSet create(std::vector<std::int64_t> offsets, std::int64_t c);

  std::int64_t chunk_count() const noexcept { return c_; }
  std::int64_t size() const noexcept { return static_cast<std::int64_t>(offsets_.size()); }
  std::span<const std::int64_t> offsets() const noexcept { return offsets_; }

  friend bool operator==(const InterestSet&, const InterestSet&) = default;

 private:
  InterestSet(std::vector<std::int64_t> offsets, std::int64_t c)
      : offsets_(std::move(offsets)), c_(c) {}

  std::vector<std::int64_t> offsets_;
  std::int64_t c_;
};

/// Number of chunks c = l(l-1)+1 for interest sets of size l.
std::int64_t chunk_count_for(std::int64_t l);

/// True iff every nonzero residue mod c appears exactly once among the
/// ordered pairwise differences. Throws PreconditionError on duplicate or
/// out-of-range offsets.
bool validate_interest_set(std::span<const std::int64_t> offsets, std::int64_t c);

/// The companion set (0, 1, c+1-a_{l-1}, ..., c+1-a_2) of a set written in
/// (0, 1, a_2, ..., a_{l-1}) form. Requires l >= 3.
InterestSet paired_interest_set(const InterestSet& set);

/// Reference table for l = 1..12. Returns nullopt for l = 7 and l = 11,
/// where no cyclic difference set exists.
std::optional<InterestSet> builtin_interest_set(std::int64_t l);

inline constexpr std::uint64_t kDefaultSearchCap = 100'000'000;

/// Lexicographically smallest valid set with prefix (0, 1), by exhaustive
/// search. The search space C(c-2, l-2) must not exceed `candidate_cap`.
std::optional<InterestSet> search_interest_set(std::int64_t c, std::int64_t l,
                                               std::uint64_t candidate_cap = kDefaultSearchCap);

/// Binomial coefficient, saturating at UINT64_MAX.
std::uint64_t binomial_saturating(std::uint64_t n, std::uint64_t k);

/// "c=7 I=(0,1,3)"
std::string to_string(const InterestSet& set);
InterestSet parse_interest_set(std::string_view text);

}  // namespace cqsa
