#include "cqsa/quorum.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <map>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "cqsa/errors.hpp"

namespace cqsa {
namespace {

std::int64_t mod(std::int64_t a, std::int64_t c) {
  const std::int64_t r = a % c;
  return r < 0 ? r + c : r;
}

// Rotates a valid set so that it contains the consecutive pair (0, 1).
std::vector<std::int64_t> rotate_to_unit_prefix(std::span<const std::int64_t> offsets,
                                                std::int64_t c) {
  std::vector<std::int64_t> out(offsets.begin(), offsets.end());
  if (c < 3) return out;
  for (std::int64_t a : offsets) {
    if (std::find(offsets.begin(), offsets.end(), mod(a + 1, c)) != offsets.end()) {
      for (auto& v : out) v = mod(v - a, c);
      std::sort(out.begin(), out.end());
      return out;
    }
  }
  // Unreachable for a valid set: difference 1 is always present once.
  throw PreconditionError("interest set has no pair with difference 1");
}

// Depth-first search over increasing offsets, pruning as soon as a difference
// repeats. Visits candidates in lexicographic order.
class DifferenceSetSearch {
 public:
  DifferenceSetSearch(std::int64_t c, std::int64_t l)
      : c_(c), l_(l), used_(static_cast<std::size_t>(c), false) {}

  std::optional<std::vector<std::int64_t>> run() {
    chosen_ = {0, 1};
    used_[1] = true;
    used_[static_cast<std::size_t>(c_ - 1)] = true;
    if (extend(1)) return chosen_;
    return std::nullopt;
  }

 private:
  bool extend(std::int64_t last) {
    if (static_cast<std::int64_t>(chosen_.size()) == l_) return true;
    for (std::int64_t v = last + 1; v < c_; ++v) {
      std::vector<std::int64_t> marked;
      bool ok = true;
      for (std::int64_t a : chosen_) {
        const std::int64_t d1 = mod(v - a, c_);
        const std::int64_t d2 = mod(a - v, c_);
        if (d1 == d2 || used_[d1] || used_[d2]) {
          ok = false;
          break;
        }
        used_[d1] = used_[d2] = true;
        marked.push_back(d1);
        marked.push_back(d2);
      }
      if (ok) {
        chosen_.push_back(v);
        if (extend(v)) return true;
        chosen_.pop_back();
      }
      for (std::int64_t d : marked) used_[d] = false;
    }
    return false;
  }

  std::int64_t c_;
  std::int64_t l_;
  std::vector<bool> used_;
  std::vector<std::int64_t> chosen_;
};

}  // namespace

InterestSet InterestSet::create(std::vector<std::int64_t> offsets, std::int64_t c) {
  if (c < 1) throw PreconditionError(fmt::format("chunk count must be positive, got {}", c));
  if (offsets.empty()) throw PreconditionError("interest set is empty");
  const auto l = static_cast<std::int64_t>(offsets.size());
  if (chunk_count_for(l) != c) {
    throw PreconditionError(
        fmt::format("interest set of size {} requires c = {}, got {}", l, chunk_count_for(l), c));
  }
  if (!validate_interest_set(offsets, c)) {
    throw PreconditionError(fmt::format("({}) is not a difference set mod {}",
                                        fmt::join(offsets, ","), c));
  }
  const std::int64_t base = *std::min_element(offsets.begin(), offsets.end());
  for (auto& v : offsets) v = mod(v - base, c);
  std::sort(offsets.begin(), offsets.end());
  return InterestSet(std::move(offsets), c);
}

std::int64_t chunk_count_for(std::int64_t l) {
  if (l < 1) throw PreconditionError(fmt::format("interest set size must be >= 1, got {}", l));
  return l * (l - 1) + 1;
}

bool validate_interest_set(std::span<const std::int64_t> offsets, std::int64_t c) {
  if (c < 1) throw PreconditionError(fmt::format("chunk count must be positive, got {}", c));
  std::vector<bool> seen(static_cast<std::size_t>(c), false);
  for (std::int64_t v : offsets) {
    if (v < 0 || v >= c) {
      throw PreconditionError(fmt::format("offset {} outside [0, {})", v, c));
    }
    if (seen[v]) throw PreconditionError(fmt::format("duplicate offset {}", v));
    seen[v] = true;
  }
  std::vector<int> hits(static_cast<std::size_t>(c), 0);
  for (std::int64_t a : offsets) {
    for (std::int64_t b : offsets) {
      if (a != b) ++hits[mod(a - b, c)];
    }
  }
  return std::all_of(hits.begin() + 1, hits.end(), [](int h) { return h == 1; });
}

InterestSet paired_interest_set(const InterestSet& set) {
  const std::int64_t c = set.chunk_count();
  if (set.size() < 3) {
    throw PreconditionError(fmt::format("paired set needs l >= 3, got {}", set.size()));
  }
  const auto unit = rotate_to_unit_prefix(set.offsets(), c);
  std::vector<std::int64_t> paired = {0, 1};
  for (auto it = unit.rbegin(); it != unit.rend() - 2; ++it) paired.push_back(c + 1 - *it);
  return InterestSet::create(std::move(paired), c);
}

std::optional<InterestSet> builtin_interest_set(std::int64_t l) {
  // l = 12: the lexicographically smallest (0,1)-prefixed set mod 133.
  static const std::map<std::int64_t, std::vector<std::int64_t>> kTable = {
      {1, {0}},
      {2, {0, 1}},
      {3, {0, 1, 3}},
      {4, {0, 1, 3, 9}},
      {5, {0, 1, 4, 14, 16}},
      {6, {0, 1, 3, 8, 12, 18}},
      {8, {0, 1, 3, 13, 32, 36, 43, 52}},
      {9, {0, 1, 3, 7, 15, 31, 36, 54, 63}},
      {10, {0, 1, 3, 9, 27, 49, 56, 61, 77, 81}},
      {12, {0, 1, 3, 12, 20, 34, 38, 81, 88, 94, 104, 109}},
  };
  if (l < 1 || l > 12) {
    throw PreconditionError(fmt::format("builtin interest sets cover 1 <= l <= 12, got {}", l));
  }
  const auto it = kTable.find(l);
  if (it == kTable.end()) return std::nullopt;
  return InterestSet::create(it->second, chunk_count_for(l));
}

std::uint64_t binomial_saturating(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  constexpr auto kMax = std::numeric_limits<std::uint64_t>::max();
  unsigned __int128 acc = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    acc = acc * (n - k + i) / i;
    if (acc > kMax) return kMax;
  }
  return static_cast<std::uint64_t>(acc);
}

std::optional<InterestSet> search_interest_set(std::int64_t c, std::int64_t l,
                                               std::uint64_t candidate_cap) {
  if (chunk_count_for(l) != c) {
    throw PreconditionError(fmt::format("search requires c = l(l-1)+1, got c={} l={}", c, l));
  }
  if (l == 1) return InterestSet::create({0}, 1);
  const std::uint64_t space = binomial_saturating(static_cast<std::uint64_t>(c - 2),
                                                  static_cast<std::uint64_t>(l - 2));
  if (space > candidate_cap) {
    throw PreconditionError(fmt::format(
        "search space C({},{}) = {} exceeds cap {}; use the builtin table", c - 2, l - 2,
        space, candidate_cap));
  }
  auto found = DifferenceSetSearch(c, l).run();
  if (!found) return std::nullopt;
  return InterestSet::create(std::move(*found), c);
}

std::string to_string(const InterestSet& set) {
  return fmt::format("c={} I=({})", set.chunk_count(), fmt::join(set.offsets(), ","));
}

InterestSet parse_interest_set(std::string_view text) {
  const auto fail = [&] {
    return FormatError(fmt::format("expected 'c=<c> I=(o1,o2,...)', got '{}'", text));
  };
  auto parse_int = [&](std::string_view s) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw fail();
    return v;
  };
  if (!text.starts_with("c=")) throw fail();
  const auto space = text.find(" I=(");
  if (space == std::string_view::npos || !text.ends_with(")")) throw fail();
  const std::int64_t c = parse_int(text.substr(2, space - 2));
  std::string_view body = text.substr(space + 4, text.size() - space - 5);
  std::vector<std::int64_t> offsets;
  while (!body.empty()) {
    const auto comma = body.find(',');
    offsets.push_back(parse_int(body.substr(0, comma)));
    if (comma == std::string_view::npos) break;
    body.remove_prefix(comma + 1);
  }
  return InterestSet::create(std::move(offsets), c);
}

}  // namespace cqsa
