#include <gtest/gtest.h>

#include <set>

#include "cqsa/errors.hpp"
#include "cqsa/quorum.hpp"

namespace cqsa {
namespace {

using Offsets = std::vector<std::int64_t>;

Offsets offsets_of(const InterestSet& s) { return {s.offsets().begin(), s.offsets().end()}; }

// Independent brute-force check: all ordered differences distinct and nonzero.
bool differences_distinct(const Offsets& o, std::int64_t c) {
  std::set<std::int64_t> seen;
  for (std::size_t i = 0; i < o.size(); ++i) {
    for (std::size_t j = 0; j < o.size(); ++j) {
      if (i == j) continue;
      if (!seen.insert(((o[i] - o[j]) % c + c) % c).second) return false;
    }
  }
  return static_cast<std::int64_t>(seen.size()) == c - 1 && !seen.contains(0);
}

TEST(ChunkCount, FollowsLTimesLMinusOnePlusOne) {
  EXPECT_EQ(chunk_count_for(1), 1);
  EXPECT_EQ(chunk_count_for(2), 3);
  EXPECT_EQ(chunk_count_for(3), 7);
  EXPECT_EQ(chunk_count_for(12), 133);
  EXPECT_THROW(chunk_count_for(0), PreconditionError);
}

TEST(Validate, KnownSets) {
  EXPECT_TRUE(validate_interest_set(Offsets{0, 1, 3}, 7));
  EXPECT_TRUE(validate_interest_set(Offsets{0, 1, 3, 9}, 13));
  EXPECT_FALSE(validate_interest_set(Offsets{0, 1, 2}, 7));
  EXPECT_TRUE(validate_interest_set(Offsets{0}, 1));
  EXPECT_TRUE(validate_interest_set(Offsets{0, 1}, 3));
}

TEST(Validate, RejectsDuplicatesAndOutOfRange) {
  EXPECT_THROW(validate_interest_set(Offsets{0, 1, 1}, 7), PreconditionError);
  EXPECT_THROW(validate_interest_set(Offsets{0, 1, 7}, 7), PreconditionError);
  EXPECT_THROW(validate_interest_set(Offsets{-1, 1, 3}, 7), PreconditionError);
}

TEST(Validate, WrongSizeForCIsFalse) {
  EXPECT_FALSE(validate_interest_set(Offsets{0, 1, 3}, 13));
  EXPECT_FALSE(validate_interest_set(Offsets{0, 1}, 7));
}

TEST(InterestSet, CreateCanonicalizes) {
  const auto s = InterestSet::create({3, 4, 6}, 7);
  EXPECT_EQ(offsets_of(s), (Offsets{0, 1, 3}));
  EXPECT_EQ(s.chunk_count(), 7);
  EXPECT_EQ(s.size(), 3);
  EXPECT_THROW(InterestSet::create({0, 1, 2}, 7), PreconditionError);
}

TEST(Paired, KnownExamples) {
  const auto p7 = paired_interest_set(InterestSet::create({0, 1, 3}, 7));
  EXPECT_EQ(offsets_of(p7), (Offsets{0, 1, 5}));
  const auto p13 = paired_interest_set(InterestSet::create({0, 1, 3, 9}, 13));
  EXPECT_EQ(offsets_of(p13), (Offsets{0, 1, 5, 11}));
  EXPECT_TRUE(validate_interest_set(p13.offsets(), 13));
}

TEST(Paired, TwiceStillValid) {
  for (std::int64_t l : {3, 4, 5, 6, 8, 9, 10, 12}) {
    const auto base = *builtin_interest_set(l);
    const auto once = paired_interest_set(base);
    const auto twice = paired_interest_set(once);
    EXPECT_TRUE(validate_interest_set(once.offsets(), base.chunk_count())) << l;
    EXPECT_TRUE(validate_interest_set(twice.offsets(), base.chunk_count())) << l;
  }
}

TEST(Paired, RejectsSmallSets) {
  EXPECT_THROW(paired_interest_set(InterestSet::create({0, 1}, 3)), PreconditionError);
}

TEST(Builtin, TableEntries) {
  EXPECT_EQ(offsets_of(*builtin_interest_set(1)), (Offsets{0}));
  EXPECT_EQ(offsets_of(*builtin_interest_set(2)), (Offsets{0, 1}));
  EXPECT_EQ(offsets_of(*builtin_interest_set(5)), (Offsets{0, 1, 4, 14, 16}));
  EXPECT_EQ(builtin_interest_set(5)->chunk_count(), 21);
  EXPECT_EQ(offsets_of(*builtin_interest_set(10)), (Offsets{0, 1, 3, 9, 27, 49, 56, 61, 77, 81}));
  EXPECT_FALSE(builtin_interest_set(7).has_value());
  EXPECT_FALSE(builtin_interest_set(11).has_value());
  EXPECT_THROW(builtin_interest_set(0), PreconditionError);
  EXPECT_THROW(builtin_interest_set(13), PreconditionError);
}

TEST(Builtin, EveryEntryHasDistinctDifferences) {
  for (std::int64_t l = 1; l <= 12; ++l) {
    const auto s = builtin_interest_set(l);
    if (!s) continue;
    EXPECT_TRUE(differences_distinct(offsets_of(*s), s->chunk_count())) << "l=" << l;
  }
}

TEST(Search, SmallCases) {
  EXPECT_EQ(offsets_of(*search_interest_set(7, 3)), (Offsets{0, 1, 3}));
  EXPECT_EQ(offsets_of(*search_interest_set(13, 4)), (Offsets{0, 1, 3, 9}));
  EXPECT_EQ(offsets_of(*search_interest_set(21, 5)), (Offsets{0, 1, 4, 14, 16}));
}

TEST(Search, LexicographicMinimumByEnumeration) {
  // c=13: all C(11,2) candidates (0,1,a,b).
  Offsets best;
  for (std::int64_t a = 2; a < 13 && best.empty(); ++a) {
    for (std::int64_t b = a + 1; b < 13; ++b) {
      if (differences_distinct({0, 1, a, b}, 13)) {
        best = {0, 1, a, b};
        break;
      }
    }
  }
  EXPECT_EQ(offsets_of(*search_interest_set(13, 4)), best);
}

TEST(Search, NoSetForSeven) { EXPECT_FALSE(search_interest_set(43, 7).has_value()); }

TEST(Search, AgreesWithBuiltinOnExistence) {
  for (std::int64_t l = 1; l <= 7; ++l) {
    EXPECT_EQ(search_interest_set(chunk_count_for(l), l).has_value(), builtin_interest_set(l).has_value())
        << "l=" << l;
  }
}

TEST(Search, RejectsOverCapAndBadShape) {
  EXPECT_THROW(search_interest_set(133, 12), PreconditionError);
  EXPECT_THROW(search_interest_set(21, 4), PreconditionError);
  EXPECT_THROW(search_interest_set(13, 4, 10), PreconditionError);
}

TEST(Binomial, Values) {
  EXPECT_EQ(binomial_saturating(5, 1), 5u);
  EXPECT_EQ(binomial_saturating(11, 2), 55u);
  EXPECT_EQ(binomial_saturating(41, 5), 749398u);
  EXPECT_EQ(binomial_saturating(3, 5), 0u);
  EXPECT_EQ(binomial_saturating(1000, 500), UINT64_MAX);
}

TEST(Text, RoundTrip) {
  const auto s = *builtin_interest_set(4);
  EXPECT_EQ(to_string(s), "c=13 I=(0,1,3,9)");
  EXPECT_EQ(parse_interest_set(to_string(s)), s);
  EXPECT_THROW(parse_interest_set("c=7 (0,1,3)"), FormatError);
  EXPECT_THROW(parse_interest_set("c=7 I=(0,1,2)"), PreconditionError);
}

// Property: every cyclic shift of a valid set validates.
TEST(Property, CyclicShiftClosure) {
  for (std::int64_t l : {2, 3, 4, 5, 6, 8, 9}) {
    const auto s = *builtin_interest_set(l);
    const std::int64_t c = s.chunk_count();
    for (std::int64_t shift = 0; shift < c; ++shift) {
      Offsets shifted;
      for (auto o : s.offsets()) shifted.push_back((o + shift) % c);
      EXPECT_TRUE(validate_interest_set(shifted, c)) << "l=" << l << " shift=" << shift;
    }
  }
}

// Property: differences of a valid set have cardinality c-1 with no repeats.
TEST(Property, DifferenceMultisetIsExact) {
  for (std::int64_t l = 3; l <= 12; ++l) {
    const auto s = builtin_interest_set(l);
    if (!s) continue;
    std::multiset<std::int64_t> diffs;
    for (auto a : s->offsets()) {
      for (auto b : s->offsets()) {
        if (a != b) diffs.insert(((a - b) % s->chunk_count() + s->chunk_count()) % s->chunk_count());
      }
    }
    EXPECT_EQ(static_cast<std::int64_t>(diffs.size()), s->chunk_count() - 1);
    EXPECT_EQ(std::set<std::int64_t>(diffs.begin(), diffs.end()).size(), diffs.size());
  }
}

}  // namespace
}  // namespace cqsa
