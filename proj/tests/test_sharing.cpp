#include <gtest/gtest.h>

#include <algorithm>

#include "cafewidth/sharing.hpp"

namespace cafewidth {
namespace {

TEST(FixedAssignment, Examples) {
  EXPECT_EQ(fixed_assignment(4, 6), (IndexSet{1, 2, 3, 4}));
  EXPECT_EQ(fixed_assignment(1, 6), (IndexSet{1}));
  EXPECT_EQ(fixed_assignment(6, 6), (IndexSet{1, 2, 3, 4, 5, 6}));
  EXPECT_THROW(fixed_assignment(0, 6), InvalidWidthError);
  EXPECT_THROW(fixed_assignment(7, 6), InvalidWidthError);
}

TEST(FreeZone, Examples) {
  auto z = free_zone(4, 1, 6);
  EXPECT_EQ(z.first, 3);
  EXPECT_EQ(z.last, 5);
  z = free_zone(1, 1, 6);
  EXPECT_EQ(z.first, 1);
  EXPECT_EQ(z.last, 2);
  z = free_zone(6, 1, 6);
  EXPECT_EQ(z.first, 5);
  EXPECT_EQ(z.last, 6);
}

TEST(EnumerateAssignments, Examples) {
  EXPECT_EQ(enumerate_assignments(4, 1, 6),
            (std::vector<IndexSet>{{1, 2, 3, 4}, {1, 2, 3, 5}, {1, 2, 4, 5}}));
  EXPECT_EQ(enumerate_assignments(6, 1, 6), (std::vector<IndexSet>{{1, 2, 3, 4, 5, 6}}));
  EXPECT_EQ(enumerate_assignments(1, 1, 6), (std::vector<IndexSet>{{1}, {2}}));
  for (int c = 1; c <= 9; ++c) {
    EXPECT_EQ(enumerate_assignments(c, 0, 9), (std::vector<IndexSet>{fixed_assignment(c, 9)}));
  }
}

TEST(SharingDegree, Examples) {
  EXPECT_EQ(sharing_degree(fixed_assignment(3, 8), fixed_assignment(5, 8)), Rational(1));
  EXPECT_EQ(sharing_degree({1, 2, 4}, {1, 2, 3, 5, 6}), Rational(2, 3));
  EXPECT_EQ(sharing_degree({2, 5, 7}, {2, 5, 7}), Rational(1));
  EXPECT_EQ(sharing_degree({1}, {2}), Rational(0));
  EXPECT_THROW(sharing_degree({}, {1}), std::invalid_argument);
}

// Independent oracle: filter every subset of [1, B] by the base / zone rule.
std::vector<IndexSet> brute_force_assignments(int c, int r, int total) {
  const int cb = std::max(c - r - 1, 0);
  std::vector<IndexSet> out;
  for (unsigned mask = 0; mask < (1u << total); ++mask) {
    IndexSet s;
    for (int i = 0; i < total; ++i) {
      if (mask & (1u << i)) s.push_back(i + 1);
    }
    if (static_cast<int>(s.size()) != c) continue;
    bool ok = true;
    for (int i = 1; i <= cb; ++i) ok = ok && std::binary_search(s.begin(), s.end(), i);
    for (int v : s) ok = ok && (v <= cb || (v >= c - r && v <= c + r));
    if (ok) out.push_back(s);
  }
  std::sort(out.begin(), out.end());
  return out;
}

TEST(EnumerateAssignments, MatchesBruteForceOracle) {
  for (int total = 1; total <= 12; ++total) {
    for (int r = 0; r <= 3; ++r) {
      for (int c = 1; c <= total; ++c) {
        const auto got = enumerate_assignments(c, r, total);
        ASSERT_TRUE(std::is_sorted(got.begin(), got.end()));
        ASSERT_EQ(got, brute_force_assignments(c, r, total)) << "c=" << c << " r=" << r << " B=" << total;
      }
    }
  }
}

TEST(EnumerateAssignments, InteriorCountIsBinomial) {
  const int expected[] = {1, 3, 10, 35};
  for (int r = 0; r <= 3; ++r) {
    for (int c = r + 1; c + r <= 30; ++c) {
      ASSERT_EQ(static_cast<int>(enumerate_assignments(c, r, 30).size()), expected[r]) << "c=" << c << " r=" << r;
    }
  }
}

TEST(SharingDegree, FixedPatternAlwaysOne) {
  for (int total = 1; total <= 64; ++total) {
    for (int c = 1; c <= total; ++c) {
      for (int d = 1; d <= total; ++d) {
        ASSERT_EQ(sharing_degree(fixed_assignment(c, total), fixed_assignment(d, total)), Rational(1));
      }
    }
  }
}

TEST(SharingDegree, LocallyFreeBounds) {
  for (int total = 1; total <= 64; ++total) {
    for (int r = 0; r <= 3; ++r) {
      for (int c = 1; c <= total; ++c) {
        const Rational lower(base_count(c, r), c);
        for (const auto& s : enumerate_assignments(c, r, total)) {
          ASSERT_EQ(static_cast<int>(s.size()), c);
          for (int i = 1; i <= base_count(c, r); ++i) ASSERT_EQ(s[static_cast<std::size_t>(i - 1)], i);
          const Rational d = sharing_degree(s, fixed_assignment(c, total));
          ASSERT_LE(lower, d);
          ASSERT_LE(d, Rational(1));
        }
      }
    }
  }
}

BinPlan two_group_plan(int n1, int b1, int n2, int b2) {
  return BinPlan({GroupBins::with_bin_size("a", n1, b1), GroupBins::with_bin_size("b", n2, b2)});
}

TEST(CandidateSubnets, SharedCombinationCounts) {
  const auto plan = two_group_plan(10, 1, 12, 2);  // 10 and 6 bins
  const BinCounts interior{{"a", 5}, {"b", 3}};
  EXPECT_EQ(candidate_subnets(interior, plan, 0, CandidatePolicy::shared()).size(), 1u);
  EXPECT_EQ(candidate_subnets(interior, plan, 0, CandidatePolicy::shared()).front(), fixed_pattern(interior, plan));
  EXPECT_EQ(candidate_subnets(interior, plan, 1, CandidatePolicy::shared()).size(), 3u);
  EXPECT_EQ(candidate_subnets(interior, plan, 2, CandidatePolicy::shared()).size(), 10u);
  // group b at its edge has 1 option; it repeats while group a cycles through 3
  const auto edge = candidate_subnets(BinCounts{{"a", 5}, {"b", 6}}, plan, 1, CandidatePolicy::shared());
  ASSERT_EQ(edge.size(), 3u);
  for (const auto& p : edge) EXPECT_EQ(p.groups.at("b").units(), fixed_assignment(6, 6));
  EXPECT_NE(edge[0].groups.at("a").units(), edge[1].groups.at("a").units());
}

TEST(CandidateSubnets, NeverMoreThanBinomial) {
  const auto plan = two_group_plan(9, 1, 7, 1);
  for (int r = 0; r <= 3; ++r) {
    const std::size_t cap = std::vector<std::size_t>{1, 3, 10, 35}[static_cast<std::size_t>(r)];
    for (int a = 1; a <= 9; ++a) {
      for (int b = 1; b <= 7; ++b) {
        const auto cands = candidate_subnets(BinCounts{{"a", a}, {"b", b}}, plan, r, CandidatePolicy::shared());
        ASSERT_LE(cands.size(), cap);
        ASSERT_GE(cands.size(), 1u);
      }
    }
  }
}

TEST(CandidateSubnets, SampledPolicy) {
  const auto plan = two_group_plan(10, 1, 12, 2);
  const BinCounts w{{"a", 5}, {"b", 3}};
  const auto s1 = candidate_subnets(w, plan, 1, CandidatePolicy::sampled(7, 42));
  const auto s2 = candidate_subnets(w, plan, 1, CandidatePolicy::sampled(7, 42));
  ASSERT_EQ(s1.size(), 7u);
  for (std::size_t i = 0; i < s1.size(); ++i) EXPECT_EQ(s1[i], s2[i]);
  const auto all = enumerate_assignments(5, 1, 10);
  for (const auto& p : s1) {
    EXPECT_NE(std::find(all.begin(), all.end(), p.groups.at("a").units()), all.end());
  }
  EXPECT_THROW(candidate_subnets(w, plan, 1, CandidatePolicy::sampled(0)), ConfigError);
}

TEST(CandidatePolicy, Parse) {
  EXPECT_EQ(CandidatePolicy::parse("shared").kind, CandidatePolicy::Kind::SharedCombination);
  const auto p = CandidatePolicy::parse("sampled:5");
  EXPECT_EQ(p.kind, CandidatePolicy::Kind::IndependentSampled);
  EXPECT_EQ(p.samples, 5);
  EXPECT_THROW(CandidatePolicy::parse("sampled:0"), ConfigError);
  EXPECT_THROW(CandidatePolicy::parse("greedy"), ConfigError);
}

TEST(ToChannels, MapsBinsToChannelRanges) {
  const BinPlan plan({GroupBins::with_bin_size("g", 7, 3)});  // bins {0,1,2} {3,4,5} {6}
  AssignmentPattern p;
  p.groups["g"] = split_assignment({1, 3}, 2, 1);
  EXPECT_EQ(to_channels(p, plan).at("g"), (std::vector<int>{0, 1, 2, 6}));
  p.groups["g"] = split_assignment({2, 3}, 2, 1);
  EXPECT_EQ(to_channels(p, plan).at("g"), (std::vector<int>{3, 4, 5, 6}));
  EXPECT_EQ(to_channels(fixed_pattern(BinCounts{{"g", 2}}, plan), plan).at("g"), (std::vector<int>{0, 1, 2, 3, 4, 5}));
}

}  // namespace
}  // namespace cafewidth
