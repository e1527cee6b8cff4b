#include <gtest/gtest.h>

#include <random>

#include "cafewidth/binplan.hpp"
#include "test_graphs.hpp"

namespace cafewidth {
namespace {

// 1x1 chain at H=W=1: eps(g1) = input + n2, eps(g2) = n1 + classes.
NetworkGraph chain_with_eps(int input, int n1, int n2, int classes) {
  return NetworkGraph({{0, LayerKind::Conv, 1, 1, 1, n1, "g1", "input"},
                       {0, LayerKind::Conv, 1, 1, 1, n2, "g2", "g1"},
                       {0, LayerKind::Dense, 1, 1, 1, classes, "output", "g2"}},
                      input, classes, 1, 1);
}

NetworkGraph single_group(int n) {
  return NetworkGraph({{0, LayerKind::Conv, 1, 1, 1, n, "g", "input"}, {0, LayerKind::Dense, 1, 1, 1, 2, "output", "g"}},
                      2, 2, 1, 1);
}

TEST(PlanBins, EqualSensitivityGivesBeta) {
  // eps(g1) = 10 + 10, eps(g2) = 18 + 2
  const auto g = chain_with_eps(10, 18, 10, 2);
  ASSERT_EQ(sensitivity(g, "g1"), sensitivity(g, "g2"));
  const auto plan = plan_bins(g, Rational(1));
  EXPECT_EQ(plan.at("g1").bin_size, 1);
  EXPECT_EQ(plan.at("g2").bin_size, 1);
  const auto plan2 = plan_bins(g, Rational(2));
  EXPECT_EQ(plan2.at("g1").bin_size, 2);
  EXPECT_EQ(plan2.at("g2").bin_size, 2);
}

TEST(PlanBins, HandEvaluatedSizes) {
  const auto g = chain_with_eps(40, 38, 40, 2);
  ASSERT_EQ(sensitivity(g, "g1"), 80u);
  ASSERT_EQ(sensitivity(g, "g2"), 40u);
  const auto plan = plan_bins(g, Rational(1));
  EXPECT_EQ(plan.at("g1").bin_size, 1);
  EXPECT_EQ(plan.at("g2").bin_size, 2);

  const auto g30 = chain_with_eps(40, 28, 40, 2);
  ASSERT_EQ(sensitivity(g30, "g2"), 30u);
  EXPECT_EQ(plan_bins(g30, Rational(1)).at("g2").bin_size, 3);
}

TEST(PlanBins, RoundingTiesToEven) {
  EXPECT_EQ(sensitive_bin_size(Rational(1), 80, 32, 100), 2);  // 2.5
  EXPECT_EQ(sensitive_bin_size(Rational(1), 56, 16, 100), 4);  // 3.5
  EXPECT_EQ(sensitive_bin_size(Rational(1, 4), 10, 10, 100), 1);  // clamp up
  EXPECT_EQ(sensitive_bin_size(Rational(50), 10, 10, 7), 7);  // clamp to n
}

TEST(PlanBins, EmptyGraphRejected) {
  EXPECT_THROW(BinPlan(std::vector<GroupBins>{}), EmptyPlanError);
}

TEST(PlanBins, IntegerAtLeastOneAndPartition) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 300; ++trial) {
    const auto g = fixtures::random_graph(rng, 6, 64);
    const Rational beta = std::vector<Rational>{{1, 4}, {1, 2}, 1, 2, 3}[static_cast<std::size_t>(trial % 5)];
    const auto plan = plan_bins(g, beta);
    for (const auto& gb : plan.groups()) {
      ASSERT_GE(gb.bin_size, 1);
      ASSERT_LE(gb.bin_size, gb.max_width);
      const auto sizes = gb.sizes();
      int sum = 0;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        sum += sizes[k];
        if (k + 1 < sizes.size()) ASSERT_EQ(sizes[k], gb.bin_size);
        ASSERT_LE(sizes[k], gb.bin_size);
        ASSERT_GE(sizes[k], 1);
      }
      ASSERT_EQ(sum, gb.max_width);
      ASSERT_EQ(gb.bin_count(), (gb.max_width + gb.bin_size - 1) / gb.bin_size);
    }
  }
}

TEST(PlanBins, EqualizedSensitivityWithinRoundingSlack) {
  std::mt19937_64 rng(17);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const auto g = fixtures::random_graph(rng, 6, 64);
    const Rational beta(1 + trial % 3);
    Flops max_eps = 0;
    for (const auto& gr : g.groups()) max_eps = std::max(max_eps, sensitivity(g, gr));
    bool unclamped = true;
    for (const auto& gr : g.groups()) {
      const double raw = beta.to_double() * static_cast<double>(max_eps) / static_cast<double>(sensitivity(g, gr));
      if (raw < 1.0 || raw + 0.5 > g.max_width(gr)) unclamped = false;
    }
    if (!unclamped) continue;
    ++checked;
    const auto plan = plan_bins(g, beta);
    double lo = 1e300, hi = 0;
    for (const auto& gb : plan.groups()) {
      const double v = static_cast<double>(gb.bin_size) * static_cast<double>(sensitivity(g, gb.group));
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    ASSERT_LE(hi / lo, 3.0 + 1e-12);
  }
  EXPECT_GT(checked, 50);
}

TEST(PlanUniformBins, Examples) {
  EXPECT_EQ(plan_uniform_bins(single_group(8), 4).at("g").sizes(), (std::vector<int>{2, 2, 2, 2}));
  EXPECT_EQ(plan_uniform_bins(single_group(7), 4).at("g").sizes(), (std::vector<int>{2, 2, 2, 1}));
  EXPECT_EQ(plan_uniform_bins(single_group(3), 8).at("g").sizes(), (std::vector<int>{1, 1, 1}));
  EXPECT_THROW(plan_uniform_bins(single_group(3), 0), std::invalid_argument);
}

TEST(WidthsFromBins, Examples) {
  const BinPlan p8({GroupBins::with_bin_size("g", 8, 2)});
  EXPECT_EQ(widths_from_bins(p8, BinCounts{{"g", 3}}).at("g"), 6);
  EXPECT_EQ(widths_from_bins(p8, BinCounts{{"g", 4}}).at("g"), 8);
  const BinPlan p7({GroupBins::with_bin_size("g", 7, 3)});
  EXPECT_EQ(p7.at("g").sizes(), (std::vector<int>{3, 3, 1}));
  EXPECT_EQ(widths_from_bins(p7, BinCounts{{"g", 3}}).at("g"), 7);
  EXPECT_THROW(widths_from_bins(p7, BinCounts{{"g", 4}}), InvalidWidthError);
  EXPECT_THROW(widths_from_bins(p7, BinCounts{{"g", 0}}), InvalidWidthError);
  EXPECT_EQ(bins_from_widths(p7, WidthVector{{"g", 6}}).at("g"), 2);
}

TEST(WidthsFromBins, StrictlyIncreasing) {
  for (int n = 1; n <= 40; ++n) {
    for (int b = 1; b <= n; ++b) {
      const BinPlan p({GroupBins::with_bin_size("g", n, b)});
      int prev = 0;
      for (int k = 1; k <= p.at("g").bin_count(); ++k) {
        const int c = widths_from_bins(p, BinCounts{{"g", k}}).at("g");
        ASSERT_GT(c, prev);
        prev = c;
      }
      ASSERT_EQ(prev, n);
    }
  }
}

BinPlan plan_with_counts(const std::vector<int>& counts) {
  std::vector<GroupBins> groups;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    groups.push_back(GroupBins::with_bin_size("g" + std::to_string(i), counts[i], 1));
  }
  return BinPlan(groups);
}

TEST(SearchSpaceSize, Examples) {
  EXPECT_EQ(search_space_size({plan_with_counts({4, 5})}), 20);
  EXPECT_EQ(search_space_size({plan_with_counts({1})}), 1);
  EXPECT_EQ(search_space_size({plan_with_counts({4, 5}), plan_with_counts({8, 10})}), 100);
  EXPECT_THROW(search_space_size({}), std::invalid_argument);
}

TEST(SearchSpaceSize, MatchesBruteForceEnumeration) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 60; ++trial) {
    std::vector<int> counts;
    const int groups = std::uniform_int_distribution<int>(1, 5)(rng);
    long long prod = 1;
    for (int i = 0; i < groups; ++i) {
      const int b = std::uniform_int_distribution<int>(1, 12)(rng);
      if (prod * b > 100000) break;
      counts.push_back(b);
      prod *= b;
    }
    if (counts.empty()) counts.push_back(1);
    const auto plan = plan_with_counts(counts);
    // independent count: odometer over all vectors
    std::vector<int> digit(counts.size(), 1);
    long long seen = 0;
    while (true) {
      ++seen;
      std::size_t i = 0;
      while (i < digit.size() && digit[i] == counts[i]) digit[i++] = 1;
      if (i == digit.size()) break;
      ++digit[i];
    }
    ASSERT_EQ(search_space_size({plan}), seen);
    ASSERT_EQ(static_cast<long long>(enumerate_bin_vectors(plan).size()), seen);
  }
}

TEST(SearchSpaceSize, ScientificRendering) {
  EXPECT_EQ(to_scientific(BigInt(20)), "2.0e1");
  EXPECT_EQ(to_scientific(BigInt(7)), "7.0e0");
  EXPECT_EQ(to_scientific(BigInt("1500000000000000000000000000")), "1.5e27");
}

TEST(MakeSchedule, LinearBudgets) {
  const auto s = make_schedule(400, 200, 4, Rational(1), Rational(2));
  EXPECT_EQ(s.budgets, (std::vector<Flops>{400, 350, 300, 250, 200}));
  const auto one = make_schedule(977, 13, 1, Rational(1), Rational(2));
  EXPECT_EQ(one.budgets, (std::vector<Flops>{977, 13}));
}

TEST(MakeSchedule, BetaSequence) {
  const auto s = make_schedule(400, 200, 3, Rational(1), Rational(2));
  EXPECT_EQ(s.betas, (std::vector<Rational>{Rational(1), Rational(1, 2), Rational(1, 4)}));
  EXPECT_EQ(s.stage_beta(1), Rational(1));
  EXPECT_EQ(s.stage_budget(3), 200u);
  for (std::size_t t = 0; t + 1 < s.betas.size(); ++t) EXPECT_EQ(s.betas[t + 1], s.betas[t] / s.alpha);
}

TEST(MakeSchedule, Errors) {
  EXPECT_THROW(make_schedule(100, 101, 2, Rational(1), Rational(2)), InfeasibleBudgetError);
  EXPECT_THROW(make_schedule(100, 50, 0, Rational(1), Rational(2)), std::invalid_argument);
  EXPECT_THROW(make_schedule(100, 50, 2, Rational(1), Rational(0)), std::invalid_argument);
}

TEST(MakeSchedule, EndpointsAndSecondDifference) {
  std::mt19937_64 rng(29);
  for (int trial = 0; trial < 500; ++trial) {
    const Flops f0 = std::uniform_int_distribution<Flops>(1, 1'000'000'000)(rng);
    const Flops fb = std::uniform_int_distribution<Flops>(0, f0)(rng);
    const int stages = std::uniform_int_distribution<int>(1, 9)(rng);
    const auto s = make_schedule(f0, fb, stages, Rational(1), Rational(2));
    ASSERT_EQ(s.budgets.front(), f0);
    ASSERT_EQ(s.budgets.back(), fb);
    for (std::size_t t = 0; t + 1 < s.budgets.size(); ++t) ASSERT_GE(s.budgets[t], s.budgets[t + 1]);
    for (std::size_t t = 0; t + 2 < s.budgets.size(); ++t) {
      const long long d2 = static_cast<long long>(s.budgets[t]) - 2 * static_cast<long long>(s.budgets[t + 1]) +
                           static_cast<long long>(s.budgets[t + 2]);
      ASSERT_LE(std::llabs(d2), 1);
    }
  }
}

TEST(RationalParse, Forms) {
  EXPECT_EQ(Rational::parse("0.25"), Rational(1, 4));
  EXPECT_EQ(Rational::parse("3/6"), Rational(1, 2));
  EXPECT_EQ(Rational::parse("2"), Rational(2));
  EXPECT_EQ(Rational::parse("-1.5"), Rational(-3, 2));
  EXPECT_THROW(Rational::parse("abc"), std::invalid_argument);
  EXPECT_THROW(Rational::parse("1/0"), std::invalid_argument);
}

}  // namespace
}  // namespace cafewidth
