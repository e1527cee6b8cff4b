#pragma once

// FLOPs-sensitive bins, search-space accounting and the multi-stage
// budget / minimum-bin-size schedule.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "cafewidth/archgraph.hpp"
#include "cafewidth/errors.hpp"
#include "cafewidth/rational.hpp"
#include <nlohmann/json.hpp>

namespace cafewidth {

using BigInt = boost::multiprecision::cpp_int;

/// Bins of one width group. boundaries[k] is the channel count covered by the
/// first k+1 bins; every bin but the last holds exactly bin_size channels.
struct GroupBins {
  std::string group;
  int max_width = 1;
  int bin_size = 1;
  std::vector<int> boundaries;

  int bin_count() const { return static_cast<int>(boundaries.size()); }

  std::vector<int> sizes() const {
    std::vector<int> s(boundaries.size());
    for (std::size_t k = 0; k < boundaries.size(); ++k) s[k] = boundaries[k] - (k ? boundaries[k - 1] : 0);
    return s;
  }

  /// Channels of 1-based bin `k` as the half-open 0-based range [first, last).
  std::pair<int, int> channel_range(int k) const {
    return {k > 1 ? boundaries[static_cast<std::size_t>(k - 2)] : 0, boundaries[static_cast<std::size_t>(k - 1)]};
  }

  static GroupBins with_bin_size(std::string group, int max_width, int bin_size) {
    GroupBins gb{std::move(group), max_width, bin_size, {}};
    for (int c = bin_size; c < max_width; c += bin_size) gb.boundaries.push_back(c);
    gb.boundaries.push_back(max_width);
    return gb;
  }
};

class BinPlan {
 public:
  BinPlan() = default;
  explicit BinPlan(std::vector<GroupBins> groups) : groups_(std::move(groups)) {
    if (groups_.empty()) throw EmptyPlanError("bin plan has no searchable group");
    for (std::size_t i = 0; i < groups_.size(); ++i) index_[groups_[i].group] = i;
  }

  const std::vector<GroupBins>& groups() const { return groups_; }

  const GroupBins& at(const std::string& g) const {
    auto it = index_.find(g);
    if (it == index_.end()) throw InvalidWidthError("bin plan has no group '" + g + "'");
    return groups_[it->second];
  }

  BinCounts full_bins() const {
    BinCounts b;
    for (const auto& g : groups_) b[g.group] = g.bin_count();
    return b;
  }

  BinCounts min_bins() const {
    BinCounts b;
    for (const auto& g : groups_) b[g.group] = 1;
    return b;
  }

  void check(const BinCounts& bins) const {
    for (const auto& g : groups_) {
      const int k = bins.at(g.group);
      if (k < 1 || k > g.bin_count()) {
        throw InvalidWidthError("group '" + g.group + "' bin count " + std::to_string(k) + " outside [1, " +
                                std::to_string(g.bin_count()) + "]");
      }
    }
    if (bins.size() != groups_.size()) throw InvalidWidthError("bin vector names groups not in the plan");
  }

 private:
  std::vector<GroupBins> groups_;
  std::map<std::string, std::size_t> index_;
};

/// round(beta * max_eps / eps) with ties to even, clamped to [1, max_width].
inline int sensitive_bin_size(const Rational& beta, Flops max_eps, Flops eps, int max_width) {
  if (beta <= Rational(0)) throw std::invalid_argument("beta must be positive");
  if (eps == 0) throw std::invalid_argument("sensitivity must be positive");
  const unsigned __int128 num = static_cast<unsigned __int128>(beta.num()) * max_eps;
  const unsigned __int128 den = static_cast<unsigned __int128>(beta.den()) * eps;
  unsigned __int128 q = num / den;
  const unsigned __int128 rem = num % den;
  if (2 * rem > den || (2 * rem == den && (q & 1) != 0)) ++q;
  const auto clamped = std::clamp<unsigned __int128>(q, 1, static_cast<unsigned __int128>(max_width));
  return static_cast<int>(clamped);
}

inline BinPlan plan_bins(const NetworkGraph& graph, const Rational& beta) {
  if (graph.groups().empty()) throw EmptyPlanError("graph has no searchable width group");
  if (beta <= Rational(0)) throw std::invalid_argument("beta must be positive");
  std::vector<Flops> eps;
  for (const auto& g : graph.groups()) eps.push_back(sensitivity(graph, g));
  const Flops max_eps = *std::max_element(eps.begin(), eps.end());
  std::vector<GroupBins> out;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const auto& g = graph.groups()[i];
    const int n = graph.max_width(g);
    out.push_back(GroupBins::with_bin_size(g, n, sensitive_bin_size(beta, max_eps, eps[i], n)));
  }
  return BinPlan(std::move(out));
}

/// Baseline partition: each group gets bins of size ceil(n / K). When K does
/// not divide n evenly this can yield fewer than K bins (n=9, K=4 gives 3x3).
inline BinPlan plan_uniform_bins(const NetworkGraph& graph, int bins_per_group) {
  if (bins_per_group < 1) throw std::invalid_argument("bins per group must be >= 1");
  if (graph.groups().empty()) throw EmptyPlanError("graph has no searchable width group");
  std::vector<GroupBins> out;
  for (const auto& g : graph.groups()) {
    const int n = graph.max_width(g);
    const int b = (n + bins_per_group - 1) / bins_per_group;
    out.push_back(GroupBins::with_bin_size(g, n, b));
  }
  return BinPlan(std::move(out));
}

inline WidthVector widths_from_bins(const BinPlan& plan, const BinCounts& bins) {
  plan.check(bins);
  WidthVector w;
  for (const auto& g : plan.groups()) w[g.group] = g.boundaries[static_cast<std::size_t>(bins.at(g.group) - 1)];
  return w;
}

/// Inverse of widths_from_bins; every width must sit on a bin boundary.
inline BinCounts bins_from_widths(const BinPlan& plan, const WidthVector& widths) {
  BinCounts b;
  for (const auto& g : plan.groups()) {
    const int c = widths.at(g.group);
    auto it = std::find(g.boundaries.begin(), g.boundaries.end(), c);
    if (it == g.boundaries.end()) {
      throw InvalidWidthError("width " + std::to_string(c) + " of group '" + g.group + "' is not a bin boundary");
    }
    b[g.group] = static_cast<int>(it - g.boundaries.begin()) + 1;
  }
  return b;
}

inline BigInt search_space_size(const std::vector<BinPlan>& stages) {
  if (stages.empty()) throw std::invalid_argument("search_space_size needs at least one stage");
  BigInt total = 0;
  for (const auto& plan : stages) {
    BigInt prod = 1;
    for (const auto& g : plan.groups()) prod *= g.bin_count();
    total += prod;
  }
  return total;
}

/// "1.5e27"-style rendering with `digits` significant digits (truncated).
inline std::string to_scientific(const BigInt& v, int digits = 2) {
  std::string s = v.str();
  const bool neg = !s.empty() && s[0] == '-';
  if (neg) s.erase(0, 1);
  const int exp = static_cast<int>(s.size()) - 1;
  std::string mant = s.substr(0, 1);
  if (digits > 1) {
    std::string rest = s.substr(1, static_cast<std::size_t>(digits - 1));
    rest.resize(static_cast<std::size_t>(digits - 1), '0');
    mant += "." + rest;
  }
  return (neg ? "-" : "") + mant + "e" + std::to_string(exp);
}

/// Every bin vector of the plan in mixed-radix order (first group varies slowest).
inline std::vector<BinCounts> enumerate_bin_vectors(const BinPlan& plan, std::size_t limit = 1'000'000) {
  BigInt size = search_space_size({plan});
  if (size > limit) throw std::length_error("search space too large to enumerate");
  std::vector<BinCounts> out;
  const auto& groups = plan.groups();
  std::vector<int> digits(groups.size(), 1);
  while (true) {
    BinCounts b;
    for (std::size_t i = 0; i < groups.size(); ++i) b[groups[i].group] = digits[i];
    out.push_back(std::move(b));
    std::size_t i = groups.size();
    while (i > 0) {
      --i;
      if (digits[i] < groups[i].bin_count()) {
        ++digits[i];
        break;
      }
      digits[i] = 1;
      if (i == 0) return out;
    }
  }
}

// ---------------------------------------------------------------------------

struct StageSchedule {
  int stages = 1;
  std::vector<Flops> budgets;  // budgets[t] for t = 0..stages
  std::vector<Rational> betas;  // betas[t] for t = 0..stages-1
  Rational alpha{2};
  Flops final_budget = 0;
  bool reinit_per_stage = true;

  /// Budget searched at 1-based stage s.
  Flops stage_budget(int s) const { return budgets.at(static_cast<std::size_t>(s)); }
  /// Minimum bin size used at 1-based stage s.
  const Rational& stage_beta(int s) const { return betas.at(static_cast<std::size_t>(s - 1)); }
};

inline StageSchedule make_schedule(Flops flops0, Flops final_budget, int stages, const Rational& beta0,
                                   const Rational& alpha) {
  if (stages < 1) throw std::invalid_argument("schedule needs at least one stage");
  if (alpha <= Rational(0)) throw std::invalid_argument("alpha must be positive");
  if (beta0 <= Rational(0)) throw std::invalid_argument("beta0 must be positive");
  if (final_budget > flops0) {
    throw InfeasibleBudgetError("target FLOPs " + std::to_string(final_budget) + " exceed supernet FLOPs " +
                                std::to_string(flops0));
  }
  StageSchedule s;
  s.stages = stages;
  s.alpha = alpha;
  s.final_budget = final_budget;
  const unsigned __int128 drop = flops0 - final_budget;
  for (int t = 0; t <= stages; ++t) {
    const unsigned __int128 num = drop * static_cast<unsigned>(t);
    const unsigned __int128 ceil_div = (num + static_cast<unsigned>(stages) - 1) / static_cast<unsigned>(stages);
    s.budgets.push_back(flops0 - static_cast<Flops>(ceil_div));
  }
  Rational beta = beta0;
  for (int t = 0; t < stages; ++t) {
    s.betas.push_back(beta);
    beta = beta / alpha;
  }
  return s;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const BinPlan& plan) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : plan.groups()) {
    groups.push_back({{"group", g.group},
                      {"max_width", g.max_width},
                      {"bin_size", g.bin_size},
                      {"bin_count", g.bin_count()},
                      {"boundaries", g.boundaries}});
  }
  return {{"groups", groups}};
}

inline nlohmann::json to_json(const StageSchedule& s) {
  nlohmann::json betas = nlohmann::json::array();
  for (const auto& b : s.betas) betas.push_back(b.to_string());
  return {{"stages", s.stages},
          {"budgets", s.budgets},
          {"betas", betas},
          {"alpha", s.alpha.to_string()},
          {"final_budget", s.final_budget},
          {"reinit_per_stage", s.reinit_per_stage}};
}

}  // namespace cafewidth
