#pragma once

// Channel assignment patterns over bins. A width of c units (bins) is realized
// by a base prefix [1 : c_b] with c_b = max(c - r - 1, 0) plus c - c_b free
// units drawn from the zone around unit c. Offset r = 0 is the fixed pattern
// [1 : c].

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cafewidth/archgraph.hpp"
#include "cafewidth/binplan.hpp"
#include "cafewidth/errors.hpp"
#include "cafewidth/rational.hpp"
#include <nlohmann/json.hpp>

namespace cafewidth {

/// Strictly increasing 1-based unit indices.
using IndexSet = std::vector<int>;

struct ZoneRange {
  int first = 1;
  int last = 0;
  int size() const { return last >= first ? last - first + 1 : 0; }
};

inline int base_count(int c, int r) { return std::max(c - r - 1, 0); }

inline void check_units(int c, int total) {
  if (total < 1 || c < 1 || c > total) {
    throw InvalidWidthError("unit count " + std::to_string(c) + " outside [1, " + std::to_string(total) + "]");
  }
}

inline IndexSet fixed_assignment(int c, int total) {
  check_units(c, total);
  IndexSet s(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) s[static_cast<std::size_t>(i)] = i + 1;
  return s;
}

/// Zone [c - r, c + r] clipped to [1, total] with the base prefix removed.
inline ZoneRange free_zone(int c, int r, int total) {
  check_units(c, total);
  if (r < 0) throw std::invalid_argument("offset must be non-negative");
  return {std::max(c - r, base_count(c, r) + 1), std::min(c + r, total)};
}

/// Every assignment of c units under offset r, in lexicographic order.
inline std::vector<IndexSet> enumerate_assignments(int c, int r, int total) {
  const ZoneRange zone = free_zone(c, r, total);
  const int cb = base_count(c, r);
  const int need = c - cb;
  if (zone.size() < need) throw std::logic_error("free zone smaller than the free unit count");

  std::vector<IndexSet> out;
  std::vector<int> pick(static_cast<std::size_t>(need));
  for (int i = 0; i < need; ++i) pick[static_cast<std::size_t>(i)] = zone.first + i;
  while (true) {
    IndexSet s;
    s.reserve(static_cast<std::size_t>(c));
    for (int i = 1; i <= cb; ++i) s.push_back(i);
    s.insert(s.end(), pick.begin(), pick.end());
    out.push_back(std::move(s));
    int i = need - 1;
    while (i >= 0 && pick[static_cast<std::size_t>(i)] == zone.last - (need - 1 - i)) --i;
    if (i < 0) break;
    ++pick[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < need; ++j) pick[static_cast<std::size_t>(j)] = pick[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

/// |a ∩ b| / min(|a|, |b|), exact.
inline Rational sharing_degree(const IndexSet& a, const IndexSet& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("sharing degree of an empty assignment is undefined");
  std::int64_t common = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (*ia < *ib) {
      ++ia;
    } else if (*ib < *ia) {
      ++ib;
    } else {
      ++common;
      ++ia;
      ++ib;
    }
  }
  return Rational(common, static_cast<std::int64_t>(std::min(a.size(), b.size())));
}

// ---------------------------------------------------------------------------
// Network-wide candidates

struct GroupAssignment {
  IndexSet base;
  IndexSet free;

  IndexSet units() const {
    IndexSet all = base;
    all.insert(all.end(), free.begin(), free.end());
    return all;
  }
};

/// One candidate sub-network: an assignment per searchable group, in bin units.
struct AssignmentPattern {
  std::map<std::string, GroupAssignment> groups;
  friend bool operator==(const AssignmentPattern& a, const AssignmentPattern& b) {
    if (a.groups.size() != b.groups.size()) return false;
    for (const auto& [g, ga] : a.groups) {
      auto it = b.groups.find(g);
      if (it == b.groups.end() || it->second.units() != ga.units()) return false;
    }
    return true;
  }
};

inline nlohmann::json to_json(const AssignmentPattern& p) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [g, ga] : p.groups) j[g] = ga.units();
  return j;
}

inline GroupAssignment split_assignment(const IndexSet& units, int c, int r) {
  const auto cb = static_cast<std::size_t>(base_count(c, r));
  return {IndexSet(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(cb)),
          IndexSet(units.begin() + static_cast<std::ptrdiff_t>(cb), units.end())};
}

struct CandidatePolicy {
  enum class Kind { SharedCombination, IndependentSampled };
  Kind kind = Kind::SharedCombination;
  int samples = 0;
  std::uint64_t seed = 0;

  static CandidatePolicy shared() { return {}; }
  static CandidatePolicy sampled(int m, std::uint64_t seed = 0) { return {Kind::IndependentSampled, m, seed}; }

  /// "shared" or "sampled:M".
  static CandidatePolicy parse(const std::string& text) {
    if (text == "shared") return shared();
    if (text.rfind("sampled:", 0) == 0) {
      int m = 0;
      try {
        m = std::stoi(text.substr(8));
      } catch (const std::exception&) {
        throw ConfigError("bad policy '" + text + "'");
      }
      if (m < 1) throw ConfigError("sampled policy needs M >= 1");
      return sampled(m);
    }
    throw ConfigError("unknown candidate policy '" + text + "' (expected shared or sampled:M)");
  }

  std::string to_string() const {
    return kind == Kind::SharedCombination ? "shared" : "sampled:" + std::to_string(samples);
  }
};

inline AssignmentPattern fixed_pattern(const BinCounts& bins, const BinPlan& plan) {
  plan.check(bins);
  AssignmentPattern p;
  for (const auto& g : plan.groups()) {
    p.groups[g.group] = GroupAssignment{fixed_assignment(bins.at(g.group), g.bin_count()), {}};
  }
  return p;
}

inline std::vector<AssignmentPattern> candidate_subnets(const BinCounts& bins, const BinPlan& plan, int r,
                                                        const CandidatePolicy& policy) {
  plan.check(bins);
  if (r < 0) throw std::invalid_argument("offset must be non-negative");
  if (policy.kind == CandidatePolicy::Kind::IndependentSampled && policy.samples < 1) {
    throw ConfigError("sampled candidate policy needs M >= 1");
  }

  std::vector<std::vector<IndexSet>> per_group;
  std::size_t widest = 1;
  for (const auto& g : plan.groups()) {
    per_group.push_back(enumerate_assignments(bins.at(g.group), r, g.bin_count()));
    widest = std::max(widest, per_group.back().size());
  }

  std::vector<AssignmentPattern> out;
  auto build = [&](auto choose) {
    AssignmentPattern p;
    for (std::size_t gi = 0; gi < plan.groups().size(); ++gi) {
      const auto& g = plan.groups()[gi];
      const auto& options = per_group[gi];
      p.groups[g.group] = split_assignment(options[choose(gi, options.size())], bins.at(g.group), r);
    }
    out.push_back(std::move(p));
  };

  if (policy.kind == CandidatePolicy::Kind::SharedCombination) {
    for (std::size_t k = 0; k < widest; ++k) build([k](std::size_t, std::size_t n) { return k % n; });
  } else {
    // Seed mixes in the bin vector so each width gets its own reproducible draw.
    std::uint64_t seed = policy.seed ^ 0x9e3779b97f4a7c15ULL;
    for (const auto& [g, k] : bins) {
      for (char ch : g) seed = (seed ^ static_cast<unsigned char>(ch)) * 0x100000001b3ULL;
      seed = (seed ^ static_cast<std::uint64_t>(k)) * 0x100000001b3ULL;
    }
    std::mt19937_64 rng(seed);
    for (int m = 0; m < policy.samples; ++m) {
      build([&rng](std::size_t, std::size_t n) {
        if (n == 1) return std::size_t{0};
        return static_cast<std::size_t>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
      });
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel-level view used by the numeric kernel

/// 0-based supernet channel indices per group, ascending.
using ChannelAssignment = std::map<std::string, std::vector<int>>;

inline ChannelAssignment to_channels(const AssignmentPattern& p, const BinPlan& plan) {
  ChannelAssignment out;
  for (const auto& [g, ga] : p.groups) {
    const auto& gb = plan.at(g);
    std::vector<int> ch;
    for (int unit : ga.units()) {
      const auto [lo, hi] = gb.channel_range(unit);
      for (int c = lo; c < hi; ++c) ch.push_back(c);
    }
    out[g] = std::move(ch);
  }
  return out;
}

/// First c_g channels of each group.
inline ChannelAssignment fixed_channels(const WidthVector& widths) {
  ChannelAssignment out;
  for (const auto& [g, c] : widths) {
    std::vector<int> ch(static_cast<std::size_t>(c));
    for (int i = 0; i < c; ++i) ch[static_cast<std::size_t>(i)] = i;
    out[g] = std::move(ch);
  }
  return out;
}

}  // namespace cafewidth
