#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <random>

#include "cafewidth/dataset.hpp"
#include "cafewidth/trainer.hpp"
#include "test_graphs.hpp"

namespace cafewidth {
namespace {

// Small MLP on gaussian blobs: 4 -> a(8) -> b(6) -> 3 classes.
NetworkGraph blob_mlp() {
  return NetworkGraph({{0, LayerKind::Dense, 1, 1, 1, 8, "a", "input"},
                       {0, LayerKind::Dense, 1, 1, 1, 6, "b", "a"},
                       {0, LayerKind::Dense, 1, 1, 1, 3, "output", "b"}},
                      4, 3, 1, 1);
}

BinPlan unit_bins(const NetworkGraph& g) {
  std::vector<GroupBins> groups;
  for (const auto& name : g.groups()) groups.push_back(GroupBins::with_bin_size(name, g.max_width(name), 1));
  return BinPlan(groups);
}

TrainConfig small_config(int offset = 1) {
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 16;
  c.lr0 = 0.05;
  c.offset = offset;
  c.seed = 11;
  c.reference = true;
  return c;
}

TEST(SampleBins, SingleBinAlwaysFull) {
  const auto g = blob_mlp();
  const BinPlan plan({GroupBins::with_bin_size("a", 8, 8), GroupBins::with_bin_size("b", 6, 6)});
  std::mt19937_64 rng(1);
  for (int k = 0; k < 50; ++k) EXPECT_EQ(sample_width(plan, rng), g.full_widths());
}

// Chi-squared p-value of each group's bin marginal over `draws` samples.
std::vector<double> marginal_p_values(const BinPlan& plan, std::uint64_t seed, int draws) {
  std::mt19937_64 rng(seed);
  std::map<std::string, std::vector<int>> counts;
  for (const auto& gb : plan.groups()) counts[gb.group].assign(static_cast<std::size_t>(gb.bin_count()), 0);
  for (int k = 0; k < draws; ++k) {
    for (const auto& [grp, b] : sample_bins(plan, rng)) counts[grp][static_cast<std::size_t>(b - 1)]++;
  }
  std::vector<double> out;
  for (const auto& [grp, c] : counts) {
    const double expected = static_cast<double>(draws) / static_cast<double>(c.size());
    double chi2 = 0.0;
    for (int v : c) chi2 += (v - expected) * (v - expected) / expected;
    out.push_back(1.0 - boost::math::cdf(boost::math::chi_squared(static_cast<double>(c.size() - 1)), chi2));
  }
  return out;
}

TEST(SampleBins, MarginalsAreUniform) {
  const auto plan = unit_bins(blob_mlp());
  for (double p : marginal_p_values(plan, 1, 10000)) EXPECT_GT(p, 0.01);
  // A 1% test rejects about 1% of seeds; check the rate rather than one draw.
  int rejected = 0, total = 0;
  for (std::uint64_t seed = 100; seed < 300; ++seed) {
    for (double p : marginal_p_values(plan, seed, 10000)) {
      rejected += p <= 0.01;
      ++total;
    }
  }
  EXPECT_LE(rejected, total * 3 / 100) << rejected << " of " << total;
}

TEST(SampleBins, Reproducible) {
  const auto plan = unit_bins(blob_mlp());
  std::mt19937_64 a(5), b(5);
  for (int k = 0; k < 20; ++k) EXPECT_EQ(sample_bins(plan, a), sample_bins(plan, b));
}

TEST(LearningRate, CosineEndpointsAndStep) {
  TrainConfig c;
  c.epochs = 4;
  c.lr0 = 0.2;
  c.lr_min = 0.01;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0, 0, 10), 0.2);
  EXPECT_NEAR(learning_rate(c, 2, 0, 10), 0.105, 1e-12);
  double prev = 1.0;
  for (int e = 0; e < 4; ++e) {
    for (std::size_t i = 0; i < 10; ++i) {
      const double lr = learning_rate(c, e, i, 10);
      EXPECT_LE(lr, prev);
      EXPECT_GT(lr, 0.01);
      prev = lr;
    }
  }
  c.schedule = LrSchedule::Step;
  c.step_every = 2;
  c.step_gamma = 0.5;
  EXPECT_DOUBLE_EQ(learning_rate(c, 1, 3, 10), 0.2);
  EXPECT_DOUBLE_EQ(learning_rate(c, 2, 0, 10), 0.1);
}

TEST(EpochBatches, PartitionEveryEpoch) {
  const auto b0 = epoch_batches(103, 10, 9, 0);
  ASSERT_EQ(b0.size(), 11u);
  EXPECT_EQ(b0.back().size(), 3u);
  std::vector<std::size_t> all;
  for (const auto& b : b0) all.insert(all.end(), b.begin(), b.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < all.size(); ++i) EXPECT_EQ(all[i], i);
  EXPECT_NE(epoch_batches(103, 10, 9, 1), b0);
  EXPECT_EQ(epoch_batches(103, 10, 9, 0), b0);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.warmup = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr0 = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  const auto g = blob_mlp();
  const auto data = gaussian_blobs(3, 4, 60, 1);
  TrainConfig zero = small_config();
  zero.epochs = 0;
  EXPECT_THROW(train_supernet(SupernetState::initialize(g, 0), g, unit_bins(g), zero, data), ConfigError);
}

TEST(MinMinStep, ChoosesArgminAndUpdatesOnlyIt) {
  const auto g = blob_mlp();
  const auto plan = unit_bins(g);
  const auto data = gaussian_blobs(3, 4, 48, 3);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto st = SupernetState::initialize(g, static_cast<std::uint64_t>(trial));
    const auto bins = sample_bins(plan, rng);
    auto cfg = small_config(2);
    cfg.check_scan = true;
    const auto cands = candidate_subnets(bins, plan, 2, cfg.policy);
    std::vector<double> expected;
    for (const auto& c : cands) expected.push_back(masked_forward(st, g, make_subnet(g, c, plan), data).loss);
    auto copy = st;
    const auto r = min_min_step(st, g, bins, plan, cfg, data, 0.01);
    EXPECT_EQ(r.losses, expected);
    for (std::size_t k = 0; k < expected.size(); ++k) {
      EXPECT_LE(r.loss, expected[k]);
      if (static_cast<int>(k) < r.candidate) EXPECT_LT(r.loss, expected[k]);
    }
    backward_and_step(copy, g, make_subnet(g, cands[static_cast<std::size_t>(r.candidate)], plan), data,
                      cfg.sgd(0.01));
    EXPECT_EQ(copy.hash(), st.hash());
    // small step does not increase the chosen candidate's loss on this batch
    EXPECT_LE(masked_forward(st, g, make_subnet(g, cands[static_cast<std::size_t>(r.candidate)], plan), data).loss,
              r.loss + 1e-12);
  }
}

TEST(MinMinStep, ZeroOffsetHasOneCandidate) {
  const auto g = blob_mlp();
  const auto plan = unit_bins(g);
  const auto data = gaussian_blobs(3, 4, 30, 3);
  auto st = SupernetState::initialize(g, 1);
  const auto r = min_min_step(st, g, BinCounts{{"a", 5}, {"b", 3}}, plan, small_config(0), data, 0.01);
  EXPECT_EQ(r.candidate, 0);
  EXPECT_EQ(r.losses.size(), 1u);
}

TEST(TrainSupernet, LogIsConsistentAndScanIsReadOnly) {
  const auto g = blob_mlp();
  const auto plan = unit_bins(g);
  const auto data = gaussian_blobs(3, 4, 96, 4);
  auto cfg = small_config(1);
  cfg.check_scan = true;
  const auto r = train_supernet(SupernetState::initialize(g, 1), g, plan, cfg, data);
  ASSERT_EQ(r.log.size(), 3u * 6u);
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    const auto& rec = r.log[i];
    EXPECT_EQ(rec.iter, i);
    ASSERT_FALSE(rec.candidate_losses.empty());
    const auto best = std::min_element(rec.candidate_losses.begin(), rec.candidate_losses.end());
    EXPECT_EQ(rec.candidate, best - rec.candidate_losses.begin());
    EXPECT_EQ(rec.loss, *best);
  }
  EXPECT_EQ(r.epoch_loss.size(), 3u);
  EXPECT_EQ(r.state.step, r.log.size());
}

TEST(TrainSupernet, WarmupShare) {
  const auto g = blob_mlp();
  const auto plan = unit_bins(g);
  const auto data = gaussian_blobs(3, 4, 80, 4);
  for (double lambda : {0.0, 0.5, 1.0}) {
    auto cfg = small_config(1);
    cfg.epochs = 2;
    cfg.warmup = lambda;
    const auto r = train_supernet(SupernetState::initialize(g, 1), g, plan, cfg, data);
    const auto warm = static_cast<std::size_t>(std::floor(lambda * static_cast<double>(r.log.size())));
    for (std::size_t i = 0; i < r.log.size(); ++i) EXPECT_EQ(r.log[i].candidate_losses.empty(), i < warm) << lambda;
  }
}

TEST(TrainSupernet, DeterministicAcrossThreadCounts) {
  const auto g = blob_mlp();
  const auto plan = unit_bins(g);
  const auto data = gaussian_blobs(3, 4, 64, 4);
  auto cfg = small_config(2);
  const auto a = train_supernet(SupernetState::initialize(g, 1), g, plan, cfg, data);
  const auto b = train_supernet(SupernetState::initialize(g, 1), g, plan, cfg, data);
  cfg.reference = false;
  cfg.threads = 4;
  const auto c = train_supernet(SupernetState::initialize(g, 1), g, plan, cfg, data);
  EXPECT_EQ(a.state.hash(), b.state.hash());
  EXPECT_EQ(a.state.hash(), c.state.hash());
}

TEST(TrainSupernet, ZeroOffsetMatchesFixedPatternTrainer) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    const auto g = fixtures::random_graph(rng, 5, 6);
    const auto plan = unit_bins(g);
    Dataset d{g.input_channels(), g.input_h(), g.input_w(), g.num_classes(), {}, {}};
    std::normal_distribution<double> x(0.0, 1.0);
    for (int s = 0; s < 40; ++s) {
      for (std::size_t k = 0; k < d.sample_size(); ++k) d.inputs.push_back(x(rng));
      d.labels.push_back(s % g.num_classes());
    }
    for (double lambda : {0.0, 0.3}) {
      auto cfg = small_config(0);
      cfg.warmup = lambda;
      cfg.seed = rng();
      const auto init = SupernetState::initialize(g, cfg.seed);
      const auto a = train_supernet(init, g, plan, cfg, d);
      const auto b = train_fixed_pattern(init, g, plan, cfg, d);
      ASSERT_EQ(a.state.hash(), b.state.hash());
      ASSERT_EQ(a.log.size(), b.log.size());
      for (std::size_t i = 0; i < a.log.size(); ++i) {
        ASSERT_EQ(a.log[i].width, b.log[i].width);
        ASSERT_EQ(a.log[i].loss, b.log[i].loss);
      }
    }
  }
}

TEST(TrainSupernet, NonFiniteLossReportsIteration) {
  const auto g = blob_mlp();
  const auto data = gaussian_blobs(3, 4, 64, 4);
  auto cfg = small_config(1);
  cfg.lr0 = 1e200;
  cfg.momentum = 0.0;
  try {
    train_supernet(SupernetState::initialize(g, 1), g, unit_bins(g), cfg, data);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.iteration(), 1);
    EXPECT_NE(std::string(e.what()).find("iteration"), std::string::npos);
  }
}

TEST(TrainSupernet, FullWidthLossDecreasesOnSeparableData) {
  const auto g = blob_mlp();
  const auto plan = unit_bins(g);
  std::vector<double> mean(6, 0.0);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto data = gaussian_blobs(3, 4, 150, seed, 0.5);
    auto cfg = small_config(1);
    cfg.epochs = 6;
    cfg.seed = seed;
    const Subnet full = make_subnet(g, fixed_channels(g.full_widths()));
    cfg.on_epoch = [&](int e, const SupernetState& st) {
      mean[static_cast<std::size_t>(e)] += masked_forward(st, g, full, data).loss / 3.0;
    };
    train_supernet(SupernetState::initialize(g, seed), g, plan, cfg, data);
  }
  for (std::size_t e = 1; e < mean.size(); ++e) EXPECT_LE(mean[e], mean[e - 1] + 1e-9) << "epoch " << e;
}

TEST(TrainStandalone, SplitRunEqualsWholeRun) {
  const auto g = blob_mlp();
  const auto data = gaussian_blobs(3, 4, 70, 5);
  auto cfg = small_config();
  cfg.epochs = 4;
  const auto init = SupernetState::initialize(g, 3);
  const auto whole = train_standalone(init, g, cfg, data, 0, 4);
  auto first = train_standalone(init, g, cfg, data, 0, 2);
  const auto second = train_standalone(first.state, g, cfg, data, 2, 4);
  EXPECT_EQ(whole.state.hash(), second.state.hash());
  EXPECT_THROW(train_standalone(init, g, cfg, data, 3, 5), ConfigError);
}

TEST(TrainConfigJson, RoundTrip) {
  auto c = small_config(2);
  c.policy = CandidatePolicy::sampled(4);
  c.warmup = 0.25;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"schedule", "linear"}}), ConfigError);
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"epochs", "many"}}), ConfigError);
}

}  // namespace
}  // namespace cafewidth
