#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "queueseq/jsonl.hpp"
#include "queueseq/metrics.hpp"
#include "queueseq/queuesim.hpp"
#include "queueseq/stats.hpp"

using namespace queueseq;

namespace {

// Fraction of time the system is empty.
double empty_fraction(const Trajectory& t) {
  Replayer r(*t.schema, t.initial);
  double empty = 0.0;
  for (const auto& rec : t.records) {
    if (r.state().in_system() == 0) empty += rec.dt;
    r.apply(rec);
  }
  return empty / t.duration();
}

// No server idles while someone waits at the same node.
bool work_conserving(const Trajectory& t) {
  for (const auto& s : reconstruct_states(t))
    for (const auto& n : s.nodes)
      if (!n.queue.empty() && n.idle_servers() > 0) return false;
  return true;
}

}  // namespace

TEST(Dist, Validation) {
  EXPECT_THROW(Dist::exponential(0.0), std::invalid_argument);
  EXPECT_THROW(Dist::uniform(2.0, 1.0), std::invalid_argument);
  EXPECT_THROW(Dist::empirical({}), std::invalid_argument);
  EXPECT_THROW(Dist::empirical({1.0, -1.0}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(Dist::empirical({3.0, 1.0}).mean(), 2.0);
}

TEST(Mmn, EmptyProbability) {
  auto t = simulate_mmn({{0.5}, {1.0}, 1}, 1000000, 17);
  EXPECT_NEAR(empty_fraction(t), 0.5, 0.01);
}

TEST(Mmn, Deterministic) {
  MmnConfig cfg{{0.2, 0.4}, {1.0, 1.0}, 2};
  EXPECT_EQ(to_jsonl({simulate_mmn(cfg, 500, 3)}), to_jsonl({simulate_mmn(cfg, 500, 3)}));
  EXPECT_NE(to_jsonl({simulate_mmn(cfg, 500, 3)}), to_jsonl({simulate_mmn(cfg, 500, 4)}));
}

TEST(Mmn, PriorityClassWaitsLess) {
  MmnConfig cfg{{0.4, 0.4}, {1.0, 1.0}, 1, Discipline::priority, {0, 1}};
  auto t = simulate_mmn(cfg, 200000, 5);
  const double w0 = stats::mean(metric_values(t, Metric::waiting, 0, 0));
  const double w1 = stats::mean(metric_values(t, Metric::waiting, 0, 1));
  EXPECT_LT(w0, w1);
  EXPECT_TRUE(work_conserving(t));
}

TEST(Mmn, InterarrivalsPassKs) {
  auto t = simulate_mmn({{0.5}, {1.0}, 1}, 200000, 23);
  auto a = extract_interarrival_times(t);
  a.resize(100000);
  EXPECT_GT(stats::ks_one_sample(a, [](double x) { return 1.0 - std::exp(-0.5 * x); }).p_value, 0.01);
}

TEST(Mmn, ConfigValidation) {
  EXPECT_THROW(simulate_mmn({{1.0}, {1.0, 2.0}, 1}, 10, 1), std::invalid_argument);
  EXPECT_THROW(simulate_mmn({{-1.0}, {1.0}, 1}, 10, 1), std::invalid_argument);
  EXPECT_THROW(simulate_mmn({{1.0, 1.0}, {1.0, 1.0}, 1, Discipline::priority, {0, 0}}, 10, 1), std::invalid_argument);
}

TEST(Gg1, UtilizationAndLindley) {
  auto t = simulate_gg1(Dist::uniform(3, 6), Dist::uniform(2, 4), 1000000, 31);
  EXPECT_NEAR(1.0 - empty_fraction(t), 2.0 / 3.0, 0.01);
}

TEST(Gg1, DeterministicUnderloadNeverWaits) {
  auto t = simulate_gg1(Dist::deterministic(2.0), Dist::deterministic(1.0), 1000, 1);
  for (double w : extract_waiting_times(t, 0)) EXPECT_EQ(w, 0.0);
}

TEST(MtMn, ConstantProfileMatchesMmn) {
  MtMnConfig cfg;
  cfg.hourly_rates = {3.0};
  cfg.nu = 1.0;
  cfg.n_servers = 4;
  MmnConfig ref{{3.0}, {1.0}, 4};
  std::vector<double> a, b;
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (double w : metric_values(simulate_mt_mn(cfg, 2000, s), Metric::waiting)) a.push_back(w);
    for (double w : metric_values(simulate_mmn(ref, 2000, 1000 + s), Metric::waiting)) b.push_back(w);
  }
  // Waiting times have an atom at 0; compare the positive parts and the atom.
  std::vector<double> ap, bp;
  for (double w : a) if (w > 0) ap.push_back(w);
  for (double w : b) if (w > 0) bp.push_back(w);
  EXPECT_NEAR(double(ap.size()) / a.size(), double(bp.size()) / b.size(), 0.05);
  auto ia = extract_interarrival_times(simulate_mt_mn(cfg, 20000, 77));
  auto ib = extract_interarrival_times(simulate_mmn(ref, 20000, 78));
  EXPECT_GT(stats::ks_two_sample(ia, ib).p_value, 0.01);
}

TEST(MtMn, ZeroRateHourHasNoArrivals) {
  MtMnConfig cfg;
  cfg.hourly_rates = {5.0, 0.0, 5.0};
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto t = simulate_mt_mn(cfg, 500, s);
    double clock = 0.0;
    for (const auto& r : t.records) {
      clock += r.dt;
      if (t.schema->is_arrival(r.event)) {
        const auto h = static_cast<long>(std::floor(clock)) % 3;
        ASSERT_NE(h, 1);
      }
    }
  }
}

TEST(Counterfactual, ZeroShiftIsMtMn) {
  auto base = counterfactual_base();
  base.n_servers = 4;
  auto a = simulate_counterfactual({0.0, 4}, base, 400, 9);
  auto b = simulate_mt_mn(base, 400, 9);
  EXPECT_EQ(a.records, b.records);
  EXPECT_EQ(a.meta["policy"]["N"], 4);
}

TEST(Counterfactual, ClippedHourIsSilent) {
  auto base = counterfactual_base();
  auto t = simulate_counterfactual({-8.0, 3}, base, 400, 2);
  double clock = 0.0;
  for (const auto& r : t.records) {
    clock += r.dt;
    const long h = static_cast<long>(std::floor(clock)) % 12;
    if (t.schema->is_arrival(r.event)) {
      ASSERT_GE(h, 5);
    }
  }
}

TEST(Counterfactual, MoreServersWaitLess) {
  auto base = counterfactual_base();
  double prev = 1e300;
  for (int n : {2, 10}) {
    std::vector<double> w;
    for (std::uint64_t s = 0; s < 50; ++s)
      for (double x : metric_values(simulate_counterfactual({2.0, n}, base, 300, s), Metric::waiting)) w.push_back(x);
    const double m = stats::mean(w);
    EXPECT_LT(m, prev);
    prev = m;
  }
}

TEST(CallCenter, NoPatienceNoAbandonment) {
  auto cfg = CallCenterConfig{};
  cfg.vru_service.assign(6, Dist::exponential(1.0 / 60));
  cfg.agent_service.assign(6, Dist::exponential(1.0 / 200));
  cfg.patience_means_sec.fill(std::numeric_limits<double>::infinity());
  auto t = simulate_callcenter(cfg, 20000, 3);
  for (const auto& r : t.records) ASSERT_NE(r.event, 2);
  EXPECT_TRUE(is_valid(t, *t.schema));
}

TEST(CallCenter, AbandonOnlyWhileWaitingAndPriorityServed) {
  auto cfg = CallCenterConfig{};
  cfg.vru_service.assign(6, Dist::exponential(1.0 / 60));
  cfg.agent_service.assign(6, Dist::exponential(1.0 / 200));
  cfg.total_arrival_rate = 1.0 / 25.0;
  auto t = simulate_callcenter(cfg, 20000, 4);
  int abandons = 0;
  for (const auto& v : customer_visits(t)) {
    if (!v.abandoned) continue;
    ++abandons;
    EXPECT_EQ(v.node, 1);
    EXPECT_LT(v.start_index, 0);  // never started service
  }
  EXPECT_GT(abandons, 0);
  EXPECT_TRUE(work_conserving(t));
}

TEST(ThreeNode, OnlyPermittedEvents) {
  for (int id = 1; id <= 4; ++id) {
    const auto& allowed = threenode::permitted_events(id);
    std::set<int> seen;
    for (std::uint64_t s = 0; s < 20; ++s) {
      auto t = simulate_threenode({id}, 400, s);
      EXPECT_TRUE(is_valid(t, *t.schema));
      for (const auto& r : t.records) seen.insert(r.event);
    }
    EXPECT_EQ(seen, std::set<int>(allowed.begin(), allowed.end())) << "network " << id;
  }
  EXPECT_THROW(simulate_threenode({5}, 10, 1), std::invalid_argument);
}

TEST(ThreeNode, MarginalsDiffer) {
  std::vector<std::vector<double>> table;
  for (int id = 1; id <= 4; ++id) {
    std::vector<double> counts(9, 0.0);
    for (std::uint64_t s = 0; s < 50; ++s)
      for (const auto& r : simulate_threenode({id}, 200, s).records) counts[static_cast<std::size_t>(r.event)] += 1;
    table.push_back(counts);
  }
  EXPECT_LT(stats::chi_square_homogeneity(table).p_value, 0.01);
}

TEST(Dataset, PriorMeanAndSeeds) {
  auto data = sample_dataset(MmnConfig{}, PriorConfig{}, 10000, 2, 123);
  double s = 0.0;
  for (const auto& t : data) s += t.meta["theta"]["lambda"].get<double>();
  EXPECT_NEAR(s / 10000.0, 2.0, 0.02);
  EXPECT_NE(data[0].records, data[1].records);
}

TEST(Dataset, FixedThetaAndJobsInvariance) {
  auto a = sample_dataset(MmnConfig{{0.5}, {1.0}, 1}, std::nullopt, 20, 50, 7, 1);
  auto b = sample_dataset(MmnConfig{{0.5}, {1.0}, 1}, std::nullopt, 20, 50, 7, 3);
  EXPECT_EQ(to_jsonl(a), to_jsonl(b));
  for (const auto& t : a) EXPECT_EQ(t.meta["theta"], a[0].meta["theta"]);
  EXPECT_THROW(sample_dataset(MmnConfig{}, std::nullopt, 0, 10, 1), std::invalid_argument);
}

TEST(CallCenter, DefaultAbandonmentAndClassMix) {
  const auto cfg = default_callcenter();
  const auto t = simulate_callcenter(cfg, 200000, 11);
  std::array<double, 6> arrivals{};
  double n = 0.0, abandons = 0.0;
  for (const auto& r : t.records) {
    if (r.event == 0) {
      arrivals[static_cast<std::size_t>(*r.cls)] += 1.0;
      n += 1.0;
    }
    if (r.event == 2) abandons += 1.0;
  }
  ASSERT_GT(n, 40000.0);
  EXPECT_NEAR(abandons / n, 0.15, 0.03);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(arrivals[k] / n, cfg.class_props[k], 0.01) << "class " << k;
}

TEST(Counterfactual, RandomPoliciesShareOneVocabulary) {
  CounterfactualConfig cfg;
  cfg.c_ranges = {{0.0, 3.0}};
  cfg.n_range = {2, 6};
  const auto data = sample_dataset(cfg, std::nullopt, 40, 200, 3);
  std::set<int> ns;
  for (const auto& t : data) {
    EXPECT_EQ(to_json(*t.schema), to_json(*data[0].schema));
    EXPECT_EQ(t.schema->nodes[0].servers, 6);
    const int N = t.meta["policy"]["N"].get<int>();
    ns.insert(N);
    EXPECT_EQ(t.initial, staffed_state(*t.schema, N));
    EXPECT_TRUE(is_valid(t, *t.schema));
    for (const auto& s : reconstruct_states(t)) {
      const auto& servers = s.nodes[0].servers;
      EXPECT_LE(std::count_if(servers.begin(), servers.end(), [](int c) { return c > 0; }), N);
      EXPECT_EQ(std::count(servers.begin(), servers.end(), kOffDuty), 6 - N);
    }
  }
  EXPECT_GT(ns.size(), 2u);
}

TEST(Counterfactual, OffDutyServersDoNotChangeTheQueue) {
  auto wide = counterfactual_base();
  wide.schema_servers = 8;
  const auto a = simulate_counterfactual({1.0, 3}, counterfactual_base(), 300, 4);
  const auto b = simulate_counterfactual({1.0, 3}, wide, 300, 4);
  ASSERT_EQ(b.schema->nodes[0].servers, 8);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    EXPECT_EQ(a.records[i].dt, b.records[i].dt);
    EXPECT_EQ(a.records[i].event, b.records[i].event);
  }
  EXPECT_EQ(metric_values(a, Metric::waiting), metric_values(b, Metric::waiting));
}
