#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "queueseq/events.hpp"
#include "queueseq/metrics.hpp"
#include "queueseq/queuesim.hpp"

using namespace queueseq;

namespace {

constexpr int ARR = 0;
constexpr int DEP = 1;

Trajectory mm1_table(std::vector<int> events, std::vector<double> dts, SystemState init = {}) {
  Trajectory t;
  t.schema = mm1_schema();
  t.initial = init.nodes.empty() ? SystemState::empty(*t.schema) : init;
  for (std::size_t i = 0; i < events.size(); ++i) t.records.push_back({dts.empty() ? 1.0 : dts[i], events[i], {}});
  return t;
}

SystemState mm1_state(int busy, int waiting) {
  SystemState s;
  s.nodes.push_back({std::vector<int>(static_cast<std::size_t>(waiting), 0), {busy}});
  return s;
}

std::vector<int> counts(const Trajectory& t) {
  std::vector<int> out;
  for (const auto& s : reconstruct_states(t)) out.push_back(s.in_system());
  return out;
}

}  // namespace

TEST(Reconstruct, StartsFromNonEmptyState) {
  auto t = mm1_table({ARR, DEP, DEP}, {}, mm1_state(1, 1));
  EXPECT_EQ(counts(t), (std::vector<int>{3, 2, 1}));
}

TEST(Reconstruct, DepartureFromEmptySystemIsViolation) {
  auto t = mm1_table({DEP}, {});
  try {
    reconstruct_states(t);
    FAIL() << "expected a violation";
  } catch (const SchemaViolation& e) {
    EXPECT_EQ(e.index(), 0u);
  }
}

TEST(Reconstruct, HandReplay) {
  auto t = mm1_table({ARR, ARR, DEP, ARR, DEP, DEP}, {});
  EXPECT_EQ(counts(t), (std::vector<int>{1, 2, 1, 2, 1, 0}));
}

TEST(Reconstruct, ClassPresenceChecked) {
  auto t = mm1_table({ARR}, {});
  t.records[0].cls = 0;
  EXPECT_THROW(reconstruct_states(t), SchemaViolation);
  auto multi = simulate_mmn({{1.0, 1.0}, {2.0, 2.0}, 2}, 5, 1);
  multi.records[0].cls.reset();
  EXPECT_THROW(reconstruct_states(multi), SchemaViolation);
}

TEST(Reconstruct, ClockMatchesSumOfDts) {
  auto t = simulate_mmn({{0.7}, {1.0}, 1}, 5000, 3);
  const auto states = reconstruct_states(t);
  EXPECT_NEAR(states.back().clock, t.duration(), 1e-9);
}

TEST(Interarrival, Basic) {
  auto t = mm1_table({ARR, ARR, DEP}, {1.0, 0.5, 0.3});
  EXPECT_EQ(extract_interarrival_times(t), (std::vector<double>{0.5}));
  EXPECT_TRUE(extract_interarrival_times(mm1_table({ARR}, {1.0})).empty());
}

TEST(Interarrival, ClassFilter) {
  Trajectory t;
  t.schema = mmn_schema(1, 2);
  t.initial = SystemState::empty(*t.schema);
  t.records = {{1.0, ARR, 0}, {0.7, ARR, 1}, {0.5, DEP, 0}, {0.3, ARR, 0}};
  const auto x = extract_interarrival_times(t, 0);
  ASSERT_EQ(x.size(), 1u);
  EXPECT_NEAR(x[0], 1.5, 1e-12);
}

TEST(ServiceTimes, IdleGapExcluded) {
  auto t = mm1_table({ARR, DEP, ARR, DEP}, {0.0, 1.0, 2.0, 1.0});
  const auto s = extract_service_times(t);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[1], 1.0);
}

TEST(ServiceTimes, BackToBack) {
  auto t = mm1_table({ARR, ARR, DEP, DEP}, {1, 1, 1, 1});
  const auto s = extract_service_times(t);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_DOUBLE_EQ(s[0], 2.0);
  EXPECT_DOUBLE_EQ(s[1], 1.0);
  EXPECT_TRUE(extract_service_times(mm1_table({ARR, ARR}, {1, 1})).empty());
}

TEST(ServiceTimes, RejectsMultiServer) {
  auto t = simulate_mmn({{1.0}, {1.0}, 2}, 10, 1);
  EXPECT_THROW(extract_service_times(t), UnsupportedDiscipline);
  EXPECT_THROW(extract_waiting_times(t, 0), UnsupportedDiscipline);
}

TEST(WaitingTimes, EmptySystemWaitsZero) {
  auto t = mm1_table({ARR, DEP}, {0.4, 1.0});
  EXPECT_EQ(extract_waiting_times(t, 0), (std::vector<double>{0.0}));
}

TEST(WaitingTimes, SecondCustomerWaits) {
  auto t = mm1_table({ARR, ARR, DEP, DEP}, {0.0, 1.0, 1.0, 1.0});
  const auto w = extract_waiting_times(t, 0);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_DOUBLE_EQ(w[0], 0.0);
  EXPECT_DOUBLE_EQ(w[1], 1.0);
}

TEST(WaitingTimes, InitialQueue) {
  // One in service, one waiting; the first new arrival waits for both.
  auto t = mm1_table({ARR, DEP, DEP, DEP}, {0.5, 1.0, 2.0, 1.0}, mm1_state(1, 1));
  const auto w = extract_waiting_times(t, 1);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_DOUBLE_EQ(w[0], 3.0);
}

TEST(WaitingTimes, UnstartedCustomersSkipped) {
  auto t = mm1_table({ARR, ARR, ARR}, {1.0, 1.0, 1.0});
  EXPECT_EQ(extract_waiting_times(t, 0).size(), 1u);
}

namespace {

std::vector<double> lindley(const std::vector<double>& service, const std::vector<double>& inter, std::size_t n) {
  std::vector<double> w{0.0};
  for (std::size_t j = 0; j + 1 < n; ++j) w.push_back(std::max(0.0, w[j] + service[j] - inter[j]));
  return w;
}

}  // namespace

TEST(WaitingTimes, LindleyPropertyOnRandomMm1) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng r(seed);
    const double lambda = r.uniform(0.2, 1.5);
    auto t = simulate_mmn({{lambda}, {1.0}, 1}, 2000, seed);
    const auto w = extract_waiting_times(t, 0);
    const auto s = extract_service_times(t);
    const auto a = extract_interarrival_times(t);
    const std::size_t n = std::min({w.size(), s.size() + 1, a.size() + 1});
    const auto ref = lindley(s, a, n);
    for (std::size_t j = 0; j < n; ++j) ASSERT_NEAR(w[j], ref[j], 1e-9) << "seed " << seed << " customer " << j;
  }
}

TEST(Visits, AgreeWithIndexFormulasOnSingleServer) {
  auto t = simulate_gg1(Dist::uniform(1.0, 3.0), Dist::exponential(0.6), 3000, 8);
  const auto s = extract_service_times(t);
  const auto w = extract_waiting_times(t, 0);
  const auto sv = metric_values(t, Metric::service);
  const auto wv = metric_values(t, Metric::waiting);
  ASSERT_EQ(s.size(), sv.size());
  ASSERT_EQ(w.size(), wv.size());
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], sv[i], 1e-9);
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], wv[i], 1e-9);
  const auto a = extract_interarrival_times(t);
  const auto av = metric_values(t, Metric::interarrival);
  ASSERT_EQ(a.size(), av.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], av[i], 1e-9);
}

TEST(HourlyAverage, SingleSampleBucket) {
  auto t = mm1_table({ARR}, {1.5});
  const std::vector<Trajectory> ts{t};
  const auto h = hourly_average(ts, Metric::waiting, 1.0);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0].first, 1);
  EXPECT_DOUBLE_EQ(h[0].second, 0.0);
}

TEST(HourlyAverage, ConstantRateIsFlat) {
  MtMnConfig cfg;
  cfg.hourly_rates = {10.0};
  cfg.nu = 2.0;
  cfg.n_servers = 8;
  std::vector<Trajectory> ts;
  for (std::uint64_t s = 0; s < 50; ++s) ts.push_back(simulate_mt_mn(cfg, 2000, s));
  const auto h = hourly_average(ts, Metric::interarrival, 1.0);
  for (const auto& [hour, mean] : h)
    if (hour < 80) {
      EXPECT_NEAR(mean, 0.1, 0.02) << "hour " << hour;
    }
}

TEST(HourlyAverage, TimeVaryingProfile) {
  MtMnConfig cfg;  // 11 servers, nu = 1.6/h, 17-hour profile
  std::vector<Trajectory> ts;
  for (std::uint64_t s = 0; s < 200; ++s) ts.push_back(simulate_mt_mn(cfg, 600, s));
  const auto h = hourly_average(ts, Metric::interarrival, 1.0);
  for (const auto& [hour, mean] : h) {
    if (hour == 5) {
      EXPECT_NEAR(mean, 1.0 / 14.0, 0.01);
    }
    if (hour == 10) {
      EXPECT_NEAR(mean, 1.0 / 19.0, 0.01);
    }
  }
}

TEST(HourlyAverage, RejectsBadHourLength) {
  std::vector<Trajectory> ts;
  EXPECT_THROW(hourly_average(ts, Metric::waiting, 0.0), std::invalid_argument);
}

TEST(Validity, SimulatorOutputReplays) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    EXPECT_TRUE(is_valid(simulate_mmn({{0.2, 0.4, 0.6, 0.8, 1.0}, {0.8, 0.8, 0.8, 1.0, 1.0}, 5}, 800, s),
                         *mmn_schema(5, 5)));
  }
}

TEST(Validity, OffDutyServers) {
  const auto schema = mmn_schema(3, 1);
  Trajectory t;
  t.schema = schema;
  t.initial = staffed_state(*schema, 1);
  // Second arrival waits: only server 1 is staffed.
  t.records = {{0.1, 0, std::nullopt}, {0.1, 0, std::nullopt}, {0.1, 1, std::nullopt}};
  ASSERT_TRUE(is_valid(t, *schema));
  const auto states = reconstruct_states(t);
  EXPECT_EQ(states[1].nodes[0].queue.size(), 1u);
  EXPECT_EQ(states[1].in_system(), 2);
  EXPECT_EQ(states[2].nodes[0].servers, (std::vector<int>{1, kOffDuty, kOffDuty}));
  t.records.push_back({0.1, 2, std::nullopt});  // departure from an off-duty server
  EXPECT_FALSE(is_valid(t, *schema));
  EXPECT_THROW(staffed_state(*schema, 4), std::invalid_argument);
}
