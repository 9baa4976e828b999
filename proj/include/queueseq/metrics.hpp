#pragma once

// Performance metrics read off event tables.
//
// Two routes: the index formulas for a single-server FIFO table, which work
// from event types and inter-event times alone, and per-customer visit
// bookkeeping from replay, which covers multi-server, multi-class and
// multi-node systems. Tests cross-check the two on single-server tables.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "queueseq/events.hpp"

namespace queueseq {

class UnsupportedDiscipline : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Metric { interarrival, service, waiting };

inline Metric parse_metric(const std::string& s) {
  if (s == "interarrival") return Metric::interarrival;
  if (s == "service") return Metric::service;
  if (s == "waiting") return Metric::waiting;
  throw std::invalid_argument("unknown metric '" + s + "'");
}

inline std::string to_string(Metric m) {
  switch (m) {
    case Metric::interarrival: return "interarrival";
    case Metric::service: return "service";
    case Metric::waiting: return "waiting";
  }
  return "?";
}

// Sum of T_i over the half-open record range (from, to], 0-based indices.
inline double sum_dt(std::span<const EventRecord> recs, long from, long to) {
  double s = 0.0;
  for (long i = from + 1; i <= to; ++i) s += recs[static_cast<std::size_t>(i)].dt;
  return s;
}

inline std::vector<double> extract_interarrival_times(const Trajectory& traj, std::optional<int> cls = std::nullopt) {
  const auto& schema = *traj.schema;
  std::vector<long> arrivals;
  for (std::size_t i = 0; i < traj.records.size(); ++i) {
    const auto& r = traj.records[i];
    if (!schema.is_arrival(r.event)) continue;
    if (cls && r.cls.value_or(0) != *cls) continue;
    arrivals.push_back(static_cast<long>(i));
  }
  std::vector<double> out;
  for (std::size_t j = 0; j + 1 < arrivals.size(); ++j) out.push_back(sum_dt(traj.records, arrivals[j], arrivals[j + 1]));
  return out;
}

namespace detail {

inline void require_single_server_fifo(const EventSchema& schema) {
  if (!schema.single_server_fifo()) throw UnsupportedDiscipline("index formulas need a single-server FIFO schema");
}

// Occupancy after each record (entry 0 is the initial state, entry i + 1
// is after record i).
inline std::vector<int> occupancy_path(const Trajectory& traj) {
  Replayer replay(*traj.schema, traj.initial);
  std::vector<int> occ{traj.initial.in_system()};
  for (const auto& r : traj.records) {
    replay.apply(r);
    occ.push_back(replay.state().in_system());
  }
  return occ;
}

}  // namespace detail

// Service time of each departing customer, in departure order. The period
// charged to a customer starts at the previous departure, or at the arrival
// that ended the last idle spell between the two departures, so idle time is
// never counted.
inline std::vector<double> extract_service_times(const Trajectory& traj) {
  const auto& schema = *traj.schema;
  detail::require_single_server_fifo(schema);
  const auto occ = detail::occupancy_path(traj);
  std::vector<double> out;
  long prev_departure = -1;  // -1 stands for "before the first record"
  for (long d = 0; d < static_cast<long>(traj.records.size()); ++d) {
    if (!schema.is_departure(traj.records[static_cast<std::size_t>(d)].event)) continue;
    long start = prev_departure;
    for (long i = prev_departure; i < d; ++i)
      if (occ[static_cast<std::size_t>(i + 1)] == 0) start = i + 1;
    out.push_back(sum_dt(traj.records, start, d));
    prev_departure = d;
  }
  return out;
}

// Time from each arrival until its service starts, in arrival order, for a
// single-server FIFO table whose initial state holds `q0` waiting customers.
// Arrivals whose service has not started by the end of the table are left
// out.
inline std::vector<double> extract_waiting_times(const Trajectory& traj, int q0) {
  const auto& schema = *traj.schema;
  detail::require_single_server_fifo(schema);
  const auto occ = detail::occupancy_path(traj);
  std::vector<long> arrivals, starts;
  for (long i = 0; i < static_cast<long>(traj.records.size()); ++i) {
    const auto e = traj.records[static_cast<std::size_t>(i)].event;
    const int before = occ[static_cast<std::size_t>(i)];
    const int after = occ[static_cast<std::size_t>(i + 1)];
    if (schema.is_arrival(e)) {
      arrivals.push_back(i);
      if (before == 0) starts.push_back(i);
    } else if (schema.is_departure(e) && after > 0) {
      starts.push_back(i);
    }
  }
  std::vector<double> out;
  for (std::size_t j = 0; j < arrivals.size(); ++j) {
    const std::size_t k = static_cast<std::size_t>(q0) + j;
    if (k >= starts.size()) break;
    out.push_back(sum_dt(traj.records, arrivals[j], starts[k]));
  }
  return out;
}

// A metric value together with the clock time at which it begins.
struct MetricSample {
  double begin = 0.0;
  double value = 0.0;
};

// Metric samples from per-customer bookkeeping. `node` < 0 pools all nodes;
// interarrival samples only count external arrivals.
inline std::vector<MetricSample> metric_samples(const Trajectory& traj, Metric metric, int node = -1,
                                                std::optional<int> cls = std::nullopt) {
  const auto visits = customer_visits(traj);
  std::vector<MetricSample> out;
  auto keep = [&](const Visit& v) { return (node < 0 || v.node == node) && (!cls || v.cls == *cls); };
  switch (metric) {
    case Metric::interarrival: {
      double prev = std::numeric_limits<double>::quiet_NaN();
      for (const auto& v : visits) {
        if (!v.external || !keep(v)) continue;
        if (!std::isnan(prev)) out.push_back({prev, v.arrive - prev});
        prev = v.arrive;
      }
      break;
    }
    case Metric::service:
      for (const auto& v : visits)
        if (keep(v) && !v.abandoned && v.start_index >= 0 && v.end_index >= 0) out.push_back({v.start, v.end - v.start});
      break;
    case Metric::waiting:
      for (const auto& v : visits)
        if (keep(v) && v.arrive_index >= 0 && v.start_index >= 0) out.push_back({v.arrive, v.start - v.arrive});
      break;
  }
  return out;
}

inline std::vector<double> metric_values(const Trajectory& traj, Metric metric, int node = -1,
                                         std::optional<int> cls = std::nullopt) {
  std::vector<double> out;
  for (const auto& s : metric_samples(traj, metric, node, cls)) out.push_back(s.value);
  return out;
}

// Mean of a metric per clock bucket [h * hour_len, (h + 1) * hour_len),
// pooled over trajectories. Buckets with no samples are omitted.
inline std::vector<std::pair<int, double>> hourly_average(std::span<const Trajectory> trajs, Metric metric,
                                                          double hour_len, int node = -1) {
  if (!(hour_len > 0.0)) throw std::invalid_argument("hourly_average: hour_len must be positive");
  std::map<int, std::pair<double, long>> acc;
  for (const auto& t : trajs) {
    for (const auto& s : metric_samples(t, metric, node)) {
      auto& slot = acc[static_cast<int>(std::floor(s.begin / hour_len))];
      slot.first += s.value;
      slot.second += 1;
    }
  }
  std::vector<std::pair<int, double>> out;
  for (const auto& [h, sum_count] : acc) out.emplace_back(h, sum_count.first / static_cast<double>(sum_count.second));
  return out;
}

}  // namespace queueseq
