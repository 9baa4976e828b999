#pragma once

// Seedable discrete-event simulators that emit event tables.
//
// Every simulator follows the same placement rules as Replayer (lowest-index
// idle server, FIFO or non-preemptive priority when a server frees up), so
// its output always replays without violation. Output is a pure function of
// (config, n_events, seed).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <queue>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "queueseq/events.hpp"
#include "queueseq/log.hpp"
#include "queueseq/parallel.hpp"
#include "queueseq/rng.hpp"

namespace queueseq {

// ---------------------------------------------------------------------------
// Distributions

struct Dist {
  enum class Kind { exponential, uniform, empirical, deterministic };
  Kind kind = Kind::exponential;
  double a = 1.0;  // rate, lower bound, or value
  double b = 0.0;  // upper bound
  std::vector<double> samples;  // sorted, empirical only

  static Dist exponential(double rate) { return checked({Kind::exponential, rate, 0.0, {}}); }
  static Dist uniform(double lo, double hi) { return checked({Kind::uniform, lo, hi, {}}); }
  static Dist deterministic(double v) { return checked({Kind::deterministic, v, 0.0, {}}); }
  static Dist empirical(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return checked({Kind::empirical, 0.0, 0.0, std::move(xs)});
  }

  void validate() const {
    switch (kind) {
      case Kind::exponential:
        if (!(a > 0.0) || !std::isfinite(a)) throw std::invalid_argument("exponential rate must be positive");
        break;
      case Kind::uniform:
        if (!(a < b) || a < 0.0) throw std::invalid_argument("uniform needs 0 <= a < b");
        break;
      case Kind::deterministic:
        if (!(a >= 0.0)) throw std::invalid_argument("deterministic value must be nonnegative");
        break;
      case Kind::empirical:
        if (samples.empty()) throw std::invalid_argument("empirical distribution needs samples");
        for (double x : samples)
          if (!(x >= 0.0)) throw std::invalid_argument("empirical samples must be nonnegative");
        break;
    }
  }

  double sample(Rng& rng) const {
    switch (kind) {
      case Kind::exponential: return rng.exponential(a);
      case Kind::uniform: return rng.uniform(a, b);
      case Kind::deterministic: return a;
      case Kind::empirical: return samples[static_cast<std::size_t>(rng.below(samples.size()))];
    }
    return 0.0;
  }

  double mean() const {
    switch (kind) {
      case Kind::exponential: return 1.0 / a;
      case Kind::uniform: return 0.5 * (a + b);
      case Kind::deterministic: return a;
      case Kind::empirical: return std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
    }
    return 0.0;
  }

 private:
  static Dist checked(Dist d) {
    d.validate();
    return d;
  }
};

// ---------------------------------------------------------------------------
// Configurations

struct MmnConfig {
  std::vector<double> lambdas{1.0};
  std::vector<double> nus{2.0};
  int n_servers = 1;
  Discipline discipline = Discipline::fifo;
  std::vector<int> priority_order;  // highest first; empty means 0 > 1 > ...

  int num_classes() const { return static_cast<int>(lambdas.size()); }

  void validate() const {
    if (lambdas.empty() || lambdas.size() != nus.size())
      throw std::invalid_argument("mmn: lambdas and nus must be nonempty and of equal length");
    for (double l : lambdas)
      if (!(l > 0.0)) throw std::invalid_argument("mmn: arrival rates must be positive");
    for (double n : nus)
      if (!(n > 0.0)) throw std::invalid_argument("mmn: service rates must be positive");
    if (n_servers < 1) throw std::invalid_argument("mmn: n_servers must be >= 1");
    if (!priority_order.empty()) {
      auto p = priority_order;
      std::sort(p.begin(), p.end());
      for (std::size_t i = 0; i < p.size(); ++i)
        if (p[i] != static_cast<int>(i) || p.size() != lambdas.size())
          throw std::invalid_argument("mmn: priority order must be a permutation of the classes");
    }
  }
};

struct Gg1Config {
  Dist inter = Dist::uniform(3.0, 6.0);
  Dist service = Dist::uniform(2.0, 4.0);
};

// Piecewise-constant hourly arrival profile; the profile repeats after its
// last hour.
struct MtMnConfig {
  std::vector<double> hourly_rates{8, 8, 8, 8, 8, 14, 15, 16, 17, 18, 19, 18, 17, 16, 15, 11, 11};
  double nu = 1.6;
  int n_servers = 11;
  double hour_len = 1.0;
  // Servers in the event vocabulary; those past n_servers are off duty.
  // 0 means n_servers.
  int schema_servers = 0;

  void validate() const {
    if (hourly_rates.empty()) throw std::invalid_argument("mt_mn: empty rate profile");
    bool positive = false;
    for (double r : hourly_rates) {
      if (!(r >= 0.0)) throw std::invalid_argument("mt_mn: rates must be nonnegative");
      positive = positive || r > 0.0;
    }
    if (!positive) throw std::invalid_argument("mt_mn: at least one hourly rate must be positive");
    if (!(nu > 0.0)) throw std::invalid_argument("mt_mn: service rate must be positive");
    if (n_servers < 1) throw std::invalid_argument("mt_mn: n_servers must be >= 1");
    if (schema_servers != 0 && schema_servers < n_servers)
      throw std::invalid_argument("mt_mn: schema_servers must be 0 or >= n_servers");
    if (!(hour_len > 0.0)) throw std::invalid_argument("mt_mn: hour_len must be positive");
  }

  double rate_at(double t) const {
    const auto h = static_cast<std::size_t>(std::floor(t / hour_len));
    return hourly_rates[h % hourly_rates.size()];
  }
};

struct PolicyParams {
  double c = 0.0;
  int n_servers = 2;
};

// Emergency-department style shift: arrivals at max(0, c + lambda(h)),
// N servers at rate 3.5 per hour.
inline MtMnConfig counterfactual_base() {
  MtMnConfig cfg;
  cfg.hourly_rates = {8, 8, 8, 8, 8, 14, 15, 16, 17, 18, 19, 18};
  cfg.nu = 3.5;
  cfg.n_servers = 2;
  return cfg;
}

struct CallCenterConfig {
  std::array<double, 6> class_props{0.50, 0.20, 0.10, 0.05, 0.05, 0.10};
  double total_arrival_rate = 1.0 / 30.0;  // per second
  int vru_servers = 1000;
  std::vector<Dist> vru_service;    // per class
  std::vector<Dist> agent_service;  // per class
  std::array<double, 6> patience_means_sec{521, 644, 528, 703, 647, 491};
  int n_agents = 6;
  std::vector<int> high_priority_classes{1, 4};  // types 2 and 5, 0-based

  void validate() const {
    const double sum = std::accumulate(class_props.begin(), class_props.end(), 0.0);
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("callcenter: class proportions must sum to 1");
    for (double p : class_props)
      if (!(p >= 0.0)) throw std::invalid_argument("callcenter: proportions must be nonnegative");
    if (!(total_arrival_rate > 0.0)) throw std::invalid_argument("callcenter: arrival rate must be positive");
    if (vru_servers < 1 || n_agents < 1) throw std::invalid_argument("callcenter: server counts must be >= 1");
    if (vru_service.size() != 6 || agent_service.size() != 6)
      throw std::invalid_argument("callcenter: need one VRU and one agent service distribution per class");
    for (const auto& d : vru_service) d.validate();
    for (const auto& d : agent_service) d.validate();
    for (double m : patience_means_sec)
      if (!(m > 0.0)) throw std::invalid_argument("callcenter: patience means must be positive");
    for (int c : high_priority_classes)
      if (c < 0 || c >= 6) throw std::invalid_argument("callcenter: priority class out of range");
  }
};

#ifndef QUEUESEQ_DATA_DIR
#define QUEUESEQ_DATA_DIR "data"
#endif

inline std::string default_service_file() { return std::string(QUEUESEQ_DATA_DIR) + "/callcenter_service.csv"; }

// Reads "stage,class,seconds" rows (stage "vru" or "agent", class 0-5)
// into per-class empirical distributions.
inline void load_service_samples(const std::string& path, CallCenterConfig& cfg) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open service sample file '" + path + "'");
  std::array<std::vector<double>, 6> vru, agent;
  std::string line;
  std::getline(in, line);
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string stage, cls, secs;
    if (!std::getline(ss, stage, ',') || !std::getline(ss, cls, ',') || !std::getline(ss, secs))
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected stage,class,seconds");
    const int c = std::stoi(cls);
    if (c < 0 || c >= 6) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": class out of range");
    auto& dst = stage == "vru" ? vru : stage == "agent" ? agent : throw std::runtime_error(path + ": unknown stage '" + stage + "'");
    dst[static_cast<std::size_t>(c)].push_back(std::stod(secs));
  }
  cfg.vru_service.clear();
  cfg.agent_service.clear();
  for (int c = 0; c < 6; ++c) {
    cfg.vru_service.push_back(Dist::empirical(vru[static_cast<std::size_t>(c)]));
    cfg.agent_service.push_back(Dist::empirical(agent[static_cast<std::size_t>(c)]));
  }
}

// Default call center: bundled service samples and an arrival rate tuned so
// that about 15% of callers abandon.
inline CallCenterConfig default_callcenter() {
  CallCenterConfig cfg;
  cfg.total_arrival_rate = 1.0 / 26.0;
  load_service_samples(default_service_file(), cfg);
  return cfg;
}

// Three single-server FIFO nodes wired into one of four topologies.
struct ThreeNodeConfig {
  int network_id = 1;
  double arrival_rate = 1.0;  // total external rate
  std::array<double, 3> service_rates{3.0, 3.0, 3.0};
  double split_prob = 0.8;           // probability of the first branch where node 1 splits
  double second_entry_share = 0.75;  // share of arrivals at node 2 when it has an entry
};

struct PriorConfig {
  std::array<double, 2> lambda_range{1.5, 2.5};
  std::array<double, 2> nu_range{3.0, 6.0};

  void validate() const {
    for (const auto& r : {lambda_range, nu_range})
      if (!(r[0] > 0.0) || !(r[0] < r[1])) throw std::invalid_argument("prior: ranges need 0 < lo < hi");
  }
};

// ---------------------------------------------------------------------------
// Schemas

inline std::shared_ptr<const EventSchema> mmn_schema(int n_servers, int n_classes, Discipline discipline = Discipline::fifo,
                                                     std::vector<int> priority_order = {}) {
  EventSchema s;
  s.tag = "mmn";
  s.num_classes = n_classes;
  NodeSpec node;
  node.name = "station";
  node.servers = n_servers;
  node.discipline = discipline;
  node.priority_order = std::move(priority_order);
  s.nodes.push_back(node);
  s.event_names.push_back("arrival");
  s.transitions.push_back({TransitionKind::arrival, 0, -1, -1});
  for (int j = 0; j < n_servers; ++j) {
    s.event_names.push_back(n_servers == 1 ? "departure" : "departure_s" + std::to_string(j + 1));
    s.transitions.push_back({TransitionKind::departure, 0, j, -1});
  }
  s.class_bearing.assign(s.event_names.size(), n_classes > 1);
  s.validate();
  return std::make_shared<const EventSchema>(std::move(s));
}

inline std::shared_ptr<const EventSchema> mm1_schema() { return mmn_schema(1, 1); }

// Empty state of a single-node schema with only the first n servers staffed.
inline SystemState staffed_state(const EventSchema& schema, int n) {
  if (schema.nodes.size() != 1) throw std::invalid_argument("staffed_state needs a single-node schema");
  if (n < 1 || n > schema.nodes[0].servers) throw std::invalid_argument("staffed_state: server count out of range");
  auto s = SystemState::empty(schema);
  std::fill(s.nodes[0].servers.begin() + n, s.nodes[0].servers.end(), kOffDuty);
  return s;
}

inline std::shared_ptr<const EventSchema> callcenter_schema(int vru_servers = 1000, int n_agents = 6,
                                                            std::vector<int> high_priority = {1, 4}) {
  EventSchema s;
  s.tag = "callcenter";
  s.num_classes = 6;
  s.nodes.push_back({"vru", vru_servers, Discipline::fifo, {}});
  s.nodes.push_back({"agents", n_agents, Discipline::priority, std::move(high_priority)});
  s.event_names = {"arrival", "vru_completion", "abandonment"};
  s.transitions = {{TransitionKind::arrival, 0, -1, -1},
                   {TransitionKind::departure, 0, -1, 1},
                   {TransitionKind::abandonment, 1, -1, -1}};
  for (int j = 0; j < n_agents; ++j) {
    s.event_names.push_back("agent_departure_" + std::to_string(j + 1));
    s.transitions.push_back({TransitionKind::departure, 1, j, -1});
  }
  s.class_bearing.assign(s.event_names.size(), true);
  s.validate();
  return std::make_shared<const EventSchema>(std::move(s));
}

// Shared nine-event vocabulary of the three-node networks.
namespace threenode {
enum Event : int { arr1 = 0, arr2, arr3, route12, route13, route23, dep1, dep2, dep3, count };

inline const std::vector<int>& permitted_events(int network_id) {
  static const std::array<std::vector<int>, 4> sets{{
      {arr1, route12, route23, dep3},              // 1: tandem 1 -> 2 -> 3
      {arr1, route12, route13, dep2, dep3},        // 2: split 1 -> {2, 3}
      {arr1, arr2, route13, route23, dep3},        // 3: merge {1, 2} -> 3
      {arr1, arr2, route13, dep1, dep2, dep3},     // 4: 1 -> 3 or out, 2 standalone
  }};
  if (network_id < 1 || network_id > 4) throw std::invalid_argument("unknown network id " + std::to_string(network_id));
  return sets[static_cast<std::size_t>(network_id - 1)];
}
}  // namespace threenode

inline std::shared_ptr<const EventSchema> threenode_schema() {
  static const auto schema = [] {
    EventSchema s;
    s.tag = "threenode";
    s.num_classes = 1;
    for (int k = 0; k < 3; ++k) s.nodes.push_back({"node" + std::to_string(k + 1), 1, Discipline::fifo, {}});
    s.event_names = {"arrival_1", "arrival_2", "arrival_3", "route_1_2", "route_1_3",
                     "route_2_3", "departure_1", "departure_2", "departure_3"};
    s.transitions = {{TransitionKind::arrival, 0, -1, -1},   {TransitionKind::arrival, 1, -1, -1},
                     {TransitionKind::arrival, 2, -1, -1},   {TransitionKind::departure, 0, 0, 1},
                     {TransitionKind::departure, 0, 0, 2},   {TransitionKind::departure, 1, 0, 2},
                     {TransitionKind::departure, 0, 0, -1},  {TransitionKind::departure, 1, 0, -1},
                     {TransitionKind::departure, 2, 0, -1}};
    s.class_bearing.assign(9, false);
    s.validate();
    return std::make_shared<const EventSchema>(std::move(s));
  }();
  return schema;
}

// ---------------------------------------------------------------------------
// M/M/n by competing exponential clocks

inline Trajectory simulate_mmn(const MmnConfig& cfg, std::size_t n_events, std::uint64_t seed,
                               std::optional<SystemState> initial = std::nullopt) {
  cfg.validate();
  Trajectory traj;
  traj.schema = mmn_schema(cfg.n_servers, cfg.num_classes(), cfg.discipline, cfg.priority_order);
  traj.initial = initial.value_or(SystemState::empty(*traj.schema));
  traj.meta = {{"generator", "mmn"}, {"seed", seed}, {"lambdas", cfg.lambdas}, {"nus", cfg.nus},
               {"n_servers", cfg.n_servers},
               {"discipline", cfg.discipline == Discipline::fifo ? "fifo" : "priority"}};
  Rng rng(seed);
  Replayer state(*traj.schema, traj.initial);
  const bool multi = cfg.num_classes() > 1;
  const double lambda_total = std::accumulate(cfg.lambdas.begin(), cfg.lambdas.end(), 0.0);
  std::vector<double> weights(static_cast<std::size_t>(1 + cfg.n_servers));
  traj.records.reserve(n_events);
  for (std::size_t i = 0; i < n_events; ++i) {
    const auto& servers = state.state().nodes[0].servers;
    weights[0] = lambda_total;
    double rate = lambda_total;
    for (std::size_t j = 0; j < servers.size(); ++j) {
      weights[j + 1] = servers[j] > 0 ? cfg.nus[static_cast<std::size_t>(servers[j] - 1)] : 0.0;
      rate += weights[j + 1];
    }
    EventRecord r;
    r.dt = rng.exponential(rate);
    r.event = static_cast<int>(rng.categorical(weights));
    if (r.event == 0) {
      if (multi) r.cls = static_cast<int>(rng.categorical(cfg.lambdas));
    } else if (multi) {
      r.cls = servers[static_cast<std::size_t>(r.event - 1)] - 1;
    }
    state.apply(r);
    traj.records.push_back(r);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Calendar-driven engine for non-Markovian and network models

namespace detail {

struct ArrivalStream {
  int node = 0;
  // Next arrival time strictly after `now`.
  std::function<double(double now, Rng&)> next;
  std::vector<double> class_probs{1.0};
};

struct CalendarModel {
  std::shared_ptr<const EventSchema> schema;
  std::vector<ArrivalStream> arrivals;
  // Service duration at (node, class).
  std::function<double(int node, int cls, Rng&)> service;
  // Destination after service at `node`: another node, or -1 to leave.
  std::function<int(int node, int cls, Rng&)> route = [](int, int, Rng&) { return -1; };
  // Patience at the node's queue; +inf for none.
  std::function<double(int node, int cls, Rng&)> patience = [](int, int, Rng&) {
    return std::numeric_limits<double>::infinity();
  };
  // Starting state; must be empty apart from off-duty servers.
  std::optional<SystemState> initial;
};

class CalendarSim {
 public:
  CalendarSim(const CalendarModel& model, std::uint64_t seed) : m_(model), rng_(seed) {
    const auto& s = *m_.schema;
    servers_.resize(s.nodes.size());
    queues_.resize(s.nodes.size());
    initial_ = m_.initial.value_or(SystemState::empty(s));
    if (initial_.nodes.size() != s.nodes.size()) throw std::invalid_argument("initial state does not match the schema");
    for (std::size_t k = 0; k < s.nodes.size(); ++k) {
      const auto& node = initial_.nodes[k];
      if (!node.queue.empty() || node.servers.size() != static_cast<std::size_t>(s.nodes[k].servers))
        throw std::invalid_argument("calendar runs start from an empty state");
      for (int code : node.servers) {
        if (code > 0) throw std::invalid_argument("calendar runs start from an empty state");
        servers_[k].push_back(code == kOffDuty ? kOff : kFree);
      }
    }
    for (std::size_t e = 0; e < s.transitions.size(); ++e) {
      const auto& t = s.transitions[e];
      if (t.kind == TransitionKind::arrival) arrival_event_[t.node] = static_cast<int>(e);
      else if (t.kind == TransitionKind::abandonment) abandon_event_[t.node] = static_cast<int>(e);
    }
  }

  Trajectory run(std::size_t n_events) {
    Trajectory traj;
    traj.schema = m_.schema;
    traj.initial = initial_;
    for (std::size_t a = 0; a < m_.arrivals.size(); ++a) schedule(m_.arrivals[a].next(0.0, rng_), Kind::arrival, static_cast<long>(a), 0);
    traj.records.reserve(n_events);
    traj.serials.reserve(n_events);
    while (traj.records.size() < n_events && !calendar_.empty()) {
      const Entry ev = calendar_.top();
      calendar_.pop();
      switch (ev.kind) {
        case Kind::arrival: on_arrival(ev, traj); break;
        case Kind::completion: on_completion(ev, traj); break;
        case Kind::abandonment: on_abandonment(ev, traj); break;
      }
    }
    return traj;
  }

 private:
  enum class Kind { arrival, completion, abandonment };
  struct Entry {
    double time;
    std::uint64_t seq;
    Kind kind;
    long who;  // stream index, customer serial
    std::uint64_t version;
    bool operator>(const Entry& o) const { return time != o.time ? time > o.time : seq > o.seq; }
  };
  struct Customer {
    int cls = 0;
    int node = 0;
    int server = -1;
    std::uint64_t version = 0;  // bumped whenever pending patience is cancelled
  };

  void schedule(double t, Kind kind, long who, std::uint64_t version) {
    if (std::isfinite(t)) calendar_.push({t, seq_++, kind, who, version});
  }

  void emit(Trajectory& traj, double t, int event, int cls, long serial) {
    EventRecord r;
    r.dt = t - last_time_;
    r.event = event;
    if (m_.schema->class_bearing[static_cast<std::size_t>(event)]) r.cls = cls;
    last_time_ = t;
    traj.records.push_back(r);
    traj.serials.push_back(serial);
  }

  int departure_event(int node, int server, int route_to) const {
    const auto& tr = m_.schema->transitions;
    int pooled = -1;
    for (std::size_t e = 0; e < tr.size(); ++e) {
      if (tr[e].kind != TransitionKind::departure || tr[e].node != node || tr[e].route_to != route_to) continue;
      if (tr[e].server == server) return static_cast<int>(e);
      if (tr[e].server < 0) pooled = static_cast<int>(e);
    }
    if (pooled < 0) throw std::logic_error("schema has no departure event for this move");
    return pooled;
  }

  int rank(int node, int cls) const {
    const auto& order = m_.schema->nodes[static_cast<std::size_t>(node)].priority_order;
    auto it = std::find(order.begin(), order.end(), cls);
    return it == order.end() ? static_cast<int>(order.size()) + cls : static_cast<int>(it - order.begin());
  }

  void start_service(double t, int node, int server, long serial) {
    auto& c = customers_[static_cast<std::size_t>(serial)];
    c.server = server;
    c.version++;  // cancels any pending abandonment
    servers_[static_cast<std::size_t>(node)][static_cast<std::size_t>(server)] = serial;
    schedule(t + m_.service(node, c.cls, rng_), Kind::completion, serial, c.version);
  }

  void admit(double t, int node, long serial) {
    auto& c = customers_[static_cast<std::size_t>(serial)];
    c.node = node;
    c.server = -1;
    auto& srv = servers_[static_cast<std::size_t>(node)];
    for (std::size_t j = 0; j < srv.size(); ++j) {
      if (srv[j] == kFree) {
        start_service(t, node, static_cast<int>(j), serial);
        return;
      }
    }
    queues_[static_cast<std::size_t>(node)].push_back(serial);
    schedule(t + m_.patience(node, c.cls, rng_), Kind::abandonment, serial, c.version);
  }

  void on_arrival(const Entry& ev, Trajectory& traj) {
    const auto& stream = m_.arrivals[static_cast<std::size_t>(ev.who)];
    const int cls = stream.class_probs.size() > 1 ? static_cast<int>(rng_.categorical(stream.class_probs)) : 0;
    const long serial = static_cast<long>(customers_.size());
    customers_.push_back({cls, stream.node, -1, 0});
    emit(traj, ev.time, arrival_event_.at(stream.node), cls, serial);
    admit(ev.time, stream.node, serial);
    schedule(stream.next(ev.time, rng_), Kind::arrival, ev.who, 0);
  }

  void on_completion(const Entry& ev, Trajectory& traj) {
    const long serial = ev.who;
    auto& c = customers_[static_cast<std::size_t>(serial)];
    if (ev.version != c.version) return;
    const int node = c.node;
    const int server = c.server;
    const int dest = m_.route(node, c.cls, rng_);
    emit(traj, ev.time, departure_event(node, server, dest), c.cls, serial);
    servers_[static_cast<std::size_t>(node)][static_cast<std::size_t>(server)] = kFree;
    auto& q = queues_[static_cast<std::size_t>(node)];
    if (!q.empty()) {
      std::size_t pos = 0;
      if (m_.schema->nodes[static_cast<std::size_t>(node)].discipline == Discipline::priority) {
        int best = rank(node, customers_[static_cast<std::size_t>(q[0])].cls);
        for (std::size_t p = 1; p < q.size(); ++p) {
          const int r = rank(node, customers_[static_cast<std::size_t>(q[p])].cls);
          if (r < best) {
            best = r;
            pos = p;
          }
        }
      }
      const long next = q[pos];
      q.erase(q.begin() + static_cast<long>(pos));
      start_service(ev.time, node, server, next);
    }
    c.version++;
    if (dest >= 0) admit(ev.time, dest, serial);
  }

  void on_abandonment(const Entry& ev, Trajectory& traj) {
    auto& c = customers_[static_cast<std::size_t>(ev.who)];
    if (ev.version != c.version || c.server >= 0) return;
    auto& q = queues_[static_cast<std::size_t>(c.node)];
    auto it = std::find(q.begin(), q.end(), ev.who);
    if (it == q.end()) return;
    q.erase(it);
    c.version++;
    emit(traj, ev.time, abandon_event_.at(c.node), c.cls, ev.who);
  }

  static constexpr long kFree = -1;
  static constexpr long kOff = -2;

  const CalendarModel& m_;
  SystemState initial_;
  Rng rng_;
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> calendar_;
  std::uint64_t seq_ = 0;
  double last_time_ = 0.0;
  std::vector<Customer> customers_;
  std::vector<std::vector<long>> servers_;
  std::vector<std::vector<long>> queues_;
  std::map<int, int> arrival_event_;
  std::map<int, int> abandon_event_;
};

// Non-homogeneous Poisson arrivals by thinning against the peak rate.
inline std::function<double(double, Rng&)> thinned_arrivals(MtMnConfig cfg) {
  const double peak = *std::max_element(cfg.hourly_rates.begin(), cfg.hourly_rates.end());
  return [cfg, peak](double now, Rng& rng) {
    double t = now;
    for (;;) {
      t += rng.exponential(peak);
      if (rng.uniform() * peak < cfg.rate_at(t)) return t;
    }
  };
}

}  // namespace detail

inline Trajectory simulate_gg1(const Dist& inter, const Dist& service, std::size_t n_events, std::uint64_t seed) {
  inter.validate();
  service.validate();
  detail::CalendarModel m;
  m.schema = mm1_schema();
  m.arrivals.push_back({0, [inter](double now, Rng& rng) { return now + inter.sample(rng); }, {1.0}});
  m.service = [service](int, int, Rng& rng) { return service.sample(rng); };
  auto traj = detail::CalendarSim(m, seed).run(n_events);
  traj.meta = {{"generator", "gg1"}, {"seed", seed}, {"mean_interarrival", inter.mean()}, {"mean_service", service.mean()}};
  return traj;
}

inline Trajectory simulate_mt_mn(const MtMnConfig& cfg, std::size_t n_events, std::uint64_t seed) {
  cfg.validate();
  detail::CalendarModel m;
  m.schema = mmn_schema(std::max(cfg.n_servers, cfg.schema_servers), 1);
  m.initial = staffed_state(*m.schema, cfg.n_servers);
  m.arrivals.push_back({0, detail::thinned_arrivals(cfg), {1.0}});
  const double nu = cfg.nu;
  m.service = [nu](int, int, Rng& rng) { return rng.exponential(nu); };
  auto traj = detail::CalendarSim(m, seed).run(n_events);
  traj.meta = {{"generator", "mt_mn"}, {"seed", seed}, {"hourly_rates", cfg.hourly_rates}, {"nu", cfg.nu},
               {"n_servers", cfg.n_servers}, {"hour_len", cfg.hour_len}};
  return traj;
}

inline Trajectory simulate_counterfactual(const PolicyParams& policy, const MtMnConfig& base, std::size_t n_events,
                                          std::uint64_t seed) {
  MtMnConfig cfg = base;
  bool clipped = false;
  for (auto& r : cfg.hourly_rates) {
    const double shifted = policy.c + r;
    clipped = clipped || shifted < 0.0;
    r = std::max(0.0, shifted);
  }
  if (clipped) log_debug("counterfactual: c = {} clips some hourly rates at 0", policy.c);
  cfg.n_servers = policy.n_servers;
  if (cfg.schema_servers != 0) cfg.schema_servers = std::max(cfg.schema_servers, policy.n_servers);
  auto traj = simulate_mt_mn(cfg, n_events, seed);
  traj.meta["generator"] = "counterfactual";
  traj.meta["policy"] = {{"c", policy.c}, {"N", policy.n_servers}};
  return traj;
}

inline Trajectory simulate_callcenter(const CallCenterConfig& cfg, std::size_t n_events, std::uint64_t seed) {
  cfg.validate();
  detail::CalendarModel m;
  m.schema = callcenter_schema(cfg.vru_servers, cfg.n_agents, cfg.high_priority_classes);
  const double rate = cfg.total_arrival_rate;
  m.arrivals.push_back({0, [rate](double now, Rng& rng) { return now + rng.exponential(rate); },
                        std::vector<double>(cfg.class_props.begin(), cfg.class_props.end())});
  auto vru = cfg.vru_service;
  auto agent = cfg.agent_service;
  m.service = [vru, agent](int node, int cls, Rng& rng) {
    return (node == 0 ? vru : agent)[static_cast<std::size_t>(cls)].sample(rng);
  };
  m.route = [](int node, int, Rng&) { return node == 0 ? 1 : -1; };
  auto patience = cfg.patience_means_sec;
  m.patience = [patience](int node, int cls, Rng& rng) {
    const double mean = patience[static_cast<std::size_t>(cls)];
    if (node != 1 || !std::isfinite(mean)) return std::numeric_limits<double>::infinity();
    return rng.exponential(1.0 / mean);
  };
  auto traj = detail::CalendarSim(m, seed).run(n_events);
  traj.meta = {{"generator", "callcenter"}, {"seed", seed}, {"total_arrival_rate", cfg.total_arrival_rate},
               {"n_agents", cfg.n_agents}};
  return traj;
}

inline Trajectory simulate_threenode(const ThreeNodeConfig& cfg, std::size_t n_events, std::uint64_t seed) {
  const int id = cfg.network_id;
  threenode::permitted_events(id);  // validates the id
  if (!(cfg.arrival_rate > 0.0)) throw std::invalid_argument("threenode: arrival rate must be positive");
  for (double r : cfg.service_rates)
    if (!(r > 0.0)) throw std::invalid_argument("threenode: service rates must be positive");
  detail::CalendarModel m;
  m.schema = threenode_schema();
  if (!(cfg.split_prob >= 0.0 && cfg.split_prob <= 1.0) || !(cfg.second_entry_share > 0.0 && cfg.second_entry_share < 1.0))
    throw std::invalid_argument("threenode: split_prob and second_entry_share must be probabilities");
  std::vector<std::pair<int, double>> entries;
  if (id <= 2) entries = {{0, cfg.arrival_rate}};
  else entries = {{0, cfg.arrival_rate * (1.0 - cfg.second_entry_share)}, {1, cfg.arrival_rate * cfg.second_entry_share}};
  for (auto [node, rate] : entries)
    m.arrivals.push_back({node, [rate](double now, Rng& rng) { return now + rng.exponential(rate); }, {1.0}});
  const auto rates = cfg.service_rates;
  m.service = [rates](int node, int, Rng& rng) { return rng.exponential(rates[static_cast<std::size_t>(node)]); };
  const double p = cfg.split_prob;
  m.route = [id, p](int node, int, Rng& rng) -> int {
    switch (id) {
      case 1: return node < 2 ? node + 1 : -1;
      case 2: return node == 0 ? (rng.uniform() < p ? 1 : 2) : -1;
      case 3: return node < 2 ? 2 : -1;
      case 4: return node == 0 ? (rng.uniform() < p ? 2 : -1) : -1;
    }
    return -1;
  };
  auto traj = detail::CalendarSim(m, seed).run(n_events);
  traj.meta = {{"generator", "threenode"}, {"seed", seed}, {"network_id", id}};
  return traj;
}

// ---------------------------------------------------------------------------
// Datasets

struct CounterfactualConfig {
  MtMnConfig base = counterfactual_base();
  PolicyParams policy;
  // When set, each trajectory draws c uniformly from the union of these
  // intervals and N uniformly from n_range (inclusive).
  std::vector<std::array<double, 2>> c_ranges;
  std::array<int, 2> n_range{2, 20};
};

using SystemConfig = std::variant<MmnConfig, Gg1Config, MtMnConfig, CallCenterConfig, CounterfactualConfig, ThreeNodeConfig>;

inline std::string system_tag(const SystemConfig& sys) {
  static const char* tags[] = {"mmn", "gg1", "mt_mn", "callcenter", "counterfactual", "threenode"};
  return tags[sys.index()];
}

inline Trajectory simulate(const SystemConfig& sys, std::size_t n_events, std::uint64_t seed) {
  return std::visit(
      [&](const auto& cfg) -> Trajectory {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, MmnConfig>) return simulate_mmn(cfg, n_events, seed);
        else if constexpr (std::is_same_v<T, Gg1Config>) return simulate_gg1(cfg.inter, cfg.service, n_events, seed);
        else if constexpr (std::is_same_v<T, MtMnConfig>) return simulate_mt_mn(cfg, n_events, seed);
        else if constexpr (std::is_same_v<T, CallCenterConfig>) return simulate_callcenter(cfg, n_events, seed);
        else if constexpr (std::is_same_v<T, CounterfactualConfig>) {
          PolicyParams policy = cfg.policy;
          if (!cfg.c_ranges.empty()) {
            Rng draw(Rng::child_seed(seed, 0xC0FFEE));
            double total = 0.0;
            for (const auto& r : cfg.c_ranges) total += r[1] - r[0];
            double u = draw.uniform() * total;
            for (const auto& r : cfg.c_ranges) {
              const double width = r[1] - r[0];
              if (u <= width) {
                policy.c = r[0] + u;
                break;
              }
              u -= width;
            }
            policy.n_servers = cfg.n_range[0] + static_cast<int>(draw.below(static_cast<std::uint64_t>(cfg.n_range[1] - cfg.n_range[0] + 1)));
          }
          MtMnConfig base = cfg.base;
          // Random policies share one vocabulary sized for the largest N.
          if (!cfg.c_ranges.empty()) base.schema_servers = std::max(base.schema_servers, cfg.n_range[1]);
          return simulate_counterfactual(policy, base, n_events, seed);
        } else {
          return simulate_threenode(cfg, n_events, seed);
        }
      },
      sys);
}

// K trajectories with child seeds split from `seed`. With a prior, each
// trajectory of a single-class M/M/1-type system draws its own (lambda, nu),
// recorded in meta["theta"].
inline std::vector<Trajectory> sample_dataset(const SystemConfig& sys, const std::optional<PriorConfig>& prior,
                                              std::size_t K, std::size_t n_events, std::uint64_t seed, int jobs = 1) {
  if (K < 1) throw std::invalid_argument("sample_dataset: K must be >= 1");
  if (prior) {
    prior->validate();
    const auto* mmn = std::get_if<MmnConfig>(&sys);
    if (!mmn || mmn->num_classes() != 1) throw std::invalid_argument("prior sampling needs a single-class mmn system");
  }
  std::vector<Trajectory> out(K);
  parallel_for(K, jobs, [&](std::size_t k) {
    const std::uint64_t child = Rng::child_seed(seed, k);
    if (prior) {
      MmnConfig cfg = std::get<MmnConfig>(sys);
      Rng draw(Rng::child_seed(child, 0x9E10));
      cfg.lambdas[0] = draw.uniform(prior->lambda_range[0], prior->lambda_range[1]);
      cfg.nus[0] = draw.uniform(prior->nu_range[0], prior->nu_range[1]);
      out[k] = simulate_mmn(cfg, n_events, child);
      out[k].meta["theta"] = {{"lambda", cfg.lambdas[0]}, {"nu", cfg.nus[0]}};
    } else {
      out[k] = simulate(sys, n_events, child);
      const auto* mmn = std::get_if<MmnConfig>(&sys);
      if (mmn && mmn->num_classes() == 1) out[k].meta["theta"] = {{"lambda", mmn->lambdas[0]}, {"nu", mmn->nus[0]}};
    }
    out[k].meta["index"] = k;
  });
  return out;
}

}  // namespace queueseq
