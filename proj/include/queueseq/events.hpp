#pragma once

// Event tables: schema, records, system state and deterministic replay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace queueseq {

using Json = nlohmann::ordered_json;

enum class Discipline { fifo, priority };

struct NodeSpec {
  std::string name;
  int servers = 1;
  Discipline discipline = Discipline::fifo;
  // Class ids from highest to lowest priority; classes not listed rank last
  // in id order. Only read under Discipline::priority.
  std::vector<int> priority_order;
};

enum class TransitionKind { arrival, departure, abandonment };

// What an event does to the state. `server` < 0 on a departure means a
// pooled completion: the lowest-index server holding the record's class.
// `route_to` >= 0 sends the departing customer to that node instead of out.
struct Transition {
  TransitionKind kind = TransitionKind::arrival;
  int node = 0;
  int server = -1;
  int route_to = -1;
};

struct EventSchema {
  std::string tag;
  std::vector<std::string> event_names;
  int num_classes = 1;
  std::vector<NodeSpec> nodes;
  std::vector<Transition> transitions;
  std::vector<bool> class_bearing;
  int max_queue = 100;

  int num_events() const { return static_cast<int>(event_names.size()); }

  bool is_arrival(int e) const {
    return transitions.at(static_cast<std::size_t>(e)).kind == TransitionKind::arrival;
  }
  bool is_departure(int e) const {
    return transitions.at(static_cast<std::size_t>(e)).kind == TransitionKind::departure;
  }
  bool exits_system(int e) const {
    const auto& t = transitions.at(static_cast<std::size_t>(e));
    return t.kind == TransitionKind::abandonment ||
           (t.kind == TransitionKind::departure && t.route_to < 0);
  }
  bool single_server_fifo() const {
    return nodes.size() == 1 && nodes[0].servers == 1 && nodes[0].discipline == Discipline::fifo;
  }
  bool any_class_bearing() const {
    return std::any_of(class_bearing.begin(), class_bearing.end(), [](bool b) { return b; });
  }

  // Throws std::invalid_argument when the schema is malformed.
  void validate() const {
    const std::size_t n = event_names.size();
    if (n == 0) throw std::invalid_argument("schema: no events");
    if (transitions.size() != n || class_bearing.size() != n)
      throw std::invalid_argument("schema: transitions/class_bearing size mismatch");
    if (num_classes < 1) throw std::invalid_argument("schema: num_classes must be >= 1");
    if (nodes.empty()) throw std::invalid_argument("schema: no nodes");
    for (const auto& node : nodes)
      if (node.servers < 1) throw std::invalid_argument("schema: node needs >= 1 server");
    for (const auto& t : transitions) {
      if (t.node < 0 || t.node >= static_cast<int>(nodes.size()))
        throw std::invalid_argument("schema: transition node out of range");
      if (t.server >= nodes[static_cast<std::size_t>(t.node)].servers)
        throw std::invalid_argument("schema: transition server out of range");
      if (t.route_to >= static_cast<int>(nodes.size()))
        throw std::invalid_argument("schema: route target out of range");
    }
  }
};

struct EventRecord {
  double dt = 0.0;
  int event = 0;
  std::optional<int> cls;

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

inline constexpr int kOffDuty = -1;

struct NodeState {
  // Waiting customers by class id (0-based), head first.
  std::vector<int> queue;
  // Occupancy codes: 0 idle, c + 1 when serving class c, kOffDuty for a
  // server that is not staffed in this trajectory.
  std::vector<int> servers;

  int in_system() const {
    return static_cast<int>(queue.size()) +
           static_cast<int>(std::count_if(servers.begin(), servers.end(), [](int s) { return s > 0; }));
  }
  int idle_servers() const {
    return static_cast<int>(std::count(servers.begin(), servers.end(), 0));
  }

  friend bool operator==(const NodeState&, const NodeState&) = default;
};

struct SystemState {
  std::vector<NodeState> nodes;
  double clock = 0.0;

  static SystemState empty(const EventSchema& schema) {
    SystemState s;
    for (const auto& n : schema.nodes) s.nodes.push_back({{}, std::vector<int>(static_cast<std::size_t>(n.servers), 0)});
    return s;
  }

  int in_system() const {
    int total = 0;
    for (const auto& n : nodes) total += n.in_system();
    return total;
  }

  friend bool operator==(const SystemState&, const SystemState&) = default;
};

struct Trajectory {
  std::shared_ptr<const EventSchema> schema;
  SystemState initial;
  std::vector<EventRecord> records;
  Json meta = Json::object();
  // Simulator-side customer serial per record (empty when unknown). Used to
  // disambiguate abandonments and pooled completions during replay.
  std::vector<std::int64_t> serials;

  double duration() const {
    double t = 0.0;
    for (const auto& r : records) t += r.dt;
    return t;
  }
};

class SchemaViolation : public std::runtime_error {
 public:
  SchemaViolation(std::size_t index, const std::string& what)
      : std::runtime_error("schema violation at record " + std::to_string(index) + ": " + what),
        index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

// One customer's stay at one node.
struct Visit {
  std::int64_t serial = -1;
  int cls = 0;
  int node = 0;
  double arrive = std::numeric_limits<double>::quiet_NaN();
  double start = std::numeric_limits<double>::quiet_NaN();
  double end = std::numeric_limits<double>::quiet_NaN();
  bool abandoned = false;
  bool external = false;  // entered the system here (not routed)
  long arrive_index = -1;  // record index; -1 when present initially
  long start_index = -1;
  long end_index = -1;
};

// Applies records to a state one at a time, tracking customer identities so
// per-customer waiting and service times can be read off afterwards.
class Replayer {
 public:
  Replayer(const EventSchema& schema, const SystemState& initial, bool track_visits = false)
      : schema_(&schema), state_(initial), track_(track_visits) {
    if (state_.nodes.size() != schema.nodes.size())
      throw std::invalid_argument("initial state does not match schema node count");
    queue_ids_.resize(state_.nodes.size());
    server_ids_.resize(state_.nodes.size());
    for (std::size_t k = 0; k < state_.nodes.size(); ++k) {
      auto& node = state_.nodes[k];
      if (node.servers.size() != static_cast<std::size_t>(schema.nodes[k].servers))
        throw std::invalid_argument("initial state server count does not match schema");
      for (int code : node.servers)
        if (code < kOffDuty || code > schema.num_classes) throw std::invalid_argument("initial state has a bad server code");
      server_ids_[k].assign(node.servers.size(), -1);
      for (std::size_t j = 0; j < node.servers.size(); ++j)
        if (node.servers[j] > 0) server_ids_[k][j] = open_visit(next_serial_++, node.servers[j] - 1, static_cast<int>(k), true, -1);
      for (int c : node.queue) queue_ids_[k].push_back(open_visit(next_serial_++, c, static_cast<int>(k), false, -1));
    }
  }

  const SystemState& state() const noexcept { return state_; }
  const std::vector<Visit>& visits() const noexcept { return visits_; }
  std::size_t applied() const noexcept { return applied_; }

  // Applies record `index`; `serial_hint` names the customer an abandonment
  // or pooled completion refers to when the caller knows it.
  void apply(const EventRecord& r, std::int64_t serial_hint = -1) {
    const std::size_t index = applied_;
    const auto& schema = *schema_;
    if (r.event < 0 || r.event >= schema.num_events()) throw SchemaViolation(index, "unknown event id");
    if (!(r.dt >= 0.0) || !std::isfinite(r.dt)) throw SchemaViolation(index, "negative or non-finite dt");
    const bool bearing = schema.class_bearing[static_cast<std::size_t>(r.event)];
    if (bearing != r.cls.has_value())
      throw SchemaViolation(index, bearing ? "missing class" : "unexpected class");
    if (r.cls && (*r.cls < 0 || *r.cls >= schema.num_classes)) throw SchemaViolation(index, "class out of range");

    state_.clock += r.dt;
    const double now = state_.clock;
    const auto& tr = schema.transitions[static_cast<std::size_t>(r.event)];
    const auto k = static_cast<std::size_t>(tr.node);
    auto& node = state_.nodes[k];

    switch (tr.kind) {
      case TransitionKind::arrival: {
        const int cls = r.cls.value_or(0);
        const std::int64_t serial = next_serial_++;
        admit(tr.node, open_visit(serial, cls, tr.node, true, static_cast<long>(index)), cls, now, index);
        break;
      }
      case TransitionKind::departure: {
        int j = tr.server;
        if (j >= 0) {
          const int code = node.servers[static_cast<std::size_t>(j)];
          if (code <= 0) throw SchemaViolation(index, "departure from idle server");
          if (r.cls && code - 1 != *r.cls) throw SchemaViolation(index, "departure class does not match server");
        } else {
          j = pick_pooled_server(k, r.cls, serial_hint);
          if (j < 0) throw SchemaViolation(index, "no busy server holds the departing class");
        }
        const auto sj = static_cast<std::size_t>(j);
        const int cls = node.servers[sj] - 1;
        const long vid = server_ids_[k][sj];
        close_visit(vid, now, static_cast<long>(index), false);
        node.servers[sj] = 0;
        server_ids_[k][sj] = -1;
        pull_from_queue(k, sj, now, index);
        if (tr.route_to >= 0) {
          const std::int64_t serial = vid >= 0 && track_ ? visits_[static_cast<std::size_t>(vid)].serial : -1;
          admit(tr.route_to, open_visit(serial, cls, tr.route_to, false, static_cast<long>(index)), cls, now, index);
        }
        break;
      }
      case TransitionKind::abandonment: {
        const int pos = pick_waiting(k, r.cls, serial_hint);
        if (pos < 0) throw SchemaViolation(index, "abandonment with no eligible waiting customer");
        const auto sp = static_cast<std::size_t>(pos);
        close_visit(queue_ids_[k][sp], now, static_cast<long>(index), true);
        node.queue.erase(node.queue.begin() + pos);
        queue_ids_[k].erase(queue_ids_[k].begin() + pos);
        break;
      }
    }
    ++applied_;
  }

 private:
  long open_visit(std::int64_t serial, int cls, int node, bool external, long index) {
    if (!track_) return -1;
    Visit v;
    v.serial = serial;
    v.cls = cls;
    v.node = node;
    v.external = external && index >= 0;
    v.arrive_index = index;
    if (index >= 0) v.arrive = state_.clock;
    visits_.push_back(v);
    return static_cast<long>(visits_.size()) - 1;
  }

  void close_visit(long vid, double now, long index, bool abandoned) {
    if (vid < 0) return;
    auto& v = visits_[static_cast<std::size_t>(vid)];
    v.end = now;
    v.end_index = index;
    v.abandoned = abandoned;
  }

  void start_visit(long vid, double now, long index) {
    if (vid < 0) return;
    auto& v = visits_[static_cast<std::size_t>(vid)];
    v.start = now;
    v.start_index = index;
  }

  void admit(int node_id, long vid, int cls, double now, std::size_t index) {
    const auto k = static_cast<std::size_t>(node_id);
    auto& node = state_.nodes[k];
    for (std::size_t j = 0; j < node.servers.size(); ++j) {
      if (node.servers[j] == 0) {
        node.servers[j] = cls + 1;
        server_ids_[k][j] = vid;
        start_visit(vid, now, static_cast<long>(index));
        return;
      }
    }
    node.queue.push_back(cls);
    queue_ids_[k].push_back(vid);
  }

  int rank(std::size_t k, int cls) const {
    const auto& order = schema_->nodes[k].priority_order;
    auto it = std::find(order.begin(), order.end(), cls);
    return it == order.end() ? static_cast<int>(order.size()) + cls : static_cast<int>(it - order.begin());
  }

  void pull_from_queue(std::size_t k, std::size_t j, double now, std::size_t index) {
    auto& node = state_.nodes[k];
    if (node.queue.empty()) return;
    std::size_t pos = 0;
    if (schema_->nodes[k].discipline == Discipline::priority) {
      int best = rank(k, node.queue[0]);
      for (std::size_t p = 1; p < node.queue.size(); ++p) {
        const int r = rank(k, node.queue[p]);
        if (r < best) {
          best = r;
          pos = p;
        }
      }
    }
    node.servers[j] = node.queue[pos] + 1;
    server_ids_[k][j] = queue_ids_[k][pos];
    start_visit(queue_ids_[k][pos], now, static_cast<long>(index));
    node.queue.erase(node.queue.begin() + static_cast<long>(pos));
    queue_ids_[k].erase(queue_ids_[k].begin() + static_cast<long>(pos));
  }

  int pick_pooled_server(std::size_t k, std::optional<int> cls, std::int64_t hint) const {
    const auto& servers = state_.nodes[k].servers;
    if (hint >= 0 && track_) {
      for (std::size_t j = 0; j < servers.size(); ++j) {
        const long vid = server_ids_[k][j];
        if (vid >= 0 && visits_[static_cast<std::size_t>(vid)].serial == hint &&
            (!cls || servers[j] - 1 == *cls))
          return static_cast<int>(j);
      }
    }
    for (std::size_t j = 0; j < servers.size(); ++j)
      if (servers[j] > 0 && (!cls || servers[j] - 1 == *cls)) return static_cast<int>(j);
    return -1;
  }

  int pick_waiting(std::size_t k, std::optional<int> cls, std::int64_t hint) const {
    const auto& queue = state_.nodes[k].queue;
    if (hint >= 0 && track_) {
      for (std::size_t p = 0; p < queue.size(); ++p) {
        const long vid = queue_ids_[k][p];
        if (vid >= 0 && visits_[static_cast<std::size_t>(vid)].serial == hint && (!cls || queue[p] == *cls))
          return static_cast<int>(p);
      }
    }
    for (std::size_t p = 0; p < queue.size(); ++p)
      if (!cls || queue[p] == *cls) return static_cast<int>(p);
    return -1;
  }

  const EventSchema* schema_;
  SystemState state_;
  bool track_;
  std::vector<std::vector<long>> queue_ids_;
  std::vector<std::vector<long>> server_ids_;
  std::vector<Visit> visits_;
  std::int64_t next_serial_ = 0;
  std::size_t applied_ = 0;
};

// State after each record; element k is the initial state with records
// 0..k applied.
inline std::vector<SystemState> reconstruct_states(const Trajectory& traj, const EventSchema& schema) {
  Replayer replay(schema, traj.initial);
  std::vector<SystemState> out;
  out.reserve(traj.records.size());
  for (const auto& r : traj.records) {
    replay.apply(r);
    out.push_back(replay.state());
  }
  return out;
}

inline std::vector<SystemState> reconstruct_states(const Trajectory& traj) {
  return reconstruct_states(traj, *traj.schema);
}

// Per-visit bookkeeping for the whole trajectory, using simulator serials
// when the trajectory carries them.
inline std::vector<Visit> customer_visits(const Trajectory& traj) {
  Replayer replay(*traj.schema, traj.initial, true);
  for (std::size_t i = 0; i < traj.records.size(); ++i)
    replay.apply(traj.records[i], traj.serials.empty() ? -1 : traj.serials[i]);
  return replay.visits();
}

// True when the records replay from the initial state without violation.
inline bool is_valid(const Trajectory& traj, const EventSchema& schema) {
  try {
    Replayer replay(schema, traj.initial);
    for (const auto& r : traj.records) replay.apply(r);
    return true;
  } catch (const SchemaViolation&) {
    return false;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

}  // namespace queueseq
