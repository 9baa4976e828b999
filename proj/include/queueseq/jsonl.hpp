#pragma once

// JSON Lines event-table files.
//
// A file holds one or more tables. Each table is a header object followed by
// `n_records` record lines of the fixed form {"dt":<float>,"e":<int>,"c":<int|null>},
// floats written with 17 significant digits so values round-trip exactly.

#include <cstdio>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "queueseq/events.hpp"

namespace queueseq {

inline constexpr int kTableFormatVersion = 1;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Json to_json(const EventSchema& s) {
  Json nodes = Json::array();
  for (const auto& n : s.nodes) {
    nodes.push_back({{"name", n.name},
                     {"servers", n.servers},
                     {"discipline", n.discipline == Discipline::fifo ? "fifo" : "priority"},
                     {"priority_order", n.priority_order}});
  }
  Json transitions = Json::array();
  for (const auto& t : s.transitions) {
    const char* kind = t.kind == TransitionKind::arrival     ? "arrival"
                       : t.kind == TransitionKind::departure ? "departure"
                                                             : "abandonment";
    transitions.push_back({{"kind", kind}, {"node", t.node}, {"server", t.server}, {"route_to", t.route_to}});
  }
  std::vector<int> bearing(s.class_bearing.begin(), s.class_bearing.end());
  return {{"tag", s.tag},
          {"event_names", s.event_names},
          {"num_classes", s.num_classes},
          {"max_queue", s.max_queue},
          {"nodes", nodes},
          {"transitions", transitions},
          {"class_bearing", bearing}};
}

inline EventSchema schema_from_json(const Json& j) {
  EventSchema s;
  s.tag = j.value("tag", "");
  s.event_names = j.at("event_names").get<std::vector<std::string>>();
  s.num_classes = j.at("num_classes").get<int>();
  s.max_queue = j.value("max_queue", 100);
  for (const auto& n : j.at("nodes")) {
    NodeSpec spec;
    spec.name = n.value("name", "");
    spec.servers = n.at("servers").get<int>();
    const auto d = n.value("discipline", "fifo");
    if (d == "fifo") spec.discipline = Discipline::fifo;
    else if (d == "priority") spec.discipline = Discipline::priority;
    else throw FormatError("unknown discipline '" + d + "'");
    spec.priority_order = n.value("priority_order", std::vector<int>{});
    s.nodes.push_back(spec);
  }
  for (const auto& t : j.at("transitions")) {
    Transition tr;
    const auto kind = t.at("kind").get<std::string>();
    if (kind == "arrival") tr.kind = TransitionKind::arrival;
    else if (kind == "departure") tr.kind = TransitionKind::departure;
    else if (kind == "abandonment") tr.kind = TransitionKind::abandonment;
    else throw FormatError("unknown transition kind '" + kind + "'");
    tr.node = t.at("node").get<int>();
    tr.server = t.value("server", -1);
    tr.route_to = t.value("route_to", -1);
    s.transitions.push_back(tr);
  }
  for (int b : j.at("class_bearing").get<std::vector<int>>()) s.class_bearing.push_back(b != 0);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return s;
}

inline Json to_json(const SystemState& s) {
  Json nodes = Json::array();
  for (const auto& n : s.nodes) nodes.push_back({{"queue", n.queue}, {"servers", n.servers}});
  return {{"clock", s.clock}, {"nodes", nodes}};
}

inline SystemState state_from_json(const Json& j) {
  SystemState s;
  s.clock = j.value("clock", 0.0);
  for (const auto& n : j.at("nodes"))
    s.nodes.push_back({n.at("queue").get<std::vector<int>>(), n.at("servers").get<std::vector<int>>()});
  return s;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_record(std::ostream& os, const EventRecord& r) {
  os << "{\"dt\":" << format_double(r.dt) << ",\"e\":" << r.event << ",\"c\":";
  if (r.cls) os << *r.cls;
  else os << "null";
  os << "}\n";
}

inline void write_table(std::ostream& os, const Trajectory& t) {
  Json header = {{"kind", "queueseq-table"},
                 {"version", kTableFormatVersion},
                 {"schema", to_json(*t.schema)},
                 {"initial_state", to_json(t.initial)},
                 {"meta", t.meta},
                 {"n_records", t.records.size()}};
  os << header.dump() << '\n';
  for (const auto& r : t.records) write_record(os, r);
}

inline std::string to_jsonl(const std::vector<Trajectory>& trajs) {
  std::ostringstream os;
  for (const auto& t : trajs) write_table(os, t);
  return os.str();
}

inline std::vector<Trajectory> parse_jsonl(std::istream& is) {
  std::vector<Trajectory> out;
  std::map<std::string, std::shared_ptr<const EventSchema>> schemas;
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() -> bool {
    while (std::getline(is, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };
  while (next_line()) {
    Json header;
    try {
      header = Json::parse(line);
    } catch (const Json::exception& e) {
      throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (header.value("kind", "") != "queueseq-table")
      throw FormatError("line " + std::to_string(line_no) + ": expected a table header");
    if (header.value("version", 0) != kTableFormatVersion)
      throw FormatError("line " + std::to_string(line_no) + ": unsupported table version");
    Trajectory t;
    const auto key = header.at("schema").dump();
    auto it = schemas.find(key);
    if (it == schemas.end())
      it = schemas.emplace(key, std::make_shared<const EventSchema>(schema_from_json(header.at("schema")))).first;
    t.schema = it->second;
    t.initial = state_from_json(header.at("initial_state"));
    t.meta = header.value("meta", Json::object());
    const auto n = header.at("n_records").get<std::size_t>();
    t.records.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!next_line()) throw FormatError("table truncated after " + std::to_string(i) + " records");
      try {
        const auto j = Json::parse(line);
        EventRecord r;
        r.dt = j.at("dt").get<double>();
        r.event = j.at("e").get<int>();
        if (!j.at("c").is_null()) r.cls = j.at("c").get<int>();
        t.records.push_back(r);
      } catch (const Json::exception& e) {
        throw FormatError("line " + std::to_string(line_no) + ": " + e.what());
      }
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<Trajectory> parse_jsonl(const std::string& text) {
  std::istringstream is(text);
  return parse_jsonl(is);
}

inline std::vector<Trajectory> read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return parse_jsonl(in);
}

inline void write_jsonl_file(const std::string& path, const std::vector<Trajectory>& trajs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& t : trajs) write_table(out, t);
  if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace queueseq
