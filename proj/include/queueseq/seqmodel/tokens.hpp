#pragma once

// Token streams for the sequence model.
//
// Each event becomes [time, event] or [time, event, class] tokens, after a
// prefix of one start token (learned, or the projected initial state) and
// an optional policy token. Targets sit on the token *before* the one that
// reveals them: the time of step k is predicted from the last token of step
// k - 1, the event from the time token, the class from the event token.

#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "queueseq/events.hpp"
#include "queueseq/queuesim.hpp"
#include "queueseq/seqmodel/config.hpp"
#include "queueseq/seqmodel/params.hpp"
#include "queueseq/timedist.hpp"

namespace queueseq {

inline constexpr int kPadId = -100;

class CapacityExceeded : public std::length_error {
 public:
  using std::length_error::length_error;
};

enum class TokenKind { start, state, policy, time, event, cls };

struct TokenSequence {
  int prefix = 1;
  int period = 2;
  int n_events = 0;
  std::vector<TokenKind> kind;
  std::vector<int> ids;        // event id, class id, or time bin
  std::vector<double> values;  // dt on time tokens
  std::vector<double> state_vec;  // empty without a state token
  std::optional<PolicyParams> policy;
  std::vector<int> event_target;
  std::vector<int> class_target;
  std::vector<double> time_target;  // NaN where nothing is predicted

  int length() const { return static_cast<int>(kind.size()); }

  int count_event_targets() const {
    int n = 0;
    for (int t : event_target) n += t != kPadId;
    return n;
  }
  int count_class_targets() const {
    int n = 0;
    for (int t : class_target) n += t != kPadId;
    return n;
  }
  int count_time_targets() const {
    int n = 0;
    for (double t : time_target) n += !std::isnan(t);
    return n;
  }
};

// Fixed-length numeric image of a state: per node the server codes, Q queue
// slots (class + 1, or 0) and the queue length over Q.
inline std::vector<double> state_vector(const SystemState& s, const ModelConfig& cfg) {
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(cfg.state_dim()));
  if (s.nodes.size() != cfg.schema->nodes.size()) throw std::invalid_argument("state does not match the schema");
  for (std::size_t k = 0; k < s.nodes.size(); ++k) {
    const auto& node = s.nodes[k];
    for (int code : node.servers) v.push_back(code);
    for (int q = 0; q < cfg.max_queue; ++q)
      v.push_back(q < static_cast<int>(node.queue.size()) ? node.queue[static_cast<std::size_t>(q)] + 1 : 0);
    v.push_back(static_cast<double>(node.queue.size()) / cfg.max_queue);
  }
  return v;
}

inline int time_token_id(const ModelConfig& cfg, double dt) {
  if (cfg.time_head != TimeHead::riemann) return 0;
  RiemannDist d;
  d.w = cfg.riemann_w;
  d.n = cfg.riemann_n;
  return riemann_bin_index(d, dt);
}

// Sinusoidal encoding of an integer position.
inline void sinusoid(double p, int d, double* out) {
  for (int i = 0; 2 * i < d; ++i) {
    const double angle = p / std::pow(10000.0, 2.0 * i / d);
    out[2 * i] = std::sin(angle);
    if (2 * i + 1 < d) out[2 * i + 1] = std::cos(angle);
  }
}

// Row for a token at (step, slot): sinusoid(step) + sinusoid(slot).
inline RowVec position_row(int step, int slot, int d) {
  RowVec a(d), b(d);
  sinusoid(step, d, a.data());
  sinusoid(slot, d, b.data());
  return a + b;
}

// Encodings of content positions 0..length-1: sinusoid(i / period) plus
// sinusoid(i mod period).
inline Mat positional_encoding(int length, int period, int d) {
  Mat pe(length, d);
  for (int i = 0; i < length; ++i) pe.row(i) = position_row(i / period, i % period, d);
  return pe;
}

// (step, slot) used by the model for sequence position i. Prefix tokens sit
// at step 0; content steps start at 1.
inline std::pair<int, int> model_position(int i, int prefix, int period) {
  if (i < prefix) return {0, 0};
  const int j = i - prefix;
  return {1 + j / period, j % period};
}

inline void push_token(TokenSequence& s, TokenKind k, int id, double value) {
  s.kind.push_back(k);
  s.ids.push_back(id);
  s.values.push_back(value);
  s.event_target.push_back(kPadId);
  s.class_target.push_back(kPadId);
  s.time_target.push_back(std::numeric_limits<double>::quiet_NaN());
}

// Prefix only: start/state token and optional policy token.
inline TokenSequence encode_prefix(const ModelConfig& cfg, const SystemState& initial,
                                   const std::optional<PolicyParams>& policy) {
  TokenSequence s;
  s.prefix = cfg.prefix_len();
  s.period = cfg.period;
  if (cfg.use_state_token) {
    s.state_vec = state_vector(initial, cfg);
    push_token(s, TokenKind::state, 0, 0.0);
  } else {
    push_token(s, TokenKind::start, 0, 0.0);
  }
  if (cfg.use_policy_token) {
    if (!policy) throw std::invalid_argument("model expects a policy but none was given");
    if (policy->n_servers < 0 || policy->n_servers > cfg.max_policy_servers)
      throw std::invalid_argument("policy server count outside the embedding table");
    s.policy = policy;
    push_token(s, TokenKind::policy, policy->n_servers, policy->c);
  }
  return s;
}

// Appends one event (tokens and targets).
inline void append_event(TokenSequence& s, const ModelConfig& cfg, const EventRecord& r) {
  const auto& schema = *cfg.schema;
  if (r.event < 0 || r.event >= schema.num_events()) throw std::invalid_argument("event id out of range");
  s.time_target.back() = r.dt;
  push_token(s, TokenKind::time, time_token_id(cfg, r.dt), r.dt);
  s.event_target.back() = r.event;
  push_token(s, TokenKind::event, r.event, 0.0);
  if (cfg.period == 3) {
    const bool bearing = schema.class_bearing[static_cast<std::size_t>(r.event)];
    if (bearing && r.cls) s.class_target.back() = *r.cls;
    push_token(s, TokenKind::cls, bearing && r.cls ? *r.cls : cfg.n_classes, 0.0);
  }
  ++s.n_events;
}

inline TokenSequence encode_records(std::span<const EventRecord> records, const SystemState& initial,
                                    const std::optional<PolicyParams>& policy, const ModelConfig& cfg) {
  const long needed = cfg.prefix_len() + static_cast<long>(cfg.period) * static_cast<long>(records.size());
  if (needed > cfg.max_seq_len)
    throw CapacityExceeded("sequence of " + std::to_string(needed) + " tokens exceeds max_seq_len");
  auto s = encode_prefix(cfg, initial, policy);
  for (const auto& r : records) append_event(s, cfg, r);
  return s;
}

inline std::optional<PolicyParams> policy_from_meta(const Json& meta) {
  if (!meta.contains("policy")) return std::nullopt;
  return PolicyParams{meta["policy"].at("c").get<double>(), meta["policy"].at("N").get<int>()};
}

inline TokenSequence encode_trajectory(const Trajectory& traj, const ModelConfig& cfg) {
  return encode_records(traj.records, traj.initial, cfg.use_policy_token ? policy_from_meta(traj.meta) : std::nullopt,
                        cfg);
}

// Windows of cfg.window_events events, each starting from the state reached
// so far; a single sequence when windowing is off.
inline std::vector<TokenSequence> encode_windows(const Trajectory& traj, const ModelConfig& cfg) {
  if (cfg.window_events <= 0) return {encode_trajectory(traj, cfg)};
  const auto policy = cfg.use_policy_token ? policy_from_meta(traj.meta) : std::nullopt;
  std::vector<TokenSequence> out;
  Replayer replay(*traj.schema, traj.initial);
  const std::span<const EventRecord> all(traj.records);
  const auto L = static_cast<std::size_t>(cfg.window_events);
  for (std::size_t start = 0; start < all.size(); start += L) {
    const std::size_t len = std::min(L, all.size() - start);
    out.push_back(encode_records(all.subspan(start, len), replay.state(), policy, cfg));
    for (std::size_t i = start; i < start + len; ++i) replay.apply(all[i]);
  }
  if (out.empty()) out.push_back(encode_records({}, traj.initial, policy, cfg));
  return out;
}

inline std::vector<EventRecord> decode(const TokenSequence& s, const ModelConfig& cfg) {
  std::vector<EventRecord> out;
  for (int i = s.prefix; i < s.length(); i += s.period) {
    EventRecord r;
    r.dt = s.values[static_cast<std::size_t>(i)];
    r.event = s.ids[static_cast<std::size_t>(i + 1)];
    if (s.period == 3) {
      const int c = s.ids[static_cast<std::size_t>(i + 2)];
      if (c < cfg.n_classes) r.cls = c;
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace queueseq
