#pragma once

// Hyperparameters of the event-sequence model.

#include <memory>
#include <set>
#include <stdexcept>
#include <string>

#include "queueseq/events.hpp"
#include "queueseq/jsonl.hpp"

namespace queueseq {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TimeHead { exponential, riemann };

struct ModelConfig {
  int d_model = 32;
  int d_hidden = 128;
  int n_heads = 2;
  int n_layers = 2;
  int n_event_types = 2;
  int n_classes = 1;
  TimeHead time_head = TimeHead::exponential;
  double riemann_w = 1.0;
  int riemann_n = 100;
  double tail_scale = 0.0;  // 0 means "same as riemann_w"
  int max_seq_len = 1024;
  bool use_state_token = false;
  bool use_policy_token = false;
  int period = 2;
  int max_queue = 100;
  bool final_norm = true;
  // Events per training/generation window; 0 feeds whole trajectories.
  // Each window starts with a state token holding the state at its start.
  int window_events = 0;
  int policy_hidden = 16;
  int max_policy_servers = 20;
  double init_std = 0.02;
  std::string positional = "sinusoidal";
  std::shared_ptr<const EventSchema> schema;

  int prefix_len() const { return 1 + (use_policy_token ? 1 : 0); }
  int head_dim() const { return d_model / n_heads; }
  double effective_tail_scale() const { return tail_scale > 0.0 ? tail_scale : riemann_w; }
  int time_outputs() const { return time_head == TimeHead::exponential ? 1 : riemann_n; }

  int state_dim() const {
    int n = 0;
    for (const auto& node : schema->nodes) n += node.servers + max_queue + 1;
    return n;
  }

  void validate() const {
    if (!schema) throw ConfigError("model config needs a schema");
    if (d_model < 2 || d_hidden < 1 || n_heads < 1 || n_layers < 0) throw ConfigError("bad model sizes");
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (n_event_types != schema->num_events() || n_classes != schema->num_classes)
      throw ConfigError("model vocabulary does not match the schema");
    if (period != (n_classes > 1 && schema->any_class_bearing() ? 3 : 2)) throw ConfigError("period does not match the schema");
    if (time_head == TimeHead::riemann && (riemann_n < 2 || !(riemann_w > 0.0)))
      throw ConfigError("riemann head needs riemann_n >= 2 and riemann_w > 0");
    if (max_queue < 1) throw ConfigError("max_queue must be >= 1");
    if (window_events < 0) throw ConfigError("window_events must be >= 0");
    if (window_events > 0 && !use_state_token) throw ConfigError("windowed models need the state token");
    if (window_events > 0 && prefix_len() + period * window_events > max_seq_len)
      throw ConfigError("max_seq_len is shorter than one window");
    if (positional != "sinusoidal") throw ConfigError("positional encoding '" + positional + "' is not implemented");
  }

  static ModelConfig for_schema(std::shared_ptr<const EventSchema> s) {
    ModelConfig c;
    c.schema = std::move(s);
    c.n_event_types = c.schema->num_events();
    c.n_classes = c.schema->num_classes;
    c.period = c.n_classes > 1 && c.schema->any_class_bearing() ? 3 : 2;
    c.max_queue = c.schema->max_queue;
    return c;
  }
};

inline Json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"d_hidden", c.d_hidden},
          {"n_heads", c.n_heads},
          {"n_layers", c.n_layers},
          {"time_head", c.time_head == TimeHead::exponential ? "exponential" : "riemann"},
          {"riemann_w", c.riemann_w},
          {"riemann_n", c.riemann_n},
          {"tail_scale", c.tail_scale},
          {"max_seq_len", c.max_seq_len},
          {"use_state_token", c.use_state_token},
          {"use_policy_token", c.use_policy_token},
          {"max_queue", c.max_queue},
          {"final_norm", c.final_norm},
          {"window_events", c.window_events},
          {"policy_hidden", c.policy_hidden},
          {"max_policy_servers", c.max_policy_servers},
          {"init_std", c.init_std},
          {"positional", c.positional}};
}

// Reads the keys written by to_json on top of the schema's defaults.
// Unknown keys are rejected.
inline ModelConfig model_config_from_json(const Json& j, std::shared_ptr<const EventSchema> schema) {
  static const std::set<std::string> known{"d_model",  "d_hidden",        "n_heads",          "n_layers",
                                           "time_head", "riemann_w",      "riemann_n",        "tail_scale",
                                           "max_seq_len", "use_state_token", "use_policy_token", "max_queue",
                                           "final_norm", "window_events",  "policy_hidden",    "max_policy_servers",
                                           "init_std",  "positional"};
  if (!j.is_object()) throw ConfigError("model config must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown model config key '" + k + "'");
  auto c = ModelConfig::for_schema(std::move(schema));
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.d_hidden = j.value("d_hidden", c.d_hidden);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_layers = j.value("n_layers", c.n_layers);
    const auto head = j.value("time_head", std::string("exponential"));
    if (head == "exponential") c.time_head = TimeHead::exponential;
    else if (head == "riemann") c.time_head = TimeHead::riemann;
    else throw ConfigError("unknown time_head '" + head + "'");
    c.riemann_w = j.value("riemann_w", c.riemann_w);
    c.riemann_n = j.value("riemann_n", c.riemann_n);
    c.tail_scale = j.value("tail_scale", c.tail_scale);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.use_state_token = j.value("use_state_token", c.use_state_token);
    c.use_policy_token = j.value("use_policy_token", c.use_policy_token);
    c.max_queue = j.value("max_queue", c.max_queue);
    c.final_norm = j.value("final_norm", c.final_norm);
    c.window_events = j.value("window_events", c.window_events);
    c.policy_hidden = j.value("policy_hidden", c.policy_hidden);
    c.max_policy_servers = j.value("max_policy_servers", c.max_policy_servers);
    c.init_std = j.value("init_std", c.init_std);
    c.positional = j.value("positional", c.positional);
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace queueseq
