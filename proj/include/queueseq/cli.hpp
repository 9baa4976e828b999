#pragma once

// Command-line driver: simulate, train, generate, evaluate, uq and
// counterfactual. Each command reads a versioned JSON config, writes its
// outputs plus resolved_config.json into --out, and returns one of the exit
// codes below.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "queueseq/eval.hpp"
#include "queueseq/jsonl.hpp"
#include "queueseq/log.hpp"
#include "queueseq/metrics.hpp"
#include "queueseq/oracle.hpp"
#include "queueseq/queuesim.hpp"
#include "queueseq/seqmodel.hpp"
#include "queueseq/stats.hpp"

namespace queueseq::cli {

inline constexpr int kConfigVersion = 1;

enum ExitCode : int { ok = 0, failure = 1, config_error = 2, diverged = 3, io_error = 4 };

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::optional<int> jobs;
};

// ---------------------------------------------------------------------------
// Config reading

inline void check_keys(const Json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <typename T>
T get(const Json& j, const std::string& key, const T& fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const Json::exception&) {
    throw ConfigError("key '" + key + "' has the wrong type");
  }
}

template <typename T>
T require(const Json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw ConfigError(where + " needs '" + key + "'");
  return get<T>(j, key, T{});
}

inline Json read_config(const std::string& path, const std::string& command) {
  if (path.empty()) throw ConfigError("--config is required");
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (get<int>(j, "version", -1) != kConfigVersion)
    throw ConfigError("config needs \"version\": " + std::to_string(kConfigVersion));
  if (j.contains("command") && get<std::string>(j, "command", "") != command)
    throw ConfigError("config is for command '" + j["command"].get<std::string>() + "', not '" + command + "'");
  return j;
}

inline Json dist_to_json(const Dist& d) {
  switch (d.kind) {
    case Dist::Kind::exponential: return {{"kind", "exponential"}, {"rate", d.a}};
    case Dist::Kind::uniform: return {{"kind", "uniform"}, {"lo", d.a}, {"hi", d.b}};
    case Dist::Kind::deterministic: return {{"kind", "deterministic"}, {"value", d.a}};
    case Dist::Kind::empirical: return {{"kind", "empirical"}, {"samples", d.samples}};
  }
  return {};
}

inline Dist dist_from_json(const Json& j, const std::string& where) {
  const auto kind = require<std::string>(j, "kind", where);
  if (kind == "exponential") {
    check_keys(j, {"kind", "rate"}, where);
    return Dist::exponential(require<double>(j, "rate", where));
  }
  if (kind == "uniform") {
    check_keys(j, {"kind", "lo", "hi"}, where);
    return Dist::uniform(require<double>(j, "lo", where), require<double>(j, "hi", where));
  }
  if (kind == "deterministic") {
    check_keys(j, {"kind", "value"}, where);
    return Dist::deterministic(require<double>(j, "value", where));
  }
  if (kind == "empirical") {
    check_keys(j, {"kind", "samples"}, where);
    return Dist::empirical(require<std::vector<double>>(j, "samples", where));
  }
  throw ConfigError("unknown distribution kind '" + kind + "' in " + where);
}

// Systems. network_id 0 in a threenode system means "each trajectory picks
// one of the four networks uniformly".
struct SystemSpec {
  SystemConfig config;
  std::string service_file;  // callcenter only
};

inline Json system_to_json(const SystemSpec& spec) {
  return std::visit(
      [&](const auto& c) -> Json {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, MmnConfig>) {
          return {{"type", "mmn"}, {"lambdas", c.lambdas}, {"nus", c.nus}, {"n_servers", c.n_servers},
                  {"discipline", c.discipline == Discipline::fifo ? "fifo" : "priority"},
                  {"priority_order", c.priority_order}};
        } else if constexpr (std::is_same_v<T, Gg1Config>) {
          return {{"type", "gg1"}, {"inter", dist_to_json(c.inter)}, {"service", dist_to_json(c.service)}};
        } else if constexpr (std::is_same_v<T, MtMnConfig>) {
          return {{"type", "mt_mn"}, {"hourly_rates", c.hourly_rates}, {"nu", c.nu}, {"n_servers", c.n_servers},
                  {"hour_len", c.hour_len}, {"schema_servers", c.schema_servers}};
        } else if constexpr (std::is_same_v<T, CallCenterConfig>) {
          return {{"type", "callcenter"},
                  {"class_props", c.class_props},
                  {"total_arrival_rate", c.total_arrival_rate},
                  {"vru_servers", c.vru_servers},
                  {"n_agents", c.n_agents},
                  {"patience_means_sec", c.patience_means_sec},
                  {"high_priority_classes", c.high_priority_classes},
                  {"service_file", spec.service_file}};
        } else if constexpr (std::is_same_v<T, CounterfactualConfig>) {
          return {{"type", "counterfactual"}, {"c", c.policy.c}, {"n_servers", c.policy.n_servers},
                  {"hourly_rates", c.base.hourly_rates}, {"nu", c.base.nu}, {"hour_len", c.base.hour_len},
                  {"schema_servers", c.base.schema_servers}, {"c_ranges", c.c_ranges}, {"n_range", c.n_range}};
        } else {
          return {{"type", "threenode"}, {"network_id", c.network_id}, {"arrival_rate", c.arrival_rate},
                  {"service_rates", c.service_rates}, {"split_prob", c.split_prob},
                  {"second_entry_share", c.second_entry_share}};
        }
      },
      spec.config);
}

inline SystemSpec system_from_json(const Json& j) {
  const std::string where = "system";
  const auto type = require<std::string>(j, "type", where);
  SystemSpec spec;
  if (type == "mmn") {
    check_keys(j, {"type", "lambdas", "nus", "n_servers", "discipline", "priority_order"}, where);
    MmnConfig c;
    c.lambdas = get(j, "lambdas", c.lambdas);
    c.nus = get(j, "nus", c.nus);
    c.n_servers = get(j, "n_servers", c.n_servers);
    const auto d = get<std::string>(j, "discipline", "fifo");
    if (d == "fifo") c.discipline = Discipline::fifo;
    else if (d == "priority") c.discipline = Discipline::priority;
    else throw ConfigError("unknown discipline '" + d + "'");
    c.priority_order = get(j, "priority_order", c.priority_order);
    c.validate();
    spec.config = c;
  } else if (type == "gg1") {
    check_keys(j, {"type", "inter", "service"}, where);
    Gg1Config c;
    if (j.contains("inter")) c.inter = dist_from_json(j["inter"], "system.inter");
    if (j.contains("service")) c.service = dist_from_json(j["service"], "system.service");
    spec.config = c;
  } else if (type == "mt_mn") {
    check_keys(j, {"type", "hourly_rates", "nu", "n_servers", "hour_len", "schema_servers"}, where);
    MtMnConfig c;
    c.hourly_rates = get(j, "hourly_rates", c.hourly_rates);
    c.nu = get(j, "nu", c.nu);
    c.n_servers = get(j, "n_servers", c.n_servers);
    c.hour_len = get(j, "hour_len", c.hour_len);
    c.schema_servers = get(j, "schema_servers", c.schema_servers);
    c.validate();
    spec.config = c;
  } else if (type == "callcenter") {
    check_keys(j, {"type", "class_props", "total_arrival_rate", "vru_servers", "n_agents", "patience_means_sec",
                   "high_priority_classes", "service_file"},
               where);
    CallCenterConfig c;
    c.total_arrival_rate = 1.0 / 26.0;
    c.class_props = get(j, "class_props", c.class_props);
    c.total_arrival_rate = get(j, "total_arrival_rate", c.total_arrival_rate);
    c.vru_servers = get(j, "vru_servers", c.vru_servers);
    c.n_agents = get(j, "n_agents", c.n_agents);
    c.patience_means_sec = get(j, "patience_means_sec", c.patience_means_sec);
    c.high_priority_classes = get(j, "high_priority_classes", c.high_priority_classes);
    spec.service_file = get(j, "service_file", default_service_file());
    try {
      load_service_samples(spec.service_file, c);
    } catch (const std::invalid_argument&) {
      throw;
    } catch (const std::exception& e) {
      throw IoError(e.what());
    }
    c.validate();
    spec.config = c;
  } else if (type == "counterfactual") {
    check_keys(j, {"type", "c", "n_servers", "hourly_rates", "nu", "hour_len", "schema_servers", "c_ranges", "n_range"},
               where);
    CounterfactualConfig c;
    c.policy.c = get(j, "c", c.policy.c);
    c.policy.n_servers = get(j, "n_servers", c.policy.n_servers);
    c.base.hourly_rates = get(j, "hourly_rates", c.base.hourly_rates);
    c.base.nu = get(j, "nu", c.base.nu);
    c.base.hour_len = get(j, "hour_len", c.base.hour_len);
    c.base.schema_servers = get(j, "schema_servers", c.base.schema_servers);
    if (c.base.schema_servers < 0) throw ConfigError("counterfactual: schema_servers must be >= 0");
    c.c_ranges = get(j, "c_ranges", c.c_ranges);
    c.n_range = get(j, "n_range", c.n_range);
    c.base.validate();
    if (c.policy.n_servers < 1 || c.n_range[0] < 1 || c.n_range[0] > c.n_range[1])
      throw ConfigError("counterfactual: server counts must be >= 1 and n_range ordered");
    for (const auto& r : c.c_ranges)
      if (!(r[0] <= r[1])) throw ConfigError("counterfactual: c_ranges must be [lo, hi] with lo <= hi");
    spec.config = c;
  } else if (type == "threenode") {
    check_keys(j, {"type", "network_id", "arrival_rate", "service_rates", "split_prob", "second_entry_share"}, where);
    ThreeNodeConfig c;
    c.network_id = get(j, "network_id", c.network_id);
    c.arrival_rate = get(j, "arrival_rate", c.arrival_rate);
    c.service_rates = get(j, "service_rates", c.service_rates);
    c.split_prob = get(j, "split_prob", c.split_prob);
    c.second_entry_share = get(j, "second_entry_share", c.second_entry_share);
    if (c.network_id < 0 || c.network_id > 4) throw ConfigError("threenode: network_id must be 0 (mixture) or 1-4");
    spec.config = c;
  } else {
    throw ConfigError("unknown system type '" + type + "'");
  }
  return spec;
}

inline Json prior_to_json(const PriorConfig& p) { return {{"lambda_range", p.lambda_range}, {"nu_range", p.nu_range}}; }

inline PriorConfig prior_from_json(const Json& j) {
  check_keys(j, {"lambda_range", "nu_range"}, "prior");
  PriorConfig p;
  p.lambda_range = get(j, "lambda_range", p.lambda_range);
  p.nu_range = get(j, "nu_range", p.nu_range);
  p.validate();
  return p;
}

inline Json train_options_to_json(const TrainOptions& o) {
  return {{"lr", o.lr},       {"lr_start", o.lr_start}, {"lr_end", o.lr_end}, {"weight_decay", o.weight_decay},
          {"batch", o.batch}, {"clip", o.clip},         {"warmup", o.warmup}, {"epochs", o.epochs},
          {"beta1", o.beta1}, {"beta2", o.beta2},       {"adam_eps", o.adam_eps},
          {"init_head_biases", o.init_head_biases}};
}

inline TrainOptions train_options_from_json(const Json& j) {
  check_keys(j, {"lr", "lr_start", "lr_end", "weight_decay", "batch", "clip", "warmup", "epochs", "beta1", "beta2",
                 "adam_eps", "init_head_biases"},
             "optimizer");
  TrainOptions o;
  o.lr = get(j, "lr", o.lr);
  o.lr_start = get(j, "lr_start", o.lr_start);
  o.lr_end = get(j, "lr_end", o.lr_end);
  o.weight_decay = get(j, "weight_decay", o.weight_decay);
  o.batch = get(j, "batch", o.batch);
  o.clip = get(j, "clip", o.clip);
  o.warmup = get(j, "warmup", o.warmup);
  o.epochs = get(j, "epochs", o.epochs);
  o.beta1 = get(j, "beta1", o.beta1);
  o.beta2 = get(j, "beta2", o.beta2);
  o.adam_eps = get(j, "adam_eps", o.adam_eps);
  o.init_head_biases = get(j, "init_head_biases", o.init_head_biases);
  if (o.batch < 1 || o.epochs < 0 || o.warmup < 0 || !(o.lr > 0.0)) throw ConfigError("bad optimizer settings");
  return o;
}

// ---------------------------------------------------------------------------
// Output helpers

inline std::filesystem::path out_path(const Globals& g, const std::string& name) {
  std::error_code ec;
  std::filesystem::create_directories(g.out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + g.out_dir + "': " + ec.message());
  return std::filesystem::path(g.out_dir) / name;
}

inline void write_text(const Globals& g, const std::string& name, const std::string& text) {
  const auto p = out_path(g, name);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw IoError("write to '" + p.string() + "' failed");
}

inline void write_json(const Globals& g, const std::string& name, const Json& j) { write_text(g, name, j.dump(2) + "\n"); }

inline std::string fmt_num(double v) { return std::isnan(v) ? std::string() : format_double(v); }

struct RunContext {
  Json raw;
  Json resolved;
  std::uint64_t seed = 0;
  int jobs = 1;
};

inline RunContext start_run(const Globals& g, const std::string& command, const std::set<std::string>& keys) {
  RunContext ctx;
  ctx.raw = read_config(g.config_path, command);
  auto known = keys;
  known.insert({"version", "command", "seed", "jobs"});
  check_keys(ctx.raw, known, "config");
  ctx.seed = g.seed.value_or(get<std::uint64_t>(ctx.raw, "seed", 0));
  ctx.jobs = g.jobs.value_or(get<int>(ctx.raw, "jobs", 1));
  if (ctx.jobs < 1) throw ConfigError("jobs must be >= 1");
  ctx.resolved = {{"version", kConfigVersion}, {"command", command}, {"seed", ctx.seed}, {"jobs", ctx.jobs}};
  return ctx;
}

inline std::vector<Trajectory> read_data(const std::string& path) {
  auto data = read_jsonl_file(path);
  if (data.empty()) throw FormatError("'" + path + "' holds no trajectories");
  const auto ref = to_json(*data.front().schema);
  for (const auto& t : data)
    if (t.schema != data.front().schema && to_json(*t.schema) != ref)
      throw FormatError("'" + path + "' mixes event schemas");
  return data;
}

inline Checkpoint read_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("a checkpoint path is required");
  return load_checkpoint(path);
}

// ---------------------------------------------------------------------------
// simulate

inline std::vector<Trajectory> simulate_set(const SystemSpec& spec, const std::optional<PriorConfig>& prior,
                                            std::size_t K, std::size_t n, std::uint64_t seed, int jobs) {
  const auto* tn = std::get_if<ThreeNodeConfig>(&spec.config);
  if (!tn || tn->network_id != 0) return sample_dataset(spec.config, prior, K, n, seed, jobs);
  if (prior) throw ConfigError("a prior only applies to single-class mmn systems");
  std::vector<Trajectory> out(K);
  parallel_for(K, jobs, [&](std::size_t k) {
    const std::uint64_t child = Rng::child_seed(seed, k);
    ThreeNodeConfig c = *tn;
    c.network_id = 1 + static_cast<int>(Rng(Rng::child_seed(child, 0x3E7)).below(4));
    out[k] = simulate_threenode(c, n, child);
    out[k].meta["index"] = k;
  });
  return out;
}

inline int cmd_simulate(const Globals& g) {
  auto ctx = start_run(g, "simulate", {"system", "prior", "n_trajectories", "n_events"});
  const auto spec = system_from_json(require<Json>(ctx.raw, "system", "config"));
  std::optional<PriorConfig> prior;
  if (ctx.raw.contains("prior") && !ctx.raw["prior"].is_null()) prior = prior_from_json(ctx.raw["prior"]);
  const auto K = get<std::size_t>(ctx.raw, "n_trajectories", 100);
  const auto n = get<std::size_t>(ctx.raw, "n_events", 200);
  if (K < 1 || n < 1) throw ConfigError("n_trajectories and n_events must be >= 1");
  ctx.resolved["system"] = system_to_json(spec);
  ctx.resolved["prior"] = prior ? prior_to_json(*prior) : Json(nullptr);
  ctx.resolved["n_trajectories"] = K;
  ctx.resolved["n_events"] = n;
  std::vector<Trajectory> data;
  try {
    data = simulate_set(spec, prior, K, n, ctx.seed, ctx.jobs);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  write_jsonl_file(out_path(g, "data.jsonl").string(), data);
  write_json(g, "resolved_config.json", ctx.resolved);
  log_info("simulate: wrote {} trajectories of {} events", K, n);
  return ok;
}

// ---------------------------------------------------------------------------
// train

struct TrainFlags {
  std::string data;
  std::string resume;
};

inline int cmd_train(const Globals& g, const TrainFlags& flags) {
  auto ctx = start_run(g, "train", {"data", "validation", "val_fraction", "model", "optimizer", "resume",
                                    "stop_after_epoch"});
  const auto data_path = flags.data.empty() ? require<std::string>(ctx.raw, "data", "config") : flags.data;
  const auto val_path = get<std::string>(ctx.raw, "validation", "");
  const auto val_fraction = get<double>(ctx.raw, "val_fraction", 0.0);
  const auto resume = flags.resume.empty() ? get<std::string>(ctx.raw, "resume", "") : flags.resume;
  const auto stop_after = get<int>(ctx.raw, "stop_after_epoch", -1);
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");

  auto train_set = read_data(data_path);
  std::vector<Trajectory> val_set;
  if (!val_path.empty()) {
    val_set = read_data(val_path);
  } else if (val_fraction > 0.0) {
    const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(train_set.size())));
    if (n_val >= train_set.size()) throw ConfigError("val_fraction leaves no training data");
    val_set.assign(train_set.end() - static_cast<std::ptrdiff_t>(n_val), train_set.end());
    train_set.resize(train_set.size() - n_val);
  }

  TrainOptions opt = train_options_from_json(ctx.raw.value("optimizer", Json::object()));
  opt.seed = ctx.seed;
  opt.jobs = ctx.jobs;

  TrainState st;
  const bool resuming = !resume.empty();
  if (resuming) {
    auto ck = read_checkpoint(resume);
    st = std::move(ck.state);
    if (!ctx.raw.contains("optimizer") && ck.extra.contains("optimizer")) {
      opt = train_options_from_json(ck.extra["optimizer"]);
      opt.seed = ctx.seed;
      opt.jobs = ctx.jobs;
    }
    if (ctx.raw.contains("model")) throw ConfigError("the model section is taken from the checkpoint when resuming");
    if (st.adam.m.empty()) throw FormatError("checkpoint '" + resume + "' has no optimizer state");
    if (to_json(*st.model.cfg.schema) != to_json(*train_set.front().schema))
      throw FormatError("training data schema does not match the checkpoint");
  } else {
    auto cfg = model_config_from_json(ctx.raw.value("model", Json::object()), train_set.front().schema);
    cfg.validate();
    st.model = SeqModel::create(cfg, Rng::child_seed(ctx.seed, 0x5EED));
  }
  ctx.resolved["data"] = data_path;
  ctx.resolved["validation"] = val_path;
  ctx.resolved["val_fraction"] = val_fraction;
  ctx.resolved["model"] = to_json(st.model.cfg);
  ctx.resolved["optimizer"] = train_options_to_json(opt);
  ctx.resolved["resume"] = resume;
  ctx.resolved["stop_after_epoch"] = stop_after;
  write_json(g, "resolved_config.json", ctx.resolved);

  const auto tr = encode_dataset(train_set, st.model.cfg);
  const auto va = encode_dataset(val_set, st.model.cfg);
  if (!resuming) st = start_training(std::move(st.model), tr, opt);
  const Json extra = {{"optimizer", train_options_to_json(opt)}, {"data", data_path}, {"seed", ctx.seed}};
  const auto ckpt = out_path(g, "model.ckpt").string();
  auto save = [&](const TrainState& s) {
    save_checkpoint(ckpt, s, extra);
    write_text(g, "loss.csv", loss_history_csv(s.history));
  };
  try {
    continue_training(st, tr, va, opt, save, stop_after);
  } catch (const DivergenceDetected& e) {
    save_checkpoint(out_path(g, "last_good.ckpt").string(), e.last_good(), extra);
    write_text(g, "loss.csv", loss_history_csv(e.last_good().history));
    throw;
  }
  save(st);
  return ok;
}

// ---------------------------------------------------------------------------
// generate

struct GenerateFlags {
  std::string checkpoint;
  std::string history;
  std::vector<std::string> policy;
};

inline PolicyParams parse_policy_flag(const std::vector<std::string>& tokens) {
  PolicyParams p;
  bool has_c = false, has_n = false;
  for (const auto& tok : tokens) {
    std::stringstream ss(tok);
    for (std::string part; std::getline(ss, part, ',');) {
      const auto eq = part.find('=');
      if (eq == std::string::npos) throw ConfigError("--policy expects c=<value> N=<servers>");
      const auto key = part.substr(0, eq), val = part.substr(eq + 1);
      try {
        if (key == "c") {
          p.c = std::stod(val);
          has_c = true;
        } else if (key == "N" || key == "n") {
          p.n_servers = std::stoi(val);
          has_n = true;
        } else {
          throw ConfigError("unknown policy field '" + key + "'");
        }
      } catch (const std::logic_error&) {
        throw ConfigError("bad policy value '" + part + "'");
      }
    }
  }
  if (!has_c || !has_n) throw ConfigError("--policy needs both c and N");
  return p;
}

inline std::optional<PolicyParams> policy_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  check_keys(j, {"c", "n_servers"}, "policy");
  return PolicyParams{require<double>(j, "c", "policy"), require<int>(j, "n_servers", "policy")};
}

inline Json policy_to_json(const std::optional<PolicyParams>& p) {
  if (!p) return nullptr;
  return {{"c", p->c}, {"n_servers", p->n_servers}};
}

inline void check_policy(const SeqModel& m, const std::optional<PolicyParams>& p) {
  if (p && !m.cfg.use_policy_token) throw ConfigError("this model has no policy token");
  if (!p && m.cfg.use_policy_token) throw ConfigError("this model needs a policy");
  if (p && (p->n_servers < 1 || p->n_servers > m.cfg.max_policy_servers))
    throw ConfigError("policy server count is outside the model's range");
}

// Empty start for a policy model: servers past the policy's N are off duty.
inline SystemState policy_initial(const SeqModel& m, const std::optional<PolicyParams>& p) {
  const auto& schema = *m.cfg.schema;
  if (!p || schema.nodes.size() != 1) return SystemState::empty(schema);
  if (p->n_servers > schema.nodes[0].servers) throw ConfigError("policy has more servers than the model's schema");
  return staffed_state(schema, p->n_servers);
}

inline std::vector<Trajectory> generate_set(const SeqModel& m, const SystemState& initial,
                                            const std::vector<Trajectory>& histories, std::size_t n_history,
                                            const std::optional<PolicyParams>& policy, std::size_t K, int n_events,
                                            std::uint64_t seed, double temperature, int jobs) {
  std::vector<Trajectory> out(K);
  parallel_for(K, jobs, [&](std::size_t k) {
    std::vector<EventRecord> hist;
    SystemState init = initial;
    if (!histories.empty()) {
      const auto& h = histories[k % histories.size()];
      init = h.initial;
      hist.assign(h.records.begin(), h.records.begin() + static_cast<std::ptrdiff_t>(std::min(n_history, h.records.size())));
    }
    out[k] = generate(m, init, hist, policy, n_events, Rng::child_seed(seed, k), {temperature});
    out[k].meta["index"] = k;
  });
  return out;
}

inline int cmd_generate(const Globals& g, const GenerateFlags& flags) {
  auto ctx = start_run(g, "generate", {"checkpoint", "n_trajectories", "n_events", "initial", "history", "n_history",
                                       "policy", "temperature"});
  const auto ck_path = flags.checkpoint.empty() ? require<std::string>(ctx.raw, "checkpoint", "config") : flags.checkpoint;
  const auto hist_path = flags.history.empty() ? get<std::string>(ctx.raw, "history", "") : flags.history;
  const auto K = get<std::size_t>(ctx.raw, "n_trajectories", 100);
  const auto n = get<int>(ctx.raw, "n_events", 200);
  const auto n_history = get<std::size_t>(ctx.raw, "n_history", SIZE_MAX);
  const auto temperature = get<double>(ctx.raw, "temperature", 1.0);
  auto policy = flags.policy.empty() ? policy_from_json(ctx.raw.value("policy", Json())) : parse_policy_flag(flags.policy);
  if (K < 1 || n < 1) throw ConfigError("n_trajectories and n_events must be >= 1");

  const auto ck = read_checkpoint(ck_path);
  const auto& m = ck.state.model;
  check_policy(m, policy);
  SystemState initial = policy_initial(m, policy);
  if (ctx.raw.contains("initial")) {
    try {
      initial = state_from_json(ctx.raw["initial"]);
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("bad initial state: ") + e.what());
    }
  }
  std::vector<Trajectory> histories;
  if (!hist_path.empty()) {
    histories = read_data(hist_path);
    if (to_json(*histories.front().schema) != to_json(*m.cfg.schema))
      throw FormatError("history schema does not match the checkpoint");
  }
  ctx.resolved["checkpoint"] = ck_path;
  ctx.resolved["n_trajectories"] = K;
  ctx.resolved["n_events"] = n;
  ctx.resolved["initial"] = to_json(initial);
  ctx.resolved["history"] = hist_path;
  ctx.resolved["n_history"] = n_history == SIZE_MAX ? Json(nullptr) : Json(n_history);
  ctx.resolved["policy"] = policy_to_json(policy);
  ctx.resolved["temperature"] = temperature;
  const auto out = generate_set(m, initial, histories, n_history, policy, K, n, ctx.seed, temperature, ctx.jobs);
  write_jsonl_file(out_path(g, "generated.jsonl").string(), out);
  write_json(g, "resolved_config.json", ctx.resolved);
  return ok;
}

// ---------------------------------------------------------------------------
// evaluate

inline std::string loss_table_csv(const LossReport& model, const std::optional<LossReport>& oracle,
                                  const std::optional<OptimalLosses>& closed) {
  std::string s = "loss,model,model_se,empirical_optimal,empirical_optimal_se,closed_form_optimal\n";
  auto row = [&](const char* name, double mv, double mse, double ov, double ose, double cf) {
    s += std::string(name) + "," + fmt_num(mv) + "," + fmt_num(mse) + "," + fmt_num(ov) + "," + fmt_num(ose) + "," +
         fmt_num(cf) + "\n";
  };
  const double nan = std::numeric_limits<double>::quiet_NaN();
  row("event", model.event_loss, model.event_se, oracle ? oracle->event_loss : nan, oracle ? oracle->event_se : nan,
      closed ? closed->event_loss : nan);
  row("time", model.time_loss, model.time_se, oracle ? oracle->time_loss : nan, oracle ? oracle->time_se : nan,
      closed ? closed->time_loss : nan);
  if (model.n_class_steps > 0)
    row("class", model.class_loss, model.class_se, oracle ? oracle->class_loss : nan, oracle ? oracle->class_se : nan, nan);
  return s;
}

inline int cmd_evaluate(const Globals& g, const std::string& checkpoint_flag) {
  auto ctx = start_run(g, "evaluate", {"checkpoint", "test_data", "oracle", "generation", "in_context"});
  const auto ck_path = checkpoint_flag.empty() ? require<std::string>(ctx.raw, "checkpoint", "config") : checkpoint_flag;
  const auto test_path = require<std::string>(ctx.raw, "test_data", "config");
  const auto ck = read_checkpoint(ck_path);
  const auto& m = ck.state.model;
  const auto test = read_data(test_path);
  if (to_json(*test.front().schema) != to_json(*m.cfg.schema)) throw FormatError("test data schema does not match the checkpoint");
  ctx.resolved["checkpoint"] = ck_path;
  ctx.resolved["test_data"] = test_path;

  Json report;
  const auto model = model_losses(m, test, ctx.jobs);
  report["model"] = to_json(model);

  std::optional<LossReport> oracle;
  std::optional<OptimalLosses> closed;
  std::vector<double> lambdas, nus;
  if (ctx.raw.contains("oracle") && !ctx.raw["oracle"].is_null()) {
    const auto& o = ctx.raw["oracle"];
    check_keys(o, {"lambdas", "nus"}, "oracle");
    lambdas = require<std::vector<double>>(o, "lambdas", "oracle");
    nus = require<std::vector<double>>(o, "nus", "oracle");
    if (lambdas.empty() || lambdas.size() != nus.size()) throw ConfigError("oracle needs matching lambdas and nus");
    oracle = parallel_losses(test, mmn_oracle_predictor(lambdas, nus), ctx.jobs);
    report["empirical_optimal"] = to_json(*oracle);
    const auto& schema = *m.cfg.schema;
    if (lambdas.size() == 1 && schema.nodes.size() == 1 && schema.nodes[0].servers == 1) {
      closed = mm1_optimal_losses(lambdas[0], nus[0]);
      report["closed_form_optimal"] = {{"event_loss", closed->event_loss}, {"time_loss", closed->time_loss}};
    }
    ctx.resolved["oracle"] = {{"lambdas", lambdas}, {"nus", nus}};
  } else {
    ctx.resolved["oracle"] = nullptr;
  }

  if (ctx.raw.contains("generation") && !ctx.raw["generation"].is_null()) {
    const auto& j = ctx.raw["generation"];
    check_keys(j, {"n_trajectories", "n_events", "temperature"}, "generation");
    const auto K = get<std::size_t>(j, "n_trajectories", 100);
    const auto n = get<int>(j, "n_events", 200);
    const auto temperature = get<double>(j, "temperature", 1.0);
    if (m.cfg.use_policy_token) throw ConfigError("generation checks do not apply to policy models");
    const auto gen = generate_set(m, SystemState::empty(*m.cfg.schema), {}, 0, std::nullopt, K, n,
                                  Rng::child_seed(ctx.seed, 1), temperature, ctx.jobs);
    Json gj = {{"n_trajectories", K}, {"valid_fraction", valid_fraction(gen, *m.cfg.schema)}};
    if (lambdas.size() == 1) {
      std::vector<double> ia;
      for (const auto& t : gen) {
        if (t.meta.contains("stopped_early")) continue;
        for (double x : extract_interarrival_times(t)) ia.push_back(x);
      }
      if (!ia.empty()) {
        const double rate = lambdas[0];
        const auto ks = stats::ks_one_sample(ia, [rate](double x) { return x <= 0.0 ? 0.0 : -std::expm1(-rate * x); });
        gj["interarrival_ks"] = {{"statistic", ks.statistic}, {"p_value", ks.p_value}, {"n", ia.size()}};
      }
    }
    report["generation"] = gj;
    write_jsonl_file(out_path(g, "generated.jsonl").string(), gen);
    ctx.resolved["generation"] = {{"n_trajectories", K}, {"n_events", n}, {"temperature", temperature}};
  }

  if (ctx.raw.contains("in_context") && !ctx.raw["in_context"].is_null()) {
    const auto& j = ctx.raw["in_context"];
    check_keys(j, {"prefix_lengths", "n_events", "n_trajectories"}, "in_context");
    const auto prefixes = get<std::vector<std::size_t>>(j, "prefix_lengths", {1, 5, 10, 15, 20, 50, 100});
    const auto total = get<std::size_t>(j, "n_events", 400);
    const auto K = std::min(get<std::size_t>(j, "n_trajectories", 100), test.size());
    std::string csv = "prefix,fraction_correct,valid_fraction\n";
    Json rows = Json::array();
    for (std::size_t p : prefixes) {
      if (p >= total) throw ConfigError("in_context prefix lengths must be below n_events");
      std::vector<Trajectory> sub(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(K));
      const auto gen = generate_set(m, SystemState::empty(*m.cfg.schema), sub, p, std::nullopt, K,
                                    static_cast<int>(total - p), Rng::child_seed(ctx.seed, 1000 + p), 1.0, ctx.jobs);
      std::size_t correct = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const auto truth = sub[k].meta.value("network_id", -1);
        correct += !gen[k].meta.contains("stopped_early") && classify_network(gen[k]) == truth;
      }
      const double frac = static_cast<double>(correct) / static_cast<double>(K);
      const double valid = valid_fraction(gen, *m.cfg.schema);
      csv += std::to_string(p) + "," + format_double(frac) + "," + format_double(valid) + "\n";
      rows.push_back({{"prefix", p}, {"fraction_correct", frac}, {"valid_fraction", valid}});
    }
    report["in_context"] = rows;
    write_text(g, "in_context.csv", csv);
    ctx.resolved["in_context"] = {{"prefix_lengths", prefixes}, {"n_events", total}, {"n_trajectories", K}};
  }

  write_text(g, "losses.csv", loss_table_csv(model, oracle, closed));
  write_json(g, "report.json", report);
  write_json(g, "resolved_config.json", ctx.resolved);
  return ok;
}

// ---------------------------------------------------------------------------
// uq

inline std::vector<double> finite_only(const std::vector<double>& xs) {
  std::vector<double> out;
  for (double x : xs)
    if (std::isfinite(x)) out.push_back(x);
  return out;
}

inline int cmd_uq(const Globals& g, const std::string& checkpoint_flag) {
  auto ctx = start_run(g, "uq", {"checkpoint", "prior", "grid_size", "history", "history_file", "n_history", "horizons",
                                 "J", "metric", "compare_block"});
  const auto ck_path = checkpoint_flag.empty() ? get<std::string>(ctx.raw, "checkpoint", "") : checkpoint_flag;
  const auto prior = prior_from_json(ctx.raw.value("prior", Json::object()));
  const auto grid = get<int>(ctx.raw, "grid_size", 101);
  const auto n_history = get<std::size_t>(ctx.raw, "n_history", 200);
  const auto horizons = get<std::vector<std::size_t>>(ctx.raw, "horizons", {25, 50, 100, 200});
  const auto J = get<std::size_t>(ctx.raw, "J", 1000);
  const auto metric_name = get<std::string>(ctx.raw, "metric", "service");
  const bool compare_block = get<bool>(ctx.raw, "compare_block", false);
  const auto hist_file = get<std::string>(ctx.raw, "history_file", "");
  Metric metric;
  try {
    metric = parse_metric(metric_name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (J < 1 || horizons.empty() || grid < 1) throw ConfigError("uq needs J >= 1, grid_size >= 1 and some horizons");

  Trajectory history;
  Json hist_json;
  if (!hist_file.empty()) {
    if (ctx.raw.contains("history")) throw ConfigError("give either history or history_file");
    history = read_data(hist_file).front();
    if (history.records.size() < n_history) throw FormatError("history file is shorter than n_history");
    history.records.resize(n_history);
    hist_json = nullptr;
  } else {
    const auto& hj = ctx.raw.value("history", Json::object());
    check_keys(hj, {"lambda", "nu", "seed"}, "history");
    const double lambda = get(hj, "lambda", 2.0), nu = get(hj, "nu", 4.0);
    const auto hseed = get<std::uint64_t>(hj, "seed", Rng::child_seed(ctx.seed, 0x415));
    history = simulate_mmn({{lambda}, {nu}, 1}, n_history, hseed);
    hist_json = {{"lambda", lambda}, {"nu", nu}, {"seed", hseed}};
  }
  if (history.schema->nodes.size() != 1 || history.schema->nodes[0].servers != 1 || history.schema->num_events() != 2)
    throw ConfigError("uq needs an M/M/1 history");

  std::optional<Checkpoint> ck;
  if (!ck_path.empty()) {
    ck = read_checkpoint(ck_path);
    if (to_json(*ck->state.model.cfg.schema) != to_json(*history.schema))
      throw FormatError("checkpoint schema does not match the history");
    if (ck->state.model.cfg.use_policy_token) throw ConfigError("uq does not take policy models");
  }
  ctx.resolved["checkpoint"] = ck_path;
  ctx.resolved["prior"] = prior_to_json(prior);
  ctx.resolved["grid_size"] = grid;
  ctx.resolved["history"] = hist_json;
  ctx.resolved["history_file"] = hist_file;
  ctx.resolved["n_history"] = n_history;
  ctx.resolved["horizons"] = horizons;
  ctx.resolved["J"] = J;
  ctx.resolved["metric"] = to_string(metric);
  ctx.resolved["compare_block"] = compare_block;
  write_json(g, "resolved_config.json", ctx.resolved);

  const auto post = GridPosterior::uniform(prior, grid, grid);
  Json rows = Json::array();
  std::string csv = "horizon,replica,bootstrap,block,model\n";
  std::vector<double> hs, kls;
  for (std::size_t h : horizons) {
    if (h < 1) throw ConfigError("horizons must be >= 1");
    const std::size_t N = n_history + h;
    const auto hseed = Rng::child_seed(ctx.seed, h);
    const auto boot = bayesian_bootstrap(history, post, J, N, metric, Rng::child_seed(hseed, 1), BootstrapMode::per_step, ctx.jobs);
    Json row = {{"horizon", h}, {"bootstrap_mean", stats::mean(finite_only(boot.f))}};
    std::vector<double> block, model;
    if (compare_block) {
      block = bayesian_bootstrap(history, post, J, N, metric, Rng::child_seed(hseed, 2), BootstrapMode::block, ctx.jobs).f;
      const auto ks = stats::ks_two_sample(finite_only(boot.f), finite_only(block));
      row["block_ks"] = {{"statistic", ks.statistic}, {"p_value", ks.p_value}};
    }
    if (ck) {
      const auto gen = generate_set(ck->state.model, history.initial, {history}, n_history, std::nullopt, J,
                                    static_cast<int>(h), Rng::child_seed(hseed, 3), 1.0, ctx.jobs);
      model.assign(J, std::numeric_limits<double>::quiet_NaN());
      std::size_t invalid = 0;
      for (std::size_t j = 0; j < J; ++j) {
        if (gen[j].meta.contains("stopped_early") || !is_valid(gen[j], *gen[j].schema)) {
          ++invalid;
          continue;
        }
        model[j] = continuation_metric(gen[j], n_history, metric);
      }
      row["model_invalid"] = invalid;
      const auto mf = finite_only(model);
      if (mf.size() >= kMinKlSamples) {
        const auto cmp = uq_compare(mf, finite_only(boot.f));
        row["kl"] = cmp.kl;
        row["w1"] = cmp.w1;
        row["model_mean"] = stats::mean(mf);
        hs.push_back(static_cast<double>(h));
        kls.push_back(cmp.kl);
      } else {
        log_warn("uq: only {} usable model samples at horizon {}", mf.size(), h);
        row["kl"] = nullptr;
      }
    }
    for (std::size_t j = 0; j < J; ++j) {
      csv += std::to_string(h) + "," + std::to_string(j) + "," + fmt_num(boot.f[j]) + "," +
             (block.empty() ? std::string() : fmt_num(block[j])) + "," + (model.empty() ? std::string() : fmt_num(model[j])) + "\n";
    }
    rows.push_back(row);
  }
  Json report = {{"metric", to_string(metric)}, {"horizons", rows}};
  if (hs.size() >= 2) report["kl_spearman"] = stats::spearman(hs, kls);
  write_text(g, "uq_samples.csv", csv);
  write_json(g, "report.json", report);
  return ok;
}

// ---------------------------------------------------------------------------
// counterfactual

inline int cmd_counterfactual(const Globals& g, const std::string& checkpoint_flag) {
  auto ctx = start_run(g, "counterfactual", {"checkpoint", "c", "n_servers", "n_trajectories", "n_events", "metric",
                                             "hourly_rates", "nu", "hour_len"});
  const auto ck_path = checkpoint_flag.empty() ? get<std::string>(ctx.raw, "checkpoint", "") : checkpoint_flag;
  const auto c = get<double>(ctx.raw, "c", 2.0);
  const auto servers = get<std::vector<int>>(ctx.raw, "n_servers", {2, 5, 10});
  const auto K = get<std::size_t>(ctx.raw, "n_trajectories", 200);
  const auto n = get<int>(ctx.raw, "n_events", 350);
  const auto metric_name = get<std::string>(ctx.raw, "metric", "waiting");
  MtMnConfig base = counterfactual_base();
  base.hourly_rates = get(ctx.raw, "hourly_rates", base.hourly_rates);
  base.nu = get(ctx.raw, "nu", base.nu);
  base.hour_len = get(ctx.raw, "hour_len", base.hour_len);
  Metric metric;
  try {
    metric = parse_metric(metric_name);
    base.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (K < 1 || n < 1 || servers.empty()) throw ConfigError("counterfactual needs trajectories, events and server counts");
  for (int s : servers)
    if (s < 1) throw ConfigError("server counts must be >= 1");

  std::optional<Checkpoint> ck;
  if (!ck_path.empty()) {
    ck = read_checkpoint(ck_path);
    if (!ck->state.model.cfg.use_policy_token) throw ConfigError("counterfactual models need the policy token");
  }
  ctx.resolved["checkpoint"] = ck_path;
  ctx.resolved["c"] = c;
  ctx.resolved["n_servers"] = servers;
  ctx.resolved["n_trajectories"] = K;
  ctx.resolved["n_events"] = n;
  ctx.resolved["metric"] = to_string(metric);
  ctx.resolved["hourly_rates"] = base.hourly_rates;
  ctx.resolved["nu"] = base.nu;
  ctx.resolved["hour_len"] = base.hour_len;
  write_json(g, "resolved_config.json", ctx.resolved);

  std::string csv = "source,n_servers,hour,mean\n";
  Json report = {{"metric", to_string(metric)}, {"c", c}};
  std::map<std::string, std::vector<std::map<int, double>>> hourly;
  auto summarize = [&](const std::string& source, int N, std::vector<Trajectory> trajs) {
    // Invalid generations have no well-defined waits; they are counted and left out.
    const auto before = trajs.size();
    std::erase_if(trajs, [](const Trajectory& t) { return !is_valid(t, *t.schema); });
    const auto n_invalid = before - trajs.size();
    const auto avg = hourly_average(std::span<const Trajectory>(trajs), metric, base.hour_len);
    std::map<int, double> by_hour;
    for (const auto& [h, v] : avg) {
      by_hour[h] = v;
      csv += source + "," + std::to_string(N) + "," + std::to_string(h) + "," + format_double(v) + "\n";
    }
    std::vector<double> all;
    for (const auto& t : trajs)
      for (double v : metric_values(t, metric)) all.push_back(v);
    report[source].push_back({{"n_servers", N}, {"mean", all.empty() ? Json(nullptr) : Json(stats::mean(all))},
                              {"n_samples", all.size()}, {"n_invalid", n_invalid}});
    hourly[source].push_back(by_hour);
  };
  for (int N : servers) {
    const auto sseed = Rng::child_seed(ctx.seed, static_cast<std::uint64_t>(N));
    std::vector<Trajectory> sim(K);
    parallel_for(K, ctx.jobs, [&](std::size_t k) {
      sim[k] = simulate_counterfactual({c, N}, base, static_cast<std::size_t>(n), Rng::child_seed(sseed, k));
    });
    summarize("simulator", N, std::move(sim));
    if (ck) {
      check_policy(ck->state.model, PolicyParams{c, N});
      const auto gen = generate_set(ck->state.model, policy_initial(ck->state.model, PolicyParams{c, N}), {}, 0,
                                    PolicyParams{c, N}, K, n, Rng::child_seed(sseed, 0x6E4), 1.0, ctx.jobs);
      summarize("model", N, gen);
    }
  }
  // Strict decrease across the listed server counts, in every hour all of
  // them observed.
  for (auto& [source, per_n] : hourly) {
    bool holds = std::none_of(per_n.begin(), per_n.end(), [](const auto& m) { return m.empty(); });
    for (const auto& [h, v] : per_n.front()) {
      for (std::size_t i = 1; i < per_n.size() && holds; ++i) {
        auto a = per_n[i - 1].find(h), b = per_n[i].find(h);
        if (a != per_n[i - 1].end() && b != per_n[i].end() && !(b->second < a->second)) holds = false;
      }
    }
    report["hourly_ordering_" + source] = holds;
  }
  write_text(g, "hourly.csv", csv);
  write_json(g, "report.json", report);
  return ok;
}

// ---------------------------------------------------------------------------

inline int run(int argc, char** argv) {
  CLI::App app{"Event-sequence models of queueing systems"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config_path, "JSON config file")->required();
    sub->add_option("--seed", g.seed, "Master seed (overrides the config)");
    sub->add_option("--out", g.out_dir, "Output directory");
    sub->add_option("--jobs", g.jobs, "Worker threads");
  };
  auto* sim = app.add_subcommand("simulate", "Simulate a dataset of event tables");
  add_globals(sim);

  TrainFlags tf;
  auto* trn = app.add_subcommand("train", "Train a sequence model");
  add_globals(trn);
  trn->add_option("--data", tf.data, "Training JSONL (overrides the config)");
  trn->add_option("--resume", tf.resume, "Checkpoint to resume from");

  GenerateFlags gf;
  auto* gen = app.add_subcommand("generate", "Sample trajectories from a checkpoint");
  add_globals(gen);
  gen->add_option("--checkpoint", gf.checkpoint, "Model checkpoint");
  gen->add_option("--history", gf.history, "JSONL of history prefixes");
  gen->add_option("--policy", gf.policy, "Policy, e.g. c=2 N=5")->expected(1, 2);

  std::string eval_ck, uq_ck, cf_ck;
  auto* ev = app.add_subcommand("evaluate", "Losses against the oracle and generation checks");
  add_globals(ev);
  ev->add_option("--checkpoint", eval_ck, "Model checkpoint");
  auto* uq = app.add_subcommand("uq", "Model vs Bayesian bootstrap uncertainty");
  add_globals(uq);
  uq->add_option("--checkpoint", uq_ck, "Model checkpoint");
  auto* cf = app.add_subcommand("counterfactual", "Waiting times under staffing policies");
  add_globals(cf);
  cf->add_option("--checkpoint", cf_ck, "Model checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*sim) return cmd_simulate(g);
    if (*trn) return cmd_train(g, tf);
    if (*gen) return cmd_generate(g, gf);
    if (*ev) return cmd_evaluate(g, eval_ck);
    if (*uq) return cmd_uq(g, uq_ck);
    if (*cf) return cmd_counterfactual(g, cf_ck);
  } catch (const DivergenceDetected& e) {
    std::cerr << "error: " << e.what() << " (last good state saved as last_good.ckpt)\n";
    return diverged;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return io_error;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return io_error;
  } catch (const SchemaViolation& e) {
    std::cerr << "error: invalid event data: " << e.what() << "\n";
    return io_error;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const CapacityExceeded& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const Json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return config_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure;
  }
  return failure;
}

}  // namespace queueseq::cli
