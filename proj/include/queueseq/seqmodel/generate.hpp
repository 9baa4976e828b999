#pragma once

// Autoregressive sampling from a trained model, and teacher-forced step
// predictions for evaluation.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "queueseq/losses.hpp"
#include "queueseq/seqmodel/transformer.hpp"

namespace queueseq {

struct GenerateOptions {
  double temperature = 1.0;  // 0 means argmax events and mean times
};

namespace detail {

inline std::size_t sample_logits(const Eigen::Ref<const RowVec>& logits, double temperature, Rng& rng) {
  if (temperature <= 0.0) {
    Eigen::Index k;
    logits.maxCoeff(&k);
    return static_cast<std::size_t>(k);
  }
  RowVec p = logits / temperature;
  softmax_row(p);
  return rng.categorical(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())));
}

inline double sample_time(const SeqModel& m, const Eigen::Ref<const RowVec>& out, double temperature, Rng& rng) {
  if (m.cfg.time_head == TimeHead::exponential) {
    const double rate = exp_head(out(0));
    return temperature <= 0.0 ? 1.0 / rate : rng.exponential(rate);
  }
  if (temperature <= 0.0) return riemann_mean(riemann_head(m.cfg, out));
  const RowVec scaled = out / temperature;
  return riemann_sample(riemann_head(m.cfg, scaled), rng);
}

// Feeds tokens [dec.length(), s.length()) into the decoder.
inline void feed(Decoder& dec, const TokenSequence& s) {
  while (dec.length() < s.length()) dec.push(s);
}

}  // namespace detail

// Samples n_events continuing `history` (an empty history is plain
// generation from `initial`). Per step the draws are time, then event, then
// class. When a windowed model's context is full it restarts from the state
// half a window back and re-reads the newer half, so at least half a window
// of context is always in view. If a generated event cannot happen in the
// replayed state, it is kept as the last record and generation stops.
inline Trajectory generate(const SeqModel& m, const SystemState& initial, const std::vector<EventRecord>& history,
                           const std::optional<PolicyParams>& policy, int n_events, std::uint64_t seed,
                           const GenerateOptions& opt = {}) {
  if (n_events < 1) throw std::invalid_argument("n_events must be >= 1");
  const auto& cfg = m.cfg;
  const auto& schema = *cfg.schema;
  const bool windowed = cfg.window_events > 0;
  if (!windowed && cfg.prefix_len() + cfg.period * static_cast<long>(history.size() + n_events) > cfg.max_seq_len)
    throw CapacityExceeded("history plus generated events exceed max_seq_len");
  Rng rng(seed);
  Trajectory out;
  out.schema = cfg.schema;
  out.initial = initial;
  out.meta = {{"source", "model"}, {"seed", seed}, {"n_history", history.size()}};
  if (policy) out.meta["policy"] = {{"c", policy->c}, {"N", policy->n_servers}};

  Decoder dec(m);
  std::optional<Replayer> replay;
  if (windowed) replay.emplace(schema, initial);
  TokenSequence s;
  // Records in the current window and the state before each of them.
  std::vector<EventRecord> win;
  std::vector<SystemState> win_states;
  auto slide = [&] {
    const auto keep = static_cast<std::size_t>(cfg.window_events / 2);
    const std::size_t from = win.size() - keep;
    s = encode_prefix(cfg, keep > 0 ? win_states[from] : replay->state(), cfg.use_policy_token ? policy : std::nullopt);
    win.erase(win.begin(), win.begin() + static_cast<std::ptrdiff_t>(from));
    win_states.erase(win_states.begin(), win_states.begin() + static_cast<std::ptrdiff_t>(from));
    for (const auto& r : win) append_event(s, cfg, r);
    dec.reset();
    detail::feed(dec, s);
  };
  s = encode_prefix(cfg, initial, cfg.use_policy_token ? policy : std::nullopt);
  detail::feed(dec, s);
  auto track = [&](const EventRecord& r) {
    if (!windowed) return;
    win_states.push_back(replay->state());
    win.push_back(r);
  };

  // History: teacher-forced context.
  for (const auto& r : history) {
    if (windowed && static_cast<int>(win.size()) == cfg.window_events) slide();
    append_event(s, cfg, r);
    detail::feed(dec, s);
    track(r);
    if (replay) replay->apply(r);
    out.records.push_back(r);
  }

  for (int n = 0; n < n_events; ++n) {
    if (windowed && static_cast<int>(win.size()) == cfg.window_events) slide();
    EventRecord r;
    r.dt = detail::sample_time(m, dec.heads().time_out.row(0), opt.temperature, rng);
    push_token(s, TokenKind::time, time_token_id(cfg, r.dt), r.dt);
    dec.push(s);
    r.event = static_cast<int>(detail::sample_logits(dec.heads().event_logits.row(0), opt.temperature, rng));
    push_token(s, TokenKind::event, r.event, 0.0);
    dec.push(s);
    if (cfg.period == 3) {
      int c = cfg.n_classes;
      if (schema.class_bearing[static_cast<std::size_t>(r.event)]) {
        c = static_cast<int>(detail::sample_logits(dec.heads().class_logits.row(0), opt.temperature, rng));
        r.cls = c;
      }
      push_token(s, TokenKind::cls, c, 0.0);
      dec.push(s);
    } else if (schema.class_bearing[static_cast<std::size_t>(r.event)]) {
      r.cls = 0;
    }
    track(r);
    out.records.push_back(r);
    if (replay) {
      try {
        replay->apply(r);
      } catch (const SchemaViolation&) {
        out.meta["stopped_early"] = true;
        break;
      }
    }
  }
  return out;
}

// Teacher-forced predictions for every step of a trajectory.
inline std::vector<StepPrediction> predict_steps(const SeqModel& m, const Trajectory& traj) {
  const auto& cfg = m.cfg;
  std::vector<StepPrediction> out;
  out.reserve(traj.records.size());
  std::size_t step = 0;
  for (const auto& s : encode_windows(traj, cfg)) {
    const auto h = forward(m, s);
    for (int k = 0; k < s.n_events; ++k, ++step) {
      const auto& r = traj.records[step];
      const int tpos = s.prefix - 1 + s.period * k;
      const int epos = s.prefix + s.period * k;
      StepPrediction p;
      RowVec ev = h.event_logits.row(epos);
      detail::softmax_row(ev);
      p.event_probs.assign(ev.data(), ev.data() + ev.size());
      if (cfg.period == 3 && r.cls) {
        RowVec cl = h.class_logits.row(epos + 1);
        detail::softmax_row(cl);
        p.class_probs.assign(cl.data(), cl.data() + cl.size());
      }
      if (cfg.time_head == TimeHead::exponential) {
        const double raw = h.time_out(tpos, 0);
        p.time_mean = 1.0 / exp_head(raw);
        p.time_nll = exp_nll(raw, r.dt);
      } else {
        const auto dist = riemann_head(cfg, h.time_out.row(tpos));
        p.time_mean = riemann_mean(dist);
        p.time_nll = -riemann_logpdf(dist, r.dt);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

inline Predictor model_predictor(const SeqModel& m) {
  return [&m](const Trajectory& t) { return predict_steps(m, t); };
}

}  // namespace queueseq
