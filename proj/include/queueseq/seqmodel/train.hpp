#pragma once

// Adam training loop with warmup + cosine learning rate, global-norm
// clipping and coupled L2 weight decay.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <vector>

#include "queueseq/log.hpp"
#include "queueseq/seqmodel/transformer.hpp"

namespace queueseq {

struct TrainOptions {
  double lr = 5e-4;
  double lr_start = 1e-7;
  double lr_end = 5e-6;
  double weight_decay = 1e-5;
  int batch = 32;
  double clip = 1.0;
  int warmup = 30;
  int epochs = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int jobs = 1;
  // Set the output-head biases from training-data frequencies before the
  // first step.
  bool init_head_biases = true;
};

// Learning rate at a (fractional) epoch.
inline double lr_at(const TrainOptions& o, double epoch) {
  if (o.warmup > 0 && epoch < o.warmup) return o.lr_start + (o.lr - o.lr_start) * epoch / o.warmup;
  const double span = std::max(1, o.epochs - o.warmup);
  const double f = std::clamp((epoch - o.warmup) / span, 0.0, 1.0);
  return o.lr_end + 0.5 * (o.lr - o.lr_end) * (1.0 + std::cos(std::numbers::pi * f));
}

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_event = 0.0;
  double train_class = 0.0;
  double train_time = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();
};

struct AdamState {
  std::vector<double> m, v;
  long step = 0;
};

struct TrainState {
  SeqModel model;
  AdamState adam;
  int epoch = 0;  // epochs completed
  std::vector<EpochStats> history;
};

class DivergenceDetected : public std::runtime_error {
 public:
  DivergenceDetected(const std::string& what, TrainState last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const TrainState& last_good() const noexcept { return last_good_; }

 private:
  TrainState last_good_;
};

inline std::vector<TokenSequence> encode_dataset(const std::vector<Trajectory>& trajs, const ModelConfig& cfg) {
  std::vector<TokenSequence> out;
  for (const auto& t : trajs) {
    auto w = encode_windows(t, cfg);
    std::move(w.begin(), w.end(), std::back_inserter(out));
  }
  return out;
}

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

// Head biases from target frequencies (add-one smoothed) and, for the
// exponential head, the rate of the mean inter-event time.
inline void init_head_biases(SeqModel& m, const std::vector<TokenSequence>& data) {
  const auto& cfg = m.cfg;
  std::vector<double> ev(static_cast<std::size_t>(cfg.n_event_types), 1.0);
  std::vector<double> cl(static_cast<std::size_t>(cfg.n_classes), 1.0);
  std::vector<double> bins(static_cast<std::size_t>(cfg.time_outputs()), 1.0);
  double dt_sum = 0.0;
  long dt_n = 0;
  for (const auto& s : data) {
    for (std::size_t i = 0; i < s.kind.size(); ++i) {
      if (s.event_target[i] != kPadId) ev[static_cast<std::size_t>(s.event_target[i])] += 1.0;
      if (s.class_target[i] != kPadId) cl[static_cast<std::size_t>(s.class_target[i])] += 1.0;
      if (!std::isnan(s.time_target[i])) {
        dt_sum += s.time_target[i];
        ++dt_n;
        if (cfg.time_head == TimeHead::riemann) bins[static_cast<std::size_t>(time_token_id(cfg, s.time_target[i]))] += 1.0;
      }
    }
  }
  auto set_log = [](MatMap b, const std::vector<double>& counts) {
    const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
    for (std::size_t k = 0; k < counts.size(); ++k) b(0, static_cast<Eigen::Index>(k)) = std::log(counts[k] / total);
  };
  set_log(m.params[m.ids.event_b], ev);
  if (m.ids.class_b >= 0) set_log(m.params[m.ids.class_b], cl);
  if (cfg.time_head == TimeHead::riemann) {
    set_log(m.params[m.ids.time_b], bins);
  } else if (dt_n > 0 && dt_sum > 0.0) {
    m.params[m.ids.time_b](0, 0) = inverse_softplus(static_cast<double>(dt_n) / dt_sum);
  }
}

inline double mean_loss(const SeqModel& m, const std::vector<TokenSequence>& data, int jobs, int batch = 64) {
  if (data.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t b = 0; b < data.size(); b += static_cast<std::size_t>(batch)) {
    std::vector<const TokenSequence*> ptrs;
    for (std::size_t i = b; i < std::min(data.size(), b + static_cast<std::size_t>(batch)); ++i) ptrs.push_back(&data[i]);
    total += batch_loss(m, ptrs, nullptr, jobs).total * static_cast<double>(ptrs.size());
  }
  return total / static_cast<double>(data.size());
}

inline TrainState start_training(SeqModel model, const std::vector<TokenSequence>& train_data, const TrainOptions& o) {
  if (train_data.empty()) throw std::invalid_argument("training set is empty");
  if (o.init_head_biases) init_head_biases(model, train_data);
  TrainState st{std::move(model), {}, 0, {}};
  st.adam.m.assign(st.model.params.size(), 0.0);
  st.adam.v.assign(st.model.params.size(), 0.0);
  return st;
}

using EpochCallback = std::function<void(const TrainState&)>;

// Runs epochs st.epoch .. min(o.epochs, stop_at) - 1. The shuffle of epoch e
// depends only on (seed, e), so a resumed run repeats an uninterrupted one.
inline void continue_training(TrainState& st, const std::vector<TokenSequence>& train_data,
                              const std::vector<TokenSequence>& val_data, const TrainOptions& o,
                              const EpochCallback& on_epoch = {}, int stop_at = -1) {
  if (train_data.empty()) throw std::invalid_argument("training set is empty");
  if (o.batch < 1) throw std::invalid_argument("batch size must be >= 1");
  auto& m = st.model;
  const std::size_t n = train_data.size();
  const std::size_t steps_per_epoch = (n + static_cast<std::size_t>(o.batch) - 1) / static_cast<std::size_t>(o.batch);
  ParamStore g = m.params.zeros_like();
  auto& x = m.params.data();
  const int last = stop_at >= 0 ? std::min(stop_at, o.epochs) : o.epochs;
  for (; st.epoch < last; ++st.epoch) {
    TrainState good = st;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(Rng::child_seed(o.seed, static_cast<std::uint64_t>(st.epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);

    EpochStats es;
    es.epoch = st.epoch;
    es.lr = lr_at(o, st.epoch);
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      std::vector<const TokenSequence*> batch;
      for (std::size_t i = b * o.batch; i < std::min(n, (b + 1) * o.batch); ++i) batch.push_back(&train_data[order[i]]);
      g.set_zero();
      const auto l = batch_loss(m, batch, &g, o.jobs);
      auto& gd = g.data();
      double norm2 = 0.0;
      for (std::size_t i = 0; i < gd.size(); ++i) {
        gd[i] += o.weight_decay * x[i];
        norm2 += gd[i] * gd[i];
      }
      if (!std::isfinite(l.total) || !std::isfinite(norm2))
        throw DivergenceDetected("loss diverged in epoch " + std::to_string(st.epoch), std::move(good));
      const double norm = std::sqrt(norm2);
      const double clip = (o.clip > 0.0 && norm > o.clip) ? o.clip / norm : 1.0;
      const double lr = lr_at(o, st.epoch + static_cast<double>(b) / static_cast<double>(steps_per_epoch));
      ++st.adam.step;
      const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(st.adam.step));
      const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(st.adam.step));
      for (std::size_t i = 0; i < gd.size(); ++i) {
        const double gi = gd[i] * clip;
        st.adam.m[i] = o.beta1 * st.adam.m[i] + (1.0 - o.beta1) * gi;
        st.adam.v[i] = o.beta2 * st.adam.v[i] + (1.0 - o.beta2) * gi * gi;
        x[i] -= lr * (st.adam.m[i] / c1) / (std::sqrt(st.adam.v[i] / c2) + o.adam_eps);
      }
      const double w = static_cast<double>(batch.size()) / static_cast<double>(n);
      es.train_loss += l.total * w;
      es.train_event += l.event * w;
      es.train_class += l.cls * w;
      es.train_time += l.time * w;
    }
    if (!m.params.all_finite()) throw DivergenceDetected("parameters diverged in epoch " + std::to_string(st.epoch), std::move(good));
    es.val_loss = mean_loss(m, val_data, o.jobs);
    log_info("epoch {} lr {:.3g} train {:.5f} (event {:.5f} time {:.5f}) val {:.5f}", es.epoch, es.lr, es.train_loss,
             es.train_event, es.train_time, es.val_loss);
    st.history.push_back(es);
    if (on_epoch) {
      TrainState view = st;
      ++view.epoch;
      on_epoch(view);
    }
  }
}

inline TrainState train(SeqModel model, const std::vector<Trajectory>& train_set, const std::vector<Trajectory>& val_set,
                        const TrainOptions& o, const EpochCallback& on_epoch = {}) {
  const auto tr = encode_dataset(train_set, model.cfg);
  const auto va = encode_dataset(val_set, model.cfg);
  auto st = start_training(std::move(model), tr, o);
  continue_training(st, tr, va, o, on_epoch);
  return st;
}

}  // namespace queueseq
