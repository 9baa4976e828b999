#pragma once

// Teacher-forced per-step losses shared by the exact oracle and the learned
// model, so both are scored by the same code.

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <vector>

#include "queueseq/events.hpp"

namespace queueseq {

// What a predictor says about step n before seeing it.
struct StepPrediction {
  std::vector<double> event_probs;
  // Distribution of the class given the realized event; empty when the
  // event carries no class.
  std::vector<double> class_probs;
  double time_mean = std::numeric_limits<double>::quiet_NaN();
  // Negative log density of the realized dt, when the predictor has one.
  double time_nll = std::numeric_limits<double>::quiet_NaN();
};

using Predictor = std::function<std::vector<StepPrediction>(const Trajectory&)>;

struct LossReport {
  double event_loss = 0.0;
  double time_loss = 0.0;  // mean of (predicted mean - dt)^2
  double class_loss = 0.0;
  double time_nll = std::numeric_limits<double>::quiet_NaN();
  double event_se = 0.0;
  double time_se = 0.0;
  double class_se = 0.0;
  long n_steps = 0;
  long n_class_steps = 0;
};

class LossAccumulator {
 public:
  void add(const StepPrediction& p, const EventRecord& r) {
    if (r.event < 0 || static_cast<std::size_t>(r.event) >= p.event_probs.size())
      throw std::invalid_argument("prediction does not cover the realized event");
    push(event_, -std::log(p.event_probs[static_cast<std::size_t>(r.event)]));
    const double err = p.time_mean - r.dt;
    push(time_, err * err);
    if (!std::isnan(p.time_nll)) push(nll_, p.time_nll);
    // Steps without a class contribute zero class loss.
    double class_nll = 0.0;
    if (r.cls) {
      const double q = p.class_probs.empty() ? 1.0 : p.class_probs.at(static_cast<std::size_t>(*r.cls));
      class_nll = -std::log(q);
      ++n_class_;
    }
    push(class_, class_nll);
  }

  LossReport report() const {
    LossReport out;
    out.n_steps = event_.n;
    out.n_class_steps = n_class_;
    out.event_loss = event_.mean();
    out.time_loss = time_.mean();
    out.class_loss = class_.mean();
    out.event_se = event_.se();
    out.time_se = time_.se();
    out.class_se = class_.se();
    if (nll_.n > 0) out.time_nll = nll_.mean();
    return out;
  }

 private:
  struct Moments {
    double sum = 0.0;
    double sum_sq = 0.0;
    long n = 0;
    double mean() const { return n > 0 ? sum / static_cast<double>(n) : 0.0; }
    double se() const {
      if (n < 2) return 0.0;
      const double m = mean();
      const double var = std::max(0.0, (sum_sq - static_cast<double>(n) * m * m) / static_cast<double>(n - 1));
      return std::sqrt(var / static_cast<double>(n));
    }
  };
  static void push(Moments& m, double v) {
    m.sum += v;
    m.sum_sq += v * v;
    m.n += 1;
  }
  Moments event_, time_, class_, nll_;
  long n_class_ = 0;
};

inline LossReport teacher_forced_losses(const std::vector<Trajectory>& trajs, const Predictor& predict) {
  LossAccumulator acc;
  for (const auto& t : trajs) {
    const auto preds = predict(t);
    if (preds.size() != t.records.size()) throw std::logic_error("predictor returned the wrong number of steps");
    for (std::size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], t.records[i]);
  }
  return acc.report();
}

}  // namespace queueseq
