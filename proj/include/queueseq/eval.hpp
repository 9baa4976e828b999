#pragma once

// Comparison metrics: teacher-forced losses, distances between sample sets,
// validity of generated trajectories and network identification.

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "queueseq/events.hpp"
#include "queueseq/jsonl.hpp"
#include "queueseq/losses.hpp"
#include "queueseq/parallel.hpp"
#include "queueseq/queuesim.hpp"
#include "queueseq/seqmodel/generate.hpp"

namespace queueseq {

class TooFewSamples : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kDefaultKlBins = 50;
inline constexpr std::size_t kMinKlSamples = 100;

// Predictions run in parallel; accumulation is in trajectory order.
inline LossReport parallel_losses(const std::vector<Trajectory>& trajs, const Predictor& predict, int jobs = 1) {
  std::vector<std::vector<StepPrediction>> preds(trajs.size());
  parallel_for(trajs.size(), jobs, [&](std::size_t i) { preds[i] = predict(trajs[i]); });
  LossAccumulator acc;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    if (preds[i].size() != trajs[i].records.size()) throw std::logic_error("predictor returned the wrong number of steps");
    for (std::size_t k = 0; k < preds[i].size(); ++k) acc.add(preds[i][k], trajs[i].records[k]);
  }
  return acc.report();
}

inline LossReport model_losses(const SeqModel& m, const std::vector<Trajectory>& test_set, int jobs = 1) {
  return parallel_losses(test_set, model_predictor(m), jobs);
}

// KL(p || q) between histograms on `bins` equal-width bins spanning the
// pooled samples, each bin count smoothed by +1.
inline double kl_binned(const std::vector<double>& p, const std::vector<double>& q, int bins = kDefaultKlBins) {
  if (p.size() < kMinKlSamples || q.size() < kMinKlSamples)
    throw TooFewSamples("kl_binned needs at least " + std::to_string(kMinKlSamples) + " samples per side");
  if (bins < 1) throw std::invalid_argument("kl_binned needs at least one bin");
  double lo = std::min(*std::min_element(p.begin(), p.end()), *std::min_element(q.begin(), q.end()));
  double hi = std::max(*std::max_element(p.begin(), p.end()), *std::max_element(q.begin(), q.end()));
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("kl_binned: non-finite sample");
  const double width = hi > lo ? (hi - lo) / bins : 1.0;
  auto hist = [&](const std::vector<double>& xs) {
    std::vector<double> h(static_cast<std::size_t>(bins), 1.0);
    for (double x : xs) {
      const auto k = std::min<long>(bins - 1, static_cast<long>((x - lo) / width));
      h[static_cast<std::size_t>(k)] += 1.0;
    }
    const double total = static_cast<double>(xs.size()) + bins;
    for (double& v : h) v /= total;
    return h;
  };
  const auto hp = hist(p), hq = hist(q);
  double kl = 0.0;
  for (std::size_t k = 0; k < hp.size(); ++k) kl += hp[k] * std::log(hp[k] / hq[k]);
  return std::max(0.0, kl);
}

// Exact 1-D Wasserstein-1 distance between empirical distributions: the
// integral of |Qa(u) - Qb(u)| over u in (0, 1).
inline double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("wasserstein1 needs samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
  }
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, s = 0.0;
  while (i < a.size() && j < b.size()) {
    const double ua = static_cast<double>(i + 1) / na, ub = static_cast<double>(j + 1) / nb;
    const double next = std::min(ua, ub);
    s += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if (ua <= next) ++i;
    if (ub <= next) ++j;
  }
  return s;
}

inline double valid_fraction(const std::vector<Trajectory>& trajs, const EventSchema& schema) {
  if (trajs.empty()) return std::nan("");
  std::size_t ok = 0;
  for (const auto& t : trajs) ok += is_valid(t, schema);
  return static_cast<double>(ok) / static_cast<double>(trajs.size());
}

// The network (1-4) whose permitted events include every observed event;
// nullopt when several (or none) qualify.
inline std::optional<int> classify_network(const Trajectory& traj, std::size_t prefix = SIZE_MAX) {
  std::vector<bool> seen(9, false);
  for (std::size_t i = 0; i < std::min(prefix, traj.records.size()); ++i) {
    const int e = traj.records[i].event;
    if (e < 0 || e >= 9) return std::nullopt;
    seen[static_cast<std::size_t>(e)] = true;
  }
  std::optional<int> found;
  for (int id = 1; id <= 4; ++id) {
    const auto& allowed = threenode::permitted_events(id);
    bool fits = true;
    for (int e = 0; e < 9 && fits; ++e)
      if (seen[static_cast<std::size_t>(e)] && std::find(allowed.begin(), allowed.end(), e) == allowed.end()) fits = false;
    if (!fits) continue;
    if (found) return std::nullopt;
    found = id;
  }
  return found;
}

struct UqComparison {
  double kl = 0.0;
  double w1 = 0.0;
};

inline UqComparison uq_compare(const std::vector<double>& model_f, const std::vector<double>& bootstrap_f,
                               int bins = kDefaultKlBins) {
  return {kl_binned(model_f, bootstrap_f, bins), wasserstein1(model_f, bootstrap_f)};
}

inline Json to_json(const LossReport& r) {
  Json j = {{"event_loss", r.event_loss}, {"time_loss", r.time_loss},   {"class_loss", r.class_loss},
            {"event_se", r.event_se},     {"time_se", r.time_se},       {"class_se", r.class_se},
            {"n_steps", r.n_steps},       {"n_class_steps", r.n_class_steps}};
  if (!std::isnan(r.time_nll)) j["time_nll"] = r.time_nll;
  return j;
}

// Positive values only; zero waits are dropped before comparing waiting
// time distributions.
inline std::vector<double> positive_only(const std::vector<double>& xs) {
  std::vector<double> out;
  for (double x : xs)
    if (x > 0.0) out.push_back(x);
  return out;
}

}  // namespace queueseq
