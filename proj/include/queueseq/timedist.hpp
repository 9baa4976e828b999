#pragma once

// Inter-event time distributions for the model's time head.
//
// RiemannDist: n equal-width bins, uniform inside bins 0..n-2 and a
// half-normal tail beyond (n-1)w. Exponential head: rate = softplus(raw) + eps.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "queueseq/rng.hpp"

namespace queueseq {

class NegativeTime : public std::domain_error {
 public:
  NegativeTime() : std::domain_error("time must be nonnegative") {}
};

struct RiemannDist {
  double w = 1.0;
  int n = 1;
  std::vector<double> probs{1.0};
  double tail_scale = 1.0;

  double tail_start() const { return (n - 1) * w; }

  void validate() const {
    if (!(w > 0.0) || n < 1 || probs.size() != static_cast<std::size_t>(n) || !(tail_scale > 0.0))
      throw std::invalid_argument("RiemannDist: bad shape");
    double s = 0.0;
    for (double p : probs) {
      if (!(p >= 0.0)) throw std::invalid_argument("RiemannDist: negative probability");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("RiemannDist: probabilities must sum to 1");
  }

  // Softmax of bin logits; tail scale defaults to the bin width.
  static RiemannDist from_logits(double w, std::span<const double> logits, double tail_scale = 0.0) {
    RiemannDist d;
    d.w = w;
    d.n = static_cast<int>(logits.size());
    d.tail_scale = tail_scale > 0.0 ? tail_scale : w;
    const double m = *std::max_element(logits.begin(), logits.end());
    d.probs.resize(logits.size());
    double z = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) z += (d.probs[k] = std::exp(logits[k] - m));
    for (double& p : d.probs) p /= z;
    return d;
  }
};

inline int riemann_bin_index(const RiemannDist& d, double t) {
  if (t < 0.0) throw NegativeTime();
  const double k = std::floor(t / d.w);
  return k >= d.n - 1 ? d.n - 1 : static_cast<int>(k);
}

inline double half_normal_logpdf(double x, double scale) {
  return 0.5 * std::log(2.0 / std::numbers::pi) - std::log(scale) - 0.5 * (x / scale) * (x / scale);
}

inline double riemann_logpdf(const RiemannDist& d, double t) {
  const int k = riemann_bin_index(d, t);
  const double p = d.probs[static_cast<std::size_t>(k)];
  if (k < d.n - 1) return std::log(p / d.w);
  return std::log(p) + half_normal_logpdf(t - d.tail_start(), d.tail_scale);
}

inline double riemann_sample(const RiemannDist& d, Rng& rng) {
  const auto k = static_cast<int>(rng.categorical(d.probs));
  if (k < d.n - 1) return (k + rng.uniform()) * d.w;
  return d.tail_start() + rng.half_normal(d.tail_scale);
}

inline double riemann_mean(const RiemannDist& d) {
  double m = 0.0;
  for (int k = 0; k + 1 < d.n; ++k) m += d.probs[static_cast<std::size_t>(k)] * (k + 0.5) * d.w;
  m += d.probs.back() * (d.tail_start() + d.tail_scale * std::sqrt(2.0 / std::numbers::pi));
  return m;
}

// Differential entropy in nats.
inline double riemann_entropy(const RiemannDist& d) {
  double h = 0.0;
  for (int k = 0; k + 1 < d.n; ++k) {
    const double p = d.probs[static_cast<std::size_t>(k)];
    if (p > 0.0) h -= p * std::log(p / d.w);
  }
  const double pt = d.probs.back();
  if (pt > 0.0) {
    const double s = d.tail_scale;
    h += pt * (-std::log(pt) + 0.5 * std::log(std::numbers::pi * s * s / 2.0) + 0.5);
  }
  return h;
}

// Bin width so that (n - 1) w reaches the 99.9th percentile of the data.
inline double choose_bin_width(std::vector<double> dts, int n_bins) {
  if (dts.empty()) throw std::invalid_argument("choose_bin_width: no data");
  if (n_bins < 2) throw std::invalid_argument("choose_bin_width: need at least 2 bins");
  std::sort(dts.begin(), dts.end());
  const auto idx = static_cast<std::size_t>(std::ceil(0.999 * static_cast<double>(dts.size()))) - 1;
  const double q = std::max(dts[std::min(idx, dts.size() - 1)], 1e-12);
  return q / (n_bins - 1);
}

// ---------------------------------------------------------------------------
// Exponential head

inline constexpr double kRateEpsilon = 1e-6;

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double exp_head(double raw) { return softplus(raw) + kRateEpsilon; }

// Negative log density of t under Exp(exp_head(raw)).
inline double exp_nll(double raw, double t) {
  if (t < 0.0) throw NegativeTime();
  const double rate = exp_head(raw);
  return -std::log(rate) + rate * t;
}

inline double exp_nll_grad(double raw, double t) {
  const double rate = exp_head(raw);
  return (t - 1.0 / rate) * sigmoid(raw);
}

inline double exp_time_metric(double raw, double t) {
  const double err = 1.0 / exp_head(raw) - t;
  return err * err;
}

}  // namespace queueseq
