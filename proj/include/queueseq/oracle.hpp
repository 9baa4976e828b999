#pragma once

// Exact conditionals and optimal losses for Markovian M/M/n systems, and the
// grid-posterior Bayesian bootstrap for M/M/1 with unknown rates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "queueseq/events.hpp"
#include "queueseq/losses.hpp"
#include "queueseq/metrics.hpp"
#include "queueseq/parallel.hpp"
#include "queueseq/queuesim.hpp"
#include "queueseq/rng.hpp"

namespace queueseq {

class InvalidState : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DegeneratePosterior : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct OracleConditional {
  std::vector<double> event_probs;
  std::vector<std::vector<double>> class_probs_given_event;
  double rate = 0.0;
};

// Next-step law of a multi-class M/M/n queue in `state`. Event 0 is the
// arrival, event j + 1 the departure from server j.
inline OracleConditional mmn_conditional(const SystemState& state, const std::vector<double>& lambdas,
                                         const std::vector<double>& nus) {
  if (state.nodes.size() != 1) throw InvalidState("mmn_conditional needs a single-node state");
  if (lambdas.empty() || lambdas.size() != nus.size()) throw std::invalid_argument("rate vectors must match");
  const auto& servers = state.nodes[0].servers;
  const int K = static_cast<int>(lambdas.size());
  OracleConditional out;
  const double lambda_total = std::accumulate(lambdas.begin(), lambdas.end(), 0.0);
  out.rate = lambda_total;
  std::vector<double> weights{lambda_total};
  for (int code : servers) {
    if (code < kOffDuty || code > K) throw InvalidState("server occupancy code out of range");
    const double w = code <= 0 ? 0.0 : nus[static_cast<std::size_t>(code - 1)];
    weights.push_back(w);
    out.rate += w;
  }
  for (double w : weights) out.event_probs.push_back(w / out.rate);
  std::vector<double> arrival_classes;
  for (double l : lambdas) arrival_classes.push_back(l / lambda_total);
  out.class_probs_given_event.push_back(arrival_classes);
  for (int code : servers) {
    std::vector<double> c(static_cast<std::size_t>(K), 0.0);
    if (code > 0) c[static_cast<std::size_t>(code - 1)] = 1.0;
    out.class_probs_given_event.push_back(c);
  }
  return out;
}

struct OptimalLosses {
  double event_loss = 0.0;
  double time_loss = 0.0;
};

// Long-run optimal per-step losses of an M/M/1 queue. rho = 1 takes the
// overloaded branch.
inline OptimalLosses mm1_optimal_losses(double lambda, double nu) {
  if (!(lambda > 0.0) || !(nu > 0.0)) throw std::invalid_argument("mm1_optimal_losses: rates must be positive");
  const double s = lambda + nu;
  const double pa = lambda / s, pd = nu / s;
  if (lambda < nu) {
    return {-0.5 * ((lambda / nu) * std::log(pa) + std::log(pd)), nu / (2.0 * lambda * lambda * s)};
  }
  return {-pa * std::log(pa) - pd * std::log(pd), 1.0 / (s * s)};
}

// Oracle predictor: the true conditional at every step of a trajectory.
inline Predictor mmn_oracle_predictor(std::vector<double> lambdas, std::vector<double> nus) {
  return [lambdas = std::move(lambdas), nus = std::move(nus)](const Trajectory& t) {
    std::vector<StepPrediction> out;
    out.reserve(t.records.size());
    Replayer replay(*t.schema, t.initial);
    for (const auto& r : t.records) {
      const auto oc = mmn_conditional(replay.state(), lambdas, nus);
      StepPrediction p;
      p.event_probs = oc.event_probs;
      if (r.cls) p.class_probs = oc.class_probs_given_event.at(static_cast<std::size_t>(r.event));
      p.time_mean = 1.0 / oc.rate;
      p.time_nll = -std::log(oc.rate) + oc.rate * r.dt;
      out.push_back(std::move(p));
      replay.apply(r);
    }
    return out;
  };
}

inline LossReport empirical_optimal_losses(const std::vector<Trajectory>& trajs, const std::vector<double>& lambdas,
                                           const std::vector<double>& nus) {
  return teacher_forced_losses(trajs, mmn_oracle_predictor(lambdas, nus));
}

// ---------------------------------------------------------------------------
// Grid posterior over (lambda, nu) for M/M/1 histories

// Sufficient statistics of an M/M/1 path: the likelihood is
// lambda^a nu^d exp(-lambda * T - nu * B) with B the busy time.
struct Mm1Stats {
  double arrivals = 0.0;
  double departures = 0.0;
  double total_time = 0.0;
  double busy_time = 0.0;

  double log_likelihood(double lambda, double nu) const {
    return arrivals * std::log(lambda) + departures * std::log(nu) - lambda * total_time - nu * busy_time;
  }
};

inline Mm1Stats mm1_stats(const Trajectory& history) {
  if (!history.schema->single_server_fifo()) throw std::invalid_argument("mm1_stats needs an M/M/1 history");
  Mm1Stats s;
  Replayer replay(*history.schema, history.initial);
  for (const auto& r : history.records) {
    s.total_time += r.dt;
    if (replay.state().in_system() > 0) s.busy_time += r.dt;
    if (history.schema->is_arrival(r.event)) s.arrivals += 1;
    else s.departures += 1;
    replay.apply(r);
  }
  return s;
}

struct GridPosterior {
  std::vector<double> lambda_grid;
  std::vector<double> nu_grid;
  std::vector<double> log_weights;  // row-major, lambda index major
  bool normalized = false;

  // Uniform weights on cell midpoints of the prior box.
  static GridPosterior uniform(const PriorConfig& prior, int n_lambda = 101, int n_nu = 101) {
    prior.validate();
    if (n_lambda < 1 || n_nu < 1) throw std::invalid_argument("grid sizes must be >= 1");
    GridPosterior g;
    auto axis = [](std::array<double, 2> r, int n) {
      std::vector<double> v;
      for (int i = 0; i < n; ++i) v.push_back(r[0] + (i + 0.5) * (r[1] - r[0]) / n);
      return v;
    };
    g.lambda_grid = axis(prior.lambda_range, n_lambda);
    g.nu_grid = axis(prior.nu_range, n_nu);
    g.log_weights.assign(g.lambda_grid.size() * g.nu_grid.size(), 0.0);
    g.normalize();
    return g;
  }

  static GridPosterior point(double lambda, double nu) {
    GridPosterior g;
    g.lambda_grid = {lambda};
    g.nu_grid = {nu};
    g.log_weights = {0.0};
    g.normalized = true;
    return g;
  }

  std::size_t index(std::size_t i, std::size_t j) const { return i * nu_grid.size() + j; }

  void normalize() {
    const double m = *std::max_element(log_weights.begin(), log_weights.end());
    if (!std::isfinite(m)) throw DegeneratePosterior("all posterior weights underflowed");
    double z = 0.0;
    for (double w : log_weights) z += std::exp(w - m);
    const double log_z = m + std::log(z);
    for (double& w : log_weights) w -= log_z;
    normalized = true;
  }

  std::vector<double> weights() const {
    std::vector<double> w;
    w.reserve(log_weights.size());
    for (double lw : log_weights) w.push_back(std::exp(lw));
    return w;
  }

  std::pair<double, double> mean() const {
    double ml = 0.0, mn = 0.0;
    for (std::size_t i = 0; i < lambda_grid.size(); ++i)
      for (std::size_t j = 0; j < nu_grid.size(); ++j) {
        const double w = std::exp(log_weights[index(i, j)]);
        ml += w * lambda_grid[i];
        mn += w * nu_grid[j];
      }
    return {ml, mn};
  }

  std::pair<double, double> argmax() const {
    const auto k = static_cast<std::size_t>(std::max_element(log_weights.begin(), log_weights.end()) - log_weights.begin());
    return {lambda_grid[k / nu_grid.size()], nu_grid[k % nu_grid.size()]};
  }

  std::pair<double, double> sample(Rng& rng) const {
    const auto w = weights();
    const std::size_t k = rng.categorical(w);
    return {lambda_grid[k / nu_grid.size()], nu_grid[k % nu_grid.size()]};
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "lambda,nu,weight\n";
    for (std::size_t i = 0; i < lambda_grid.size(); ++i)
      for (std::size_t j = 0; j < nu_grid.size(); ++j)
        os << format_csv(lambda_grid[i]) << ',' << format_csv(nu_grid[j]) << ','
           << format_csv(std::exp(log_weights[index(i, j)])) << '\n';
    return os.str();
  }

  static std::string format_csv(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }
};

inline GridPosterior posterior_update(GridPosterior post, const Mm1Stats& s) {
  for (std::size_t i = 0; i < post.lambda_grid.size(); ++i)
    for (std::size_t j = 0; j < post.nu_grid.size(); ++j)
      post.log_weights[post.index(i, j)] += s.log_likelihood(post.lambda_grid[i], post.nu_grid[j]);
  post.normalize();
  return post;
}

inline GridPosterior posterior_update(GridPosterior post, const Trajectory& history) {
  if (history.records.empty()) return post;
  return posterior_update(std::move(post), mm1_stats(history));
}

// ---------------------------------------------------------------------------
// Bayesian bootstrap

enum class BootstrapMode {
  per_step,  // resample the rates before every new event
  block,     // sample the rates once, then simulate the continuation
};

namespace detail {

// Under a product-form grid prior the posterior factorizes, so each rate is
// drawn from its own 1-D marginal. This is an exact draw from the 2-D grid
// posterior whenever the prior weights are uniform.
struct FactorizedSampler {
  const std::vector<double>* lambdas;
  const std::vector<double>* nus;
  std::vector<double> log_lambda, log_nu;
  std::vector<double> buffer;

  FactorizedSampler(const std::vector<double>& lg, const std::vector<double>& ng) : lambdas(&lg), nus(&ng) {
    for (double l : lg) log_lambda.push_back(std::log(l));
    for (double n : ng) log_nu.push_back(std::log(n));
  }

  double draw(const std::vector<double>& grid, const std::vector<double>& log_grid, double count, double exposure,
              Rng& rng) {
    if (grid.size() == 1) return grid[0];
    buffer.resize(grid.size());
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < grid.size(); ++i) {
      buffer[i] = count * log_grid[i] - grid[i] * exposure;
      m = std::max(m, buffer[i]);
    }
    for (double& b : buffer) b = std::exp(b - m);
    return grid[rng.categorical(buffer)];
  }

  std::pair<double, double> sample(const Mm1Stats& s, Rng& rng) {
    const double l = draw(*lambdas, log_lambda, s.arrivals, s.total_time, rng);
    const double n = draw(*nus, log_nu, s.departures, s.busy_time, rng);
    return {l, n};
  }
};

inline bool uniform_weights(const GridPosterior& g) {
  const double first = g.log_weights.front();
  return std::all_of(g.log_weights.begin(), g.log_weights.end(), [&](double w) { return std::abs(w - first) < 1e-12; });
}

}  // namespace detail

// Mean of a metric over the part of a trajectory after record index n
// (0-based count of history records). NaN when the continuation has no
// sample.
inline double continuation_metric(const Trajectory& t, std::size_t n, Metric metric) {
  const auto& schema = *t.schema;
  std::vector<double> vals;
  switch (metric) {
    case Metric::interarrival: {
      long prev = -1;
      for (std::size_t i = 0; i < t.records.size(); ++i) {
        if (!schema.is_arrival(t.records[i].event)) continue;
        if (prev >= 0 && i >= n) vals.push_back(sum_dt(t.records, prev, static_cast<long>(i)));
        prev = static_cast<long>(i);
      }
      break;
    }
    case Metric::service: {
      const auto s = extract_service_times(t);
      std::size_t k = 0;
      for (std::size_t i = 0; i < t.records.size(); ++i) {
        if (!schema.is_departure(t.records[i].event)) continue;
        if (i >= n) vals.push_back(s[k]);
        ++k;
      }
      break;
    }
    case Metric::waiting: {
      int q0 = 0;
      for (const auto& node : t.initial.nodes) q0 += static_cast<int>(node.queue.size());
      const auto w = extract_waiting_times(t, q0);
      std::size_t k = 0;
      for (std::size_t i = 0; i < t.records.size() && k < w.size(); ++i) {
        if (!schema.is_arrival(t.records[i].event)) continue;
        if (i >= n) vals.push_back(w[k]);
        ++k;
      }
      break;
    }
  }
  if (vals.empty()) return std::numeric_limits<double>::quiet_NaN();
  return std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
}

struct BootstrapResult {
  std::vector<double> f;                // one per replica, NaN when undefined
  std::vector<Trajectory> trajectories;  // kept only on request
};

// J continuations of an M/M/1 history to total length N, with rates drawn
// from the grid posterior. Each replica uses child stream j of `seed`.
inline BootstrapResult bayesian_bootstrap(const Trajectory& history, const GridPosterior& prior, std::size_t J,
                                          std::size_t N, Metric f, std::uint64_t seed,
                                          BootstrapMode mode = BootstrapMode::per_step, int jobs = 1,
                                          bool keep_trajectories = false) {
  if (J < 1) throw std::invalid_argument("bootstrap: J must be >= 1");
  const std::size_t n = history.records.size();
  if (N <= n) throw std::invalid_argument("bootstrap: N must exceed the history length");
  if (!detail::uniform_weights(prior)) throw std::invalid_argument("bootstrap: prior grid weights must be uniform");
  const Mm1Stats base = history.records.empty() ? Mm1Stats{} : mm1_stats(history);
  // Validate support against the history once.
  (void)posterior_update(prior, base);
  SystemState end_state = history.initial;
  {
    Replayer replay(*history.schema, history.initial);
    for (const auto& r : history.records) replay.apply(r);
    end_state = replay.state();
  }
  BootstrapResult out;
  out.f.assign(J, std::numeric_limits<double>::quiet_NaN());
  if (keep_trajectories) out.trajectories.resize(J);
  parallel_for(J, jobs, [&](std::size_t j) {
    Rng rng(Rng::child_seed(seed, j));
    detail::FactorizedSampler sampler(prior.lambda_grid, prior.nu_grid);
    Mm1Stats s = base;
    Trajectory t = history;
    t.records.reserve(N);
    int occupancy = end_state.in_system();
    double lambda = 0.0, nu = 0.0;
    if (mode == BootstrapMode::block) std::tie(lambda, nu) = sampler.sample(s, rng);
    for (std::size_t i = n; i < N; ++i) {
      if (mode == BootstrapMode::per_step) std::tie(lambda, nu) = sampler.sample(s, rng);
      const double rate = lambda + (occupancy > 0 ? nu : 0.0);
      EventRecord r;
      r.dt = rng.exponential(rate);
      r.event = rng.uniform() * rate < lambda ? 0 : 1;
      s.total_time += r.dt;
      if (occupancy > 0) s.busy_time += r.dt;
      if (r.event == 0) {
        s.arrivals += 1;
        ++occupancy;
      } else {
        s.departures += 1;
        --occupancy;
      }
      t.records.push_back(r);
    }
    out.f[j] = continuation_metric(t, n, f);
    if (keep_trajectories) out.trajectories[j] = std::move(t);
  });
  return out;
}

inline BootstrapResult bayesian_bootstrap(const Trajectory& history, const PriorConfig& prior, std::size_t J,
                                          std::size_t N, Metric f, std::uint64_t seed,
                                          BootstrapMode mode = BootstrapMode::per_step, int jobs = 1,
                                          int grid_size = 101) {
  return bayesian_bootstrap(history, GridPosterior::uniform(prior, grid_size, grid_size), J, N, f, seed, mode, jobs);
}

inline std::string samples_csv(const std::string& column, const std::vector<double>& xs) {
  std::ostringstream os;
  os << column << '\n';
  for (double x : xs) os << GridPosterior::format_csv(x) << '\n';
  return os.str();
}

}  // namespace queueseq
