#pragma once

// Decoder-only transformer over token streams, with a hand-written backward
// pass. Pre-LN blocks, tanh-GELU feed-forward, causal multi-head attention.
// Everything is double precision so gradients can be checked by finite
// differences.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "queueseq/parallel.hpp"
#include "queueseq/rng.hpp"
#include "queueseq/seqmodel/config.hpp"
#include "queueseq/seqmodel/params.hpp"
#include "queueseq/seqmodel/tokens.hpp"
#include "queueseq/timedist.hpp"

namespace queueseq {

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LayerIds {
  int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

struct ParamIds {
  int start = -1;
  int state_w = -1, state_b = -1;
  int pol_w1 = -1, pol_b1 = -1, pol_w2 = -1, pol_b2 = -1, pol_n = -1;
  int event_emb = -1, class_emb = -1;
  int t2v_w = -1, t2v_b = -1, time_emb = -1;
  std::vector<LayerIds> layers;
  int lnf_g = -1, lnf_b = -1;
  int event_w = -1, event_b = -1, class_w = -1, class_b = -1, time_w = -1, time_b = -1;
};

inline ParamIds build_layout(const ModelConfig& c, ParamStore& p) {
  const int d = c.d_model;
  ParamIds id;
  if (c.use_state_token) {
    id.state_w = p.add("state.w", c.state_dim(), d);
    id.state_b = p.add("state.b", 1, d);
  } else {
    id.start = p.add("start", 1, d);
  }
  if (c.use_policy_token) {
    id.pol_w1 = p.add("policy.w1", 1, c.policy_hidden);
    id.pol_b1 = p.add("policy.b1", 1, c.policy_hidden);
    id.pol_w2 = p.add("policy.w2", c.policy_hidden, d);
    id.pol_b2 = p.add("policy.b2", 1, d);
    id.pol_n = p.add("policy.n_emb", c.max_policy_servers + 1, d);
  }
  id.event_emb = p.add("event_emb", c.n_event_types, d);
  if (c.period == 3) id.class_emb = p.add("class_emb", c.n_classes + 1, d);
  if (c.time_head == TimeHead::exponential) {
    id.t2v_w = p.add("time2vec.w", 1, d);
    id.t2v_b = p.add("time2vec.b", 1, d);
  } else {
    id.time_emb = p.add("time_emb", c.riemann_n, d);
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string s = "layer" + std::to_string(l) + ".";
    LayerIds L{};
    L.ln1_g = p.add(s + "ln1.g", 1, d);
    L.ln1_b = p.add(s + "ln1.b", 1, d);
    L.wq = p.add(s + "attn.wq", d, d);
    L.bq = p.add(s + "attn.bq", 1, d);
    L.wk = p.add(s + "attn.wk", d, d);
    L.bk = p.add(s + "attn.bk", 1, d);
    L.wv = p.add(s + "attn.wv", d, d);
    L.bv = p.add(s + "attn.bv", 1, d);
    L.wo = p.add(s + "attn.wo", d, d);
    L.bo = p.add(s + "attn.bo", 1, d);
    L.ln2_g = p.add(s + "ln2.g", 1, d);
    L.ln2_b = p.add(s + "ln2.b", 1, d);
    L.w1 = p.add(s + "ffn.w1", d, c.d_hidden);
    L.b1 = p.add(s + "ffn.b1", 1, c.d_hidden);
    L.w2 = p.add(s + "ffn.w2", c.d_hidden, d);
    L.b2 = p.add(s + "ffn.b2", 1, d);
    id.layers.push_back(L);
  }
  if (c.final_norm) {
    id.lnf_g = p.add("final_ln.g", 1, d);
    id.lnf_b = p.add("final_ln.b", 1, d);
  }
  id.event_w = p.add("head.event.w", d, c.n_event_types);
  id.event_b = p.add("head.event.b", 1, c.n_event_types);
  if (c.period == 3) {
    id.class_w = p.add("head.class.w", d, c.n_classes);
    id.class_b = p.add("head.class.b", 1, c.n_classes);
  }
  id.time_w = p.add("head.time.w", d, c.time_outputs());
  id.time_b = p.add("head.time.b", 1, c.time_outputs());
  return id;
}

struct SeqModel {
  ModelConfig cfg;
  ParamStore params;
  ParamIds ids;
  Mat step_pe;  // sinusoid(step) for step 0..max steps
  Mat slot_pe;  // sinusoid(slot) for slot 0..period-1

  RowVec position(int step, int slot) const {
    if (step >= step_pe.rows()) throw CapacityExceeded("position beyond max_seq_len");
    return step_pe.row(step) + slot_pe.row(slot);
  }

  // Fresh parameters: LayerNorm gains 1, biases 0, Time2Vec weights and
  // phases N(0, 1), everything else N(0, init_std).
  static SeqModel create(ModelConfig cfg, std::uint64_t seed) {
    cfg.validate();
    SeqModel m;
    m.cfg = std::move(cfg);
    m.ids = build_layout(m.cfg, m.params);
    Rng rng(seed);
    for (const auto& t : m.params.tensors()) {
      auto x = m.params[t.name];
      const bool gain = t.name.ends_with(".g");
      const bool bias = t.name.ends_with(".b") || t.name.ends_with(".b1") || t.name.ends_with(".b2") ||
                        t.name.ends_with(".bq") || t.name.ends_with(".bk") || t.name.ends_with(".bv") ||
                        t.name.ends_with(".bo");
      const bool t2v = t.name.starts_with("time2vec.");
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        double& v = x.data()[i];
        if (t2v) v = rng.normal();
        else if (gain) v = 1.0;
        else if (bias) v = 0.0;
        else v = m.cfg.init_std * rng.normal();
      }
    }
    m.build_tables();
    return m;
  }

  static SeqModel from_params(ModelConfig cfg, ParamStore params) {
    cfg.validate();
    SeqModel m;
    m.cfg = std::move(cfg);
    m.ids = build_layout(m.cfg, m.params);
    if (!m.params.same_layout(params)) throw ShapeMismatch("parameter layout does not match the model config");
    m.params = std::move(params);
    m.build_tables();
    return m;
  }

  void build_tables() {
    const int d = cfg.d_model;
    const int steps = cfg.max_seq_len / cfg.period + 2;
    step_pe.resize(steps, d);
    for (int s = 0; s < steps; ++s) sinusoid(s, d, step_pe.row(s).data());
    slot_pe.resize(cfg.period, d);
    for (int s = 0; s < cfg.period; ++s) sinusoid(s, d, slot_pe.row(s).data());
  }
};

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

struct LnCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

inline Mat layer_norm(const Mat& x, ConstMatMap g, ConstMatMap b, LnCache& c) {
  const Eigen::VectorXd mu = x.rowwise().mean();
  Mat xc = x.colwise() - mu;
  c.rstd = (xc.array().square().rowwise().mean() + kLnEps).rsqrt();
  c.xhat = xc.array().colwise() * c.rstd.array();
  return (c.xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

inline Mat layer_norm_backward(const Mat& dy, const LnCache& c, ConstMatMap g, MatMap dg, MatMap db) {
  dg.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * g.row(0).array();
  const Eigen::VectorXd m1 = dxhat.rowwise().mean();
  const Eigen::VectorXd m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
  Mat dx = dxhat.colwise() - m1;
  dx -= (c.xhat.array().colwise() * m2.array()).matrix();
  return dx.array().colwise() * c.rstd.array();
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::tanh(kGeluC * (u + 0.044715 * u * u * u))); }

inline double gelu_grad(double u) {
  const double th = std::tanh(kGeluC * (u + 0.044715 * u * u * u));
  return 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * u * u);
}

inline void softmax_row(Eigen::Ref<RowVec> r) {
  const double m = r.maxCoeff();
  r = (r.array() - m).exp();
  r /= r.sum();
}

struct LayerCache {
  Mat x_in;
  LnCache ln1;
  Mat a, q, k, v, o;
  std::vector<Mat> p;  // attention weights per head
  Mat x_mid;
  LnCache ln2;
  Mat b, u, g;
};

}  // namespace detail

// Per-position head outputs for a whole sequence.
struct HeadOutputs {
  Mat event_logits;
  Mat class_logits;
  Mat time_out;  // raw rate (1 column) or bin logits
};

struct ForwardCache {
  Mat x0;
  std::vector<detail::LayerCache> layers;
  Mat x_last;
  detail::LnCache lnf;
  Mat f;
  HeadOutputs heads;
};

// Input vector of token i, positional encoding included.
inline RowVec embed_token(const SeqModel& m, const TokenSequence& s, int i) {
  const auto& P = m.params;
  const auto& id = m.ids;
  const int d = m.cfg.d_model;
  const auto k = static_cast<std::size_t>(i);
  RowVec x(d);
  switch (s.kind[k]) {
    case TokenKind::start:
      x = P[id.start].row(0);
      break;
    case TokenKind::state: {
      if (s.state_vec.size() != static_cast<std::size_t>(m.cfg.state_dim())) throw ShapeMismatch("state vector size");
      const Eigen::Map<const RowVec> sv(s.state_vec.data(), static_cast<Eigen::Index>(s.state_vec.size()));
      x = sv * P[id.state_w] + P[id.state_b].row(0);
      break;
    }
    case TokenKind::policy: {
      const double c = s.values[k];
      const RowVec z = (c * P[id.pol_w1].row(0) + P[id.pol_b1].row(0)).cwiseMax(0.0);
      x = z * P[id.pol_w2] + P[id.pol_b2].row(0) + P[id.pol_n].row(s.ids[k]);
      break;
    }
    case TokenKind::time:
      if (m.cfg.time_head == TimeHead::exponential) {
        const double t = s.values[k];
        x = t * P[id.t2v_w].row(0) + P[id.t2v_b].row(0);
        for (int j = 1; j < d; ++j) x(j) = std::sin(x(j));
      } else {
        if (s.ids[k] < 0 || s.ids[k] >= m.cfg.riemann_n) throw ShapeMismatch("time bin out of range");
        x = P[id.time_emb].row(s.ids[k]);
      }
      break;
    case TokenKind::event:
      if (s.ids[k] < 0 || s.ids[k] >= m.cfg.n_event_types) throw ShapeMismatch("event id out of range");
      x = P[id.event_emb].row(s.ids[k]);
      break;
    case TokenKind::cls:
      if (s.ids[k] < 0 || s.ids[k] > m.cfg.n_classes) throw ShapeMismatch("class id out of range");
      x = P[id.class_emb].row(s.ids[k]);
      break;
  }
  const auto [step, slot] = model_position(i, s.prefix, s.period);
  return x + m.position(step, slot);
}

inline void embed_backward(const SeqModel& m, const TokenSequence& s, int i, const RowVec& dx, ParamStore& g) {
  const auto& P = m.params;
  const auto& id = m.ids;
  const int d = m.cfg.d_model;
  const auto k = static_cast<std::size_t>(i);
  switch (s.kind[k]) {
    case TokenKind::start:
      g[id.start].row(0) += dx;
      break;
    case TokenKind::state: {
      const Eigen::Map<const RowVec> sv(s.state_vec.data(), static_cast<Eigen::Index>(s.state_vec.size()));
      g[id.state_w].noalias() += sv.transpose() * dx;
      g[id.state_b].row(0) += dx;
      break;
    }
    case TokenKind::policy: {
      const double c = s.values[k];
      const RowVec pre = c * P[id.pol_w1].row(0) + P[id.pol_b1].row(0);
      const RowVec z = pre.cwiseMax(0.0);
      g[id.pol_w2].noalias() += z.transpose() * dx;
      g[id.pol_b2].row(0) += dx;
      g[id.pol_n].row(s.ids[k]) += dx;
      RowVec dz = dx * P[id.pol_w2].transpose();
      for (int j = 0; j < dz.size(); ++j)
        if (pre(j) <= 0.0) dz(j) = 0.0;
      g[id.pol_w1].row(0) += c * dz;
      g[id.pol_b1].row(0) += dz;
      break;
    }
    case TokenKind::time:
      if (m.cfg.time_head == TimeHead::exponential) {
        const double t = s.values[k];
        auto gw = g[id.t2v_w];
        auto gb = g[id.t2v_b];
        gw(0, 0) += dx(0) * t;
        gb(0, 0) += dx(0);
        for (int j = 1; j < d; ++j) {
          const double c = std::cos(P[id.t2v_w](0, j) * t + P[id.t2v_b](0, j));
          gw(0, j) += dx(j) * c * t;
          gb(0, j) += dx(j) * c;
        }
      } else {
        g[id.time_emb].row(s.ids[k]) += dx;
      }
      break;
    case TokenKind::event:
      g[id.event_emb].row(s.ids[k]) += dx;
      break;
    case TokenKind::cls:
      g[id.class_emb].row(s.ids[k]) += dx;
      break;
  }
}

inline void compute_heads(const SeqModel& m, const Mat& f, HeadOutputs& h) {
  const auto& P = m.params;
  const auto& id = m.ids;
  h.event_logits = (f * P[id.event_w]).rowwise() + P[id.event_b].row(0);
  if (id.class_w >= 0) h.class_logits = (f * P[id.class_w]).rowwise() + P[id.class_b].row(0);
  h.time_out = (f * P[id.time_w]).rowwise() + P[id.time_b].row(0);
}

inline ForwardCache forward_cached(const SeqModel& m, const TokenSequence& s) {
  const auto& P = m.params;
  const int T = s.length();
  const int d = m.cfg.d_model;
  const int H = m.cfg.n_heads;
  const int dh = m.cfg.head_dim();
  if (T < 1) throw ShapeMismatch("empty token sequence");
  if (T > m.cfg.max_seq_len) throw CapacityExceeded("sequence longer than max_seq_len");
  ForwardCache c;
  c.x0.resize(T, d);
  for (int i = 0; i < T; ++i) c.x0.row(i) = embed_token(m, s, i);
  Mat x = c.x0;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.layers.resize(m.ids.layers.size());
  for (std::size_t l = 0; l < m.ids.layers.size(); ++l) {
    const auto& L = m.ids.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    lc.a = detail::layer_norm(x, P[L.ln1_g], P[L.ln1_b], lc.ln1);
    lc.q = (lc.a * P[L.wq]).rowwise() + P[L.bq].row(0);
    lc.k = (lc.a * P[L.wk]).rowwise() + P[L.bk].row(0);
    lc.v = (lc.a * P[L.wv]).rowwise() + P[L.bv].row(0);
    lc.o.resize(T, d);
    lc.p.resize(static_cast<std::size_t>(H));
    for (int h = 0; h < H; ++h) {
      Mat& p = lc.p[static_cast<std::size_t>(h)];
      p.noalias() = lc.q.middleCols(h * dh, dh) * lc.k.middleCols(h * dh, dh).transpose();
      p *= scale;
      for (int i = 0; i < T; ++i) {
        auto row = p.row(i).head(i + 1);
        const double mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
        p.row(i).tail(T - i - 1).setZero();
      }
      lc.o.middleCols(h * dh, dh).noalias() = p * lc.v.middleCols(h * dh, dh);
    }
    x = x + ((lc.o * P[L.wo]).rowwise() + P[L.bo].row(0));
    lc.x_mid = x;
    lc.b = detail::layer_norm(x, P[L.ln2_g], P[L.ln2_b], lc.ln2);
    lc.u = (lc.b * P[L.w1]).rowwise() + P[L.b1].row(0);
    lc.g = lc.u.unaryExpr([](double u) { return detail::gelu(u); });
    x = x + ((lc.g * P[L.w2]).rowwise() + P[L.b2].row(0));
  }
  c.x_last = x;
  if (m.cfg.final_norm) c.f = detail::layer_norm(x, P[m.ids.lnf_g], P[m.ids.lnf_b], c.lnf);
  else c.f = x;
  compute_heads(m, c.f, c.heads);
  return c;
}

inline HeadOutputs forward(const SeqModel& m, const TokenSequence& s) { return forward_cached(m, s).heads; }

// Backward pass from head-output gradients; accumulates into g.
inline void backward(const SeqModel& m, const TokenSequence& s, const ForwardCache& c, const HeadOutputs& dh_out,
                     ParamStore& g) {
  const auto& P = m.params;
  const auto& id = m.ids;
  const int T = s.length();
  const int H = m.cfg.n_heads;
  const int dh = m.cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  g[id.event_w].noalias() += c.f.transpose() * dh_out.event_logits;
  g[id.event_b].row(0) += dh_out.event_logits.colwise().sum();
  Mat df = dh_out.event_logits * P[id.event_w].transpose();
  if (id.class_w >= 0) {
    g[id.class_w].noalias() += c.f.transpose() * dh_out.class_logits;
    g[id.class_b].row(0) += dh_out.class_logits.colwise().sum();
    df.noalias() += dh_out.class_logits * P[id.class_w].transpose();
  }
  g[id.time_w].noalias() += c.f.transpose() * dh_out.time_out;
  g[id.time_b].row(0) += dh_out.time_out.colwise().sum();
  df.noalias() += dh_out.time_out * P[id.time_w].transpose();

  Mat dx = m.cfg.final_norm ? detail::layer_norm_backward(df, c.lnf, P[id.lnf_g], g[id.lnf_g], g[id.lnf_b]) : df;

  for (std::size_t l = m.ids.layers.size(); l-- > 0;) {
    const auto& L = m.ids.layers[l];
    const auto& lc = c.layers[l];
    // feed-forward
    g[L.w2].noalias() += lc.g.transpose() * dx;
    g[L.b2].row(0) += dx.colwise().sum();
    Mat du = dx * P[L.w2].transpose();
    du.array() *= lc.u.unaryExpr([](double u) { return detail::gelu_grad(u); }).array();
    g[L.w1].noalias() += lc.b.transpose() * du;
    g[L.b1].row(0) += du.colwise().sum();
    const Mat db = du * P[L.w1].transpose();
    dx += detail::layer_norm_backward(db, lc.ln2, P[L.ln2_g], g[L.ln2_g], g[L.ln2_b]);
    // attention
    g[L.wo].noalias() += lc.o.transpose() * dx;
    g[L.bo].row(0) += dx.colwise().sum();
    const Mat dout = dx * P[L.wo].transpose();
    Mat dq(T, m.cfg.d_model), dk(T, m.cfg.d_model), dv(T, m.cfg.d_model);
    for (int h = 0; h < H; ++h) {
      const Mat& p = lc.p[static_cast<std::size_t>(h)];
      const auto dOh = dout.middleCols(h * dh, dh);
      Mat dp = dOh * lc.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh).noalias() = p.transpose() * dOh;
      const Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
      Mat ds = p.array() * (dp.colwise() - rs).array();
      ds *= scale;
      dq.middleCols(h * dh, dh).noalias() = ds * lc.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh).noalias() = ds.transpose() * lc.q.middleCols(h * dh, dh);
    }
    g[L.wq].noalias() += lc.a.transpose() * dq;
    g[L.bq].row(0) += dq.colwise().sum();
    g[L.wk].noalias() += lc.a.transpose() * dk;
    g[L.bk].row(0) += dk.colwise().sum();
    g[L.wv].noalias() += lc.a.transpose() * dv;
    g[L.bv].row(0) += dv.colwise().sum();
    Mat da = dq * P[L.wq].transpose();
    da.noalias() += dk * P[L.wk].transpose();
    da.noalias() += dv * P[L.wv].transpose();
    dx += detail::layer_norm_backward(da, lc.ln1, P[L.ln1_g], g[L.ln1_g], g[L.ln1_b]);
  }
  for (int i = 0; i < T; ++i) embed_backward(m, s, i, dx.row(i), g);
}

// ---------------------------------------------------------------------------
// Loss

struct LossBreakdown {
  double total = 0.0;
  double event = 0.0;
  double cls = 0.0;
  double time = 0.0;
  long n_event = 0;
  long n_class = 0;
  long n_time = 0;
};

inline RiemannDist riemann_head(const ModelConfig& cfg, const Eigen::Ref<const RowVec>& logits) {
  return RiemannDist::from_logits(cfg.riemann_w, std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())),
                                  cfg.effective_tail_scale());
}

// Per-sequence loss: sum over heads of the mean over that head's targets.
// When g is given, adds weight * gradient into it.
inline LossBreakdown sequence_loss(const SeqModel& m, const TokenSequence& s, ParamStore* g = nullptr,
                                   double weight = 1.0) {
  const auto c = forward_cached(m, s);
  const int T = s.length();
  LossBreakdown out;
  out.n_event = s.count_event_targets();
  out.n_class = s.count_class_targets();
  out.n_time = s.count_time_targets();
  HeadOutputs d;
  d.event_logits = Mat::Zero(T, c.heads.event_logits.cols());
  d.class_logits = Mat::Zero(T, c.heads.class_logits.cols());
  d.time_out = Mat::Zero(T, c.heads.time_out.cols());
  for (int i = 0; i < T; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (s.event_target[k] != kPadId) {
      RowVec p = c.heads.event_logits.row(i);
      detail::softmax_row(p);
      out.event -= std::log(p(s.event_target[k])) / static_cast<double>(out.n_event);
      p(s.event_target[k]) -= 1.0;
      d.event_logits.row(i) = p * (weight / static_cast<double>(out.n_event));
    }
    if (s.class_target[k] != kPadId) {
      RowVec p = c.heads.class_logits.row(i);
      detail::softmax_row(p);
      out.cls -= std::log(p(s.class_target[k])) / static_cast<double>(out.n_class);
      p(s.class_target[k]) -= 1.0;
      d.class_logits.row(i) = p * (weight / static_cast<double>(out.n_class));
    }
    const double t = s.time_target[k];
    if (!std::isnan(t)) {
      const double w = weight / static_cast<double>(out.n_time);
      if (m.cfg.time_head == TimeHead::exponential) {
        const double raw = c.heads.time_out(i, 0);
        out.time += exp_nll(raw, t) / static_cast<double>(out.n_time);
        d.time_out(i, 0) = exp_nll_grad(raw, t) * w;
      } else {
        const auto dist = riemann_head(m.cfg, c.heads.time_out.row(i));
        out.time -= riemann_logpdf(dist, t) / static_cast<double>(out.n_time);
        RowVec p = Eigen::Map<const RowVec>(dist.probs.data(), dist.n);
        p(riemann_bin_index(dist, t)) -= 1.0;
        d.time_out.row(i) = p * w;
      }
    }
  }
  out.total = out.event + out.cls + out.time;
  if (g && (out.n_event + out.n_class + out.n_time) > 0) backward(m, s, c, d, *g);
  return out;
}

inline constexpr std::size_t kGradChunk = 8;

// Batch loss = mean of per-sequence losses. Gradients are summed per chunk
// of kGradChunk sequences and the chunks are reduced in order, so the result
// does not depend on the job count.
inline LossBreakdown batch_loss(const SeqModel& m, std::span<const TokenSequence* const> batch, ParamStore* g = nullptr,
                                int jobs = 1) {
  if (batch.empty()) return {};
  const std::size_t n_chunks = (batch.size() + kGradChunk - 1) / kGradChunk;
  std::vector<ParamStore> grads(g ? n_chunks : 0);
  std::vector<LossBreakdown> parts(batch.size());
  const double w = 1.0 / static_cast<double>(batch.size());
  parallel_for(n_chunks, jobs, [&](std::size_t ci) {
    ParamStore* cg = nullptr;
    if (g) {
      grads[ci] = m.params.zeros_like();
      cg = &grads[ci];
    }
    for (std::size_t i = ci * kGradChunk; i < std::min(batch.size(), (ci + 1) * kGradChunk); ++i)
      parts[i] = sequence_loss(m, *batch[i], cg, w);
  });
  LossBreakdown out;
  for (const auto& p : parts) {
    out.total += p.total * w;
    out.event += p.event * w;
    out.cls += p.cls * w;
    out.time += p.time * w;
    out.n_event += p.n_event;
    out.n_class += p.n_class;
    out.n_time += p.n_time;
  }
  if (g) {
    for (const auto& cg : grads) {
      auto& dst = g->data();
      const auto& src = cg.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return out;
}

inline LossBreakdown batch_loss(const SeqModel& m, const std::vector<TokenSequence>& batch, ParamStore* g = nullptr,
                                int jobs = 1) {
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  return batch_loss(m, std::span<const TokenSequence* const>(ptrs), g, jobs);
}

// Loss and gradient as plain functions of the parameter vector.
inline double loss_and_grad(const SeqModel& m, const std::vector<TokenSequence>& batch, ParamStore& g, int jobs = 1) {
  g = m.params.zeros_like();
  const auto l = batch_loss(m, batch, &g, jobs);
  if (!g.all_finite()) throw NonFiniteGradient("gradient has non-finite entries");
  return l.total;
}

// Central differences at h and h/2 combined by Richardson extrapolation,
// compared with the analytic gradient on `coords` random coordinates.
// Relative error is |a - n| / max(1, |a|, |n|).
inline double grad_check(SeqModel m, const std::vector<TokenSequence>& batch, std::size_t coords = 200,
                         std::uint64_t seed = 0, double h = 1e-4) {
  ParamStore g;
  loss_and_grad(m, batch, g);
  Rng rng(seed);
  auto& x = m.params.data();
  const std::size_t n = x.size();
  std::vector<std::size_t> picks;
  if (coords >= n) {
    for (std::size_t i = 0; i < n; ++i) picks.push_back(i);
  } else {
    for (std::size_t i = 0; i < coords; ++i) picks.push_back(static_cast<std::size_t>(rng.below(n)));
  }
  auto f = [&] { return batch_loss(m, batch).total; };
  double worst = 0.0;
  for (std::size_t i : picks) {
    const double x0 = x[i];
    auto central = [&](double step) {
      x[i] = x0 + step;
      const double fp = f();
      x[i] = x0 - step;
      const double fm = f();
      x[i] = x0;
      return (fp - fm) / (2.0 * step);
    };
    const double d1 = central(h);
    const double d2 = central(h / 2.0);
    const double num = (4.0 * d2 - d1) / 3.0;
    const double a = g.data()[i];
    worst = std::max(worst, std::abs(a - num) / std::max({1.0, std::abs(a), std::abs(num)}));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Incremental decoding with a key/value cache.

class Decoder {
 public:
  explicit Decoder(const SeqModel& m) : m_(&m) { reset(); }

  void reset() {
    const int d = m_->cfg.d_model;
    keys_.assign(m_->ids.layers.size(), Mat(m_->cfg.max_seq_len, d));
    values_.assign(m_->ids.layers.size(), Mat(m_->cfg.max_seq_len, d));
    n_ = 0;
  }

  int length() const { return n_; }

  // Feeds the next token of s, which is token number length().
  void push(const TokenSequence& s) {
    if (n_ >= m_->cfg.max_seq_len) throw CapacityExceeded("decoder is full");
    if (s.length() <= n_) throw std::logic_error("decoder is ahead of the token sequence");
    const auto& P = m_->params;
    const int H = m_->cfg.n_heads;
    const int dh = m_->cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Mat x = embed_token(*m_, s, n_);
    detail::LnCache ln;
    for (std::size_t l = 0; l < m_->ids.layers.size(); ++l) {
      const auto& L = m_->ids.layers[l];
      const Mat a = detail::layer_norm(x, P[L.ln1_g], P[L.ln1_b], ln);
      const Mat q = (a * P[L.wq]).rowwise() + P[L.bq].row(0);
      keys_[l].row(n_) = (a * P[L.wk]) + P[L.bk];
      values_[l].row(n_) = (a * P[L.wv]) + P[L.bv];
      Mat o(1, m_->cfg.d_model);
      for (int h = 0; h < H; ++h) {
        RowVec p = q.middleCols(h * dh, dh) * keys_[l].block(0, h * dh, n_ + 1, dh).transpose();
        p *= scale;
        detail::softmax_row(p);
        o.middleCols(h * dh, dh) = p * values_[l].block(0, h * dh, n_ + 1, dh);
      }
      x = x + ((o * P[L.wo]) + P[L.bo]);
      const Mat b = detail::layer_norm(x, P[L.ln2_g], P[L.ln2_b], ln);
      const Mat u = (b * P[L.w1]) + P[L.b1];
      x = x + ((u.unaryExpr([](double v) { return detail::gelu(v); }) * P[L.w2]) + P[L.b2]);
    }
    const Mat f = m_->cfg.final_norm ? detail::layer_norm(x, P[m_->ids.lnf_g], P[m_->ids.lnf_b], ln) : x;
    compute_heads(*m_, f, last_);
    ++n_;
  }

  // Head outputs at the most recent token.
  const HeadOutputs& heads() const { return last_; }

 private:
  const SeqModel* m_;
  std::vector<Mat> keys_, values_;
  HeadOutputs last_;
  int n_ = 0;
};

}  // namespace queueseq
