#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "queueseq/seqmodel.hpp"
#include "queueseq/stats.hpp"

using namespace queueseq;

namespace {

ModelConfig tiny(std::shared_ptr<const EventSchema> schema, int layers = 2) {
  auto c = ModelConfig::for_schema(std::move(schema));
  c.d_model = 8;
  c.d_hidden = 16;
  c.n_heads = 2;
  c.n_layers = layers;
  c.max_seq_len = 256;
  c.max_queue = 6;
  return c;
}

MmnConfig two_class_mm3() { return {{0.5, 0.7}, {1.0, 0.8}, 3}; }

std::vector<Trajectory> mm1_data(int k, int n, std::uint64_t seed) {
  std::vector<Trajectory> out;
  for (int i = 0; i < k; ++i) out.push_back(simulate_mmn({{0.5}, {1.0}, 1}, static_cast<std::size_t>(n), seed + static_cast<std::uint64_t>(i)));
  return out;
}

// Exposes the small weights a random init leaves hidden, so a gradient
// check exercises every nonlinearity.
void scramble(SeqModel& m, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  for (double& v : m.params.data()) v += scale * rng.normal();
}

}  // namespace

// --- tokens ---------------------------------------------------------------

TEST(Tokens, SingleClassLayout) {
  auto t = simulate_mmn({{0.5}, {1.0}, 1}, 2, 1);
  const auto cfg = tiny(mm1_schema());
  const auto s = encode_trajectory(t, cfg);
  EXPECT_EQ(s.period, 2);
  EXPECT_EQ(s.length(), 1 + 4);
  EXPECT_EQ(s.kind[1], TokenKind::time);
  EXPECT_EQ(s.kind[2], TokenKind::event);
  EXPECT_DOUBLE_EQ(s.time_target[0], t.records[0].dt);
  EXPECT_EQ(s.event_target[1], t.records[0].event);
  EXPECT_DOUBLE_EQ(s.time_target[2], t.records[1].dt);
  EXPECT_EQ(s.event_target[3], t.records[1].event);
  EXPECT_TRUE(std::isnan(s.time_target[4]));
  EXPECT_EQ(s.count_event_targets(), 2);
  EXPECT_EQ(s.count_class_targets(), 0);
}

TEST(Tokens, ClassSlotTarget) {
  auto schema = mmn_schema(1, 4);
  Trajectory t;
  t.schema = schema;
  t.initial = SystemState::empty(*schema);
  t.records = {{0.5, 0, 3}, {0.2, 1, 3}};
  const auto cfg = tiny(schema);
  const auto s = encode_trajectory(t, cfg);
  EXPECT_EQ(s.period, 3);
  EXPECT_EQ(s.length(), 1 + 6);
  EXPECT_EQ(s.class_target[2], 3);
  EXPECT_EQ(s.ids[3], 3);
}

TEST(Tokens, NullClassForNonBearingEvents) {
  const auto schema = callcenter_schema();
  auto cfg = tiny(schema);
  auto copy = std::make_shared<EventSchema>(*schema);
  copy->class_bearing[2] = false;
  cfg.schema = copy;
  Trajectory t;
  t.schema = copy;
  t.initial = SystemState::empty(*copy);
  t.records = {{0.5, 2, std::nullopt}};
  const auto s = encode_trajectory(t, cfg);
  EXPECT_EQ(s.class_target[2], kPadId);
  EXPECT_EQ(s.ids[3], cfg.n_classes);
}

TEST(Tokens, RoundTrip) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto t = simulate_mmn(two_class_mm3(), 60, seed);
    const auto cfg = tiny(t.schema);
    EXPECT_EQ(decode(encode_trajectory(t, cfg), cfg), t.records);
    auto c = simulate_callcenter(default_callcenter(), 50, seed);
    const auto ccfg = tiny(c.schema);
    EXPECT_EQ(decode(encode_trajectory(c, ccfg), ccfg), c.records);
  }
}

TEST(Tokens, LengthInvariant) {
  auto t = simulate_mmn(two_class_mm3(), 37, 2);
  auto cfg = tiny(t.schema);
  cfg.use_policy_token = true;
  t.meta["policy"] = {{"c", 1.0}, {"N", 3}};
  const auto s = encode_trajectory(t, cfg);
  EXPECT_EQ(s.length(), 2 + 3 * 37);
  for (int i = 0; i < s.prefix; ++i) {
    EXPECT_EQ(s.class_target[static_cast<std::size_t>(i)], kPadId);
  }
}

TEST(Tokens, CapacityExceeded) {
  auto t = simulate_mmn({{0.5}, {1.0}, 1}, 200, 1);
  auto cfg = tiny(t.schema);
  cfg.max_seq_len = 100;
  EXPECT_THROW(encode_trajectory(t, cfg), CapacityExceeded);
}

TEST(Tokens, WindowsCarryTheState) {
  auto t = simulate_mmn({{0.9}, {1.0}, 1}, 50, 3);
  auto cfg = tiny(t.schema);
  cfg.use_state_token = true;
  cfg.window_events = 8;
  const auto w = encode_windows(t, cfg);
  ASSERT_EQ(w.size(), 7u);
  const auto states = reconstruct_states(t);
  std::vector<EventRecord> joined;
  for (std::size_t i = 0; i < w.size(); ++i) {
    EXPECT_EQ(w[i].state_vec, state_vector(i == 0 ? t.initial : states[i * 8 - 1], cfg));
    for (const auto& r : decode(w[i], cfg)) joined.push_back(r);
  }
  EXPECT_EQ(joined, t.records);
}

TEST(Positional, CyclicAndLinearParts) {
  const auto pe = positional_encoding(9, 3, 16);
  RowVec a(16), b(16);
  // position 0 and `period` share the cyclic part
  sinusoid(0, 16, a.data());
  sinusoid(1, 16, b.data());
  EXPECT_LT((pe.row(3) - pe.row(0) - (b - a)).norm(), 1e-12);
  // positions 0..period-1 share the linear part
  for (int i = 0; i < 3; ++i) {
    sinusoid(i, 16, b.data());
    EXPECT_LT((pe.row(i) - a - b).norm(), 1e-12);
  }
  EXPECT_EQ(pe, positional_encoding(9, 3, 16));
}

// --- forward -------------------------------------------------------------

TEST(Forward, Causal) {
  auto t = simulate_mmn(two_class_mm3(), 20, 5);
  const auto cfg = tiny(t.schema);
  auto m = SeqModel::create(cfg, 1);
  scramble(m, 2);
  const auto s = encode_trajectory(t, cfg);
  const auto base = forward(m, s);
  for (int j : {3, 10, 30, s.length() - 1}) {
    auto p = s;
    const auto k = static_cast<std::size_t>(j);
    if (p.kind[k] == TokenKind::time) p.values[k] += 0.7;
    else if (p.kind[k] == TokenKind::event) p.ids[k] = (p.ids[k] + 1) % cfg.n_event_types;
    else p.ids[k] = (p.ids[k] + 1) % cfg.n_classes;
    const auto out = forward(m, p);
    EXPECT_EQ(out.event_logits.topRows(j), base.event_logits.topRows(j));
    EXPECT_EQ(out.class_logits.topRows(j), base.class_logits.topRows(j));
    EXPECT_EQ(out.time_out.topRows(j), base.time_out.topRows(j));
    EXPECT_NE(out.event_logits.row(j), base.event_logits.row(j));
  }
}

TEST(Forward, SingleTokenGivesFirstStepPrior) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 1);
  const auto s = encode_prefix(cfg, SystemState::empty(*cfg.schema), std::nullopt);
  const auto h = forward(m, s);
  EXPECT_EQ(h.time_out.rows(), 1);
  EXPECT_TRUE(std::isfinite(h.time_out(0, 0)));
}

TEST(Forward, FiniteOnRandomBatches) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto t = simulate_callcenter(default_callcenter(), 80, seed);
    auto cfg = tiny(t.schema);
    cfg.time_head = TimeHead::riemann;
    cfg.riemann_w = 5.0;
    cfg.riemann_n = 20;
    auto m = SeqModel::create(cfg, seed);
    scramble(m, seed + 10);
    const auto h = forward(m, encode_trajectory(t, cfg));
    EXPECT_TRUE(h.event_logits.allFinite());
    EXPECT_TRUE(h.class_logits.allFinite());
    EXPECT_TRUE(h.time_out.allFinite());
  }
}

TEST(Forward, DecoderMatchesFullForward) {
  auto t = simulate_mmn(two_class_mm3(), 30, 9);
  auto cfg = tiny(t.schema);
  cfg.use_state_token = true;
  cfg.use_policy_token = true;
  t.meta["policy"] = {{"c", 0.5}, {"N", 2}};
  auto m = SeqModel::create(cfg, 3);
  scramble(m, 4, 0.3);
  const auto s = encode_trajectory(t, cfg);
  const auto full = forward(m, s);
  Decoder dec(m);
  for (int i = 0; i < s.length(); ++i) {
    dec.push(s);
    EXPECT_LT((dec.heads().event_logits.row(0) - full.event_logits.row(i)).norm(), 1e-10);
    EXPECT_LT((dec.heads().time_out.row(0) - full.time_out.row(i)).norm(), 1e-10);
  }
}

TEST(Forward, ShapeMismatchOnLoad) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 1);
  auto other = cfg;
  other.d_hidden = 32;
  EXPECT_THROW(SeqModel::from_params(other, m.params), ShapeMismatch);
}

// --- loss and gradients --------------------------------------------------

TEST(Loss, UniformEventLogitsGiveLog2) {
  auto cfg = tiny(mm1_schema(), 0);
  cfg.final_norm = false;
  auto m = SeqModel::create(cfg, 1);
  m.params.set_zero();
  const auto s = encode_trajectory(simulate_mmn({{0.5}, {1.0}, 1}, 50, 1), cfg);
  EXPECT_NEAR(sequence_loss(m, s).event, std::log(2.0), 1e-12);
}

TEST(Loss, ConfidentCorrectLogitsApproachZero) {
  auto cfg = tiny(mm1_schema(), 0);
  cfg.final_norm = false;
  auto m = SeqModel::create(cfg, 1);
  m.params.set_zero();
  // All-arrival data; push the arrival logit up.
  Trajectory t;
  t.schema = cfg.schema;
  t.initial = SystemState::empty(*cfg.schema);
  for (int i = 0; i < 5; ++i) t.records.push_back({1.0, 0, std::nullopt});
  const auto s = encode_trajectory(t, cfg);
  double prev = 1e9;
  for (double margin : {5.0, 10.0, 20.0, 40.0}) {
    m.params[m.ids.event_b](0, 0) = margin;
    const double l = sequence_loss(m, s).event;
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-15);
}

TEST(Loss, BatchIsMeanOfSequences) {
  auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 1);
  scramble(m, 7, 0.2);
  std::vector<TokenSequence> batch;
  double sum = 0.0;
  for (int i = 0; i < 5; ++i) {
    batch.push_back(encode_trajectory(simulate_mmn({{0.5}, {1.0}, 1}, static_cast<std::size_t>(10 + 7 * i), static_cast<std::uint64_t>(i)), cfg));
    sum += sequence_loss(m, batch.back()).total;
  }
  EXPECT_NEAR(batch_loss(m, batch).total, sum / 5.0, 1e-12);
}

TEST(Grad, LinearToyExact) {
  auto t = simulate_mmn(two_class_mm3(), 15, 3);
  auto cfg = tiny(t.schema, 0);
  cfg.final_norm = false;
  auto m = SeqModel::create(cfg, 5);
  scramble(m, 6, 0.3);
  EXPECT_LT(grad_check(m, {encode_trajectory(t, cfg)}, 400, 1), 1e-10);
}

TEST(Grad, DeskModelExponential) {
  auto t = simulate_mmn(two_class_mm3(), 25, 3);
  auto cfg = tiny(t.schema);
  cfg.use_state_token = true;
  cfg.use_policy_token = true;
  t.meta["policy"] = {{"c", 0.8}, {"N", 3}};
  auto m = SeqModel::create(cfg, 5);
  scramble(m, 8, 0.3);
  auto t2 = simulate_mmn(two_class_mm3(), 12, 4, t.initial);
  t2.meta = t.meta;
  EXPECT_LT(grad_check(m, {encode_trajectory(t, cfg), encode_trajectory(t2, cfg)}, 300, 2), 1e-3);
}

TEST(Grad, DeskModelRiemann) {
  auto t = simulate_callcenter(default_callcenter(), 20, 3);
  auto cfg = tiny(t.schema);
  cfg.time_head = TimeHead::riemann;
  cfg.riemann_w = 10.0;
  cfg.riemann_n = 12;
  auto m = SeqModel::create(cfg, 5);
  scramble(m, 9, 0.3);
  EXPECT_LT(grad_check(m, {encode_trajectory(t, cfg)}, 300, 3), 1e-3);
}

TEST(Grad, NoTargetsNoGradient) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 1);
  TokenSequence s = encode_prefix(cfg, SystemState::empty(*cfg.schema), std::nullopt);
  s.time_target[0] = std::numeric_limits<double>::quiet_NaN();
  ParamStore g;
  loss_and_grad(m, {s}, g);
  for (double v : g.data()) ASSERT_EQ(v, 0.0);
}

TEST(Grad, IndependentOfJobCount) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 1);
  const auto data = encode_dataset(mm1_data(20, 30, 1), cfg);
  ParamStore g1, g4;
  loss_and_grad(m, data, g1, 1);
  loss_and_grad(m, data, g4, 4);
  EXPECT_EQ(g1.data(), g4.data());
}

// --- training ------------------------------------------------------------

TEST(Train, ScheduleEndpoints) {
  TrainOptions o;
  o.epochs = 100;
  EXPECT_DOUBLE_EQ(lr_at(o, 0), 1e-7);
  EXPECT_DOUBLE_EQ(lr_at(o, 30), 5e-4);
  EXPECT_NEAR(lr_at(o, 100), 5e-6, 1e-18);
  EXPECT_GT(lr_at(o, 15), lr_at(o, 10));
  EXPECT_LT(lr_at(o, 60), lr_at(o, 40));
}

TEST(Train, LossFallsOnMm1) {
  auto cfg = tiny(mm1_schema());
  cfg.d_model = 16;
  cfg.d_hidden = 32;
  TrainOptions o;
  o.epochs = 5;
  o.warmup = 1;
  o.lr = 3e-3;
  o.batch = 8;
  o.init_head_biases = false;
  const auto st = train(SeqModel::create(cfg, 1), mm1_data(40, 40, 10), mm1_data(8, 40, 500), o);
  ASSERT_EQ(st.history.size(), 5u);
  EXPECT_LT(st.history[4].train_loss, st.history[0].train_loss);
}

TEST(Train, Deterministic) {
  const auto cfg = tiny(mm1_schema());
  TrainOptions o;
  o.epochs = 2;
  o.warmup = 1;
  o.batch = 4;
  const auto a = train(SeqModel::create(cfg, 1), mm1_data(10, 20, 1), {}, o);
  o.jobs = 3;
  const auto b = train(SeqModel::create(cfg, 1), mm1_data(10, 20, 1), {}, o);
  EXPECT_EQ(a.model.params.data(), b.model.params.data());
}

TEST(Train, DivergenceKeepsLastGood) {
  const auto cfg = tiny(mm1_schema());
  TrainOptions o;
  o.epochs = 3;
  o.warmup = 0;
  o.lr = 1e300;
  o.clip = 0.0;
  o.init_head_biases = false;
  try {
    train(SeqModel::create(cfg, 1), mm1_data(6, 20, 1), {}, o);
    FAIL() << "expected divergence";
  } catch (const DivergenceDetected& e) {
    EXPECT_TRUE(e.last_good().model.params.all_finite());
  }
}

TEST(Train, ResumeMatchesUninterrupted) {
  const auto cfg = tiny(mm1_schema());
  const auto data = encode_dataset(mm1_data(12, 20, 1), cfg);
  TrainOptions o;
  o.epochs = 3;
  o.warmup = 1;
  o.batch = 4;
  auto full = start_training(SeqModel::create(cfg, 1), data, o);
  continue_training(full, data, {}, o);

  auto part = start_training(SeqModel::create(cfg, 1), data, o);
  continue_training(part, data, {}, o, {}, 2);
  const auto path = (std::filesystem::temp_directory_path() / "queueseq_resume.ckpt").string();
  save_checkpoint(path, part);
  auto resumed = load_checkpoint(path).state;
  continue_training(resumed, data, {}, o);
  std::remove(path.c_str());
  EXPECT_EQ(resumed.model.params.data(), full.model.params.data());
  EXPECT_DOUBLE_EQ(resumed.history.back().train_loss, full.history.back().train_loss);
}

// --- checkpoint ----------------------------------------------------------

TEST(Checkpoint, RoundTrip) {
  auto t = simulate_callcenter(default_callcenter(), 10, 1);
  auto cfg = tiny(t.schema);
  cfg.time_head = TimeHead::riemann;
  cfg.riemann_w = 3.5;
  cfg.riemann_n = 7;
  cfg.use_policy_token = true;
  TrainState st{SeqModel::create(cfg, 4), {}, 0, {}};
  st.history.push_back({0, 1e-3, 1.5, 0.5, 0.25, 0.75, std::nan("")});
  const auto path = (std::filesystem::temp_directory_path() / "queueseq_ckpt.bin").string();
  save_checkpoint(path, st, {{"note", "x"}});
  const auto ck = load_checkpoint(path);
  std::remove(path.c_str());
  EXPECT_EQ(ck.state.model.params.data(), st.model.params.data());
  EXPECT_EQ(to_json(ck.state.model.cfg), to_json(cfg));
  EXPECT_EQ(ck.state.model.cfg.schema->event_names, t.schema->event_names);
  EXPECT_EQ(ck.extra["note"], "x");
  EXPECT_TRUE(std::isnan(ck.state.history[0].val_loss));
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = (std::filesystem::temp_directory_path() / "queueseq_garbage.bin").string();
  {
    std::ofstream(path) << "not a checkpoint";
  }
  EXPECT_THROW(load_checkpoint(path), FormatError);
  std::remove(path.c_str());
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt"), IoError);
}

// --- generation ----------------------------------------------------------

TEST(Generate, ArgmaxIsDeterministic) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 3);
  scramble(m, 1, 0.2);
  const auto init = SystemState::empty(*cfg.schema);
  const auto a = generate(m, init, {}, std::nullopt, 40, 1, {0.0});
  const auto b = generate(m, init, {}, std::nullopt, 40, 999, {0.0});
  EXPECT_EQ(a.records, b.records);
}

TEST(Generate, SameSeedSameOutput) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 3);
  const auto init = SystemState::empty(*cfg.schema);
  EXPECT_EQ(generate(m, init, {}, std::nullopt, 50, 5).records, generate(m, init, {}, std::nullopt, 50, 5).records);
}

TEST(Generate, HandSetHeadsGiveExponentialTimes) {
  auto cfg = tiny(mm1_schema(), 0);
  cfg.final_norm = false;
  cfg.max_seq_len = 5000;
  auto m = SeqModel::create(cfg, 1);
  m.params.set_zero();
  const double rate = 1.5;
  m.params[m.ids.time_b](0, 0) = inverse_softplus(rate - kRateEpsilon);
  m.params[m.ids.event_b](0, 0) = std::log(1.0 / 3.0);
  m.params[m.ids.event_b](0, 1) = std::log(2.0 / 3.0);
  const auto t = generate(m, SystemState::empty(*cfg.schema), {}, std::nullopt, 2000, 11);
  std::vector<double> dts;
  for (const auto& r : t.records) dts.push_back(r.dt);
  const auto ks = stats::ks_one_sample(dts, [&](double x) { return 1.0 - std::exp(-rate * x); });
  EXPECT_GT(ks.p_value, 0.01);
}

TEST(Generate, EmptyHistoryIsPlainGeneration) {
  auto cfg = tiny(mm1_schema());
  cfg.use_state_token = true;
  cfg.window_events = 10;
  auto m = SeqModel::create(cfg, 3);
  const auto init = SystemState::empty(*cfg.schema);
  const auto a = generate(m, init, {}, std::nullopt, 25, 4);
  const auto b = generate(m, init, std::vector<EventRecord>{}, std::nullopt, 25, 4);
  EXPECT_EQ(a.records, b.records);
}

TEST(Generate, HistoryIsKeptAsPrefix) {
  const auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 3);
  const auto h = simulate_mmn({{0.5}, {1.0}, 1}, 20, 1);
  const auto g = generate(m, h.initial, h.records, std::nullopt, 10, 2);
  ASSERT_GE(g.records.size(), 21u);
  EXPECT_TRUE(std::equal(h.records.begin(), h.records.end(), g.records.begin()));
}

// With window 4 the context at the first generated step is records 4-5 read
// from the state before record 4, the same as starting there outright.
TEST(Generate, SlidingWindowKeepsHalfWindowOfContext) {
  auto cfg = tiny(mm1_schema());
  cfg.use_state_token = true;
  cfg.window_events = 4;
  auto m = SeqModel::create(cfg, 3);
  scramble(m, 4, 0.2);
  const auto h = simulate_mmn({{0.5}, {1.0}, 1}, 6, 2);
  const auto states = reconstruct_states(h);
  const auto full = generate(m, h.initial, h.records, std::nullopt, 12, 5);
  const std::vector<EventRecord> tail(h.records.begin() + 4, h.records.end());
  const auto late = generate(m, states[3], tail, std::nullopt, 12, 5);
  ASSERT_EQ(full.records.size(), late.records.size() + 4);
  EXPECT_TRUE(std::equal(late.records.begin(), late.records.end(), full.records.begin() + 4));
}

TEST(Generate, WindowedStopsOnImpossibleEvent) {
  auto cfg = tiny(mm1_schema(), 0);
  cfg.final_norm = false;
  cfg.use_state_token = true;
  cfg.window_events = 5;
  auto m = SeqModel::create(cfg, 1);
  m.params.set_zero();
  m.params[m.ids.event_b](0, 1) = 50.0;  // always "departure"
  const auto t = generate(m, SystemState::empty(*cfg.schema), {}, std::nullopt, 30, 1);
  EXPECT_EQ(t.records.size(), 1u);
  EXPECT_FALSE(is_valid(t, *t.schema));
}

TEST(Generate, PolicyTokenMeta) {
  auto t = simulate_mmn({{0.5}, {1.0}, 1}, 5, 1);
  auto cfg = tiny(t.schema);
  cfg.use_policy_token = true;
  auto m = SeqModel::create(cfg, 1);
  const auto g = generate(m, t.initial, {}, PolicyParams{2.0, 5}, 5, 1);
  EXPECT_EQ(g.meta["policy"]["N"], 5);
  EXPECT_THROW(generate(m, t.initial, {}, std::nullopt, 5, 1), std::invalid_argument);
}

TEST(Predict, MatchesLossComputation) {
  auto cfg = tiny(mm1_schema());
  auto m = SeqModel::create(cfg, 1);
  scramble(m, 3, 0.2);
  const auto t = simulate_mmn({{0.5}, {1.0}, 1}, 30, 1);
  const auto preds = predict_steps(m, t);
  const auto l = sequence_loss(m, encode_trajectory(t, cfg));
  double ev = 0.0, tn = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ev -= std::log(preds[i].event_probs[static_cast<std::size_t>(t.records[i].event)]);
    tn += preds[i].time_nll;
  }
  EXPECT_NEAR(ev / 30.0, l.event, 1e-12);
  EXPECT_NEAR(tn / 30.0, l.time, 1e-12);
}
