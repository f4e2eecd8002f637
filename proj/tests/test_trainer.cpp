#include "tokense/checkpoint.hpp"
#include "tokense/synth.hpp"
#include "tokense/trainer.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace tokense;

namespace {

struct Toy {
  synth::Corpus corpus = synth::two_timbre_corpus(4, 0.5, 31);
  Codec codec;
  ModelConfig mc;
  EncoderConfig ec;
  TrainingData data;

  Toy() {
    std::vector<AudioBuffer> audio;
    for (const auto& u : corpus.utterances) audio.push_back(u.audio);
    codec = Codec::train(audio, 16, 4, 2);
    ec.layers = 2;
    ec.width = 32;
    ec.heads = 2;
    mc.layers = 2;
    mc.heads = 2;
    mc.hidden = 32;
    mc.ffn_dim = 64;
    mc.max_seq_len = 256;
    mc.semantic_vocab = 16;
    mc.global_vocab = 4;
    mc.cond_dim = 32;
    data.clean = corpus.utterances;
    data.assets = corpus.assets();
    data.spec = DegradeSpec::none();
    data.spec.interference_prob_tse = 1.0;
    data.spec.noise_prob = 0.5;
  }

  TrainState state(std::uint64_t seed = 5) const {
    return TrainState(LanguageModel<float>(mc, seed), EncoderStack(ec, mc.hidden, seed + 1));
  }

  TrainConfig config() const {
    TrainConfig c;
    c.batch_size = 4;
    c.warmup_steps = 10;
    c.peak_lr = 3e-3;
    c.segment_sec = 0.5;
    c.canary_every = 5;
    c.max_steps = 1000;
    return c;
  }
};

const Toy& toy() {
  static const Toy t;
  return t;
}

std::vector<MatF> lm_tensors(const TrainState& st) {
  std::vector<MatF> out;
  st.model.params().visit([&](const std::string&, const MatF& m, bool) { out.push_back(m); });
  out.push_back(st.encoder.adapter.weight);
  out.push_back(st.encoder.adapter.bias);
  return out;
}

}  // namespace

TEST(Schedule, ClosedForm) {
  const TrainConfig c;
  EXPECT_EQ(lr_schedule(0, 0, c), 0.0);
  EXPECT_EQ(lr_schedule(4000, 0, c), 0.001);
  EXPECT_EQ(lr_schedule(2000, 0, c), 0.0005);
  EXPECT_NEAR(lr_schedule(9000, 10, c), 0.001 * std::pow(0.98, 10), 1e-12);
  EXPECT_EQ(c.epochs, 30);
  EXPECT_EQ(c.warmup_steps, 4000);
  EXPECT_EQ(c.beta1, 0.9);
  EXPECT_EQ(c.beta2, 0.999);
  EXPECT_EQ(c.weight_decay, 0.01);
}

TEST(Schedule, ConfigValidation) {
  TrainConfig c;
  c.mode_mix = {0.5, 0.5, 0.5};
  test::expect_error([&] { c.validate(); }, "sum to 1");
  c = TrainConfig{};
  c.batch_size = 0;
  test::expect_error([&] { c.validate(); }, "batch_size");
}

TEST(Plan, ModeMixFrequencies) {
  TrainConfig c;
  c.batch_size = 1;
  std::array<int, 3> counts{0, 0, 0};
  for (std::int64_t s = 0; s < 3000; ++s) ++counts[static_cast<std::size_t>(plan_step(s, 17, c)[0].mode)];
  for (int n : counts) EXPECT_NEAR(n / 3000.0, 1.0 / 3.0, 0.03);
  c.mode_mix = {1.0, 0.0, 0.0};
  for (std::int64_t s = 0; s < 500; ++s) EXPECT_EQ(plan_step(s, 17, c)[0].mode, Mode::kSR);
}

TEST(Plan, EpochsVisitEveryUtteranceAndReshuffle) {
  TrainConfig c;
  c.batch_size = 3;
  const std::size_t n = 7;
  std::map<int, std::vector<std::size_t>> by_epoch;
  for (std::int64_t s = 0; s < 14; ++s)
    for (const auto& p : plan_step(s, n, c)) by_epoch[p.epoch].push_back(p.utterance);
  for (int e = 0; e < 5; ++e) {
    auto v = by_epoch[e];
    ASSERT_EQ(v.size(), n);
    std::sort(v.begin(), v.end());
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(v[i], i);
  }
  EXPECT_NE(by_epoch[0], by_epoch[1]);
  EXPECT_EQ(epoch_order(n, 3, 1), epoch_order(n, 3, 1));
  const auto a = plan_step(9, n, c), b = plan_step(9, n, c);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].seed, b[i].seed);
}

TEST(TrainStep, ZeroLearningRateLeavesParameters) {
  const Toy& t = toy();
  TrainState st = t.state();
  TrainConfig c = t.config();
  c.peak_lr = 0.0;
  Trainer tr(st, t.codec, t.data, c);
  const auto before = lm_tensors(st);
  tr.run(3);
  const auto after = lm_tensors(st);
  ASSERT_EQ(before.size(), after.size());
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bit_identical(before[i], after[i]));
  EXPECT_EQ(st.step, 3);
}

TEST(TrainStep, RepeatedBatchOverfitsAndFrozenStaysFrozen) {
  const Toy& t = toy();
  TrainState st = t.state();
  const FrozenSnapshot snap = snapshot(st.encoder.frozen);
  const Adapter<float> adapter0 = st.encoder.adapter;
  TrainConfig c = t.config();
  c.warmup_steps = 20;
  Trainer tr(st, t.codec, t.data, c);
  const auto batch = tr.produce(0);
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 500; ++s) {
    const auto r = train_step(st, c, batch);
    ASSERT_TRUE(r.applied);
    if (s == 0) first = r.loss;
    last = r.loss;
    if (s == 99) {
      EXPECT_TRUE(freeze_check(st.encoder, snap));
    }
  }
  EXPECT_LT(last, 0.1 * first);
  EXPECT_TRUE(freeze_check(st.encoder, snap));
  EXPECT_FALSE(adapter_identical(adapter0, st.encoder.adapter));
}

TEST(TrainStep, NonFiniteLossIsRejected) {
  const Toy& t = toy();
  TrainState st = t.state();
  const TrainConfig c = t.config();
  Trainer tr(st, t.codec, t.data, c);
  auto batch = tr.produce(0);
  batch[0].enc_degraded(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const auto before = lm_tensors(st);
  st.step = 20;
  const auto r = train_step(st, c, batch);
  EXPECT_FALSE(r.applied);
  EXPECT_EQ(st.rejected_steps, 1);
  EXPECT_EQ(st.step, 21);
  const auto after = lm_tensors(st);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_TRUE(bit_identical(before[i], after[i]));
  batch = tr.produce(1);
  EXPECT_TRUE(train_step(st, c, batch).applied);
}

TEST(TrainStep, CanaryAndGradientAgreeWithLoss) {
  const Toy& t = toy();
  TrainState st = t.state();
  Trainer tr(st, t.codec, t.data, t.config());
  const auto batch = tr.produce(2);
  Rng r(1);
  EXPECT_TRUE(canary_check(st, batch, r));
  // The batch loss is the mean over every labeled position in the batch.
  Gradients g{LmParams<float>::zeros(t.mc), Adapter<float>::zeros(32, 32)};
  const auto all = accumulate_gradients(st, batch, g, false);
  double total = 0.0;
  std::size_t labeled = 0;
  for (const auto& ex : batch) {
    Gradients gi{LmParams<float>::zeros(t.mc), Adapter<float>::zeros(32, 32)};
    const auto one = accumulate_gradients(st, std::span(&ex, 1), gi, false);
    total += one.loss * static_cast<double>(one.labeled);
    labeled += one.labeled;
  }
  EXPECT_EQ(all.labeled, labeled);
  EXPECT_NEAR(all.loss, total / static_cast<double>(labeled), 1e-9);
}

TEST(Trainer, ProducesThreadIndependentBatches) {
  const Toy& t = toy();
  TrainState st = t.state();
  Trainer one(st, t.codec, t.data, t.config(), 1), four(st, t.codec, t.data, t.config(), 4);
  const auto a = one.produce(3), b = four.produce(3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].mode, b[i].mode);
    EXPECT_TRUE(bit_identical(a[i].enc_degraded, b[i].enc_degraded));
    EXPECT_EQ(a[i].target.semantic.ids, b[i].target.semantic.ids);
    EXPECT_EQ(a[i].mode != Mode::kSR, a[i].enc_reference.has_value());
  }
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
  const Toy& t = toy();
  const TrainConfig c = t.config();
  std::vector<double> straight;
  {
    TrainState st = t.state();
    Trainer tr(st, t.codec, t.data, c, 2);
    tr.run(12, [&](const StepLog& l) { straight.push_back(l.result.loss); });
  }
  test::TempDir dir;
  const auto path = (dir.path / "ckpt.bin").string();
  std::vector<double> resumed;
  {
    TrainState st = t.state();
    Trainer tr(st, t.codec, t.data, c, 2);
    tr.run(7, [&](const StepLog& l) { resumed.push_back(l.result.loss); });
    save_checkpoint(path, st, CheckpointMeta{1, t.codec.fingerprint(), c.seed}, true);
  }
  Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.state.step, 7);
  EXPECT_EQ(ck.meta.codec_hash, t.codec.fingerprint());
  Trainer tr(ck.state, t.codec, t.data, c, 1);
  tr.run(12, [&](const StepLog& l) { resumed.push_back(l.result.loss); });
  ASSERT_EQ(resumed.size(), straight.size());
  for (std::size_t i = 0; i < straight.size(); ++i) EXPECT_EQ(resumed[i], straight[i]) << "step " << i;
}

TEST(Trainer, ModeTokenChangesPredictionsAfterTraining) {
  const Toy& t = toy();
  TrainState st = t.state();
  TrainConfig c = t.config();
  c.mode_mix = {0.0, 0.5, 0.5};
  c.canary_every = 0;
  Trainer tr(st, t.codec, t.data, c);
  tr.run(60);
  const auto batch = tr.produce(100);
  const auto& ex = batch[0];
  const MatF cd = st.encoder.adapter.apply(ex.enc_degraded), cr = st.encoder.adapter.apply(*ex.enc_reference);
  const auto a = build_sequence<float>(st.model.vocab(), Mode::kTSE, cd, &cr, nullptr);
  const auto b = build_sequence<float>(st.model.vocab(), Mode::kRTSE, cd, &cr, nullptr);
  const MatF la = st.model.forward(a), lb = st.model.forward(b);
  auto softmax = [](Eigen::RowVectorXd x) {
    x = (x.array() - x.maxCoeff()).exp();
    return Eigen::RowVectorXd(x / x.sum());
  };
  const Eigen::RowVectorXd p = softmax(la.bottomRows(1).cast<double>()), q = softmax(lb.bottomRows(1).cast<double>());
  const double kl = (p.array() * (p.array() / q.array()).log()).sum();
  EXPECT_GT(kl, 0.0);
}

TEST(Checkpoint, RoundTripAndRejections) {
  const Toy& t = toy();
  TrainState st = t.state();
  Trainer tr(st, t.codec, t.data, t.config());
  tr.run(2);
  test::TempDir dir;
  const auto path = (dir.path / "m.bin").string();
  save_checkpoint(path, st, CheckpointMeta{7, 8, 9}, false);
  const Checkpoint ck = load_checkpoint(path);
  EXPECT_EQ(ck.meta.config_hash, 7u);
  EXPECT_EQ(ck.state.step, 2);
  const auto a = lm_tensors(st), b = lm_tensors(ck.state);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_identical(a[i], b[i]));
  EXPECT_TRUE(freeze_check(ck.state.encoder, snapshot(st.encoder.frozen)));
  std::ofstream(dir.path / "bad.bin") << "garbage";
  test::expect_error([&] { load_checkpoint((dir.path / "bad.bin").string()); }, "not a model checkpoint");
}

TEST(Trainer, RejectsCodecMismatch) {
  const Toy& t = toy();
  TrainState st = t.state();
  std::vector<AudioBuffer> audio;
  for (const auto& u : t.corpus.utterances) audio.push_back(u.audio);
  const Codec other = Codec::train(audio, 8, 4, 2);
  test::expect_error([&] { Trainer tr(st, other, t.data, t.config()); }, "codebook sizes");
}
