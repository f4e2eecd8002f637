#include "tokense/degrade.hpp"
#include "tokense/synth.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace tokense;

namespace {

AudioBuffer tone(double hz, std::size_t n, double amp = 0.5) {
  AudioBuffer b = AudioBuffer::zeros(n);
  for (std::size_t i = 0; i < n; ++i)
    b.samples[i] = amp * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / kSampleRate);
  return b;
}

AudioBuffer white(std::size_t n, std::uint64_t seed, double level = 0.1) {
  Rng r(seed);
  AudioBuffer b = AudioBuffer::zeros(n);
  for (auto& v : b.samples) v = level * r.normal();
  return b;
}

// Amplitude of the `hz` component by direct projection over the interior.
double tone_amplitude(const AudioBuffer& b, double hz) {
  const std::size_t lo = 1000, hi = b.size() - 1000;
  double re = 0.0, im = 0.0;
  for (std::size_t i = lo; i < hi; ++i) {
    const double ph = 2.0 * std::numbers::pi * hz * static_cast<double>(i) / kSampleRate;
    re += b.samples[i] * std::cos(ph);
    im += b.samples[i] * std::sin(ph);
  }
  return 2.0 * std::hypot(re, im) / static_cast<double>(hi - lo);
}

double ratio_db(const AudioBuffer& a, const AudioBuffer& b) {
  return 10.0 * std::log10(power(a.samples) / power(b.samples));
}

}  // namespace

TEST(Mix, EqualPowerZeroDbHasUnitGain) {
  const AudioBuffer c = white(4000, 1), n = white(4000, 2);
  AudioBuffer n2 = n;
  const double s = std::sqrt(power(c.samples) / power(n.samples));
  for (auto& v : n2.samples) v *= s;
  double g = 0.0;
  mix_at_snr(c, n2, 0.0, &g);
  EXPECT_NEAR(g, 1.0, 1e-9);
  mix_at_sir(c, n2, 0.0, &g);
  EXPECT_NEAR(g, 1.0, 1e-9);
  mix_at_sir(c, n2, 20.0, &g);
  EXPECT_NEAR(g, 0.1, 1e-9);
  mix_at_snr(c, n2, 20.0, &g);
  EXPECT_NEAR(g, 0.1, 1e-9);
}

TEST(Mix, RequestedRatioIsExact) {
  const AudioBuffer c = white(3000, 3, 0.2), n = white(3000, 4, 0.03);
  for (double db : {-5.0, -1.3, 0.0, 7.7, 20.0}) {
    double g = 0.0;
    const AudioBuffer mix = mix_at_snr(c, n, db, &g);
    AudioBuffer scaled = n;
    for (auto& v : scaled.samples) v *= g;
    EXPECT_NEAR(ratio_db(c, scaled), db, 1e-6);
    for (std::size_t i = 0; i < mix.size(); i += 97) EXPECT_NEAR(mix.samples[i], c.samples[i] + scaled.samples[i], 1e-12);
  }
  double g = 0.0;
  mix_at_sir(c, n, -5.0, &g);
  EXPECT_NEAR(power(n.samples) * g * g, power(c.samples) * std::pow(10.0, 0.5), 1e-12);
}

TEST(Mix, DegenerateOperandsNamed) {
  const AudioBuffer c = white(100, 5), z = AudioBuffer::zeros(100);
  test::expect_error([&] { mix_at_snr(c, z, 0.0); }, "noise");
  test::expect_error([&] { mix_at_snr(z, c, 0.0); }, "clean");
  test::expect_error([&] { mix_at_sir(c, z, 0.0); }, "interferer");
  test::expect_error([&] { mix_at_snr(c, white(50, 6), 0.0); }, "lengths differ");
}

TEST(Reverb, ImpulseIsIdentity) {
  const AudioBuffer x = white(2000, 7);
  const AudioBuffer y = apply_reverb(x, Rir::normalized({1.0}));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y.samples[i], x.samples[i], 1e-9);
  std::vector<double> delayed(81, 0.0);
  delayed[80] = 1.0;
  const AudioBuffer z = apply_reverb(x, Rir::normalized(delayed));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(z.samples[i], x.samples[i], 1e-9);
}

TEST(Reverb, RenormalizesPower) {
  const AudioBuffer x = white(8000, 8);
  const AudioBuffer y = apply_reverb(x, Rir::normalized({1.0, 0.5}));
  EXPECT_NEAR(power(y.samples), power(x.samples), 1e-6);
  // Direct-convolution oracle before renormalization.
  const double scale = y.samples[10] / (x.samples[10] + 0.5 * x.samples[9]);
  for (std::size_t i = 1; i < x.size(); i += 131)
    EXPECT_NEAR(y.samples[i], scale * (x.samples[i] + 0.5 * x.samples[i - 1]), 1e-9);
}

TEST(Reverb, RirValidation) {
  test::expect_error([] { Rir::normalized({}); }, "empty");
  test::expect_error([] { Rir::normalized({0.0, 0.0}); }, "all-zero");
  EXPECT_DOUBLE_EQ(Rir::normalized({0.1, -0.4}).taps[1], -1.0);
  test::expect_error([] { apply_reverb(AudioBuffer::zeros(4), Rir{}); }, "empty RIR");
}

TEST(Clip, Examples) {
  const AudioBuffer x(std::vector<double>{-1, -0.5, 0, 0.5, 1});
  const AudioBuffer y = clip_quantile(x, 0.25, 0.75);
  const std::vector<double> want{-0.5, -0.5, 0, 0.5, 0.5};
  EXPECT_EQ(y.samples, want);
  EXPECT_EQ(clip_quantile(x, 0.0, 1.0).samples, x.samples);
  const AudioBuffer c(std::vector<double>(9, 0.3));
  EXPECT_EQ(clip_quantile(c, 0.1, 0.6).samples, c.samples);
  test::expect_error([&] { clip_quantile(x, 0.5, 0.5); }, "min_q < max_q");
}

TEST(Clip, Idempotent) {
  const AudioBuffer x = white(5001, 9);
  for (auto [lo, hi] : {std::pair{0.0, 0.9}, {0.07, 0.95}, {0.1, 1.0}}) {
    const AudioBuffer once = clip_quantile(x, lo, hi);
    const AudioBuffer twice = clip_quantile(once, lo, hi);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(once.samples[i], twice.samples[i], 1e-12);
  }
}

TEST(Bandlimit, PassAndStopBand) {
  const std::size_t n = 16000;
  const double pass = tone_amplitude(bandlimit(tone(500, n), 2000), 500);
  EXPECT_LE(std::abs(20.0 * std::log10(pass / 0.5)), 1.0);
  const double pass4 = tone_amplitude(bandlimit(tone(2900, n), 4000), 2900);
  EXPECT_LE(std::abs(20.0 * std::log10(pass4 / 0.5)), 1.0);
  const double stop = tone_amplitude(bandlimit(tone(6000, n), 4000), 6000);
  EXPECT_LE(20.0 * std::log10(stop / 0.5), -40.0);
  const double stop2 = tone_amplitude(bandlimit(tone(2600, n), 2000), 2600);
  EXPECT_LE(20.0 * std::log10(stop2 / 0.5), -40.0);
}

TEST(Bandlimit, DcAndAlignment) {
  const AudioBuffer dc(std::vector<double>(4000, 0.25));
  const AudioBuffer y = bandlimit(dc, 2000);
  for (std::size_t i = 300; i < 3700; ++i) EXPECT_NEAR(y.samples[i], 0.25, 1e-6);
  // Zero phase: a low tone comes out aligned with the input.
  const AudioBuffer t = tone(300, 8000);
  const AudioBuffer f = bandlimit(t, 4000);
  double err = 0.0;
  for (std::size_t i = 1000; i < 7000; ++i) err = std::max(err, std::abs(f.samples[i] - t.samples[i]));
  EXPECT_LT(err, 0.06);
  test::expect_error([&] { bandlimit(dc, 3000); }, "unsupported bandwidth");
}

TEST(PacketLoss, Extremes) {
  const AudioBuffer x = white(16000, 10);
  Rng r(1);
  EXPECT_EQ(packet_loss(x, 0.0, 20, r).samples, x.samples);
  const AudioBuffer z = packet_loss(x, 1.0, 20, r);
  for (double v : z.samples) EXPECT_EQ(v, 0.0);
  test::expect_error([&] { packet_loss(x, 1.5, 20, r); }, "rate");
  test::expect_error([&] { packet_loss(x, 0.5, 0, r); }, "packet_ms");
}

TEST(PacketLoss, FractionAndExactCount) {
  const std::size_t len = 320;
  const AudioBuffer x(std::vector<double>(len * 10000 + 100, 1.0));
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng r(seed);
    std::size_t dropped = 0;
    const AudioBuffer y = packet_loss(x, 0.25, 20, r, &dropped);
    const double frac = static_cast<double>(dropped) / 10001.0;
    EXPECT_GE(frac, 0.23);
    EXPECT_LE(frac, 0.27);
    std::size_t zeros = 0;
    for (double v : y.samples) zeros += v == 0.0;
    const bool tail_dropped = y.samples.back() == 0.0;
    EXPECT_EQ(zeros, (dropped - tail_dropped) * len + (tail_dropped ? 100 : 0));
  }
}

TEST(Lengths, FitAndTrim) {
  const AudioBuffer s(std::vector<double>{1, 2, 3});
  EXPECT_EQ(fit_length(s, 7, 1).samples, (std::vector<double>{2, 3, 1, 2, 3, 1, 2}));
  EXPECT_EQ(trim_or_pad(s, 5).samples, (std::vector<double>{1, 2, 3, 0, 0}));
  EXPECT_EQ(trim_or_pad(s, 2).samples, (std::vector<double>{1, 2}));
  test::expect_error([] { fit_length(AudioBuffer{}, 3, 0); }, "empty");
}

class Simulate : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { corpus_ = new synth::Corpus(synth::two_timbre_corpus(3, 0.05, 11)); }
  static void TearDownTestSuite() { delete corpus_; }
  static synth::Corpus* corpus_;
};
synth::Corpus* Simulate::corpus_ = nullptr;

TEST_F(Simulate, ZeroSpecIsIdentity) {
  const auto& u = corpus_->utterances[0];
  const auto t = simulate(u, corpus_->assets(), Mode::kSR, DegradeSpec::none(), 5);
  EXPECT_EQ(t.degraded.samples, u.audio.samples);
  EXPECT_EQ(t.target.samples, u.audio.samples);
  EXPECT_TRUE(t.report.applied.empty());
  EXPECT_FALSE(t.reference.has_value());
}

TEST_F(Simulate, TseAlwaysInterferedWithMatchedReference) {
  const auto assets = corpus_->assets();
  DegradeSpec spec = DegradeSpec::none();
  spec.interference_prob_tse = 1.0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto& u = corpus_->utterances[seed % corpus_->utterances.size()];
    for (Mode m : {Mode::kTSE, Mode::kRTSE}) {
      const auto t = simulate(u, assets, m, spec, seed);
      ASSERT_TRUE(t.report.has("interference"));
      ASSERT_TRUE(t.reference.has_value());
      const double sir = t.report.get("interference").param("sir_db");
      EXPECT_TRUE(spec.sir_db_range_tse.contains(sir));
      EXPECT_EQ(t.target.samples, u.audio.samples);
      const auto& interferer = assets.speech[static_cast<std::size_t>(t.report.get("interference").param("source"))];
      const std::string ref_speaker = t.reference_id.substr(0, t.reference_id.find('-'));
      if (m == Mode::kTSE) {
        EXPECT_EQ(ref_speaker, u.speaker);
        EXPECT_NE(t.reference_id, u.id);
      } else {
        EXPECT_EQ(ref_speaker, interferer.speaker);
        EXPECT_NE(t.reference_id, interferer.id);
      }
      EXPECT_EQ(t.degraded.size(), t.target.size());
    }
  }
}

TEST_F(Simulate, TseWithoutInterferenceIsRejected) {
  test::expect_error(
      [&] { simulate(corpus_->utterances[0], corpus_->assets(), Mode::kTSE, DegradeSpec::none(), 1); },
      "interfering speaker");
}

TEST_F(Simulate, SrFrequenciesMatchSpec) {
  const auto assets = corpus_->assets();
  const DegradeSpec spec;
  int noise = 0, interf = 0, reverb = 0, clip = 0, band = 0, loss = 0;
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) {
    const auto t = simulate(corpus_->utterances[s % 6], assets, Mode::kSR, spec, static_cast<std::uint64_t>(s));
    noise += t.report.has("noise");
    interf += t.report.has("interference");
    reverb += t.report.has("reverb");
    clip += t.report.has("clipping");
    band += t.report.has("bandlimit");
    loss += t.report.has("packet_loss");
    ASSERT_FALSE(t.reference.has_value());
  }
  EXPECT_NEAR(noise / double(draws), 0.8, 0.02);
  EXPECT_NEAR(interf / double(draws), 0.2, 0.02);
  for (int c : {reverb, clip, band, loss}) EXPECT_NEAR(c / double(draws), 0.3, 0.02);
}

TEST_F(Simulate, SrKeepsLouderSpeaker) {
  DegradeSpec spec = DegradeSpec::none();
  spec.interference_prob_sr = 1.0;
  spec.sir_db_range_sr = {-5.0, -1.0};
  const auto& u = corpus_->utterances[0];
  const auto t = simulate(u, corpus_->assets(), Mode::kSR, spec, 3);
  EXPECT_NE(t.target.samples, u.audio.samples);
  EXPECT_GT(power(t.target.samples), power(u.audio.samples));
}

TEST_F(Simulate, DeterministicAndReportReplays) {
  const auto assets = corpus_->assets();
  const DegradeSpec spec;
  for (std::uint64_t seed : {4u, 99u, 12345u}) {
    const auto a = simulate(corpus_->utterances[1], assets, Mode::kRTSE, spec, seed);
    const auto b = simulate(corpus_->utterances[1], assets, Mode::kRTSE, spec, seed);
    EXPECT_EQ(a.degraded.samples, b.degraded.samples);
    EXPECT_EQ(a.report.to_string(), b.report.to_string());
    EXPECT_EQ(a.report.rng_seed, seed);
  }
}

TEST_F(Simulate, ReportOrderFollowsPipeline) {
  DegradeSpec spec;
  spec.noise_prob = spec.reverb_prob = spec.clip_prob = spec.bandlimit_prob = spec.packet_loss_prob = 1.0;
  const auto t = simulate(corpus_->utterances[2], corpus_->assets(), Mode::kTSE, spec, 8);
  std::vector<std::string> names;
  for (const auto& d : t.report.applied) names.push_back(d.name);
  const std::vector<std::string> want{"interference", "noise", "reverb", "clipping", "bandlimit", "packet_loss",
                                      "reference"};
  EXPECT_EQ(names, want);
}

TEST_F(Simulate, EmptyPoolsRejected) {
  DegradeSpec spec = DegradeSpec::none();
  spec.noise_prob = 1.0;
  DegradeAssets assets = corpus_->assets();
  assets.noises.clear();
  test::expect_error([&] { simulate(corpus_->utterances[0], assets, Mode::kSR, spec, 1); }, "noise pool");
  spec = DegradeSpec::none();
  spec.reverb_prob = 1.0;
  assets = corpus_->assets();
  assets.rirs.clear();
  test::expect_error([&] { simulate(corpus_->utterances[0], assets, Mode::kSR, spec, 1); }, "RIR pool");
  spec.noise_prob = 2.0;
  test::expect_error([&] { simulate(corpus_->utterances[0], assets, Mode::kSR, spec, 1); }, "noise_prob");
}
