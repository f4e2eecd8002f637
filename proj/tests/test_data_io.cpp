#include "tokense/audio.hpp"
#include "tokense/rng.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

using namespace tokense;

namespace {

void write_raw_wav(const std::string& path, std::uint16_t format, std::uint16_t channels, std::uint32_t rate,
                   std::uint16_t bits, const std::string& data, bool truncate_data = false) {
  std::string out = "RIFF";
  auto u32 = [&](std::uint32_t v) { for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff)); };
  auto u16 = [&](std::uint16_t v) { for (int i = 0; i < 2; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff)); };
  u32(static_cast<std::uint32_t>(36 + data.size()));
  out += "WAVEfmt ";
  u32(16);
  u16(format);
  u16(channels);
  u32(rate);
  u32(rate * channels * bits / 8);
  u16(static_cast<std::uint16_t>(channels * bits / 8));
  u16(bits);
  out += "data";
  u32(static_cast<std::uint32_t>(data.size()));
  out += truncate_data ? data.substr(0, data.size() / 2) : data;
  std::ofstream(path, std::ios::binary) << out;
}

std::string pcm16(const std::vector<std::int16_t>& v) {
  std::string s;
  for (auto x : v) {
    s.push_back(static_cast<char>(x & 0xff));
    s.push_back(static_cast<char>((x >> 8) & 0xff));
  }
  return s;
}

}  // namespace

TEST(Wav, SilenceRoundTrip) {
  test::TempDir dir;
  const auto p = dir.path / "silence.wav";
  write_wav(AudioBuffer::zeros(16000), p);
  const AudioBuffer b = read_wav(p);
  ASSERT_EQ(b.size(), 16000u);
  for (double v : b.samples) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(b.sample_rate_hz, 16000);
}

TEST(Wav, FullScalePcm16) {
  test::TempDir dir;
  const auto p = dir.path / "fs.wav";
  write_raw_wav(p.string(), 1, 1, 16000, 16, pcm16({32767, -32768, 0}));
  const AudioBuffer b = read_wav(p);
  ASSERT_EQ(b.size(), 3u);
  EXPECT_NEAR(b.samples[0], 32767.0 / 32768.0, 1e-9);
  EXPECT_NEAR(b.samples[1], -1.0, 1e-9);
}

TEST(Wav, Float32Input) {
  test::TempDir dir;
  const auto p = dir.path / "f32.wav";
  std::string data;
  for (float f : {0.25f, -0.5f}) data.append(reinterpret_cast<const char*>(&f), 4);
  write_raw_wav(p.string(), 3, 1, 16000, 32, data);
  const AudioBuffer b = read_wav(p);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b.samples[0], 0.25);
  EXPECT_EQ(b.samples[1], -0.5);
}

TEST(Wav, RejectsStereoNamingChannels) {
  test::TempDir dir;
  const auto p = dir.path / "stereo.wav";
  write_raw_wav(p.string(), 1, 2, 16000, 16, pcm16({1, 2, 3, 4}));
  test::expect_error([&] { read_wav(p); }, "channel");
}

TEST(Wav, RejectsSampleRateNamingRate) {
  test::TempDir dir;
  const auto p = dir.path / "sr.wav";
  write_raw_wav(p.string(), 1, 1, 44100, 16, pcm16({1, 2}));
  test::expect_error([&] { read_wav(p); }, "44100");
}

TEST(Wav, TruncatedDataIsAnError) {
  test::TempDir dir;
  const auto p = dir.path / "trunc.wav";
  write_raw_wav(p.string(), 1, 1, 16000, 16, pcm16({1, 2, 3, 4, 5, 6}), true);
  test::expect_error([&] { read_wav(p); }, "truncated");
}

TEST(Wav, QuantizationStepBound) {
  test::TempDir dir;
  const auto p = dir.path / "q.wav";
  Rng rng(3);
  AudioBuffer b = AudioBuffer::zeros(5000);
  for (auto& v : b.samples) v = rng.uniform(-1.0, 1.0);
  b.samples[0] = 0.5;
  b.samples[1] = 1.0;
  b.samples[2] = -1.0;
  write_wav(b, p);
  const AudioBuffer r = read_wav(p);
  ASSERT_EQ(r.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_LE(std::abs(r.samples[i] - b.samples[i]), std::ldexp(1.0, -15));
  EXPECT_NEAR(r.samples[0], 0.5, std::ldexp(1.0, -15));
}

TEST(Wav, ClampsOutOfRangeAndCounts) {
  test::TempDir dir;
  const auto p = dir.path / "clamp.wav";
  const auto res = write_wav(AudioBuffer(std::vector<double>{2.0, -3.0, 0.1}), p);
  EXPECT_EQ(res.clamped_samples, 2u);
  const AudioBuffer r = read_wav(p);
  EXPECT_NEAR(r.samples[0], 32767.0 / 32768.0, 1e-12);
  EXPECT_NEAR(r.samples[1], -1.0, 1e-12);
}

TEST(Wav, RejectsNaN) {
  test::TempDir dir;
  test::expect_error([&] { write_wav(AudioBuffer(std::vector<double>{0.0, std::nan("")}), dir.path / "n.wav"); },
                     "non-finite");
}

TEST(Wav, UnwritablePath) {
  test::expect_error([&] { write_wav(AudioBuffer::zeros(4), "/nonexistent-dir/x.wav"); }, "data_io");
}

TEST(Wav, CommentRoundTrip) {
  test::TempDir dir;
  const auto p = dir.path / "c.wav";
  write_wav(AudioBuffer::zeros(10), p, "tokense config=abc");
  EXPECT_EQ(read_wav_comment(p), "tokense config=abc");
  EXPECT_EQ(read_wav(p).size(), 10u);
}

TEST(Manifest, EmptyFile) {
  std::istringstream in("");
  EXPECT_TRUE(parse_manifest(in, ".", "m.tsv", false).empty());
}

TEST(Manifest, OrderPreservedAndFieldsParsed) {
  std::istringstream in("spkA-1\ta.wav\tclean\t1.5\nnoise-0\tn.wav\tnoise\t2\n\nr-0\t/abs/r.wav\trir\t0.25\n");
  const Manifest m = parse_manifest(in, "/base", "m.tsv", false);
  ASSERT_EQ(m.size(), 3u);
  EXPECT_EQ(m.entries[0].utterance_id, "spkA-1");
  EXPECT_EQ(m.entries[0].speaker(), "spkA");
  EXPECT_EQ(m.entries[0].path, std::filesystem::path("/base/a.wav"));
  EXPECT_EQ(m.entries[1].kind, AssetKind::kNoise);
  EXPECT_EQ(m.entries[2].path, std::filesystem::path("/abs/r.wav"));
  EXPECT_DOUBLE_EQ(m.entries[2].duration_sec, 0.25);
}

TEST(Manifest, DuplicateIdCitesLine) {
  std::istringstream in("a\tx.wav\tclean\t1\na\ty.wav\tclean\t1\n");
  test::expect_error([&] { parse_manifest(in, ".", "m.tsv", false); }, "m.tsv:2:");
}

TEST(Manifest, MalformedRecordCitesLine) {
  std::istringstream bad_fields("a\tx.wav\tclean\t1\nb\tx.wav\n");
  test::expect_error([&] { parse_manifest(bad_fields, ".", "m.tsv", false); }, "m.tsv:2:");
  std::istringstream bad_kind("a\tx.wav\tspeech\t1\n");
  test::expect_error([&] { parse_manifest(bad_kind, ".", "m.tsv", false); }, "m.tsv:1:");
  std::istringstream bad_dur("a\tx.wav\tclean\t1s\n");
  test::expect_error([&] { parse_manifest(bad_dur, ".", "m.tsv", false); }, "duration");
}

TEST(Manifest, MissingPathRejectedAtLoad) {
  test::TempDir dir;
  std::ofstream(dir.path / "m.tsv") << "a\tmissing.wav\tclean\t1\n";
  test::expect_error([&] { load_manifest(dir.path / "m.tsv"); }, "not found");
}

TEST(Manifest, WriteLoadRoundTrip) {
  test::TempDir dir;
  write_wav(AudioBuffer::zeros(160), dir.path / "a.wav");
  Manifest m;
  m.entries.push_back({"spk-0", dir.path / "a.wav", AssetKind::kClean, 0.01});
  write_manifest(m, dir.path / "m.tsv");
  const Manifest r = load_manifest(dir.path / "m.tsv");
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(std::filesystem::weakly_canonical(r.entries[0].path), std::filesystem::weakly_canonical(dir.path / "a.wav"));
  EXPECT_DOUBLE_EQ(r.entries[0].duration_sec, 0.01);
}

TEST(Rng, SplitStreamsAreDeterministicAndDistinct) {
  Rng a(42), b(42);
  EXPECT_EQ(a.next_u64(), b.next_u64());
  Rng c = Rng(42).split(1), d = Rng(42).split(1), e = Rng(42).split(2);
  const auto x = c.next_u64();
  EXPECT_EQ(x, d.next_u64());
  EXPECT_NE(x, e.next_u64());
  Rng s(7);
  s.next_u64();
  Rng t(0);
  t.set_state(s.state());
  EXPECT_EQ(s.next_u64(), t.next_u64());
}

TEST(Rng, IndexIsUnbiasedEnough) {
  Rng r(1);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 70000; ++i) ++counts[r.index(7)];
  for (int c : counts) EXPECT_NEAR(c, 10000, 400);
}
