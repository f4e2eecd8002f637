#include "tokense/config.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace tokense;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string output;
};

CliResult run_cli(const std::string& args, const fs::path& cwd) {
  const fs::path log = cwd / "cli.log";
  const std::string cmd = "cd '" + cwd.string() + "' && '" TOKENSE_CLI_PATH "' " + args + " > '" + log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const char* kTiny = R"([codec]
semantic_size = 16
global_size = 4

[encoder]
layers = 2
width = 32
heads = 2

[model]
layers = 2
heads = 2
hidden = 32
ffn_dim = 64
max_seq_len = 512

[train]
epochs = 1
batch_size = 4
warmup_steps = 2
segment_sec = 1.0

[infer]
segment_sec = 1.0
)";

RunConfig parse(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in, "t.ini");
}

}  // namespace

TEST(Config, CanonicalTextRoundTrips) {
  const RunConfig a = parse(kTiny);
  EXPECT_EQ(a.codec.semantic_size, 16);
  EXPECT_EQ(a.model.hidden, 32);
  EXPECT_EQ(a.encoder.bands, a.codec.bands);
  const RunConfig b = parse(a.to_ini());
  EXPECT_EQ(a.to_ini(), b.to_ini());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(RunConfig{}.hash(), parse(RunConfig{}.to_ini()).hash());
}

TEST(Config, OverridesChangeHash) {
  RunConfig a = parse(kTiny);
  const auto h = a.hash();
  a.set("train.peak_lr", "0.002");
  EXPECT_EQ(a.train.peak_lr, 0.002);
  EXPECT_NE(a.hash(), h);
  a.set("degrade.snr_db", "-3, 7");
  EXPECT_EQ(a.degrade.snr_db_range.lo, -3.0);
  EXPECT_EQ(a.degrade.snr_db_range.hi, 7.0);
  a.set("degrade.bandwidths_hz", "1000, 3000");
  EXPECT_EQ(a.degrade.bandwidth_choices_hz, (std::vector<int>{1000, 3000}));
  a.set("run.seed", "0x10");
  EXPECT_EQ(a.seed, 16u);
}

TEST(Config, Rejections) {
  RunConfig c;
  test::expect_error([&] { c.set("model.widht", "3"); }, "unknown config key 'model.widht'");
  test::expect_error([&] { c.set("seed", "3"); }, "section.key");
  test::expect_error([&] { c.set("train.peak_lr", "fast"); }, "malformed value 'fast'");
  test::expect_error([&] { c.set("degrade.snr_db", "5"); }, "lo,hi");
  test::expect_error([] { parse("[model]\nhidden = 31\n"); }, "divisible by heads");
  test::expect_error([] { parse("[train]\nbogus = 1\n"); }, "t.ini: unknown config key 'train.bogus'");
  test::expect_error([] { parse("[degrade]\nnoise_prob = 1.5\n"); }, "noise_prob");
  test::expect_error([] { parse("[infer]\nsampler = beam\n"); }, "unknown sampler");
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new test::TempDir;
    std::ofstream(dir_->path / "tiny.ini") << kTiny;
    ASSERT_EQ(run_cli("synth-corpus --out corpus --per-speaker 3 --seed 5", dir_->path).code, 0);
    ASSERT_EQ(run_cli("train-codec --config tiny.ini --manifest corpus/manifest.tsv --out codec.bin", dir_->path).code, 0);
    ASSERT_EQ(run_cli("train --config tiny.ini --manifest corpus/manifest.tsv --codec codec.bin --out run", dir_->path).code, 0);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  const fs::path& dir() const { return dir_->path; }

  static test::TempDir* dir_;
};

test::TempDir* Cli::dir_ = nullptr;

TEST_F(Cli, UnknownFlagPrintsUsageAndExitsTwo) {
  const CliResult r = run_cli("degrade --frobnicate --manifest corpus/manifest.tsv --out x", dir());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.output.find("Usage"), std::string::npos);
  EXPECT_EQ(run_cli("", dir()).code, 2);
  EXPECT_EQ(run_cli("conjure", dir()).code, 2);
}

TEST_F(Cli, MissingReferenceNamesTheFlag) {
  const CliResult r = run_cli("infer --mode tse", dir());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("--reference"), std::string::npos);
  EXPECT_NE(r.output.find("cli:"), std::string::npos);
}

TEST_F(Cli, PreconditionFailuresExitOneWithModuleName) {
  std::ofstream(dir() / "bad.tsv") << "a\tnope.wav\tclean\t1.0\n";
  const CliResult r = run_cli("degrade --manifest bad.tsv --out d", dir());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("data_io:"), std::string::npos);
  const CliResult bad_set = run_cli("degrade --set model.nope=1 --manifest corpus/manifest.tsv --out d", dir());
  EXPECT_EQ(bad_set.code, 1);
  EXPECT_NE(bad_set.output.find("unknown config key"), std::string::npos);
}

TEST_F(Cli, EveryRunAnnouncesConfigHashAndSeed) {
  const CliResult r = run_cli("degrade --config tiny.ini --seed 11 --manifest corpus/manifest.tsv --out d0", dir());
  ASSERT_EQ(r.code, 0) << r.output;
  EXPECT_EQ(r.output.rfind("degrade: config_hash=", 0), 0u);
  EXPECT_NE(r.output.find("seed=11"), std::string::npos);
  const std::string comment = read_wav_comment(dir() / "d0" / "wav" / "spkA-0.target.wav");
  EXPECT_NE(comment.find("config="), std::string::npos);
}

TEST_F(Cli, DegradeTwiceIsByteIdentical) {
  for (const char* out : {"d1", "d2"})
    ASSERT_EQ(run_cli(std::string("degrade --config tiny.ini --mode tse --manifest corpus/manifest.tsv --out ") + out,
                      dir())
                  .code,
              0);
  int files = 0;
  for (const auto& e : fs::directory_iterator(dir() / "d1" / "wav")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir() / "d2" / "wav" / e.path().filename())) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 18);
  EXPECT_EQ(slurp(dir() / "d1" / "report.tsv"), slurp(dir() / "d2" / "report.tsv"));
}

TEST_F(Cli, EvalRefusesForeignCodecUnlessForced) {
  ASSERT_EQ(run_cli("degrade --config tiny.ini --mode sr --manifest corpus/manifest.tsv --out e", dir()).code, 0);
  const CliResult inf = run_cli(
      "infer --config tiny.ini --model run/model.bin --codec codec.bin --mode sr --input-manifest e/degraded.tsv "
      "--output-dir e_out",
      dir());
  ASSERT_EQ(inf.code, 0) << inf.output;
  ASSERT_EQ(run_cli("train-codec --config tiny.ini --set codec.seed=9 --manifest corpus/manifest.tsv --out other.bin",
                    dir())
                .code,
            0);
  const std::string base = "eval --config tiny.ini --reference-manifest e/target.tsv --estimate-manifest e_out/estimates.tsv ";
  const CliResult refused = run_cli(base + "--codec other.bin", dir());
  EXPECT_EQ(refused.code, 1);
  EXPECT_NE(refused.output.find("use --force"), std::string::npos);
  EXPECT_EQ(run_cli(base + "--codec other.bin --force", dir()).code, 0);
  const CliResult a = run_cli(base + "--codec codec.bin --model run/model.bin --output r1.tsv", dir());
  ASSERT_EQ(a.code, 0) << a.output;
  ASSERT_EQ(run_cli(base + "--codec codec.bin --model run/model.bin --output r2.tsv --threads 1", dir()).code, 0);
  EXPECT_EQ(slurp(dir() / "r1.tsv"), slurp(dir() / "r2.tsv"));
  EXPECT_NE(slurp(dir() / "r1.tsv").find("MEAN(6)"), std::string::npos);
}

TEST_F(Cli, InferRefusesCodecMismatch) {
  ASSERT_EQ(run_cli("train-codec --config tiny.ini --set codec.seed=3 --manifest corpus/manifest.tsv --out c3.bin",
                    dir())
                .code,
            0);
  const CliResult r = run_cli(
      "infer --config tiny.ini --model run/model.bin --codec c3.bin --mode sr --input corpus/wav/spkA-0.wav "
      "--output o.wav",
      dir());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.output.find("--force"), std::string::npos);
}
