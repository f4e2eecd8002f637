#pragma once

// Toy discrete speech codec. A 50 Hz log-mel front-end feeds two single-layer
// vector quantizers:
//   * semantic: one token per frame, nearest codeword over the frame vector;
//   * global: exactly 32 tokens per utterance, quantizing 32 strided chunks of
//     the utterance-level [mean | std] statistics of the frames.
// Decoding looks up codewords, shifts the spectral envelope toward the global
// statistics, and recovers phase with Griffin-Lim.

#include "tokense/audio.hpp"
#include "tokense/binio.hpp"
#include "tokense/dsp.hpp"
#include "tokense/kmeans.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace tokense {

inline constexpr double kLogPowerFloor = 1e-10;
inline constexpr int kDefaultBands = 64;
inline constexpr int kGriffinLimIters = 32;
inline constexpr double kEnvelopeBlend = 0.5;

struct GlobalTokens {
  std::vector<int> ids;  // always kGlobalTokens entries
};

struct SemanticTokens {
  std::vector<int> ids;  // ceil(duration * 50) entries
  static constexpr int frame_rate_hz = 50;
};

struct CodecTokens {
  GlobalTokens global;
  SemanticTokens semantic;
};

// Log-mel frames at 50 Hz. Frame count is ceil(samples / 320).
class FeatureExtractor {
 public:
  explicit FeatureExtractor(int bands = kDefaultBands) : mel_(bands) {}

  int bands() const { return mel_.bands(); }
  const dsp::MelBank& mel() const { return mel_; }

  // Linear power spectrogram, frames x bins.
  MatD power_spectrogram(const AudioBuffer& buf) const {
    dsp::Stft stft;
    const auto spec = stft.analyze(buf.samples);
    MatD p(static_cast<Eigen::Index>(spec.size()), stft.bins());
    constexpr double scale = 1.0 / (kWindow / 2.0);
    for (std::size_t t = 0; t < spec.size(); ++t)
      for (int k = 0; k < stft.bins(); ++k)
        p(static_cast<Eigen::Index>(t), k) = std::norm(spec[t][static_cast<std::size_t>(k)] * scale);
    return p;
  }

  MatD frames_from_power(const MatD& p) const {
    MatD e = p * mel_.analysis().transpose();
    return e.unaryExpr([](double v) { return std::log(std::max(v, kLogPowerFloor)); });
  }

  MatF frames(const AudioBuffer& buf) const {
    if (buf.size() < static_cast<std::size_t>(kHop))
      throw Error("codec", "input of " + std::to_string(buf.size()) +
                               " samples is shorter than one hop (320 samples)");
    return frames_from_power(power_spectrogram(buf)).cast<float>();
  }

  // Band log-energies back to bin power: start from the average of the
  // covering bands, then multiplicative (Richardson-Lucy) updates so that
  // re-analysis reproduces the band energies while powers stay nonnegative.
  MatD power_from_frames(const MatD& frames, int iterations = 30) const {
    const MatD target = frames.array().exp().matrix();
    const MatD& m = mel_.analysis();
    MatD p = target * mel_.synthesis().transpose();
    const Eigen::RowVectorXd col_sum = m.colwise().sum();
    for (int it = 0; it < iterations; ++it) {
      const MatD est = (p * m.transpose()).cwiseMax(1e-30);
      const MatD ratio = target.cwiseQuotient(est);
      MatD back = ratio * m;
      for (Eigen::Index k = 0; k < back.cols(); ++k)
        back.col(k) = col_sum(k) > 0.0 ? (back.col(k) / col_sum(k)).eval() : Eigen::VectorXd::Zero(back.rows());
      p = p.cwiseProduct(back);
    }
    return p;
  }

 private:
  dsp::MelBank mel_;
};

inline MatF frame_features(const AudioBuffer& buf) { return FeatureExtractor().frames(buf); }

inline double log_floor_constant() { return std::log(kLogPowerFloor); }

namespace detail {

// Per-band [mean | std] over frames, length 2 * bands.
inline Eigen::VectorXf utterance_stats(const MatF& frames) {
  const auto d = frames.cols();
  Eigen::VectorXf s(2 * d);
  const Eigen::RowVectorXd mean = frames.cast<double>().colwise().mean();
  for (Eigen::Index b = 0; b < d; ++b) {
    const double m = mean(b);
    const double var = (frames.col(b).cast<double>().array() - m).square().mean();
    s(b) = static_cast<float>(m);
    s(d + b) = static_cast<float>(std::sqrt(var));
  }
  return s;
}

// Chunk c holds stats[c + 32 j] for j = 0 .. dim/32 - 1.
inline MatF chunk_stats(const Eigen::VectorXf& stats) {
  const Eigen::Index width = stats.size() / kGlobalTokens;
  MatF out(kGlobalTokens, width);
  for (int c = 0; c < kGlobalTokens; ++c)
    for (Eigen::Index j = 0; j < width; ++j) out(c, j) = stats(c + kGlobalTokens * j);
  return out;
}

inline Eigen::VectorXf unchunk_stats(const MatF& chunks) {
  Eigen::VectorXf stats(chunks.size());
  for (int c = 0; c < kGlobalTokens; ++c)
    for (Eigen::Index j = 0; j < chunks.cols(); ++j) stats(c + kGlobalTokens * j) = chunks(c, j);
  return stats;
}

}  // namespace detail

class Codec {
 public:
  static constexpr char kMagic[9] = "TOKSECDC";
  static constexpr std::uint32_t kVersion = 1;

  Codec() = default;

  bool trained() const { return trained_; }
  int semantic_size() const { return static_cast<int>(semantic_.rows()); }
  int global_size() const { return static_cast<int>(global_.rows()); }
  int bands() const { return static_cast<int>(semantic_.cols()); }
  const MatF& semantic_codebook() const { return semantic_; }
  const MatF& global_codebook() const { return global_; }
  std::uint64_t config_hash() const { return config_hash_; }
  void set_config_hash(std::uint64_t h) { config_hash_ = h; }

  // Content hash of the codebooks; identifies the codec in downstream artifacts.
  std::uint64_t fingerprint() const {
    binio::Writer w;
    w.put_matrix(semantic_);
    w.put_matrix(global_);
    return fnv1a(w.bytes());
  }

  static Codec train(const std::vector<AudioBuffer>& corpus, int k_semantic, int k_global,
                     std::uint64_t seed = 0, int bands = kDefaultBands) {
    if (corpus.empty()) throw Error("codec", "training corpus is empty");
    if (bands % 16 != 0) throw Error("codec", "band count must be a multiple of 16");
    FeatureExtractor fx(bands);
    std::vector<MatF> per_utt;
    Eigen::Index total = 0;
    for (const auto& a : corpus) {
      per_utt.push_back(fx.frames(a));
      total += per_utt.back().rows();
    }
    MatF frames(total, bands);
    MatF chunks(static_cast<Eigen::Index>(corpus.size()) * kGlobalTokens, 2 * bands / kGlobalTokens);
    Eigen::Index row = 0;
    for (std::size_t u = 0; u < per_utt.size(); ++u) {
      frames.middleRows(row, per_utt[u].rows()) = per_utt[u];
      row += per_utt[u].rows();
      chunks.middleRows(static_cast<Eigen::Index>(u) * kGlobalTokens, kGlobalTokens) =
          detail::chunk_stats(detail::utterance_stats(per_utt[u]));
    }
    Codec c;
    c.semantic_ = kmeans(frames, k_semantic, {.max_iter = 50, .seed = seed});
    c.global_ = kmeans(chunks, k_global, {.max_iter = 50, .seed = seed + 1});
    c.trained_ = true;
    return c;
  }

  CodecTokens encode(const AudioBuffer& buf) const {
    require_trained();
    const MatF frames = FeatureExtractor(bands()).frames(buf);
    return encode_frames(frames);
  }

  CodecTokens encode_frames(const MatF& frames) const {
    require_trained();
    CodecTokens t;
    t.semantic.ids = assign_nearest(frames, semantic_).index;
    t.global.ids = assign_nearest(detail::chunk_stats(detail::utterance_stats(frames)), global_).index;
    return t;
  }

  // Log-mel frames reconstructed from tokens (codeword lookup plus envelope
  // correction toward the global statistics).
  MatD decode_frames(const GlobalTokens& g, const SemanticTokens& s) const {
    require_trained();
    validate(g, s);
    const Eigen::Index d = bands();
    MatD f(static_cast<Eigen::Index>(s.ids.size()), d);
    for (std::size_t t = 0; t < s.ids.size(); ++t)
      f.row(static_cast<Eigen::Index>(t)) = semantic_.row(s.ids[t]).cast<double>();
    if (f.rows() == 0) return f;
    MatF chunks(kGlobalTokens, global_.cols());
    for (int c = 0; c < kGlobalTokens; ++c) chunks.row(c) = global_.row(g.ids[static_cast<std::size_t>(c)]);
    const Eigen::VectorXf stats = detail::unchunk_stats(chunks);
    // Half-way shift of each band mean toward the global statistics.
    for (Eigen::Index b = 0; b < d; ++b) {
      const double m = f.col(b).mean();
      f.col(b).array() += kEnvelopeBlend * (static_cast<double>(stats(b)) - m);
    }
    return f;
  }

  // Bin magnitudes (frames x bins) implied by the decoded frames.
  MatD decode_magnitudes(const GlobalTokens& g, const SemanticTokens& s) const {
    return FeatureExtractor(bands()).power_from_frames(decode_frames(g, s)).cwiseSqrt();
  }

  AudioBuffer decode(const GlobalTokens& g, const SemanticTokens& s) const {
    const MatD mag = decode_magnitudes(g, s);
    return AudioBuffer(griffin_lim(mag, s.ids.size() * static_cast<std::size_t>(kHop)));
  }

  // Oracle baseline: nearest-codeword frames mapped straight to bin
  // magnitudes, with no token streams and no phase reconstruction.
  MatD quantize_reconstruct_magnitudes(const AudioBuffer& buf) const {
    require_trained();
    FeatureExtractor fx(bands());
    const MatF frames = fx.frames(buf);
    const auto a = assign_nearest(frames, semantic_);
    MatD q(frames.rows(), frames.cols());
    for (Eigen::Index t = 0; t < frames.rows(); ++t)
      q.row(t) = semantic_.row(a.index[static_cast<std::size_t>(t)]).cast<double>();
    return fx.power_from_frames(q).cwiseSqrt();
  }

  void save(const std::string& path) const {
    require_trained();
    binio::Writer w;
    w.put_bytes(kMagic, 8);
    w.put<std::uint32_t>(kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(semantic_size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(global_size()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(bands()));
    w.put<std::uint64_t>(config_hash_);
    w.put_bytes(semantic_.data(), static_cast<std::size_t>(semantic_.size()) * sizeof(float));
    w.put_bytes(global_.data(), static_cast<std::size_t>(global_.size()) * sizeof(float));
    w.save(path, "codec");
  }

  static Codec load(const std::string& path) {
    auto r = binio::Reader::from_file(path, "codec");
    if (r.remaining() < 8 || r.get_fixed(8) != std::string(kMagic, 8)) throw Error("codec", "'" + path + "' is not a codec checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw Error("codec", "unsupported codec version " + std::to_string(version));
    const auto ks = r.get<std::uint32_t>();
    const auto kg = r.get<std::uint32_t>();
    const auto d = r.get<std::uint32_t>();
    if (d == 0 || d % 16 != 0) throw Error("codec", "invalid band count " + std::to_string(d));
    Codec c;
    c.config_hash_ = r.get<std::uint64_t>();
    c.semantic_.resize(ks, d);
    for (Eigen::Index i = 0; i < c.semantic_.size(); ++i) c.semantic_.data()[i] = r.get<float>();
    c.global_.resize(kg, 2 * d / kGlobalTokens);
    for (Eigen::Index i = 0; i < c.global_.size(); ++i) c.global_.data()[i] = r.get<float>();
    if (!r.at_end()) throw Error("codec", "trailing bytes in '" + path + "'");
    c.trained_ = true;
    return c;
  }

  static Codec from_codebooks(MatF semantic, MatF global) {
    if (semantic.cols() % 16 != 0 || global.cols() * kGlobalTokens != 2 * semantic.cols())
      throw Error("codec", "codebook shapes are inconsistent");
    Codec c;
    c.semantic_ = std::move(semantic);
    c.global_ = std::move(global);
    c.trained_ = true;
    return c;
  }

 private:
  void require_trained() const {
    if (!trained_) throw Error("codec", "codec is not trained");
  }

  void validate(const GlobalTokens& g, const SemanticTokens& s) const {
    if (g.ids.size() != static_cast<std::size_t>(kGlobalTokens))
      throw Error("codec", "expected 32 global tokens, got " + std::to_string(g.ids.size()));
    for (std::size_t i = 0; i < g.ids.size(); ++i)
      if (g.ids[i] < 0 || g.ids[i] >= global_size())
        throw Error("codec", "global token id " + std::to_string(g.ids[i]) + " out of range at position " +
                                 std::to_string(i));
    for (std::size_t i = 0; i < s.ids.size(); ++i)
      if (s.ids[i] < 0 || s.ids[i] >= semantic_size())
        throw Error("codec", "semantic token id " + std::to_string(s.ids[i]) + " out of range at position " +
                                 std::to_string(i));
  }

  // Iterative phase reconstruction. One extra frame (repeating the last)
  // keeps the tail of the output covered by two windows.
  static std::vector<double> griffin_lim(const MatD& mag, std::size_t length) {
    if (mag.rows() == 0) return std::vector<double>(length, 0.0);
    dsp::Stft stft;
    const std::int64_t frames = mag.rows() + 1;
    const std::size_t inner_len = static_cast<std::size_t>(frames) * kHop;
    constexpr double unscale = kWindow / 2.0;
    Rng rng(0x5eed);
    std::vector<std::vector<dsp::cplx>> spec(static_cast<std::size_t>(frames),
                                             std::vector<dsp::cplx>(static_cast<std::size_t>(stft.bins())));
    auto target = [&](std::int64_t t, int k) {
      return mag(std::min<Eigen::Index>(t, mag.rows() - 1), k) * unscale;
    };
    for (std::int64_t t = 0; t < frames; ++t)
      for (int k = 0; k < stft.bins(); ++k)
        spec[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)] =
            std::polar(target(t, k), 2.0 * std::numbers::pi * rng.uniform());
    std::vector<double> y;
    for (int it = 0; it < kGriffinLimIters; ++it) {
      y = stft.synthesize(spec, inner_len);
      auto est = stft.analyze(y, frames);
      for (std::int64_t t = 0; t < frames; ++t)
        for (int k = 0; k < stft.bins(); ++k) {
          const auto& e = est[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)];
          const double a = std::abs(e);
          spec[static_cast<std::size_t>(t)][static_cast<std::size_t>(k)] =
              a > 0.0 ? e * (target(t, k) / a) : dsp::cplx(target(t, k), 0.0);
        }
    }
    y = stft.synthesize(spec, inner_len);
    y.resize(length);
    return y;
  }

  MatF semantic_;
  MatF global_;
  bool trained_ = false;
  std::uint64_t config_hash_ = 0;
};

}  // namespace tokense
