#pragma once

// Inference pipelines: fixed-length segmentation, per-mode prefix assembly,
// autoregressive generation, decoding and stitching, plus the SS chain
// SR -> TSE -> rTSE.

#include "tokense/codec.hpp"
#include "tokense/cond_encoder.hpp"
#include "tokense/degrade.hpp"
#include "tokense/lm.hpp"
#include "tokense/parallel.hpp"

#include <string>
#include <vector>

namespace tokense {

struct Segment {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Consecutive non-overlapping windows of segment_sec; the last may be shorter.
inline std::vector<Segment> plan_segments(std::size_t samples, double segment_sec = 5.0) {
  if (!(segment_sec > 0.0)) throw Error("orchestrator", "segment length must be positive");
  const auto len = static_cast<std::size_t>(std::llround(segment_sec * kSampleRate));
  if (len == 0) throw Error("orchestrator", "segment length rounds to zero samples");
  std::vector<Segment> out;
  for (std::size_t b = 0; b < samples; b += len) out.push_back({b, std::min(samples, b + len)});
  return out;
}

struct InferOptions {
  Sampler sampler = Sampler::greedy();
  std::uint64_t seed = 0;
  double segment_sec = 5.0;
  int extra_tokens = 25;  // generation budget beyond the input frame count
  int threads = 1;
};

struct SegmentOutput {
  Segment span;
  CodecTokens tokens;
  bool truncated = false;
};

struct StageOutput {
  Mode mode = Mode::kSR;
  AudioBuffer audio;
  std::vector<SegmentOutput> segments;

  bool truncated() const {
    for (const auto& s : segments)
      if (s.truncated) return true;
    return false;
  }
  std::vector<std::string> warnings() const {
    std::vector<std::string> w;
    for (std::size_t i = 0; i < segments.size(); ++i)
      if (segments[i].truncated)
        w.push_back(std::string(mode_name(mode)) + " segment " + std::to_string(i) +
                    ": generation reached the token budget before E");
    return w;
  }
};

struct SsOutput {
  StageOutput sr, speaker1, speaker2;
};

class Pipeline {
 public:
  Pipeline(const LanguageModel<float>& model, const Codec& codec, const EncoderStack& encoder,
           InferOptions opt = {})
      : model_(model), codec_(codec), encoder_(encoder), opt_(opt) {
    if (!codec.trained()) throw Error("orchestrator", "codec is not trained");
    if (codec.semantic_size() != model.config().semantic_vocab || codec.global_size() != model.config().global_vocab)
      throw Error("orchestrator", "codec codebook sizes do not match the model vocabulary");
  }

  const InferOptions& options() const { return opt_; }
  std::size_t reference_samples() const {
    return static_cast<std::size_t>(std::llround(opt_.segment_sec * kSampleRate));
  }

  StageOutput run_sr(const AudioBuffer& input) const { return run_stage(Mode::kSR, input, nullptr, 0); }

  StageOutput run_tse(const AudioBuffer& mixture, const AudioBuffer& reference) const {
    return run_stage(Mode::kTSE, mixture, &reference, 1);
  }

  StageOutput run_rtse(const AudioBuffer& mixture, const AudioBuffer& reference) const {
    return run_stage(Mode::kRTSE, mixture, &reference, 2);
  }

  // Stage 1 SR picks the louder speaker; its first segment is the TSE
  // reference (speaker 1); speaker 1 is then the rTSE reference (speaker 2).
  SsOutput run_ss(const AudioBuffer& mixture) const {
    SsOutput out;
    out.sr = staged("ss stage 1 (sr)", [&] { return run_sr(mixture); });
    out.speaker1 = staged("ss stage 2 (tse)", [&] { return run_stage(Mode::kTSE, mixture, &out.sr.audio, 1); });
    out.speaker2 =
        staged("ss stage 3 (rtse)", [&] { return run_stage(Mode::kRTSE, mixture, &out.speaker1.audio, 2); });
    return out;
  }

 private:
  template <typename F>
  static StageOutput staged(const std::string& stage, F&& f) {
    try {
      return f();
    } catch (const Error& e) {
      throw Error("orchestrator", stage + ": " + e.what());
    }
  }

  StageOutput run_stage(Mode mode, const AudioBuffer& input, const AudioBuffer* reference, int stage) const {
    if (input.empty()) throw Error("orchestrator", "input audio is empty");
    std::optional<MatF> cond_r;
    if (mode != Mode::kSR) {
      if (!reference || reference->empty())
        throw Error("orchestrator", std::string(mode_name(mode)) + " requires a non-empty reference");
      cond_r = encoder_.extract(trim_or_pad(*reference, reference_samples()));
    }
    StageOutput out;
    out.mode = mode;
    const auto segs = plan_segments(input.size(), opt_.segment_sec);
    out.segments.resize(segs.size());
    std::vector<AudioBuffer> pieces(segs.size());
    parallel_for(segs.size(), opt_.threads, [&](std::size_t i) {
      const Segment s = segs[i];
      // Pad to whole frames; the decoded audio is trimmed back below.
      const std::size_t padded = static_cast<std::size_t>(frames_for_samples(static_cast<std::int64_t>(s.size()))) * kHop;
      AudioBuffer seg = AudioBuffer::zeros(padded);
      std::copy(input.samples.begin() + static_cast<std::ptrdiff_t>(s.begin),
                input.samples.begin() + static_cast<std::ptrdiff_t>(s.end), seg.samples.begin());
      const MatF cond_d = encoder_.extract(seg);
      const auto prefix = build_sequence<float>(model_.vocab(), mode, cond_d, cond_r ? &*cond_r : nullptr, nullptr);
      Rng rng = Rng(opt_.seed).split(static_cast<std::uint64_t>(stage) * 1000003ULL + i);
      const int budget = static_cast<int>(cond_d.rows()) + opt_.extra_tokens;
      Generation g = generate(model_, prefix, opt_.sampler, budget, rng);
      AudioBuffer dec = g.tokens.semantic.ids.empty() ? AudioBuffer::zeros(s.size())
                                                      : codec_.decode(g.tokens.global, g.tokens.semantic);
      pieces[i] = trim_or_pad(dec, s.size());
      out.segments[i] = {s, std::move(g.tokens), g.truncated};
    });
    out.audio = AudioBuffer::zeros(input.size());
    for (std::size_t i = 0; i < segs.size(); ++i)
      std::copy(pieces[i].samples.begin(), pieces[i].samples.end(),
                out.audio.samples.begin() + static_cast<std::ptrdiff_t>(segs[i].begin));
    return out;
  }

  const LanguageModel<float>& model_;
  const Codec& codec_;
  const EncoderStack& encoder_;
  InferOptions opt_;
};

}  // namespace tokense
