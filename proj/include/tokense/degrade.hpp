#pragma once

// Distortion primitives and the probability-driven simulation pipeline that
// turns clean utterances into (degraded, target, reference) training triples.

#include "tokense/audio.hpp"
#include "tokense/dsp.hpp"
#include "tokense/rng.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace tokense {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

struct DegradeSpec {
  double noise_prob = 0.8;
  Range snr_db_range{-5.0, 20.0};
  double reverb_prob = 0.3;
  double clip_prob = 0.3;
  Range clip_min_quantile_range{0.0, 0.1};
  Range clip_max_quantile_range{0.9, 1.0};
  double bandlimit_prob = 0.3;
  std::vector<int> bandwidth_choices_hz{2000, 4000};
  double packet_loss_prob = 0.3;
  Range packet_loss_rate_range{0.05, 0.25};
  int packet_ms = 20;
  double interference_prob_sr = 0.2;
  Range sir_db_range_sr{2.0, 20.0};
  double interference_prob_tse = 1.0;
  Range sir_db_range_tse{-5.0, 5.0};

  // Every probability zero: simulate() becomes the identity on the clean input.
  static DegradeSpec none() {
    DegradeSpec s;
    s.noise_prob = s.reverb_prob = s.clip_prob = s.bandlimit_prob = s.packet_loss_prob = 0.0;
    s.interference_prob_sr = s.interference_prob_tse = 0.0;
    return s;
  }

  void validate() const {
    auto prob = [](double p, const char* name) {
      if (!(p >= 0.0 && p <= 1.0))
        throw Error("degrade", std::string(name) + " must lie in [0, 1], got " + std::to_string(p));
    };
    auto range = [](const Range& r, const char* name) {
      if (!(r.lo <= r.hi))
        throw Error("degrade", std::string(name) + " has lower bound above upper bound");
    };
    prob(noise_prob, "noise_prob");
    prob(reverb_prob, "reverb_prob");
    prob(clip_prob, "clip_prob");
    prob(bandlimit_prob, "bandlimit_prob");
    prob(packet_loss_prob, "packet_loss_prob");
    prob(interference_prob_sr, "interference_prob_sr");
    prob(interference_prob_tse, "interference_prob_tse");
    range(snr_db_range, "snr_db_range");
    range(clip_min_quantile_range, "clip_min_quantile_range");
    range(clip_max_quantile_range, "clip_max_quantile_range");
    range(packet_loss_rate_range, "packet_loss_rate_range");
    range(sir_db_range_sr, "sir_db_range_sr");
    range(sir_db_range_tse, "sir_db_range_tse");
    if (bandwidth_choices_hz.empty()) throw Error("degrade", "bandwidth_choices_hz is empty");
    if (packet_ms <= 0) throw Error("degrade", "packet_ms must be positive");
  }
};

struct AppliedDistortion {
  std::string name;
  std::vector<std::pair<std::string, double>> params;

  double param(const std::string& key) const {
    for (const auto& [k, v] : params)
      if (k == key) return v;
    throw Error("degrade", "distortion '" + name + "' has no parameter '" + key + "'");
  }
};

struct DegradeReport {
  std::vector<AppliedDistortion> applied;
  std::uint64_t rng_seed = 0;

  bool has(const std::string& name) const {
    return std::any_of(applied.begin(), applied.end(),
                       [&](const AppliedDistortion& d) { return d.name == name; });
  }
  const AppliedDistortion& get(const std::string& name) const {
    for (const auto& d : applied)
      if (d.name == name) return d;
    throw Error("degrade", "distortion '" + name + "' was not applied");
  }

  // name(k=v,k=v);name(...)  -- empty string when nothing was applied.
  std::string to_string() const {
    std::ostringstream os;
    os.precision(17);
    for (std::size_t i = 0; i < applied.size(); ++i) {
      if (i) os << ';';
      os << applied[i].name << '(';
      for (std::size_t j = 0; j < applied[i].params.size(); ++j) {
        if (j) os << ',';
        os << applied[i].params[j].first << '=' << applied[i].params[j].second;
      }
      os << ')';
    }
    return os.str();
  }
};

struct Rir {
  std::vector<double> taps;

  // Peak magnitude normalized to 1.
  static Rir normalized(std::vector<double> taps) {
    if (taps.empty()) throw Error("degrade", "empty RIR");
    double peak = 0.0;
    for (double v : taps) {
      if (!std::isfinite(v)) throw Error("degrade", "non-finite RIR tap");
      peak = std::max(peak, std::abs(v));
    }
    if (peak <= 0.0) throw Error("degrade", "all-zero RIR");
    for (double& v : taps) v /= peak;
    return Rir{std::move(taps)};
  }
};

struct Utterance {
  std::string id;
  std::string speaker;
  AudioBuffer audio;
};

struct DegradeAssets {
  std::vector<AudioBuffer> noises;
  std::vector<Rir> rirs;
  std::vector<Utterance> speech;  // interferer and reference pool
};

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

inline double gain_for_ratio(double p_signal, double p_other, double ratio_db) {
  return std::sqrt(p_signal / (p_other * std::pow(10.0, ratio_db / 10.0)));
}

inline AudioBuffer mix_at_ratio(const AudioBuffer& signal, const AudioBuffer& other, double ratio_db,
                                const char* signal_name, const char* other_name, double* gain_out) {
  if (signal.size() != other.size())
    throw Error("degrade", std::string(signal_name) + " and " + other_name + " lengths differ (" +
                               std::to_string(signal.size()) + " vs " + std::to_string(other.size()) + ")");
  const double ps = power(signal.samples);
  const double po = power(other.samples);
  if (!(ps > 0.0)) throw Error("degrade", std::string(signal_name) + " has zero power");
  if (!(po > 0.0)) throw Error("degrade", std::string(other_name) + " has zero power");
  const double g = gain_for_ratio(ps, po, ratio_db);
  AudioBuffer out = signal;
  for (std::size_t i = 0; i < out.size(); ++i) out.samples[i] += g * other.samples[i];
  if (gain_out) *gain_out = g;
  return out;
}

}  // namespace detail

// clean + g * noise with 10 log10(P_clean / P_{g noise}) == snr_db.
inline AudioBuffer mix_at_snr(const AudioBuffer& clean, const AudioBuffer& noise, double snr_db,
                              double* gain_out = nullptr) {
  return detail::mix_at_ratio(clean, noise, snr_db, "clean", "noise", gain_out);
}

inline AudioBuffer mix_at_sir(const AudioBuffer& target, const AudioBuffer& interferer, double sir_db,
                              double* gain_out = nullptr) {
  return detail::mix_at_ratio(target, interferer, sir_db, "target", "interferer", gain_out);
}

// Convolution aligned on the RIR peak, truncated to the input length and
// renormalized to the input RMS.
inline AudioBuffer apply_reverb(const AudioBuffer& clean, const Rir& rir) {
  if (rir.taps.empty()) throw Error("degrade", "empty RIR");
  std::size_t peak = 0;
  for (std::size_t i = 1; i < rir.taps.size(); ++i)
    if (std::abs(rir.taps[i]) > std::abs(rir.taps[peak])) peak = i;
  const auto full = dsp::convolve(clean.samples, rir.taps);
  AudioBuffer out = AudioBuffer::zeros(clean.size());
  for (std::size_t n = 0; n < clean.size(); ++n) out.samples[n] = full[n + peak];
  const double in_rms = rms(clean.samples);
  const double out_rms = rms(out.samples);
  if (out_rms > 0.0 && in_rms > 0.0)
    for (double& v : out.samples) v *= in_rms / out_rms;
  return out;
}

// Empirical quantile with linear interpolation between order statistics.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

inline AudioBuffer clip_quantile(const AudioBuffer& buf, double min_q, double max_q) {
  if (!(min_q >= 0.0 && min_q < max_q && max_q <= 1.0))
    throw Error("degrade", "clip quantiles require 0 <= min_q < max_q <= 1, got " +
                               std::to_string(min_q) + ", " + std::to_string(max_q));
  if (buf.empty()) return buf;
  std::vector<double> sorted = buf.samples;
  std::sort(sorted.begin(), sorted.end());
  const double lo = quantile_sorted(sorted, min_q);
  const double hi = quantile_sorted(sorted, max_q);
  AudioBuffer out = buf;
  for (double& v : out.samples) v = std::clamp(v, lo, hi);
  return out;
}

inline constexpr int kBandlimitTaps = 257;

inline AudioBuffer bandlimit(const AudioBuffer& buf, int bandwidth_hz) {
  if (bandwidth_hz != 2000 && bandwidth_hz != 4000)
    throw Error("degrade", "unsupported bandwidth " + std::to_string(bandwidth_hz) +
                               " Hz (2000 or 4000 supported)");
  const auto h = dsp::lowpass_fir(bandwidth_hz, kBandlimitTaps);
  return AudioBuffer(dsp::filter_centered(buf.samples, h));
}

// Zeroes each packet independently with probability `rate`; returns the
// number of dropped packets through `dropped`.
inline AudioBuffer packet_loss(const AudioBuffer& buf, double rate, int packet_ms, Rng& rng,
                               std::size_t* dropped = nullptr) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw Error("degrade", "packet loss rate must lie in [0, 1]");
  if (packet_ms <= 0) throw Error("degrade", "packet_ms must be positive");
  const std::size_t len = static_cast<std::size_t>(packet_ms) * kSampleRate / 1000;
  AudioBuffer out = buf;
  std::size_t count = 0;
  for (std::size_t start = 0; start < out.size(); start += len) {
    if (rng.bernoulli(rate)) {
      ++count;
      std::fill(out.samples.begin() + static_cast<std::ptrdiff_t>(start),
                out.samples.begin() + static_cast<std::ptrdiff_t>(std::min(start + len, out.size())), 0.0);
    }
  }
  if (dropped) *dropped = count;
  return out;
}

// Loops (shorter) or crops (longer) `src` to length n starting at `offset`.
inline AudioBuffer fit_length(const AudioBuffer& src, std::size_t n, std::size_t offset) {
  if (src.empty()) throw Error("degrade", "cannot fit an empty buffer");
  AudioBuffer out = AudioBuffer::zeros(n);
  for (std::size_t i = 0; i < n; ++i) out.samples[i] = src.samples[(offset + i) % src.size()];
  return out;
}

inline std::size_t random_offset(const AudioBuffer& src, std::size_t n, Rng& rng) {
  if (src.size() > n) return static_cast<std::size_t>(rng.index(src.size() - n + 1));
  return static_cast<std::size_t>(rng.index(src.size()));
}

// Reference conditioning audio: first `n` samples, zero padded when shorter.
inline AudioBuffer trim_or_pad(const AudioBuffer& buf, std::size_t n) {
  AudioBuffer out = AudioBuffer::zeros(n);
  std::copy_n(buf.samples.begin(), std::min(n, buf.size()), out.samples.begin());
  return out;
}

// ---------------------------------------------------------------------------
// Simulation pipeline

struct SimulatedTriple {
  AudioBuffer degraded;
  AudioBuffer target;
  std::optional<AudioBuffer> reference;
  std::string reference_id;
  DegradeReport report;
};

namespace detail {

inline std::size_t pick_other_utterance(const std::vector<Utterance>& pool, const Utterance& clean,
                                        Rng& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].speaker != clean.speaker) cand.push_back(i);
  if (cand.empty())
    throw Error("degrade", "speech pool has no utterance from a speaker other than '" + clean.speaker + "'");
  return cand[rng.index(cand.size())];
}

inline std::size_t pick_same_speaker(const std::vector<Utterance>& pool, const std::string& speaker,
                                     const std::string& exclude_id, Rng& rng) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].speaker == speaker && pool[i].id != exclude_id) cand.push_back(i);
  if (cand.empty())
    throw Error("degrade", "speech pool has no second utterance of speaker '" + speaker + "'");
  return cand[rng.index(cand.size())];
}

}  // namespace detail

// Pipeline order: interference, noise (against the mixture), reverb, clipping,
// bandlimit, packet loss. All Bernoulli decisions are drawn up front so the
// firing pattern of one distortion never shifts the draws of another.
inline SimulatedTriple simulate(const Utterance& clean, const DegradeAssets& assets, Mode mode,
                                const DegradeSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (clean.audio.empty()) throw Error("degrade", "clean utterance '" + clean.id + "' is empty");
  Rng rng(seed);
  SimulatedTriple out;
  out.report.rng_seed = seed;
  const std::size_t n = clean.audio.size();

  const bool sr = mode == Mode::kSR;
  const bool fire_interf = rng.bernoulli(sr ? spec.interference_prob_sr : spec.interference_prob_tse);
  const bool fire_noise = rng.bernoulli(spec.noise_prob);
  const bool fire_reverb = rng.bernoulli(spec.reverb_prob);
  const bool fire_clip = rng.bernoulli(spec.clip_prob);
  const bool fire_band = rng.bernoulli(spec.bandlimit_prob);
  const bool fire_loss = rng.bernoulli(spec.packet_loss_prob);

  AudioBuffer x = clean.audio;
  out.target = clean.audio;
  std::optional<std::size_t> interferer_idx;

  if (fire_interf) {
    const std::size_t idx = detail::pick_other_utterance(assets.speech, clean, rng);
    interferer_idx = idx;
    const auto& src = assets.speech[idx].audio;
    const std::size_t off = random_offset(src, n, rng);
    const AudioBuffer interf = fit_length(src, n, off);
    const Range r = sr ? spec.sir_db_range_sr : spec.sir_db_range_tse;
    const double sir = rng.uniform(r.lo, r.hi);
    double g = 0.0;
    x = mix_at_sir(clean.audio, interf, sir, &g);
    // SR keeps the louder speaker (higher RMS over the segment).
    if (sr && sir < 0.0) {
      out.target = interf;
      for (double& v : out.target.samples) v *= g;
    }
    out.report.applied.push_back({"interference",
                                  {{"sir_db", sir}, {"gain", g}, {"source", static_cast<double>(idx)},
                                   {"offset", static_cast<double>(off)}}});
  } else if (!sr) {
    throw Error("degrade", std::string(mode_name(mode)) +
                               " mode requires an interfering speaker (interference did not fire)");
  }

  if (fire_noise) {
    if (assets.noises.empty()) throw Error("degrade", "noise pool is empty");
    const std::size_t idx = rng.index(assets.noises.size());
    const std::size_t off = random_offset(assets.noises[idx], n, rng);
    const AudioBuffer noise = fit_length(assets.noises[idx], n, off);
    const double snr = rng.uniform(spec.snr_db_range.lo, spec.snr_db_range.hi);
    double g = 0.0;
    x = mix_at_snr(x, noise, snr, &g);
    out.report.applied.push_back({"noise",
                                  {{"snr_db", snr}, {"gain", g}, {"source", static_cast<double>(idx)},
                                   {"offset", static_cast<double>(off)}}});
  }

  if (fire_reverb) {
    if (assets.rirs.empty()) throw Error("degrade", "RIR pool is empty");
    const std::size_t idx = rng.index(assets.rirs.size());
    x = apply_reverb(x, assets.rirs[idx]);
    out.report.applied.push_back({"reverb", {{"source", static_cast<double>(idx)}}});
  }

  if (fire_clip) {
    const double lo = rng.uniform(spec.clip_min_quantile_range.lo, spec.clip_min_quantile_range.hi);
    const double hi = rng.uniform(spec.clip_max_quantile_range.lo, spec.clip_max_quantile_range.hi);
    if (lo < hi) x = clip_quantile(x, lo, hi);
    out.report.applied.push_back({"clipping", {{"min_quantile", lo}, {"max_quantile", hi}}});
  }

  if (fire_band) {
    const int bw = spec.bandwidth_choices_hz[rng.index(spec.bandwidth_choices_hz.size())];
    x = bandlimit(x, bw);
    out.report.applied.push_back({"bandlimit", {{"bandwidth_hz", static_cast<double>(bw)}}});
  }

  if (fire_loss) {
    const double rate = rng.uniform(spec.packet_loss_rate_range.lo, spec.packet_loss_rate_range.hi);
    std::size_t dropped = 0;
    x = packet_loss(x, rate, spec.packet_ms, rng, &dropped);
    out.report.applied.push_back({"packet_loss",
                                  {{"rate", rate}, {"packet_ms", static_cast<double>(spec.packet_ms)},
                                   {"dropped_packets", static_cast<double>(dropped)}}});
  }

  if (mode != Mode::kSR) {
    // TSE: another utterance of the target speaker. rTSE: another utterance
    // of the interfering speaker.
    const Utterance& anchor = mode == Mode::kTSE ? clean : assets.speech[*interferer_idx];
    const std::size_t idx = detail::pick_same_speaker(assets.speech, anchor.speaker, anchor.id, rng);
    out.reference = assets.speech[idx].audio;
    out.reference_id = assets.speech[idx].id;
    out.report.applied.push_back({"reference", {{"source", static_cast<double>(idx)}}});
  }

  out.degraded = std::move(x);
  return out;
}

}  // namespace tokense
