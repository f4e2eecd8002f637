#pragma once

// Synthetic toy corpora: vowel-like harmonic "speech" from speakers with
// distinct timbres, plus noise and room impulse responses. Used for smoke
// runs and the sanity suites; nothing here depends on real recordings.

#include "tokense/audio.hpp"
#include "tokense/degrade.hpp"
#include "tokense/rng.hpp"

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace tokense::synth {

struct Timbre {
  double f0_lo;        // Hz
  double f0_hi;
  double formant_scale;
  double tilt_db_per_khz;
};

// Two well-separated timbres: a low, dark voice and a high, bright one.
inline const std::array<Timbre, 2>& two_timbres() {
  static const std::array<Timbre, 2> t{{{95.0, 125.0, 0.85, -9.0}, {210.0, 260.0, 1.25, -3.0}}};
  return t;
}

inline const std::array<std::array<double, 3>, 6>& vowel_formants() {
  static const std::array<std::array<double, 3>, 6> v{{{730, 1090, 2440},
                                                       {270, 2290, 3010},
                                                       {300, 870, 2240},
                                                       {530, 1840, 2480},
                                                       {570, 840, 2410},
                                                       {440, 1020, 2240}}};
  return v;
}

// One utterance: a sequence of vowel syllables (60-200 ms) separated by short
// gaps, rendered as a harmonic complex shaped by three formant resonances.
inline AudioBuffer utterance(const Timbre& timbre, double seconds, Rng& rng) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * kSampleRate));
  AudioBuffer out = AudioBuffer::zeros(n);
  std::size_t pos = 0;
  double phase = 0.0;
  while (pos < n) {
    const auto syl = static_cast<std::size_t>(rng.uniform(0.06, 0.2) * kSampleRate);
    const auto gap = rng.bernoulli(0.3) ? static_cast<std::size_t>(rng.uniform(0.02, 0.06) * kSampleRate) : 0;
    const auto& vf = vowel_formants()[rng.index(vowel_formants().size())];
    const double f0 = rng.uniform(timbre.f0_lo, timbre.f0_hi);
    const double amp = rng.uniform(0.5, 1.0);
    std::vector<double> harmonic_gain;
    for (int h = 1; h * f0 < 7600.0; ++h) {
      const double f = h * f0;
      double g = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double fc = vf[static_cast<std::size_t>(k)] * timbre.formant_scale;
        const double bw = 80.0 + 0.08 * fc;
        g += 1.0 / (1.0 + std::pow((f - fc) / bw, 2.0)) * std::pow(0.6, k);
      }
      g *= std::pow(10.0, timbre.tilt_db_per_khz * f / 1000.0 / 20.0);
      harmonic_gain.push_back(g);
    }
    const std::size_t end = std::min(n, pos + syl);
    for (std::size_t i = pos; i < end; ++i) {
      const double tt = static_cast<double>(i - pos) / static_cast<double>(syl);
      const double env = std::sin(std::numbers::pi * tt);
      double v = 0.0;
      for (std::size_t h = 0; h < harmonic_gain.size(); ++h)
        v += harmonic_gain[h] * std::sin(static_cast<double>(h + 1) * phase);
      phase += 2.0 * std::numbers::pi * f0 / kSampleRate;
      out.samples[i] = amp * env * v;
    }
    pos = end + gap;
  }
  const double r = rms(out.samples);
  if (r > 0.0)
    for (double& v : out.samples) v *= 0.1 / r;
  return out;
}

inline AudioBuffer white_noise(double seconds, Rng& rng, double level = 0.05) {
  const auto n = static_cast<std::size_t>(std::llround(seconds * kSampleRate));
  AudioBuffer out = AudioBuffer::zeros(n);
  for (double& v : out.samples) v = level * rng.normal();
  return out;
}

// Exponentially decaying noise tail behind a unit direct path.
inline Rir synthetic_rir(double rt60_sec, Rng& rng, double length_sec = 0.25) {
  const auto n = static_cast<std::size_t>(length_sec * kSampleRate);
  std::vector<double> taps(n, 0.0);
  const std::size_t direct = static_cast<std::size_t>(rng.uniform(0.0, 0.004) * kSampleRate);
  taps[direct] = 1.0;
  const double decay = std::log(1000.0) / (rt60_sec * kSampleRate);
  for (std::size_t i = direct + 1; i < n; ++i)
    taps[i] = 0.3 * rng.normal() * std::exp(-decay * static_cast<double>(i - direct));
  return Rir::normalized(std::move(taps));
}

struct Corpus {
  std::vector<Utterance> utterances;
  std::vector<AudioBuffer> noises;
  std::vector<Rir> rirs;

  DegradeAssets assets() const { return DegradeAssets{noises, rirs, utterances}; }
};

// `per_speaker` utterances of `seconds` each for speakers "spkA" and "spkB".
inline Corpus two_timbre_corpus(int per_speaker, double seconds, std::uint64_t seed) {
  Corpus c;
  Rng rng(seed);
  const std::array<std::string, 2> names{"spkA", "spkB"};
  for (int i = 0; i < per_speaker; ++i)
    for (std::size_t s = 0; s < 2; ++s) {
      Rng r = rng.split(static_cast<std::uint64_t>(i) * 2 + s);
      c.utterances.push_back(
          {names[s] + "-" + std::to_string(i), names[s], utterance(two_timbres()[s], seconds, r)});
    }
  for (int i = 0; i < 4; ++i) {
    Rng r = rng.split(1000 + static_cast<std::uint64_t>(i));
    c.noises.push_back(white_noise(std::max(seconds, 1.0) * 1.5, r, 0.02 + 0.02 * i));
  }
  for (int i = 0; i < 3; ++i) {
    Rng r = rng.split(2000 + static_cast<std::uint64_t>(i));
    c.rirs.push_back(synthetic_rir(0.2 + 0.2 * i, r));
  }
  return c;
}

}  // namespace tokense::synth
