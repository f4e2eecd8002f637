#pragma once

// Signal-processing primitives: FFT wrappers, STFT/ISTFT, convolution, FIR
// design and the mel filterbank shared by the codec and the encoder.

#include "tokense/common.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

namespace tokense::dsp {

using cplx = std::complex<double>;

// Periodic Hann; satisfies constant overlap-add at 50% hop.
inline std::vector<double> hann(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

class RealFft {
 public:
  explicit RealFft(int n) : n_(n) { fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum); }

  int size() const { return n_; }
  int bins() const { return n_ / 2 + 1; }

  void forward(const std::vector<double>& x, std::vector<cplx>& spec) { fft_.fwd(spec, x); }
  void inverse(const std::vector<cplx>& spec, std::vector<double>& x) { fft_.inv(x, spec, n_); }

 private:
  int n_;
  Eigen::FFT<double> fft_;
};

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Full linear convolution, length x.size() + h.size() - 1.
inline std::vector<double> convolve(const std::vector<double>& x, const std::vector<double>& h) {
  if (x.empty() || h.empty()) return {};
  const std::size_t out_len = x.size() + h.size() - 1;
  std::vector<double> y(out_len, 0.0);
  if (std::min(x.size(), h.size()) <= 64) {
    for (std::size_t i = 0; i < x.size(); ++i)
      for (std::size_t k = 0; k < h.size(); ++k) y[i + k] += x[i] * h[k];
    return y;
  }
  const std::size_t n = next_pow2(out_len);
  RealFft fft(static_cast<int>(n));
  std::vector<double> xp(x), hp(h);
  xp.resize(n, 0.0);
  hp.resize(n, 0.0);
  std::vector<cplx> xs, hs;
  fft.forward(xp, xs);
  fft.forward(hp, hs);
  for (std::size_t i = 0; i < xs.size(); ++i) xs[i] *= hs[i];
  std::vector<double> full;
  fft.inverse(xs, full);
  std::copy(full.begin(), full.begin() + static_cast<std::ptrdiff_t>(out_len), y.begin());
  return y;
}

// Linear-phase low-pass (Blackman-windowed sinc), unit DC gain.
inline std::vector<double> lowpass_fir(double cutoff_hz, int taps, double rate = kSampleRate) {
  std::vector<double> h(taps);
  const int mid = taps / 2;
  const double fc = cutoff_hz / rate;
  double sum = 0.0;
  for (int i = 0; i < taps; ++i) {
    const int k = i - mid;
    const double sinc = k == 0 ? 2.0 * fc : std::sin(2.0 * std::numbers::pi * fc * k) / (std::numbers::pi * k);
    const double a = 2.0 * std::numbers::pi * i / (taps - 1);
    const double w = 0.42 - 0.5 * std::cos(a) + 0.08 * std::cos(2.0 * a);
    h[i] = sinc * w;
    sum += h[i];
  }
  for (double& v : h) v /= sum;
  return h;
}

// Zero-phase application of an odd-length symmetric FIR with edge replication.
inline std::vector<double> filter_centered(const std::vector<double>& x, const std::vector<double>& h) {
  const int n = static_cast<int>(x.size());
  const int taps = static_cast<int>(h.size());
  const int mid = taps / 2;
  std::vector<double> y(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int k = 0; k < taps; ++k) {
      const int j = std::clamp(i + mid - k, 0, n - 1);
      acc += h[k] * x[j];
    }
    y[i] = acc;
  }
  return y;
}

// Centered STFT: frame t is centered on sample t * hop, zero padded at the
// edges. Frame count is ceil(n / hop).
class Stft {
 public:
  Stft(int window = kWindow, int hop = kHop) : window_(window), hop_(hop), win_(hann(window)), fft_(window) {}

  int window() const { return window_; }
  int hop() const { return hop_; }
  int bins() const { return window_ / 2 + 1; }

  std::vector<std::vector<cplx>> analyze(const std::vector<double>& x, std::int64_t frames) {
    std::vector<std::vector<cplx>> out(static_cast<std::size_t>(frames));
    std::vector<double> buf(window_);
    const std::int64_t n = static_cast<std::int64_t>(x.size());
    for (std::int64_t t = 0; t < frames; ++t) {
      const std::int64_t start = t * hop_ - window_ / 2;
      for (int i = 0; i < window_; ++i) {
        const std::int64_t j = start + i;
        buf[i] = (j >= 0 && j < n) ? x[static_cast<std::size_t>(j)] * win_[i] : 0.0;
      }
      fft_.forward(buf, out[static_cast<std::size_t>(t)]);
    }
    return out;
  }

  std::vector<std::vector<cplx>> analyze(const std::vector<double>& x) {
    return analyze(x, ceil_div(static_cast<std::int64_t>(x.size()), hop_));
  }

  // Weighted overlap-add inverse, output length `length`.
  std::vector<double> synthesize(const std::vector<std::vector<cplx>>& spec, std::size_t length) {
    std::vector<double> y(length, 0.0), wsum(length, 0.0), frame;
    for (std::size_t t = 0; t < spec.size(); ++t) {
      fft_.inverse(spec[t], frame);
      const std::int64_t start = static_cast<std::int64_t>(t) * hop_ - window_ / 2;
      for (int i = 0; i < window_; ++i) {
        const std::int64_t j = start + i;
        if (j < 0 || j >= static_cast<std::int64_t>(length)) continue;
        y[static_cast<std::size_t>(j)] += frame[i] * win_[i];
        wsum[static_cast<std::size_t>(j)] += win_[i] * win_[i];
      }
    }
    for (std::size_t j = 0; j < length; ++j) y[j] = wsum[j] > 1e-8 ? y[j] / wsum[j] : 0.0;
    return y;
  }

 private:
  int window_, hop_;
  std::vector<double> win_;
  RealFft fft_;
};

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// Triangular mel filterbank; each band is normalized to unit weight sum so a
// band value is the weighted mean power of its bins. `synthesis()` maps band
// powers back to bins by averaging the bands covering each bin.
class MelBank {
 public:
  MelBank(int bands = 64, int fft_size = kWindow, double rate = kSampleRate)
      : bands_(bands), bins_(fft_size / 2 + 1) {
    analysis_ = MatD::Zero(bands, bins_);
    const double mel_max = hz_to_mel(rate / 2.0);
    const double bin_hz = rate / fft_size;
    for (int b = 0; b < bands; ++b) {
      const double lo = mel_to_hz(mel_max * b / (bands + 1));
      const double mid = mel_to_hz(mel_max * (b + 1) / (bands + 1));
      const double hi = mel_to_hz(mel_max * (b + 2) / (bands + 1));
      for (int k = 0; k < bins_; ++k) {
        const double f = k * bin_hz;
        double w = 0.0;
        if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
        else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
        analysis_(b, k) = w;
      }
      if (analysis_.row(b).sum() <= 0.0) {
        const int k = std::clamp(static_cast<int>(std::lround(mid / bin_hz)), 0, bins_ - 1);
        analysis_(b, k) = 1.0;
      }
      analysis_.row(b) /= analysis_.row(b).sum();
    }
    synthesis_ = analysis_.transpose();
    for (int k = 0; k < bins_; ++k) {
      const double s = synthesis_.row(k).sum();
      if (s > 0.0) synthesis_.row(k) /= s;
    }
  }

  int bands() const { return bands_; }
  int bins() const { return bins_; }
  const MatD& analysis() const { return analysis_; }   // bands x bins
  const MatD& synthesis() const { return synthesis_; } // bins x bands

 private:
  int bands_, bins_;
  MatD analysis_, synthesis_;
};

}  // namespace tokense::dsp
