#pragma once

// Proxy metrics: SI-SDR, log-spectral distance, encoder-embedding speaker
// similarity and semantic token accuracy, with a per-utterance report.

#include "tokense/codec.hpp"
#include "tokense/cond_encoder.hpp"

#include <cmath>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace tokense {

inline constexpr double kSiSdrCeilingDb = 60.0;

inline double si_sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
  if (reference.size() != estimate.size())
    throw Error("eval", "si_sdr length mismatch: " + std::to_string(reference.size()) + " vs " +
                            std::to_string(estimate.size()));
  double rr = 0.0, er = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    rr += reference.samples[i] * reference.samples[i];
    er += estimate.samples[i] * reference.samples[i];
  }
  if (rr <= 0.0) throw Error("eval", "si_sdr reference is all zeros");
  const double alpha = er / rr;
  double ts = 0.0, ns = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference.samples[i];
    const double e = estimate.samples[i] - t;
    ts += t * t;
    ns += e * e;
  }
  if (ns <= 0.0 || ts / ns >= std::pow(10.0, kSiSdrCeilingDb / 10.0)) return kSiSdrCeilingDb;
  if (ts <= 0.0) return -kSiSdrCeilingDb;
  return std::max(-kSiSdrCeilingDb, 10.0 * std::log10(ts / ns));
}

// Mean-band power below which a frame counts as silent.
inline constexpr double kSilentFramePower = 1e-10;

// Mean over non-silent frames of the RMS (over STFT bins) difference of
// 10*log10 power spectra, floored at 1e-10. A frame is kept when either
// signal is non-silent there.
inline double log_spectral_distance(const MatD& pa, const MatD& pb) {
  if (pa.rows() != pb.rows() || pa.cols() != pb.cols())
    throw Error("eval", "lsd spectrogram shapes differ");
  double total = 0.0;
  std::size_t frames = 0;
  for (Eigen::Index t = 0; t < pa.rows(); ++t) {
    if (pa.row(t).mean() <= kSilentFramePower && pb.row(t).mean() <= kSilentFramePower) continue;
    double s = 0.0;
    for (Eigen::Index k = 0; k < pa.cols(); ++k) {
      const double d = 10.0 * std::log10(std::max(pa(t, k), kLogPowerFloor)) -
                       10.0 * std::log10(std::max(pb(t, k), kLogPowerFloor));
      s += d * d;
    }
    total += std::sqrt(s / static_cast<double>(pa.cols()));
    ++frames;
  }
  return frames == 0 ? 0.0 : total / static_cast<double>(frames);
}

inline double log_spectral_distance(const AudioBuffer& a, const AudioBuffer& b) {
  if (a.size() != b.size())
    throw Error("eval", "lsd length mismatch: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (a.empty()) throw Error("eval", "lsd of empty signals");
  const FeatureExtractor fx;
  return log_spectral_distance(fx.power_spectrogram(a), fx.power_spectrogram(b));
}

inline double speaker_sim(const FrozenEncoder& enc, const AudioBuffer& a, const AudioBuffer& b) {
  if (rms(a.samples) < 1e-6 || rms(b.samples) < 1e-6) throw Error("eval", "speaker_sim input is silent");
  const Eigen::VectorXd ea = enc.utterance_embedding(a), eb = enc.utterance_embedding(b);
  const double c = ea.dot(eb) / (ea.norm() * eb.norm());
  return std::clamp(c, -1.0, 1.0);
}

struct TokenAccuracy {
  double value = 0.0;
  std::size_t compared = 0;
  bool truncated = false;  // lengths differed; the shorter length was compared
};

inline TokenAccuracy token_accuracy(const SemanticTokens& pred, const SemanticTokens& gold) {
  TokenAccuracy r;
  r.compared = std::min(pred.ids.size(), gold.ids.size());
  r.truncated = pred.ids.size() != gold.ids.size();
  if (r.compared == 0) {
    r.value = pred.ids.empty() && gold.ids.empty() ? 1.0 : 0.0;
    return r;
  }
  std::size_t hit = 0;
  for (std::size_t i = 0; i < r.compared; ++i) hit += pred.ids[i] == gold.ids[i];
  r.value = static_cast<double>(hit) / static_cast<double>(r.compared);
  return r;
}

struct MetricRow {
  std::string id;
  double si_sdr_db = 0.0;
  double lsd_db = 0.0;
  std::optional<double> spk_sim;
  std::optional<double> token_acc;
  bool length_mismatch = false;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  double mean_si_sdr() const { return mean([](const MetricRow& r) { return std::optional<double>(r.si_sdr_db); }); }
  double mean_lsd() const { return mean([](const MetricRow& r) { return std::optional<double>(r.lsd_db); }); }
  double mean_spk_sim() const { return mean([](const MetricRow& r) { return r.spk_sim; }); }
  double mean_token_acc() const { return mean([](const MetricRow& r) { return r.token_acc; }); }

  // Tab-separated, one row per utterance, then a MEAN footer.
  std::string to_string() const {
    std::ostringstream o;
    o << std::fixed << std::setprecision(6);
    o << "id\tsi_sdr_db\tlsd_db\tspk_sim_proxy\ttoken_acc\n";
    auto opt = [&](const std::optional<double>& v) {
      if (v) o << *v;
      else o << "na";
    };
    for (const auto& r : rows) {
      o << r.id << '\t' << r.si_sdr_db << '\t' << r.lsd_db << '\t';
      opt(r.spk_sim);
      o << '\t';
      opt(r.token_acc);
      if (r.length_mismatch) o << "\tlength_mismatch";
      o << '\n';
    }
    o << "MEAN(" << rows.size() << ")\t" << mean_si_sdr() << '\t' << mean_lsd() << '\t';
    opt(has_sim() ? std::optional<double>(mean_spk_sim()) : std::nullopt);
    o << '\t';
    opt(has_acc() ? std::optional<double>(mean_token_acc()) : std::nullopt);
    o << '\n';
    return o.str();
  }

 private:
  bool has_sim() const {
    for (const auto& r : rows)
      if (r.spk_sim) return true;
    return false;
  }
  bool has_acc() const {
    for (const auto& r : rows)
      if (r.token_acc) return true;
    return false;
  }
  template <typename F>
  double mean(F&& get) const {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (auto v = get(r)) {
        s += *v;
        ++n;
      }
    return n == 0 ? 0.0 : s / static_cast<double>(n);
  }
};

// Metrics of one (reference, estimate) pair; the estimate is trimmed or
// zero padded to the reference length if needed.
inline MetricRow evaluate_pair(const std::string& id, const AudioBuffer& reference, const AudioBuffer& estimate,
                               const FrozenEncoder* encoder, const Codec* codec) {
  MetricRow r;
  r.id = id;
  AudioBuffer est = estimate;
  if (est.size() != reference.size()) {
    r.length_mismatch = true;
    est.samples.resize(reference.size(), 0.0);
  }
  r.si_sdr_db = si_sdr(reference, est);
  r.lsd_db = log_spectral_distance(reference, est);
  if (encoder && rms(reference.samples) >= 1e-6 && rms(est.samples) >= 1e-6)
    r.spk_sim = speaker_sim(*encoder, reference, est);
  if (codec && reference.size() >= static_cast<std::size_t>(kHop))
    r.token_acc = token_accuracy(codec->encode(est).semantic, codec->encode(reference).semantic).value;
  return r;
}

}  // namespace tokense
