#pragma once

// Audio buffers, RIFF/WAV I/O and line-oriented manifests.

#include "tokense/common.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace tokense {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate_hz = kSampleRate;

  AudioBuffer() = default;
  explicit AudioBuffer(std::vector<double> s, int rate = kSampleRate)
      : samples(std::move(s)), sample_rate_hz(rate) {}

  static AudioBuffer zeros(std::size_t n) { return AudioBuffer(std::vector<double>(n, 0.0)); }

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  double duration_sec() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate_hz);
  }
};

inline double power(const std::vector<double>& x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (double v : x) acc += v * v;
  return acc / static_cast<double>(x.size());
}

inline double rms(const std::vector<double>& x) { return std::sqrt(power(x)); }

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}
inline void put_u16(std::string& out, std::uint16_t v) {
  char b[2];
  std::memcpy(b, &v, 2);
  out.append(b, 2);
}
inline std::uint32_t get_u32(const char* p) {
  std::uint32_t v;
  std::memcpy(&v, p, 4);
  return v;
}
inline std::uint16_t get_u16(const char* p) {
  std::uint16_t v;
  std::memcpy(&v, p, 2);
  return v;
}

struct ParsedWav {
  AudioBuffer audio;
  std::string comment;
};

inline ParsedWav parse_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("data_io", "cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw Error("data_io", "'" + path.string() + "' is not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  ParsedWav out;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::uint32_t size = get_u32(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      if (size < 16 || body + size > bytes.size())
        throw Error("data_io", "truncated fmt chunk in '" + path.string() + "'");
      format = get_u16(bytes.data() + body);
      channels = get_u16(bytes.data() + body + 2);
      rate = get_u32(bytes.data() + body + 4);
      bits = get_u16(bytes.data() + body + 14);
      if (format == 0xFFFE && size >= 26) format = get_u16(bytes.data() + body + 24);
      have_fmt = true;
    } else if (id == "LIST" && body + 4 <= bytes.size() && bytes.compare(body, 4, "INFO") == 0) {
      std::size_t sub = body + 4;
      const std::size_t end = std::min<std::size_t>(body + size, bytes.size());
      while (sub + 8 <= end) {
        const std::uint32_t ssize = get_u32(bytes.data() + sub + 4);
        if (bytes.compare(sub, 4, "ICMT") == 0 && sub + 8 + ssize <= end) {
          out.comment = bytes.substr(sub + 8, ssize);
          while (!out.comment.empty() && out.comment.back() == '\0') out.comment.pop_back();
        }
        sub += 8 + ssize + (ssize & 1u);
      }
    } else if (id == "data") {
      if (!have_fmt) throw Error("data_io", "data chunk before fmt chunk in '" + path.string() + "'");
      if (channels != 1)
        throw Error("data_io", "unsupported channel count " + std::to_string(channels) +
                                   " in '" + path.string() + "' (mono required)");
      if (rate != static_cast<std::uint32_t>(kSampleRate))
        throw Error("data_io", "unsupported sample rate " + std::to_string(rate) + " Hz in '" +
                                   path.string() + "' (16000 required)");
      const bool pcm16 = format == 1 && bits == 16;
      const bool f32 = format == 3 && bits == 32;
      if (!pcm16 && !f32)
        throw Error("data_io", "unsupported sample format " + std::to_string(format) + "/" +
                                   std::to_string(bits) + " bits in '" + path.string() + "'");
      if (body + size > bytes.size())
        throw Error("data_io", "truncated data chunk in '" + path.string() + "': header declares " +
                                   std::to_string(size) + " bytes, file holds " +
                                   std::to_string(bytes.size() - body));
      const std::size_t frames = size / (bits / 8);
      out.audio.samples.resize(frames);
      const char* p = bytes.data() + body;
      for (std::size_t i = 0; i < frames; ++i) {
        if (pcm16) {
          std::int16_t v;
          std::memcpy(&v, p + 2 * i, 2);
          out.audio.samples[i] = static_cast<double>(v) / 32768.0;
        } else {
          float v;
          std::memcpy(&v, p + 4 * i, 4);
          out.audio.samples[i] = static_cast<double>(v);
        }
      }
      out.audio.sample_rate_hz = kSampleRate;
      return out;
    }
    pos = body + size + (size & 1u);
  }
  throw Error("data_io", "no data chunk in '" + path.string() + "'");
}

}  // namespace detail

inline AudioBuffer read_wav(const std::filesystem::path& path) {
  return detail::parse_wav(path).audio;
}

// The ICMT comment carries provenance (config/model hashes) for artifacts.
inline std::string read_wav_comment(const std::filesystem::path& path) {
  return detail::parse_wav(path).comment;
}

struct WavWriteResult {
  std::size_t clamped_samples = 0;
};

// Writes canonical PCM16 mono 16 kHz. Samples outside [-1, 1] are clamped and
// counted in the result.
inline WavWriteResult write_wav(const AudioBuffer& buf, const std::filesystem::path& path,
                                const std::string& comment = {}) {
  WavWriteResult result;
  std::string pcm;
  pcm.reserve(buf.size() * 2);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const double x = buf.samples[i];
    if (!std::isfinite(x))
      throw Error("data_io", "non-finite sample at index " + std::to_string(i));
    double q = std::nearbyint(x * 32768.0);
    if (q > 32767.0 || q < -32768.0) {
      if (std::abs(x) > 1.0) ++result.clamped_samples;
      q = std::clamp(q, -32768.0, 32767.0);
    }
    detail::put_u16(pcm, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }

  std::string info;
  if (!comment.empty()) {
    std::string text = comment;
    text.push_back('\0');
    if (text.size() & 1u) text.push_back('\0');
    info = "INFO";
    info += "ICMT";
    detail::put_u32(info, static_cast<std::uint32_t>(text.size()));
    info += text;
  }

  std::string out = "RIFF";
  const std::uint32_t riff_size = static_cast<std::uint32_t>(
      4 + (8 + 16) + (info.empty() ? 0 : 8 + info.size()) + 8 + pcm.size());
  detail::put_u32(out, riff_size);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, kSampleRate);
  detail::put_u32(out, kSampleRate * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  if (!info.empty()) {
    out += "LIST";
    detail::put_u32(out, static_cast<std::uint32_t>(info.size()));
    out += info;
  }
  out += "data";
  detail::put_u32(out, static_cast<std::uint32_t>(pcm.size()));
  out += pcm;

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("data_io", "cannot write '" + path.string() + "'");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error("data_io", "write failed for '" + path.string() + "'");
  return result;
}

// ---------------------------------------------------------------------------
// Manifests: one record per line, four tab-separated fields
//   utterance_id <TAB> path <TAB> kind <TAB> duration_sec
// Relative paths resolve against the manifest's directory. The speaker of an
// utterance is the utterance_id prefix before the first '-'.

enum class AssetKind { kClean, kNoise, kRir };

inline std::string_view kind_name(AssetKind k) {
  switch (k) {
    case AssetKind::kClean: return "clean";
    case AssetKind::kNoise: return "noise";
    case AssetKind::kRir: return "rir";
  }
  return "?";
}

struct ManifestEntry {
  std::string utterance_id;
  std::filesystem::path path;
  AssetKind kind = AssetKind::kClean;
  double duration_sec = 0.0;

  std::string speaker() const {
    const auto dash = utterance_id.find('-');
    return dash == std::string::npos ? utterance_id : utterance_id.substr(0, dash);
  }
};

struct Manifest {
  std::vector<ManifestEntry> entries;

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

inline Manifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                               const std::string& source, bool check_paths) {
  Manifest m;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& why) {
    throw Error("data_io", source + ":" + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 4)
      fail("expected 4 tab-separated fields, found " + std::to_string(fields.size()));
    ManifestEntry e;
    e.utterance_id = fields[0];
    if (e.utterance_id.empty()) fail("empty utterance id");
    if (!seen.insert(e.utterance_id).second) fail("duplicate utterance id '" + e.utterance_id + "'");
    if (fields[1].empty()) fail("empty path");
    std::filesystem::path p(fields[1]);
    e.path = p.is_absolute() ? p : base_dir / p;
    if (fields[2] == "clean") e.kind = AssetKind::kClean;
    else if (fields[2] == "noise") e.kind = AssetKind::kNoise;
    else if (fields[2] == "rir") e.kind = AssetKind::kRir;
    else fail("unknown kind '" + fields[2] + "'");
    try {
      std::size_t used = 0;
      e.duration_sec = std::stod(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      fail("malformed duration '" + fields[3] + "'");
    }
    if (!(e.duration_sec >= 0.0)) fail("negative duration");
    if (check_paths && !std::filesystem::exists(e.path))
      fail("path not found '" + e.path.string() + "'");
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path, bool check_paths = true) {
  std::ifstream in(path);
  if (!in) throw Error("data_io", "cannot open manifest '" + path.string() + "'");
  return parse_manifest(in, path.parent_path(), path.string(), check_paths);
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("data_io", "cannot write manifest '" + path.string() + "'");
  const auto base = path.parent_path();
  for (const auto& e : m.entries) {
    std::error_code ec;
    auto rel = std::filesystem::relative(e.path, base.empty() ? "." : base, ec);
    if (ec || rel.empty()) rel = e.path;
    std::ostringstream dur;
    dur.precision(6);
    dur << std::fixed << e.duration_sec;
    out << e.utterance_id << '\t' << rel.generic_string() << '\t' << kind_name(e.kind) << '\t'
        << dur.str() << '\n';
  }
}

}  // namespace tokense
