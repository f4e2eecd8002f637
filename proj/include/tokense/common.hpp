#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace tokense {

inline constexpr int kSampleRate = 16000;
inline constexpr int kHop = 320;          // 50 frames per second
inline constexpr int kWindow = 640;
inline constexpr int kGlobalTokens = 32;

// All library failures carry the owning module name, e.g. "degrade: ...".
class Error : public std::runtime_error {
 public:
  Error(std::string_view module, const std::string& what)
      : std::runtime_error(std::string(module) + ": " + what), module_(module) {}

  const std::string& module() const noexcept { return module_; }

 private:
  std::string module_;
};

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

using MatF = Mat<float>;
using MatD = Mat<double>;

enum class Mode { kSR, kTSE, kRTSE };

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kSR: return "sr";
    case Mode::kTSE: return "tse";
    case Mode::kRTSE: return "rtse";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "sr" || s == "SR") return Mode::kSR;
  if (s == "tse" || s == "TSE") return Mode::kTSE;
  if (s == "rtse" || s == "rTSE" || s == "RTSE") return Mode::kRTSE;
  throw Error("common", "unknown mode '" + std::string(s) + "'");
}

// FNV-1a, used for config and artifact hashes.
inline std::uint64_t fnv1a(std::string_view data,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

// Semantic frame count for a buffer of n samples (50 Hz, ceiling).
inline std::int64_t frames_for_samples(std::int64_t n) { return ceil_div(n, kHop); }

}  // namespace tokense
