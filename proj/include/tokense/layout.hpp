#pragma once

// Vocabulary, model configuration and mode-specific input sequence assembly.
//
//   SR   : [T_SR,  D, E_d, G, E_g, S, E_s]
//   TSE  : [T_TSE, R, E_r, D, E_d, G, E_g, S, E_s]
//   rTSE : [T_rTSE, R, E_r, D, E_d, G, E_g, S, E_s]
//
// Teacher-forced labels cover the output o = [E_g, S, E_s, E]; the position
// holding G predicts the first global token and the last semantic position
// predicts E. Inference prefixes stop right after G.

#include "tokense/codec.hpp"
#include "tokense/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace tokense {

enum class Special : int { kTaskSR = 0, kTaskTSE, kTaskRTSE, kDegraded, kReference, kGlobal, kSemantic, kEnd };
inline constexpr int kNumSpecial = 8;

inline const char* special_name(Special s) {
  static const char* kNames[] = {"T_SR", "T_TSE", "T_rTSE", "D", "R", "G", "S", "E"};
  return kNames[static_cast<int>(s)];
}

// Semantic ids [0, K_s), global ids [K_s, K_s + K_g), then the 8 specials.
class Vocab {
 public:
  Vocab(int semantic_size, int global_size) : ks_(semantic_size), kg_(global_size) {
    if (ks_ <= 0 || kg_ <= 0) throw Error("lm_core", "codebook sizes must be positive");
  }

  int semantic_size() const { return ks_; }
  int global_size() const { return kg_; }
  int size() const { return ks_ + kg_ + kNumSpecial; }

  int semantic(int id) const { return id; }
  int global(int id) const { return ks_ + id; }
  int special(Special s) const { return ks_ + kg_ + static_cast<int>(s); }
  int task(Mode m) const {
    switch (m) {
      case Mode::kSR: return special(Special::kTaskSR);
      case Mode::kTSE: return special(Special::kTaskTSE);
      case Mode::kRTSE: return special(Special::kTaskRTSE);
    }
    return -1;
  }

  bool is_semantic(int v) const { return v >= 0 && v < ks_; }
  bool is_global(int v) const { return v >= ks_ && v < ks_ + kg_; }
  bool is_special(int v) const { return v >= ks_ + kg_ && v < size(); }

 private:
  int ks_, kg_;
};

inline int round_up(int v, int multiple) { return (v + multiple - 1) / multiple * multiple; }

struct ModelConfig {
  int layers = 12;
  int heads = 8;
  int hidden = 512;
  int ffn_dim = 2752;  // 4/3 * 4 * hidden rounded up to a multiple of 64
  int max_seq_len = 2048;
  int semantic_vocab = 1024;
  int global_vocab = 256;
  int cond_dim = 256;  // frozen encoder width feeding the adapter
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  static int default_ffn(int hidden) {
    return round_up(static_cast<int>(std::ceil(4.0 / 3.0 * 4.0 * hidden)), 64);
  }

  int head_dim() const { return hidden / heads; }
  int vocab_size() const { return semantic_vocab + global_vocab + kNumSpecial; }
  Vocab vocab() const { return Vocab(semantic_vocab, global_vocab); }

  void validate() const {
    if (layers < 0) throw Error("lm_core", "layers must be >= 0");
    if (heads <= 0 || hidden <= 0 || hidden % heads != 0)
      throw Error("lm_core", "hidden (" + std::to_string(hidden) + ") must be divisible by heads (" +
                                 std::to_string(heads) + ")");
    if (head_dim() % 2 != 0) throw Error("lm_core", "head dimension must be even for rotary encoding");
    if (ffn_dim <= 0 || max_seq_len <= 0 || cond_dim <= 0)
      throw Error("lm_core", "ffn_dim, max_seq_len and cond_dim must be positive");
    if (semantic_vocab <= 0 || global_vocab <= 0) throw Error("lm_core", "codebook sizes must be positive");
  }
};

enum class ItemKind : std::uint8_t { kToken, kCond };
enum class CondStream : std::uint8_t { kDegraded = 0, kReference = 1 };

struct LayoutItem {
  ItemKind kind = ItemKind::kToken;
  int token = -1;  // for kToken
  CondStream stream = CondStream::kDegraded;
  int frame = -1;  // for kCond
};

template <typename S>
struct SequenceLayout {
  Mode mode = Mode::kSR;
  std::vector<LayoutItem> items;
  std::vector<int> labels;             // -1 where unlabeled
  std::vector<std::uint8_t> loss_mask; // 1 exactly where labels are set
  Mat<S> cond_degraded;                // E_d, frames x hidden
  Mat<S> cond_reference;               // E_r (TSE / rTSE only)
  bool training = false;

  std::size_t size() const { return items.size(); }
  std::size_t labeled() const {
    std::size_t n = 0;
    for (auto m : loss_mask) n += m;
    return n;
  }
  const Mat<S>& cond(CondStream s) const { return s == CondStream::kDegraded ? cond_degraded : cond_reference; }
};

template <typename S>
SequenceLayout<S> build_sequence(const Vocab& vocab, Mode mode, const Mat<S>& cond_d,
                                 const Mat<S>* cond_r, const CodecTokens* target) {
  if (mode != Mode::kSR && cond_r == nullptr)
    throw Error("lm_core", std::string(mode_name(mode)) + " layout requires reference conditions");
  SequenceLayout<S> L;
  L.mode = mode;
  L.training = target != nullptr;
  L.cond_degraded = cond_d;
  auto push_token = [&](int tok) { L.items.push_back({ItemKind::kToken, tok, CondStream::kDegraded, -1}); };
  auto push_cond = [&](CondStream s, Eigen::Index frames) {
    for (Eigen::Index t = 0; t < frames; ++t)
      L.items.push_back({ItemKind::kCond, -1, s, static_cast<int>(t)});
  };

  push_token(vocab.task(mode));
  if (mode != Mode::kSR) {
    L.cond_reference = *cond_r;
    push_token(vocab.special(Special::kReference));
    push_cond(CondStream::kReference, cond_r->rows());
  }
  push_token(vocab.special(Special::kDegraded));
  push_cond(CondStream::kDegraded, cond_d.rows());
  push_token(vocab.special(Special::kGlobal));

  std::vector<int> output;  // o = [E_g, S, E_s, E]
  if (target) {
    if (target->global.ids.size() != static_cast<std::size_t>(kGlobalTokens))
      throw Error("lm_core", "target must carry exactly 32 global tokens");
    for (int g : target->global.ids) {
      if (g < 0 || g >= vocab.global_size()) throw Error("lm_core", "global token out of range");
      output.push_back(vocab.global(g));
    }
    output.push_back(vocab.special(Special::kSemantic));
    for (int s : target->semantic.ids) {
      if (s < 0 || s >= vocab.semantic_size()) throw Error("lm_core", "semantic token out of range");
      output.push_back(vocab.semantic(s));
    }
    output.push_back(vocab.special(Special::kEnd));
    // Every output token but the final E is also an input item.
    for (std::size_t i = 0; i + 1 < output.size(); ++i) push_token(output[i]);
  }

  L.labels.assign(L.items.size(), -1);
  L.loss_mask.assign(L.items.size(), 0);
  if (target) {
    const std::size_t first = L.items.size() - (output.size() - 1) - 1;  // position of G
    for (std::size_t i = 0; i < output.size(); ++i) {
      L.labels[first + i] = output[i];
      L.loss_mask[first + i] = 1;
    }
  }
  return L;
}

template <typename S>
SequenceLayout<S> build_sequence(const Vocab& vocab, Mode mode, const Mat<S>& cond_d,
                                 const std::optional<Mat<S>>& cond_r, const std::optional<CodecTokens>& target) {
  return build_sequence<S>(vocab, mode, cond_d, cond_r ? &*cond_r : nullptr, target ? &*target : nullptr);
}

}  // namespace tokense
