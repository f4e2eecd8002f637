#pragma once

// Conditional feature extractor: a frozen encoder stack whose per-layer
// outputs are averaged uniformly, followed by a trainable linear adapter into
// the LM embedding space.
//
// Frozen stack: Fourier front-end (a fixed strided convolution: 640-sample
// Hann window, stride 320, i.e. 50 Hz) with log-mel compression, a temporal
// convolution (kernel 3) with GELU, then L_enc bidirectional pre-norm
// self-attention layers, randomly initialized from a fixed seed.

#include "tokense/binio.hpp"
#include "tokense/codec.hpp"
#include "tokense/rng.hpp"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

namespace tokense {

struct EncoderConfig {
  int layers = 4;
  int width = 256;  // D_enc
  int heads = 4;
  int bands = kDefaultBands;
  std::uint64_t seed = 0x5157;
};

template <typename S>
struct Adapter {
  Mat<S> weight;  // D_enc x D_lm
  Mat<S> bias;    // 1 x D_lm

  static Adapter init(int in_dim, int out_dim, std::uint64_t seed) {
    Adapter a;
    a.weight.resize(in_dim, out_dim);
    a.bias = Mat<S>::Zero(1, out_dim);
    Rng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (Eigen::Index i = 0; i < a.weight.size(); ++i) a.weight.data()[i] = static_cast<S>(sd * rng.normal());
    return a;
  }

  static Adapter zeros(int in_dim, int out_dim) {
    return Adapter{Mat<S>::Zero(in_dim, out_dim), Mat<S>::Zero(1, out_dim)};
  }

  Mat<S> apply(const Mat<S>& hidden) const {
    Mat<S> y = hidden * weight;
    y.rowwise() += bias.row(0);
    return y;
  }

  // Accumulates gradients for d(loss)/d(output).
  void backward(const Mat<S>& hidden, const Mat<S>& d_out, Adapter& grads) const {
    grads.weight.noalias() += hidden.transpose() * d_out;
    grads.bias += d_out.colwise().sum();
  }

  template <typename F>
  void visit(F&& f) {
    f(std::string("adapter.weight"), weight, true);
    f(std::string("adapter.bias"), bias, false);
  }
};

struct EncoderLayer {
  MatF norm1, wq, wk, wv, wo, norm2, w1, w2;
};

// Frozen part of the stack. Immutable after construction.
class FrozenEncoder {
 public:
  FrozenEncoder() = default;
  explicit FrozenEncoder(const EncoderConfig& cfg) : cfg_(cfg), fx_(cfg.bands) {
    if (cfg.layers < 1) throw Error("cond_encoder", "encoder needs at least one layer");
    if (cfg.width % cfg.heads != 0) throw Error("cond_encoder", "width must be divisible by heads");
    Rng rng(cfg.seed);
    auto fill = [&](MatF& m, int r, int c, double sd) {
      m.resize(r, c);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(sd * rng.normal());
    };
    const int w = cfg.width;
    fill(conv_, 3 * cfg.bands, w, 1.0 / std::sqrt(3.0 * cfg.bands));
    conv_bias_ = MatF::Zero(1, w);
    layers_.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& l : layers_) {
      l.norm1 = MatF::Ones(1, w);
      l.norm2 = MatF::Ones(1, w);
      fill(l.wq, w, w, 1.0 / std::sqrt(w));
      fill(l.wk, w, w, 1.0 / std::sqrt(w));
      fill(l.wv, w, w, 1.0 / std::sqrt(w));
      fill(l.wo, w, w, 0.5 / std::sqrt(w));
      fill(l.w1, w, 2 * w, 1.0 / std::sqrt(w));
      fill(l.w2, 2 * w, w, 0.5 / std::sqrt(2.0 * w));
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  int width() const { return cfg_.width; }

  // Outputs of every layer, each frames x width. Index 0 is the first
  // attention layer; the front-end output itself is not averaged.
  std::vector<MatF> layer_outputs(const AudioBuffer& buf) const {
    const MatF logmel = fx_.frames(buf);
    const Eigen::Index t = logmel.rows();
    const int b = cfg_.bands;
    MatF in = (logmel.array() + 10.0f) / 5.0f;
    MatF ctx = MatF::Zero(t, 3 * b);
    for (Eigen::Index i = 0; i < t; ++i)
      for (int k = 0; k < 3; ++k) {
        const Eigen::Index j = i + k - 1;
        if (j >= 0 && j < t) ctx.block(i, k * b, 1, b) = in.row(j);
      }
    MatF x = ctx * conv_;
    x.rowwise() += conv_bias_.row(0);
    x = x.unaryExpr([](float v) { return gelu(v); });

    std::vector<MatF> outs;
    const int nh = cfg_.heads, hd = cfg_.width / cfg_.heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const auto& l = layers_[li];
      const MatF n1 = layer_norm(x, l.norm1);
      const MatF q = n1 * l.wq, k = n1 * l.wk, v = n1 * l.wv;
      MatF attn(t, cfg_.width);
      for (int h = 0; h < nh; ++h) {
        MatF sc = (q.middleCols(h * hd, hd) * k.middleCols(h * hd, hd).transpose()) * scale;
        for (Eigen::Index r = 0; r < t; ++r) {
          const float mx = sc.row(r).maxCoeff();
          sc.row(r) = (sc.row(r).array() - mx).exp().matrix();
          sc.row(r) /= sc.row(r).sum();
        }
        attn.middleCols(h * hd, hd) = sc * v.middleCols(h * hd, hd);
      }
      x += attn * l.wo;
      const MatF n2 = layer_norm(x, l.norm2);
      x += (n2 * l.w1).unaryExpr([](float v) { return gelu(v); }) * l.w2;
      if (!x.allFinite())
        throw Error("cond_encoder", "non-finite activation in encoder layer " + std::to_string(li));
      outs.push_back(x);
    }
    return outs;
  }

  // Uniform average over all layer outputs, frames x width.
  MatF averaged(const AudioBuffer& buf) const {
    const auto outs = layer_outputs(buf);
    MatF avg = MatF::Zero(outs.front().rows(), outs.front().cols());
    for (const auto& o : outs) avg += o;
    return avg / static_cast<float>(outs.size());
  }

  // Utterance embedding for the speaker-similarity proxy: mean and standard
  // deviation over frames of the per-frame standardized averaged features.
  Eigen::VectorXd utterance_embedding(const AudioBuffer& buf) const {
    MatD f = averaged(buf).cast<double>();
    for (Eigen::Index r = 0; r < f.rows(); ++r) {
      const double m = f.row(r).mean();
      const double sd = std::sqrt((f.row(r).array() - m).square().mean() + 1e-8);
      f.row(r) = ((f.row(r).array() - m) / sd).matrix();
    }
    Eigen::VectorXd e(2 * f.cols());
    const Eigen::RowVectorXd mean = f.colwise().mean();
    for (Eigen::Index c = 0; c < f.cols(); ++c) {
      e(c) = mean(c);
      e(f.cols() + c) = std::sqrt((f.col(c).array() - mean(c)).square().mean());
    }
    return e;
  }

  template <typename F>
  void visit(F&& f) const {
    f(std::string("encoder.conv"), conv_);
    f(std::string("encoder.conv_bias"), conv_bias_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string p = "encoder.layers." + std::to_string(i) + ".";
      const auto& l = layers_[i];
      f(p + "norm1", l.norm1);
      f(p + "wq", l.wq);
      f(p + "wk", l.wk);
      f(p + "wv", l.wv);
      f(p + "wo", l.wo);
      f(p + "norm2", l.norm2);
      f(p + "w1", l.w1);
      f(p + "w2", l.w2);
    }
  }

  // Rebuild from stored tensors (checkpoint load).
  template <typename Get>
  static FrozenEncoder from_tensors(const EncoderConfig& cfg, Get&& get) {
    FrozenEncoder e(cfg);
    e.conv_ = get("encoder.conv");
    e.conv_bias_ = get("encoder.conv_bias");
    for (std::size_t i = 0; i < e.layers_.size(); ++i) {
      const std::string p = "encoder.layers." + std::to_string(i) + ".";
      auto& l = e.layers_[i];
      l.norm1 = get(p + "norm1");
      l.wq = get(p + "wq");
      l.wk = get(p + "wk");
      l.wv = get(p + "wv");
      l.wo = get(p + "wo");
      l.norm2 = get(p + "norm2");
      l.w1 = get(p + "w1");
      l.w2 = get(p + "w2");
    }
    return e;
  }

 private:
  static float gelu(float v) { return 0.5f * v * (1.0f + std::erf(v / std::numbers::sqrt2_v<float>)); }

  static MatF layer_norm(const MatF& x, const MatF& gain) {
    MatF y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const float m = x.row(r).mean();
      const float var = (x.row(r).array() - m).square().mean();
      y.row(r) = ((x.row(r).array() - m) / std::sqrt(var + 1e-5f)).matrix().cwiseProduct(gain);
    }
    return y;
  }

  EncoderConfig cfg_;
  FeatureExtractor fx_;
  MatF conv_, conv_bias_;
  std::vector<EncoderLayer> layers_;
};

// Frozen stack plus trainable adapter.
struct EncoderStack {
  FrozenEncoder frozen;
  Adapter<float> adapter;

  EncoderStack() = default;
  EncoderStack(const EncoderConfig& cfg, int lm_hidden, std::uint64_t adapter_seed)
      : frozen(cfg), adapter(Adapter<float>::init(cfg.width, lm_hidden, adapter_seed)) {}

  // CondFeatures: frames x D_lm at 50 Hz.
  MatF extract(const AudioBuffer& buf) const { return adapter.apply(frozen.averaged(buf)); }
};

inline MatF extract(const EncoderStack& stack, const AudioBuffer& buf) { return stack.extract(buf); }

struct FrozenSnapshot {
  std::vector<MatF> tensors;
};

inline FrozenSnapshot snapshot(const FrozenEncoder& enc) {
  FrozenSnapshot s;
  enc.visit([&](const std::string&, const MatF& m) { s.tensors.push_back(m); });
  return s;
}

inline bool bit_identical(const MatF& a, const MatF& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

// True iff every frozen parameter is bit-identical to the snapshot.
inline bool freeze_check(const EncoderStack& stack, const FrozenSnapshot& snap) {
  std::size_t i = 0;
  bool ok = true;
  stack.frozen.visit([&](const std::string&, const MatF& m) {
    ok = ok && i < snap.tensors.size() && bit_identical(m, snap.tensors[i]);
    ++i;
  });
  return ok && i == snap.tensors.size();
}

inline bool adapter_identical(const Adapter<float>& a, const Adapter<float>& b) {
  return bit_identical(a.weight, b.weight) && bit_identical(a.bias, b.bias);
}

}  // namespace tokense
