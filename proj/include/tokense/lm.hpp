#pragma once

// Decoder-only backbone in the LLaMA style: pre-norm residual blocks with
// RMSNorm, rotary position encoding, causal multi-head attention and a
// SwiGLU feed-forward, followed by a final RMSNorm and an untied output head
// over the full vocabulary. Forward, backward and incremental (KV-cached)
// decoding are all implemented here.

#include "tokense/layout.hpp"
#include "tokense/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace tokense {

template <typename S>
struct BlockParams {
  Mat<S> attn_norm, wq, wk, wv, wo;
  Mat<S> ffn_norm, w1, w3, w2;

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + "attn_norm", attn_norm, false);
    f(prefix + "wq", wq, true);
    f(prefix + "wk", wk, true);
    f(prefix + "wv", wv, true);
    f(prefix + "wo", wo, true);
    f(prefix + "ffn_norm", ffn_norm, false);
    f(prefix + "w1", w1, true);
    f(prefix + "w3", w3, true);
    f(prefix + "w2", w2, true);
  }
};

// Parameter container; a second instance of the same shape holds gradients
// or optimizer moments.
template <typename S>
struct LmParams {
  Mat<S> tok_emb;  // vocab x hidden
  std::vector<BlockParams<S>> blocks;
  Mat<S> final_norm;
  Mat<S> head;  // hidden x vocab

  // f(name, matrix, is_weight_matrix)
  template <typename F>
  void visit(F&& f) {
    f(std::string("tok_emb"), tok_emb, true);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit("blocks." + std::to_string(i) + ".", f);
    f(std::string("final_norm"), final_norm, false);
    f(std::string("head"), head, true);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<LmParams*>(this)->visit([&](const std::string& n, Mat<S>& m, bool w) { f(n, static_cast<const Mat<S>&>(m), w); });
  }

  static LmParams zeros(const ModelConfig& c) {
    LmParams p;
    const int h = c.hidden, f = c.ffn_dim, v = c.vocab_size();
    p.tok_emb = Mat<S>::Zero(v, h);
    p.blocks.resize(static_cast<std::size_t>(c.layers));
    for (auto& b : p.blocks) {
      b.attn_norm = Mat<S>::Zero(1, h);
      b.wq = b.wk = b.wv = b.wo = Mat<S>::Zero(h, h);
      b.ffn_norm = Mat<S>::Zero(1, h);
      b.w1 = b.w3 = Mat<S>::Zero(h, f);
      b.w2 = Mat<S>::Zero(f, h);
    }
    p.final_norm = Mat<S>::Zero(1, h);
    p.head = Mat<S>::Zero(h, v);
    return p;
  }

  static LmParams init(const ModelConfig& c, std::uint64_t seed) {
    c.validate();
    LmParams p = zeros(c);
    Rng rng(seed);
    const double std_in = 0.02;
    const double std_out = 0.02 / std::sqrt(2.0 * std::max(1, c.layers));
    auto fill = [&](Mat<S>& m, double sd) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(sd * rng.normal());
    };
    fill(p.tok_emb, 1.0);
    for (auto& b : p.blocks) {
      b.attn_norm.setOnes();
      b.ffn_norm.setOnes();
      fill(b.wq, std_in);
      fill(b.wk, std_in);
      fill(b.wv, std_in);
      fill(b.wo, std_out);
      fill(b.w1, std_in);
      fill(b.w3, std_in);
      fill(b.w2, std_out);
    }
    p.final_norm.setOnes();
    fill(p.head, std_in);
    return p;
  }

  void set_zero() {
    visit([](const std::string&, Mat<S>& m, bool) { m.setZero(); });
  }
};

struct ParamCount {
  std::int64_t total = 0;           // backbone + embeddings + head (+ adapter)
  std::int64_t non_embedding = 0;   // excludes token embedding and head
  std::int64_t per_layer = 0;
  std::int64_t embeddings = 0;      // token embedding + head
  std::int64_t adapter = 0;
};

// Exact trainable parameter count: backbone, embeddings, output head and the
// conditioning adapter.
inline ParamCount param_count(const ModelConfig& c) {
  c.validate();
  ParamCount pc;
  const std::int64_t h = c.hidden, f = c.ffn_dim, v = c.vocab_size();
  pc.per_layer = 4 * h * h + 3 * h * f + 2 * h;
  pc.embeddings = 2 * v * h;
  pc.adapter = static_cast<std::int64_t>(c.cond_dim) * h + h;
  pc.non_embedding = pc.per_layer * c.layers + h + pc.adapter;
  pc.total = pc.non_embedding + pc.embeddings;
  return pc;
}

template <typename S>
class RopeTable {
 public:
  RopeTable() = default;
  RopeTable(int max_len, int head_dim, double base) : half_(head_dim / 2) {
    cos_.resize(static_cast<std::size_t>(max_len) * half_);
    sin_.resize(cos_.size());
    for (int p = 0; p < max_len; ++p)
      for (int i = 0; i < half_; ++i) {
        const double theta = std::pow(base, -2.0 * i / head_dim);
        cos_[static_cast<std::size_t>(p) * half_ + i] = static_cast<S>(std::cos(p * theta));
        sin_[static_cast<std::size_t>(p) * half_ + i] = static_cast<S>(std::sin(p * theta));
      }
  }

  // Rotates interleaved pairs of every head in `x` (rows are positions
  // start_pos, start_pos + 1, ...). sign = -1 applies the inverse rotation.
  void apply(Mat<S>& x, int heads, int start_pos, S sign = S(1)) const {
    const int d = 2 * half_;
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const std::size_t base = static_cast<std::size_t>(start_pos + r) * half_;
      S* row = x.row(r).data();
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < half_; ++i) {
          const S c = cos_[base + i], s = sign * sin_[base + i];
          S& a = row[h * d + 2 * i];
          S& b = row[h * d + 2 * i + 1];
          const S a0 = a, b0 = b;
          a = a0 * c - b0 * s;
          b = a0 * s + b0 * c;
        }
    }
  }

 private:
  int half_ = 0;
  std::vector<S> cos_, sin_;
};

namespace nn {

template <typename S>
Mat<S> rmsnorm(const Mat<S>& x, const Mat<S>& gain, double eps, Eigen::Matrix<S, Eigen::Dynamic, 1>* inv_out) {
  const auto h = x.cols();
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    inv(r) = S(1) / std::sqrt(x.row(r).squaredNorm() / static_cast<S>(h) + static_cast<S>(eps));
  Mat<S> y = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) y.row(r) = (x.row(r) * inv(r)).cwiseProduct(gain);
  if (inv_out) *inv_out = std::move(inv);
  return y;
}

template <typename S>
Mat<S> rmsnorm_backward(const Mat<S>& x, const Mat<S>& gain, const Eigen::Matrix<S, Eigen::Dynamic, 1>& inv,
                        const Mat<S>& dy, Mat<S>& dgain) {
  const auto h = static_cast<S>(x.cols());
  Mat<S> dx(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const auto gd = dy.row(r).cwiseProduct(gain);
    dgain += dy.row(r).cwiseProduct(x.row(r)) * inv(r);
    const S dot = gd.dot(x.row(r));
    dx.row(r) = gd * inv(r) - x.row(r) * (inv(r) * inv(r) * inv(r) * dot / h);
  }
  return dx;
}

template <typename S>
inline S sigmoid(S a) {
  return S(1) / (S(1) + std::exp(-a));
}

// Row-wise softmax of causal scores; columns > row + offset are masked.
template <typename S>
void causal_softmax(Mat<S>& s, int offset) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Eigen::Index valid = std::min<Eigen::Index>(s.cols(), r + offset + 1);
    S mx = s.row(r).head(valid).maxCoeff();
    S sum = 0;
    for (Eigen::Index c = 0; c < valid; ++c) {
      s(r, c) = std::exp(s(r, c) - mx);
      sum += s(r, c);
    }
    for (Eigen::Index c = 0; c < valid; ++c) s(r, c) /= sum;
    for (Eigen::Index c = valid; c < s.cols(); ++c) s(r, c) = 0;
  }
}

}  // namespace nn

template <typename S>
struct BlockCache {
  Mat<S> x_in, n1, q, k, v, attn, h, n2, a, b, g;
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv1, inv2;
  std::vector<Mat<S>> probs;
};

template <typename S>
struct ForwardCache {
  Mat<S> x0;
  std::vector<BlockCache<S>> blocks;
  Mat<S> xf, nf;
  Eigen::Matrix<S, Eigen::Dynamic, 1> invf;
};

// Per-layer key/value cache for incremental decoding.
template <typename S>
struct KvCache {
  std::vector<Mat<S>> k, v;
  int length = 0;
};

template <typename S>
class LanguageModel {
 public:
  LanguageModel() = default;
  LanguageModel(const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), params_(LmParams<S>::init(cfg, seed)), rope_(cfg.max_seq_len, cfg.head_dim(), cfg.rope_base) {}
  LanguageModel(const ModelConfig& cfg, LmParams<S> params)
      : cfg_(cfg), params_(std::move(params)), rope_(cfg.max_seq_len, cfg.head_dim(), cfg.rope_base) {
    cfg_.validate();
  }

  const ModelConfig& config() const { return cfg_; }
  Vocab vocab() const { return cfg_.vocab(); }
  LmParams<S>& params() { return params_; }
  const LmParams<S>& params() const { return params_; }

  // Input embeddings: learned rows for tokens, adapter outputs for conditions.
  Mat<S> embed(const SequenceLayout<S>& L) const {
    Mat<S> x(static_cast<Eigen::Index>(L.size()), cfg_.hidden);
    for (std::size_t t = 0; t < L.size(); ++t) {
      const auto& it = L.items[t];
      if (it.kind == ItemKind::kToken) {
        if (it.token < 0 || it.token >= cfg_.vocab_size())
          throw Error("lm_core", "token id " + std::to_string(it.token) + " out of vocabulary at position " +
                                     std::to_string(t));
        x.row(static_cast<Eigen::Index>(t)) = params_.tok_emb.row(it.token);
      } else {
        const auto& c = L.cond(it.stream);
        if (c.cols() != cfg_.hidden)
          throw Error("lm_core", "condition width " + std::to_string(c.cols()) + " != hidden " +
                                     std::to_string(cfg_.hidden));
        x.row(static_cast<Eigen::Index>(t)) = c.row(it.frame);
      }
    }
    return x;
  }

  void check_length(std::size_t n) const {
    if (n > static_cast<std::size_t>(cfg_.max_seq_len))
      throw Error("lm_core", "sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                                 std::to_string(cfg_.max_seq_len));
  }

  // Final hidden states (after the last RMSNorm), positions x hidden.
  Mat<S> hidden_states(const Mat<S>& x0, ForwardCache<S>* cache) const {
    check_length(static_cast<std::size_t>(x0.rows()));
    const int nh = cfg_.heads, hd = cfg_.head_dim();
    const int t = static_cast<int>(x0.rows());
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    Mat<S> x = x0;
    if (cache) {
      cache->x0 = x0;
      cache->blocks.assign(params_.blocks.size(), {});
    }
    for (std::size_t li = 0; li < params_.blocks.size(); ++li) {
      const auto& bp = params_.blocks[li];
      BlockCache<S> local;
      BlockCache<S>& c = cache ? cache->blocks[li] : local;
      c.x_in = x;
      c.n1 = nn::rmsnorm(x, bp.attn_norm, cfg_.norm_eps, &c.inv1);
      c.q = c.n1 * bp.wq;
      c.k = c.n1 * bp.wk;
      c.v = c.n1 * bp.wv;
      rope_.apply(c.q, nh, 0);
      rope_.apply(c.k, nh, 0);
      c.attn.resize(t, cfg_.hidden);
      c.probs.resize(static_cast<std::size_t>(nh));
      for (int h = 0; h < nh; ++h) {
        Mat<S> sc = (c.q.middleCols(h * hd, hd) * c.k.middleCols(h * hd, hd).transpose()) * scale;
        nn::causal_softmax(sc, 0);
        c.attn.middleCols(h * hd, hd).noalias() = sc * c.v.middleCols(h * hd, hd);
        if (cache) c.probs[static_cast<std::size_t>(h)] = std::move(sc);
      }
      c.h = x + c.attn * bp.wo;
      c.n2 = nn::rmsnorm(c.h, bp.ffn_norm, cfg_.norm_eps, &c.inv2);
      c.a = c.n2 * bp.w1;
      c.b = c.n2 * bp.w3;
      c.g = c.a.unaryExpr([](S v) { return v * nn::sigmoid(v); }).cwiseProduct(c.b);
      x = c.h + c.g * bp.w2;
      if (!cache) c = {};
    }
    Eigen::Matrix<S, Eigen::Dynamic, 1> invf;
    Mat<S> nf = nn::rmsnorm(x, params_.final_norm, cfg_.norm_eps, &invf);
    if (cache) {
      cache->xf = x;
      cache->nf = nf;
      cache->invf = invf;
    }
    return nf;
  }

  // Logits for every position, positions x vocab.
  Mat<S> forward(const SequenceLayout<S>& L) const {
    const Mat<S> nf = hidden_states(embed(L), nullptr);
    return nf * params_.head;
  }

  // Backpropagates d(loss)/d(final hidden) through the stack. Accumulates
  // parameter gradients into `grads` and returns d(loss)/d(x0).
  Mat<S> backward(const ForwardCache<S>& cache, const Mat<S>& d_nf, LmParams<S>& grads) const {
    const int nh = cfg_.heads, hd = cfg_.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    Mat<S> dx = nn::rmsnorm_backward(cache.xf, params_.final_norm, cache.invf, d_nf, grads.final_norm);
    for (std::size_t li = params_.blocks.size(); li-- > 0;) {
      const auto& bp = params_.blocks[li];
      auto& gb = grads.blocks[li];
      const auto& c = cache.blocks[li];
      // feed-forward
      gb.w2.noalias() += c.g.transpose() * dx;
      const Mat<S> dg = dx * bp.w2.transpose();
      Mat<S> da(c.a.rows(), c.a.cols()), db(c.b.rows(), c.b.cols());
      for (Eigen::Index i = 0; i < c.a.size(); ++i) {
        const S a = c.a.data()[i];
        const S sg = nn::sigmoid(a);
        const S silu = a * sg;
        db.data()[i] = dg.data()[i] * silu;
        da.data()[i] = dg.data()[i] * c.b.data()[i] * sg * (S(1) + a * (S(1) - sg));
      }
      gb.w1.noalias() += c.n2.transpose() * da;
      gb.w3.noalias() += c.n2.transpose() * db;
      Mat<S> dn2 = da * bp.w1.transpose();
      dn2.noalias() += db * bp.w3.transpose();
      Mat<S> dh = dx + nn::rmsnorm_backward(c.h, bp.ffn_norm, c.inv2, dn2, gb.ffn_norm);
      // attention
      gb.wo.noalias() += c.attn.transpose() * dh;
      const Mat<S> dattn = dh * bp.wo.transpose();
      Mat<S> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
      for (int h = 0; h < nh; ++h) {
        const Mat<S>& p = c.probs[static_cast<std::size_t>(h)];
        const auto dO = dattn.middleCols(h * hd, hd);
        dv.middleCols(h * hd, hd).noalias() = p.transpose() * dO;
        Mat<S> dp = dO * c.v.middleCols(h * hd, hd).transpose();
        for (Eigen::Index r = 0; r < dp.rows(); ++r) {
          const S dot = dp.row(r).dot(p.row(r));
          dp.row(r) = p.row(r).cwiseProduct((dp.row(r).array() - dot).matrix());
        }
        dq.middleCols(h * hd, hd).noalias() = (dp * c.k.middleCols(h * hd, hd)) * scale;
        dk.middleCols(h * hd, hd).noalias() = (dp.transpose() * c.q.middleCols(h * hd, hd)) * scale;
      }
      rope_.apply(dq, nh, 0, S(-1));
      rope_.apply(dk, nh, 0, S(-1));
      gb.wq.noalias() += c.n1.transpose() * dq;
      gb.wk.noalias() += c.n1.transpose() * dk;
      gb.wv.noalias() += c.n1.transpose() * dv;
      Mat<S> dn1 = dq * bp.wq.transpose();
      dn1.noalias() += dk * bp.wk.transpose();
      dn1.noalias() += dv * bp.wv.transpose();
      dx = dh + nn::rmsnorm_backward(c.x_in, bp.attn_norm, c.inv1, dn1, gb.attn_norm);
    }
    return dx;
  }

  // Scatters d(x0) into token-embedding gradients; condition rows are
  // returned per stream for the adapter.
  void backward_embed(const SequenceLayout<S>& L, const Mat<S>& dx0, LmParams<S>& grads, Mat<S>* d_cond_d,
                      Mat<S>* d_cond_r) const {
    if (d_cond_d) *d_cond_d = Mat<S>::Zero(L.cond_degraded.rows(), cfg_.hidden);
    if (d_cond_r) *d_cond_r = Mat<S>::Zero(L.cond_reference.rows(), cfg_.hidden);
    for (std::size_t t = 0; t < L.size(); ++t) {
      const auto& it = L.items[t];
      if (it.kind == ItemKind::kToken) {
        grads.tok_emb.row(it.token) += dx0.row(static_cast<Eigen::Index>(t));
      } else {
        Mat<S>* dst = it.stream == CondStream::kDegraded ? d_cond_d : d_cond_r;
        if (dst) dst->row(it.frame) += dx0.row(static_cast<Eigen::Index>(t));
      }
    }
  }

  // --- incremental decoding -------------------------------------------------

  KvCache<S> new_cache() const {
    KvCache<S> kv;
    kv.k.assign(params_.blocks.size(), Mat<S>(cfg_.max_seq_len, cfg_.hidden));
    kv.v.assign(params_.blocks.size(), Mat<S>(cfg_.max_seq_len, cfg_.hidden));
    return kv;
  }

  // Appends `x_new` (rows = consecutive positions) to the cache and returns
  // the logits of the new positions.
  Mat<S> extend(KvCache<S>& kv, const Mat<S>& x_new) const {
    const int start = kv.length;
    const int n = static_cast<int>(x_new.rows());
    check_length(static_cast<std::size_t>(start + n));
    const int nh = cfg_.heads, hd = cfg_.head_dim();
    const S scale = S(1) / std::sqrt(static_cast<S>(hd));
    Mat<S> x = x_new;
    for (std::size_t li = 0; li < params_.blocks.size(); ++li) {
      const auto& bp = params_.blocks[li];
      const Mat<S> n1 = nn::rmsnorm<S>(x, bp.attn_norm, cfg_.norm_eps, nullptr);
      Mat<S> q = n1 * bp.wq;
      Mat<S> k = n1 * bp.wk;
      rope_.apply(q, nh, start);
      rope_.apply(k, nh, start);
      kv.k[li].middleRows(start, n) = k;
      kv.v[li].middleRows(start, n) = n1 * bp.wv;
      Mat<S> attn(n, cfg_.hidden);
      const int total = start + n;
      for (int h = 0; h < nh; ++h) {
        Mat<S> sc = (q.middleCols(h * hd, hd) * kv.k[li].block(0, h * hd, total, hd).transpose()) * scale;
        nn::causal_softmax(sc, start);
        attn.middleCols(h * hd, hd).noalias() = sc * kv.v[li].block(0, h * hd, total, hd);
      }
      const Mat<S> hres = x + attn * bp.wo;
      const Mat<S> n2 = nn::rmsnorm<S>(hres, bp.ffn_norm, cfg_.norm_eps, nullptr);
      const Mat<S> a = n2 * bp.w1;
      const Mat<S> b = n2 * bp.w3;
      const Mat<S> g = a.unaryExpr([](S v) { return v * nn::sigmoid(v); }).cwiseProduct(b);
      x = hres + g * bp.w2;
    }
    kv.length = start + n;
    return nn::rmsnorm<S>(x, params_.final_norm, cfg_.norm_eps, nullptr) * params_.head;
  }

  Mat<S> token_row(int token) const { return params_.tok_emb.row(token); }

 private:
  ModelConfig cfg_;
  LmParams<S> params_;
  RopeTable<S> rope_;
};

// --- loss -------------------------------------------------------------------

template <typename S>
struct LossResult {
  double loss = 0.0;
  std::size_t count = 0;
  Mat<S> d_logits;  // same shape as the logits, zero on unmasked rows
};

// Mean negative log-likelihood over masked positions. `logits` has one row
// per layout position. `weight` rescales the gradient (batch averaging).
template <typename S>
LossResult<S> masked_nll(const Mat<S>& logits, const std::vector<int>& labels,
                         const std::vector<std::uint8_t>& mask, bool want_grad, double denom = 0.0) {
  if (static_cast<std::size_t>(logits.rows()) != mask.size() || labels.size() != mask.size())
    throw Error("lm_core", "logits rows do not match the layout length");
  LossResult<S> r;
  for (auto m : mask) r.count += m;
  if (r.count == 0) throw Error("lm_core", "layout has no masked position");
  const double n = denom > 0.0 ? denom : static_cast<double>(r.count);
  if (want_grad) r.d_logits = Mat<S>::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const int y = labels[static_cast<std::size_t>(t)];
    if (y < 0 || y >= logits.cols()) throw Error("lm_core", "label out of range at position " + std::to_string(t));
    const double mx = static_cast<double>(logits.row(t).maxCoeff());
    double sum = 0.0;
    for (Eigen::Index v = 0; v < logits.cols(); ++v) sum += std::exp(static_cast<double>(logits(t, v)) - mx);
    const double lse = mx + std::log(sum);
    total += lse - static_cast<double>(logits(t, y));
    if (want_grad) {
      for (Eigen::Index v = 0; v < logits.cols(); ++v)
        r.d_logits(t, v) = static_cast<S>(std::exp(static_cast<double>(logits(t, v)) - lse) / n);
      r.d_logits(t, y) -= static_cast<S>(1.0 / n);
    }
  }
  r.loss = total / static_cast<double>(r.count);
  return r;
}

template <typename S>
LossResult<S> loss(const Mat<S>& logits, const SequenceLayout<S>& L, bool want_grad = false) {
  return masked_nll(logits, L.labels, L.loss_mask, want_grad);
}

// --- generation ---------------------------------------------------------------

struct Sampler {
  enum class Kind { kGreedy, kTopK } kind = Kind::kGreedy;
  int k = 20;
  double temperature = 0.8;

  static Sampler greedy() { return {}; }
  static Sampler top_k(int k, double temperature) { return {Kind::kTopK, k, temperature}; }
};

struct Generation {
  CodecTokens tokens;
  bool truncated = false;  // max_new reached before E
};

namespace detail {

// Picks a vocabulary id among `allowed` ids (block [lo, hi) plus `extra`).
template <typename S>
int pick_token(const Eigen::Ref<const RowVec<S>>& logits, int lo, int hi, int extra, const Sampler& sampler, Rng& rng) {
  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<std::size_t>(hi - lo + 1));
  for (int v = lo; v < hi; ++v) cand.emplace_back(static_cast<double>(logits(v)), v);
  if (extra >= 0) cand.emplace_back(static_cast<double>(logits(extra)), extra);
  if (sampler.kind == Sampler::Kind::kGreedy) {
    auto best = cand.front();
    for (const auto& c : cand)
      if (c.first > best.first) best = c;
    return best.second;
  }
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, sampler.k)), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                    [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
  const double temp = std::max(sampler.temperature, 1e-6);
  std::vector<double> w(k);
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += (w[i] = std::exp((cand[i].first - cand[0].first) / temp));
  double u = rng.uniform() * sum;
  for (std::size_t i = 0; i < k; ++i) {
    u -= w[i];
    if (u < 0.0) return cand[i].second;
  }
  return cand[k - 1].second;
}

}  // namespace detail

// Emits exactly 32 global ids, force-feeds S, then semantic ids until E or
// `max_new` semantic tokens.
template <typename S>
Generation generate(const LanguageModel<S>& model, const SequenceLayout<S>& prefix, const Sampler& sampler,
                    int max_new, Rng& rng) {
  const Vocab vocab = model.vocab();
  if (prefix.items.empty() || prefix.items.back().kind != ItemKind::kToken ||
      prefix.items.back().token != vocab.special(Special::kGlobal))
    throw Error("lm_core", "generation prefix must end with the G marker");
  KvCache<S> kv = model.new_cache();
  Mat<S> logits = model.extend(kv, model.embed(prefix));
  RowVec<S> last = logits.row(logits.rows() - 1);
  Generation out;
  const int ks = vocab.semantic_size(), kg = vocab.global_size();
  for (int i = 0; i < kGlobalTokens; ++i) {
    const int tok = detail::pick_token<S>(last, ks, ks + kg, -1, sampler, rng);
    out.tokens.global.ids.push_back(tok - ks);
    last = model.extend(kv, model.token_row(tok)).row(0);
  }
  last = model.extend(kv, model.token_row(vocab.special(Special::kSemantic))).row(0);
  const int end = vocab.special(Special::kEnd);
  out.truncated = true;
  for (int i = 0; i < max_new; ++i) {
    const int tok = detail::pick_token<S>(last, 0, ks, end, sampler, rng);
    if (tok == end) {
      out.truncated = false;
      break;
    }
    out.tokens.semantic.ids.push_back(tok);
    if (i + 1 < max_new) last = model.extend(kv, model.token_row(tok)).row(0);
  }
  return out;
}

}  // namespace tokense
