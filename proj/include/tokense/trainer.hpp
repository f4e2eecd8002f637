#pragma once

// Optimization: learning-rate schedule, AdamW with decoupled weight decay,
// and the single-writer training step over a batch of teacher-forced layouts.

#include "tokense/cond_encoder.hpp"
#include "tokense/degrade.hpp"
#include "tokense/lm.hpp"
#include "tokense/parallel.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace tokense {

struct TrainConfig {
  int epochs = 30;
  double peak_lr = 0.001;
  int warmup_steps = 4000;
  double epoch_decay = 0.98;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  int batch_size = 8;
  std::array<double, 3> mode_mix{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // SR, TSE, rTSE
  std::uint64_t seed = 1;
  std::int64_t max_steps = 0;  // 0: epochs * steps_per_epoch
  int checkpoint_every = 0;    // 0: only the final checkpoint
  double segment_sec = 5.0;
  int canary_every = 100;      // 0 disables the in-loop loss-mask canary

  void validate() const {
    double sum = 0.0;
    for (double p : mode_mix) {
      if (p < 0.0) throw Error("trainer", "mode_mix entries must be nonnegative");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw Error("trainer", "mode_mix must sum to 1");
    if (batch_size <= 0) throw Error("trainer", "batch_size must be positive");
    if (warmup_steps < 0 || peak_lr < 0.0) throw Error("trainer", "invalid schedule parameters");
    if (!(segment_sec > 0.0)) throw Error("trainer", "segment_sec must be positive");
  }
};

// Linear warm-up from 0 to peak over warmup_steps, constant afterwards, and
// scaled by epoch_decay^epoch.
inline double lr_schedule(std::int64_t step, int epoch, const TrainConfig& cfg) {
  const double warm = (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
                          ? static_cast<double>(step) / static_cast<double>(cfg.warmup_steps)
                          : 1.0;
  return cfg.peak_lr * warm * std::pow(cfg.epoch_decay, epoch);
}

// One training example before the adapter: frozen-encoder features for the
// degraded (and reference) audio plus the target tokens.
struct TrainExample {
  Mode mode = Mode::kSR;
  MatF enc_degraded;
  std::optional<MatF> enc_reference;
  CodecTokens target;
};

struct TrainState {
  LanguageModel<float> model;
  EncoderStack encoder;
  LmParams<float> m, v;
  Adapter<float> adapter_m, adapter_v;
  std::int64_t step = 0;
  int epoch = 0;
  std::int64_t rejected_steps = 0;

  TrainState() = default;
  TrainState(LanguageModel<float> lm, EncoderStack enc) : model(std::move(lm)), encoder(std::move(enc)) {
    reset_moments();
  }

  void reset_moments() {
    m = LmParams<float>::zeros(model.config());
    v = LmParams<float>::zeros(model.config());
    const int in = encoder.frozen.width(), out = model.config().hidden;
    adapter_m = Adapter<float>::zeros(in, out);
    adapter_v = Adapter<float>::zeros(in, out);
  }
};

struct StepResult {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool applied = false;
  std::size_t labeled = 0;
  std::size_t correct_semantic = 0;  // teacher-forced argmax hits on semantic labels
  std::size_t semantic_labels = 0;
};

struct Gradients {
  LmParams<float> lm;
  Adapter<float> adapter;
};

// Forward + backward over a batch; loss is the mean NLL over every masked
// position of the batch (equivalent to right-padding with masked pads).
inline StepResult accumulate_gradients(const TrainState& st, std::span<const TrainExample> batch, Gradients& g,
                                       bool want_grad = true) {
  if (batch.empty()) throw Error("trainer", "empty batch");
  const auto& model = st.model;
  const Vocab vocab = model.vocab();
  StepResult r;
  std::vector<SequenceLayout<float>> layouts;
  layouts.reserve(batch.size());
  for (const auto& ex : batch) {
    const MatF cd = st.encoder.adapter.apply(ex.enc_degraded);
    std::optional<MatF> cr;
    if (ex.enc_reference) cr = st.encoder.adapter.apply(*ex.enc_reference);
    if (ex.mode != Mode::kSR && !cr) throw Error("trainer", "TSE/rTSE example without reference features");
    layouts.push_back(build_sequence<float>(vocab, ex.mode, cd, cr ? &*cr : nullptr, &ex.target));
    r.labeled += layouts.back().labeled();
  }
  const double denom = static_cast<double>(r.labeled);
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& L = layouts[i];
    ForwardCache<float> cache;
    const MatF nf = model.hidden_states(model.embed(L), want_grad ? &cache : nullptr);
    std::vector<Eigen::Index> rows;
    std::vector<int> labels;
    for (std::size_t t = 0; t < L.size(); ++t)
      if (L.loss_mask[t]) {
        rows.push_back(static_cast<Eigen::Index>(t));
        labels.push_back(L.labels[t]);
      }
    MatF nm(static_cast<Eigen::Index>(rows.size()), nf.cols());
    for (std::size_t j = 0; j < rows.size(); ++j) nm.row(static_cast<Eigen::Index>(j)) = nf.row(rows[j]);
    const MatF logits = nm * model.params().head;
    const std::vector<std::uint8_t> ones(rows.size(), 1);
    auto lr = masked_nll<float>(logits, labels, ones, want_grad, denom);
    total += lr.loss * static_cast<double>(lr.count);
    for (std::size_t j = 0; j < rows.size(); ++j) {
      if (!vocab.is_semantic(labels[j])) continue;
      ++r.semantic_labels;
      Eigen::Index arg;
      logits.row(static_cast<Eigen::Index>(j)).maxCoeff(&arg);
      if (arg == labels[j]) ++r.correct_semantic;
    }
    if (!want_grad) continue;
    g.lm.head.noalias() += nm.transpose() * lr.d_logits;
    const MatF dnm = lr.d_logits * model.params().head.transpose();
    MatF dnf = MatF::Zero(nf.rows(), nf.cols());
    for (std::size_t j = 0; j < rows.size(); ++j) dnf.row(rows[j]) = dnm.row(static_cast<Eigen::Index>(j));
    const MatF dx0 = model.backward(cache, dnf, g.lm);
    MatF dcd, dcr;
    model.backward_embed(L, dx0, g.lm, &dcd, &dcr);
    st.encoder.adapter.backward(batch[i].enc_degraded, dcd, g.adapter);
    if (batch[i].enc_reference) st.encoder.adapter.backward(*batch[i].enc_reference, dcr, g.adapter);
  }
  r.loss = total / denom;
  return r;
}

// One optimizer step. Only LM and adapter parameters change; a non-finite
// loss or gradient leaves the state untouched (recorded as rejected).
inline StepResult train_step(TrainState& st, const TrainConfig& cfg, std::span<const TrainExample> batch) {
  Gradients g{LmParams<float>::zeros(st.model.config()),
              Adapter<float>::zeros(st.encoder.frozen.width(), st.model.config().hidden)};
  StepResult r = accumulate_gradients(st, batch, g);
  r.lr = lr_schedule(st.step, st.epoch, cfg);

  double sq = 0.0;
  auto acc = [&](const std::string&, MatF& m, bool) { sq += static_cast<double>(m.squaredNorm()); };
  g.lm.visit(acc);
  g.adapter.visit(acc);
  r.grad_norm = std::sqrt(sq);
  if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm)) {
    ++st.rejected_steps;
    ++st.step;
    return r;
  }
  const float clip = (cfg.grad_clip > 0.0 && r.grad_norm > cfg.grad_clip)
                         ? static_cast<float>(cfg.grad_clip / r.grad_norm)
                         : 1.0f;

  const double t = static_cast<double>(st.step + 1);
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
  const float c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));
  const float lr = static_cast<float>(r.lr), eps = static_cast<float>(cfg.adam_eps);
  const float wd = static_cast<float>(cfg.weight_decay);
  auto update = [&](MatF& p, MatF& grad, MatF& m, MatF& v, bool decay) {
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const float gi = grad.data()[i] * clip;
      float& mi = m.data()[i];
      float& vi = v.data()[i];
      mi = b1 * mi + (1.0f - b1) * gi;
      vi = b2 * vi + (1.0f - b2) * gi * gi;
      const float step = (mi / c1) / (std::sqrt(vi / c2) + eps) + (decay ? wd * p.data()[i] : 0.0f);
      p.data()[i] -= lr * step;
    }
  };

  std::vector<MatF*> ps, gs, ms, vs;
  std::vector<bool> decays;
  st.model.params().visit([&](const std::string&, MatF& m, bool w) { ps.push_back(&m); decays.push_back(w); });
  g.lm.visit([&](const std::string&, MatF& m, bool) { gs.push_back(&m); });
  st.m.visit([&](const std::string&, MatF& m, bool) { ms.push_back(&m); });
  st.v.visit([&](const std::string&, MatF& m, bool) { vs.push_back(&m); });
  st.encoder.adapter.visit([&](const std::string&, MatF& m, bool w) { ps.push_back(&m); decays.push_back(w); });
  g.adapter.visit([&](const std::string&, MatF& m, bool) { gs.push_back(&m); });
  st.adapter_m.visit([&](const std::string&, MatF& m, bool) { ms.push_back(&m); });
  st.adapter_v.visit([&](const std::string&, MatF& m, bool) { vs.push_back(&m); });
  for (std::size_t i = 0; i < ps.size(); ++i) update(*ps[i], *gs[i], *ms[i], *vs[i], decays[i]);

  r.applied = true;
  ++st.step;
  return r;
}

// --- data pipeline ----------------------------------------------------------

inline Mode sample_mode(Rng& rng, const std::array<double, 3>& mix) {
  const double u = rng.uniform();
  if (u < mix[0]) return Mode::kSR;
  if (u < mix[0] + mix[1]) return Mode::kTSE;
  return Mode::kRTSE;
}

struct TrainingData {
  std::vector<Utterance> clean;
  DegradeAssets assets;
  DegradeSpec spec;
};

struct ExamplePlan {
  std::size_t utterance = 0;
  Mode mode = Mode::kSR;
  std::uint64_t seed = 0;
  int epoch = 0;
};

// Visiting order of epoch `epoch`: a seeded shuffle, fresh every epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, int epoch, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng(seed).split(0xE90C0000ULL + static_cast<std::uint64_t>(epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

// Examples of step `step`. Everything is a pure function of (seed, step), so
// a resumed run draws exactly what an uninterrupted run would have drawn.
inline std::vector<ExamplePlan> plan_step(std::int64_t step, std::size_t n_utterances, const TrainConfig& cfg) {
  if (n_utterances == 0) throw Error("trainer", "no training utterances");
  std::vector<ExamplePlan> out;
  int cached_epoch = -1;
  std::vector<std::size_t> order;
  for (int j = 0; j < cfg.batch_size; ++j) {
    const auto ordinal = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg.batch_size) +
                         static_cast<std::uint64_t>(j);
    const int epoch = static_cast<int>(ordinal / n_utterances);
    if (epoch != cached_epoch) {
      order = epoch_order(n_utterances, epoch, cfg.seed);
      cached_epoch = epoch;
    }
    Rng rng = Rng(cfg.seed).split(ordinal);
    ExamplePlan p;
    p.utterance = order[ordinal % n_utterances];
    p.mode = sample_mode(rng, cfg.mode_mix);
    p.seed = rng.next_u64();
    p.epoch = epoch;
    out.push_back(p);
  }
  return out;
}

inline std::size_t segment_samples(double segment_sec) {
  return static_cast<std::size_t>(std::llround(segment_sec * kSampleRate));
}

// Simulate a triple, encode the target and run the frozen encoder.
inline TrainExample make_example(const ExamplePlan& plan, const TrainingData& data, const Codec& codec,
                                 const FrozenEncoder& encoder, double segment_sec) {
  const Utterance& src = data.clean.at(plan.utterance);
  const std::size_t seg = segment_samples(segment_sec);
  Utterance u = src;
  if (u.audio.size() > seg) {
    Rng crop = Rng(plan.seed).split(1);
    u.audio = fit_length(src.audio, seg, random_offset(src.audio, seg, crop));
  }
  const SimulatedTriple t = simulate(u, data.assets, plan.mode, data.spec, plan.seed);
  TrainExample ex;
  ex.mode = plan.mode;
  ex.enc_degraded = encoder.averaged(t.degraded);
  ex.target = codec.encode(t.target);
  if (t.reference) ex.enc_reference = encoder.averaged(trim_or_pad(*t.reference, seg));
  return ex;
}

// A batch whose labels at unmasked positions are replaced by random ids must
// give the same loss and logit gradient as the original batch.
inline bool canary_check(const TrainState& st, std::span<const TrainExample> batch, Rng& rng) {
  const Vocab vocab = st.model.vocab();
  for (const auto& ex : batch) {
    const MatF cd = st.encoder.adapter.apply(ex.enc_degraded);
    std::optional<MatF> cr;
    if (ex.enc_reference) cr = st.encoder.adapter.apply(*ex.enc_reference);
    auto L = build_sequence<float>(vocab, ex.mode, cd, cr ? &*cr : nullptr, &ex.target);
    const MatF logits = st.model.forward(L);
    const auto a = masked_nll<float>(logits, L.labels, L.loss_mask, true);
    auto scrambled = L.labels;
    for (std::size_t i = 0; i < scrambled.size(); ++i)
      if (!L.loss_mask[i]) scrambled[i] = static_cast<int>(rng.index(static_cast<std::uint64_t>(vocab.size())));
    const auto b = masked_nll<float>(logits, scrambled, L.loss_mask, true);
    if (a.loss != b.loss || !bit_identical(a.d_logits, b.d_logits)) return false;
  }
  return true;
}

struct StepLog {
  std::int64_t step = 0;
  int epoch = 0;
  StepResult result;
  std::array<int, 3> modes{0, 0, 0};
  bool canary_checked = false;

  std::string to_string() const {
    std::ostringstream o;
    o << "step=" << step << " epoch=" << epoch << " lr=" << std::scientific << std::setprecision(6) << result.lr
      << " loss=" << std::fixed << std::setprecision(6) << result.loss << " grad_norm=" << result.grad_norm
      << " applied=" << (result.applied ? 1 : 0) << " modes=SR:" << modes[0] << ",TSE:" << modes[1]
      << ",rTSE:" << modes[2];
    if (canary_checked) o << " canary=ok";
    return o.str();
  }
};

class Trainer {
 public:
  Trainer(TrainState& state, const Codec& codec, const TrainingData& data, TrainConfig cfg, int threads = 1)
      : st_(state), codec_(codec), data_(data), cfg_(std::move(cfg)), threads_(std::max(1, threads)) {
    cfg_.validate();
    if (data_.clean.empty()) throw Error("trainer", "no training utterances");
    if (codec.semantic_size() != st_.model.config().semantic_vocab ||
        codec.global_size() != st_.model.config().global_vocab)
      throw Error("trainer", "codec codebook sizes do not match the model vocabulary");
  }

  const TrainConfig& config() const { return cfg_; }

  std::int64_t steps_per_epoch() const {
    return ceil_div(static_cast<std::int64_t>(data_.clean.size()), cfg_.batch_size);
  }

  std::int64_t total_steps() const {
    return cfg_.max_steps > 0 ? cfg_.max_steps : static_cast<std::int64_t>(cfg_.epochs) * steps_per_epoch();
  }

  // Builds the examples of the current step (producers run in parallel; each
  // example is seeded independently so the result does not depend on the
  // thread count).
  std::vector<TrainExample> produce(std::int64_t step, std::vector<ExamplePlan>* plans_out = nullptr) const {
    const auto plans = plan_step(step, data_.clean.size(), cfg_);
    std::vector<TrainExample> batch(plans.size());
    parallel_for(plans.size(), threads_, [&](std::size_t i) {
      batch[i] = make_example(plans[i], data_, codec_, st_.encoder.frozen, cfg_.segment_sec);
    });
    if (plans_out) *plans_out = plans;
    return batch;
  }

  StepLog step() {
    std::vector<ExamplePlan> plans;
    const auto batch = produce(st_.step, &plans);
    StepLog log;
    log.step = st_.step;
    for (const auto& p : plans) ++log.modes[static_cast<std::size_t>(p.mode)];
    st_.epoch = plans.front().epoch;
    log.epoch = st_.epoch;
    if (cfg_.canary_every > 0 && st_.step % cfg_.canary_every == 0) {
      Rng rng = Rng(cfg_.seed).split(0xCA9A7ULL ^ static_cast<std::uint64_t>(st_.step));
      if (!canary_check(st_, batch, rng))
        throw Error("trainer", "loss-mask canary failed at step " + std::to_string(st_.step));
      log.canary_checked = true;
    }
    log.result = train_step(st_, cfg_, batch);
    return log;
  }

  // Runs until `until_step` (exclusive) or total_steps().
  void run(std::int64_t until_step, const std::function<void(const StepLog&)>& on_step = {},
           const std::function<void(std::int64_t)>& on_checkpoint = {}) {
    const std::int64_t end = std::min(until_step, total_steps());
    while (st_.step < end) {
      const StepLog log = step();
      if (on_step) on_step(log);
      if (on_checkpoint && cfg_.checkpoint_every > 0 && st_.step % cfg_.checkpoint_every == 0)
        on_checkpoint(st_.step);
    }
  }

 private:
  TrainState& st_;
  const Codec& codec_;
  const TrainingData& data_;
  TrainConfig cfg_;
  int threads_;
};

}  // namespace tokense
