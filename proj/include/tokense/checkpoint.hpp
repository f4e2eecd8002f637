#pragma once

// Model / training checkpoint.
//
//   "TOKSELMC" | u32 version | model config | encoder config | vocab table |
//   u64 config hash | u64 codec hash | counters | tensors
//
// Every tensor is (name, tag, u32 rows, u32 cols, float32 data) with tag
// 0 = frozen, 1 = trainable, 2 = optimizer moment.

#include "tokense/binio.hpp"
#include "tokense/trainer.hpp"

#include <map>
#include <string>

namespace tokense {

enum class TensorTag : std::uint8_t { kFrozen = 0, kTrainable = 1, kMoment = 2 };

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::uint64_t codec_hash = 0;
  std::uint64_t train_seed = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  TrainState state;
};

namespace detail {

inline constexpr char kLmMagic[9] = "TOKSELMC";
inline constexpr std::uint32_t kLmVersion = 1;

inline void put_model_config(binio::Writer& w, const ModelConfig& c) {
  for (int v : {c.layers, c.heads, c.hidden, c.ffn_dim, c.max_seq_len, c.semantic_vocab, c.global_vocab, c.cond_dim})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<double>(c.rope_base);
  w.put<double>(c.norm_eps);
}

inline ModelConfig get_model_config(binio::Reader& r) {
  ModelConfig c;
  for (int* v : {&c.layers, &c.heads, &c.hidden, &c.ffn_dim, &c.max_seq_len, &c.semantic_vocab, &c.global_vocab,
                 &c.cond_dim})
    *v = static_cast<int>(r.get<std::uint32_t>());
  c.rope_base = r.get<double>();
  c.norm_eps = r.get<double>();
  c.validate();
  return c;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const TrainState& st, const CheckpointMeta& meta,
                            bool with_moments = true) {
  binio::Writer w;
  w.put_bytes(detail::kLmMagic, 8);
  w.put<std::uint32_t>(detail::kLmVersion);
  const ModelConfig& mc = st.model.config();
  detail::put_model_config(w, mc);
  const EncoderConfig& ec = st.encoder.frozen.config();
  for (int v : {ec.layers, ec.width, ec.heads, ec.bands}) w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  w.put<std::uint64_t>(ec.seed);

  const Vocab vocab = mc.vocab();
  w.put<std::uint32_t>(kNumSpecial);
  for (int s = 0; s < kNumSpecial; ++s) {
    w.put_string(special_name(static_cast<Special>(s)));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(vocab.special(static_cast<Special>(s))));
  }

  w.put<std::uint64_t>(meta.config_hash);
  w.put<std::uint64_t>(meta.codec_hash);
  w.put<std::uint64_t>(meta.train_seed);
  w.put<std::int64_t>(st.step);
  w.put<std::int32_t>(st.epoch);
  w.put<std::int64_t>(st.rejected_steps);

  std::vector<std::tuple<std::string, TensorTag, const MatF*>> tensors;
  st.encoder.frozen.visit([&](const std::string& n, const MatF& m) { tensors.emplace_back(n, TensorTag::kFrozen, &m); });
  auto add = [&](const std::string& prefix, TensorTag tag) {
    return [&, prefix, tag](const std::string& n, MatF& m, bool) { tensors.emplace_back(prefix + n, tag, &m); };
  };
  auto& mut = const_cast<TrainState&>(st);
  mut.model.params().visit(add("", TensorTag::kTrainable));
  mut.encoder.adapter.visit(add("", TensorTag::kTrainable));
  if (with_moments) {
    mut.m.visit(add("adam_m.", TensorTag::kMoment));
    mut.v.visit(add("adam_v.", TensorTag::kMoment));
    mut.adapter_m.visit(add("adam_m.", TensorTag::kMoment));
    mut.adapter_v.visit(add("adam_v.", TensorTag::kMoment));
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tag, m] : tensors) {
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(tag));
    w.put_matrix(*m);
  }
  w.save(path, "trainer");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  auto r = binio::Reader::from_file(path, "trainer");
  if (r.remaining() < 8 || r.get_fixed(8) != std::string(detail::kLmMagic, 8))
    throw Error("trainer", "'" + path + "' is not a model checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != detail::kLmVersion) throw Error("trainer", "unsupported checkpoint version " + std::to_string(version));
  const ModelConfig mc = detail::get_model_config(r);
  EncoderConfig ec;
  ec.layers = static_cast<int>(r.get<std::uint32_t>());
  ec.width = static_cast<int>(r.get<std::uint32_t>());
  ec.heads = static_cast<int>(r.get<std::uint32_t>());
  ec.bands = static_cast<int>(r.get<std::uint32_t>());
  ec.seed = r.get<std::uint64_t>();

  const auto nspecial = r.get<std::uint32_t>();
  if (nspecial != kNumSpecial) throw Error("trainer", "vocabulary table has " + std::to_string(nspecial) + " specials");
  const Vocab vocab = mc.vocab();
  for (int s = 0; s < kNumSpecial; ++s) {
    const std::string name = r.get_string();
    const auto id = r.get<std::uint32_t>();
    if (name != special_name(static_cast<Special>(s)) ||
        id != static_cast<std::uint32_t>(vocab.special(static_cast<Special>(s))))
      throw Error("trainer", "vocabulary table mismatch at special '" + name + "'");
  }

  Checkpoint ck;
  ck.meta.config_hash = r.get<std::uint64_t>();
  ck.meta.codec_hash = r.get<std::uint64_t>();
  ck.meta.train_seed = r.get<std::uint64_t>();
  const auto step = r.get<std::int64_t>();
  const auto epoch = r.get<std::int32_t>();
  const auto rejected = r.get<std::int64_t>();

  std::map<std::string, std::pair<TensorTag, MatF>> tensors;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.get_string();
    const auto tag = static_cast<TensorTag>(r.get<std::uint8_t>());
    MatF m = r.get_matrix<float>();
    tensors[name] = {tag, std::move(m)};
  }
  if (!r.at_end()) throw Error("trainer", "trailing bytes in '" + path + "'");

  auto take = [&](const std::string& name, const MatF& like, bool required) -> MatF {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      if (required) throw Error("trainer", "checkpoint is missing tensor '" + name + "'");
      return MatF::Zero(like.rows(), like.cols());
    }
    if (it->second.second.rows() != like.rows() || it->second.second.cols() != like.cols())
      throw Error("trainer", "tensor '" + name + "' has shape " + std::to_string(it->second.second.rows()) + "x" +
                                 std::to_string(it->second.second.cols()) + ", expected " +
                                 std::to_string(like.rows()) + "x" + std::to_string(like.cols()));
    return it->second.second;
  };

  const FrozenEncoder shape_enc(ec);
  FrozenEncoder enc = FrozenEncoder::from_tensors(ec, [&](const std::string& n) {
    const MatF* like = nullptr;
    shape_enc.visit([&](const std::string& k, const MatF& m) {
      if (k == n) like = &m;
    });
    return take(n, *like, true);
  });
  LmParams<float> p = LmParams<float>::zeros(mc);
  p.visit([&](const std::string& n, MatF& m, bool) { m = take(n, m, true); });
  Adapter<float> ad = Adapter<float>::zeros(ec.width, mc.hidden);
  ad.visit([&](const std::string& n, MatF& m, bool) { m = take(n, m, true); });

  EncoderStack stack;
  stack.frozen = std::move(enc);
  stack.adapter = std::move(ad);
  ck.state = TrainState(LanguageModel<float>(mc, std::move(p)), std::move(stack));
  ck.state.m.visit([&](const std::string& n, MatF& m, bool) { m = take("adam_m." + n, m, false); });
  ck.state.v.visit([&](const std::string& n, MatF& m, bool) { m = take("adam_v." + n, m, false); });
  ck.state.adapter_m.visit([&](const std::string& n, MatF& m, bool) { m = take("adam_m." + n, m, false); });
  ck.state.adapter_v.visit([&](const std::string& n, MatF& m, bool) { m = take("adam_v." + n, m, false); });
  ck.state.step = step;
  ck.state.epoch = epoch;
  ck.state.rejected_steps = rejected;
  return ck;
}

}  // namespace tokense
