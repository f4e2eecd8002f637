#pragma once

// Run configuration: one INI file with [run], [degrade], [codec], [encoder],
// [model], [train] and [infer] sections. Unknown keys are rejected. The
// canonical serialization (every key, fixed order, round-trip precision)
// defines the config hash embedded in produced artifacts.

#include "tokense/cond_encoder.hpp"
#include "tokense/degrade.hpp"
#include "tokense/lm.hpp"
#include "tokense/orchestrator.hpp"
#include "tokense/trainer.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

namespace tokense {

struct CodecConfig {
  int semantic_size = 1024;
  int global_size = 256;
  int bands = kDefaultBands;
  std::uint64_t seed = 0;
};

struct InferConfig {
  double segment_sec = 5.0;
  std::string sampler = "greedy";  // greedy | topk
  int top_k = 20;
  double temperature = 0.8;
  int extra_tokens = 25;

  Sampler make_sampler() const {
    if (sampler == "greedy") return Sampler::greedy();
    if (sampler == "topk") return Sampler::top_k(top_k, temperature);
    throw Error("cli", "unknown sampler '" + sampler + "' (expected greedy or topk)");
  }
};

struct RunConfig {
  std::uint64_t seed = 1;
  DegradeSpec degrade;
  CodecConfig codec;
  EncoderConfig encoder;
  ModelConfig model;
  std::uint64_t model_seed = 0;
  TrainConfig train;
  InferConfig infer;

  struct Field {
    std::string section, key;
    std::function<std::string()> get;
    std::function<void(const std::string&)> set;
  };

  std::vector<Field> fields();
  std::string to_ini() const;
  std::uint64_t hash() const { return fnv1a(to_ini()); }
  void set(const std::string& dotted_key, const std::string& value);
  void validate() const;

  // Model vocabulary follows the codec codebook sizes.
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.semantic_vocab = codec.semantic_size;
    m.global_vocab = codec.global_size;
    m.cond_dim = encoder.width;
    return m;
  }
};

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& key, const std::string& s) {
  T v{};
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if constexpr (std::is_same_v<T, std::uint64_t>) {
    if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
      auto r = std::from_chars(b + 2, e, v, 16);
      if (r.ec != std::errc() || r.ptr != e) throw Error("cli", "config key '" + key + "': malformed value '" + s + "'");
      return v;
    }
  }
  auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc() || r.ptr != e) throw Error("cli", "config key '" + key + "': malformed value '" + s + "'");
  return v;
}

template <typename T>
RunConfig::Field num(const std::string& sec, const std::string& key, T& ref) {
  return {sec, key,
          [&ref] {
            if constexpr (std::is_floating_point_v<T>) return fmt(ref);
            else return std::to_string(ref);
          },
          [&ref, k = sec + "." + key](const std::string& s) { ref = parse_number<T>(k, s); }};
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline RunConfig::Field range(const std::string& sec, const std::string& key, Range& ref) {
  return {sec, key, [&ref] { return fmt(ref.lo) + "," + fmt(ref.hi); },
          [&ref, k = sec + "." + key](const std::string& s) {
            const auto c = s.find(',');
            if (c == std::string::npos) throw Error("cli", "config key '" + k + "' expects 'lo,hi'");
            ref.lo = parse_number<double>(k, trim(s.substr(0, c)));
            ref.hi = parse_number<double>(k, trim(s.substr(c + 1)));
          }};
}

}  // namespace detail

inline std::vector<RunConfig::Field> RunConfig::fields() {
  using detail::num;
  using detail::range;
  std::vector<Field> f;
  f.push_back(num("run", "seed", seed));

  auto& d = degrade;
  f.push_back(num("degrade", "noise_prob", d.noise_prob));
  f.push_back(range("degrade", "snr_db", d.snr_db_range));
  f.push_back(num("degrade", "reverb_prob", d.reverb_prob));
  f.push_back(num("degrade", "clip_prob", d.clip_prob));
  f.push_back(range("degrade", "clip_min_quantile", d.clip_min_quantile_range));
  f.push_back(range("degrade", "clip_max_quantile", d.clip_max_quantile_range));
  f.push_back(num("degrade", "bandlimit_prob", d.bandlimit_prob));
  f.push_back({"degrade", "bandwidths_hz",
               [&d] {
                 std::string s;
                 for (std::size_t i = 0; i < d.bandwidth_choices_hz.size(); ++i)
                   s += (i ? "," : "") + std::to_string(d.bandwidth_choices_hz[i]);
                 return s;
               },
               [&d](const std::string& s) {
                 d.bandwidth_choices_hz.clear();
                 std::stringstream ss(s);
                 for (std::string tok; std::getline(ss, tok, ',');)
                   d.bandwidth_choices_hz.push_back(detail::parse_number<int>("degrade.bandwidths_hz", detail::trim(tok)));
               }});
  f.push_back(num("degrade", "packet_loss_prob", d.packet_loss_prob));
  f.push_back(range("degrade", "packet_loss_rate", d.packet_loss_rate_range));
  f.push_back(num("degrade", "packet_ms", d.packet_ms));
  f.push_back(num("degrade", "interference_prob_sr", d.interference_prob_sr));
  f.push_back(range("degrade", "sir_db_sr", d.sir_db_range_sr));
  f.push_back(num("degrade", "interference_prob_tse", d.interference_prob_tse));
  f.push_back(range("degrade", "sir_db_tse", d.sir_db_range_tse));

  f.push_back(num("codec", "semantic_size", codec.semantic_size));
  f.push_back(num("codec", "global_size", codec.global_size));
  f.push_back(num("codec", "bands", codec.bands));
  f.push_back(num("codec", "seed", codec.seed));

  f.push_back(num("encoder", "layers", encoder.layers));
  f.push_back(num("encoder", "width", encoder.width));
  f.push_back(num("encoder", "heads", encoder.heads));
  f.push_back(num("encoder", "seed", encoder.seed));

  f.push_back(num("model", "layers", model.layers));
  f.push_back(num("model", "heads", model.heads));
  f.push_back(num("model", "hidden", model.hidden));
  f.push_back(num("model", "ffn_dim", model.ffn_dim));
  f.push_back(num("model", "max_seq_len", model.max_seq_len));
  f.push_back(num("model", "rope_base", model.rope_base));
  f.push_back(num("model", "norm_eps", model.norm_eps));
  f.push_back(num("model", "seed", model_seed));

  auto& t = train;
  f.push_back(num("train", "epochs", t.epochs));
  f.push_back(num("train", "peak_lr", t.peak_lr));
  f.push_back(num("train", "warmup_steps", t.warmup_steps));
  f.push_back(num("train", "epoch_decay", t.epoch_decay));
  f.push_back(num("train", "beta1", t.beta1));
  f.push_back(num("train", "beta2", t.beta2));
  f.push_back(num("train", "adam_eps", t.adam_eps));
  f.push_back(num("train", "weight_decay", t.weight_decay));
  f.push_back(num("train", "grad_clip", t.grad_clip));
  f.push_back(num("train", "batch_size", t.batch_size));
  f.push_back(num("train", "mode_sr", t.mode_mix[0]));
  f.push_back(num("train", "mode_tse", t.mode_mix[1]));
  f.push_back(num("train", "mode_rtse", t.mode_mix[2]));
  f.push_back(num("train", "seed", t.seed));
  f.push_back(num("train", "max_steps", t.max_steps));
  f.push_back(num("train", "checkpoint_every", t.checkpoint_every));
  f.push_back(num("train", "segment_sec", t.segment_sec));
  f.push_back(num("train", "canary_every", t.canary_every));

  f.push_back(num("infer", "segment_sec", infer.segment_sec));
  f.push_back({"infer", "sampler", [this] { return infer.sampler; },
               [this](const std::string& s) { infer.sampler = s; }});
  f.push_back(num("infer", "top_k", infer.top_k));
  f.push_back(num("infer", "temperature", infer.temperature));
  f.push_back(num("infer", "extra_tokens", infer.extra_tokens));
  return f;
}

inline std::string RunConfig::to_ini() const {
  auto& self = const_cast<RunConfig&>(*this);
  std::ostringstream o;
  std::string section;
  for (const auto& f : self.fields()) {
    if (f.section != section) {
      if (!section.empty()) o << '\n';
      o << '[' << f.section << "]\n";
      section = f.section;
    }
    o << f.key << " = " << f.get() << '\n';
  }
  return o.str();
}

inline void RunConfig::set(const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw Error("cli", "config override '" + dotted_key + "' must be section.key");
  const std::string sec = dotted_key.substr(0, dot), key = dotted_key.substr(dot + 1);
  for (auto& f : fields())
    if (f.section == sec && f.key == key) {
      f.set(detail::trim(value));
      return;
    }
  throw Error("cli", "unknown config key '" + dotted_key + "'");
}

inline void RunConfig::validate() const {
  degrade.validate();
  train.validate();
  model_config().validate();
  if (codec.semantic_size <= 0 || codec.global_size <= 0) throw Error("cli", "codec sizes must be positive");
  if (codec.bands % 16 != 0 || codec.bands <= 0) throw Error("cli", "codec.bands must be a positive multiple of 16");
  if (encoder.bands != codec.bands) throw Error("cli", "encoder and codec band counts differ");
  if (!(infer.segment_sec > 0.0)) throw Error("cli", "infer.segment_sec must be positive");
  (void)infer.make_sampler();
}

inline RunConfig parse_config(std::istream& in, const std::string& source) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error("cli", source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  RunConfig c;
  for (const auto& [sec, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw Error("cli", source + ": key '" + sec + "' outside of any section");
    for (const auto& [key, val] : body) {
      try {
        c.set(sec + "." + key, val.data());
      } catch (const Error& e) {
        throw Error("cli", source + ": " + std::string(e.what()).substr(5));
      }
    }
  }
  c.encoder.bands = c.codec.bands;
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cli", "cannot open config '" + path + "'");
  return parse_config(in, path);
}

}  // namespace tokense
