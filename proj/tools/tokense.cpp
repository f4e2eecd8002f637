// tokense: command-line front end.
//
//   tokense synth-corpus --out DIR
//   tokense degrade      --manifest M --mode sr|tse|rtse --out DIR
//   tokense train-codec  --manifest M --out codec.bin
//   tokense train        --manifest M --codec codec.bin --out DIR [--resume ckpt]
//   tokense infer        --model model.bin --codec codec.bin --mode sr|tse|rtse|ss ...
//   tokense eval         --reference-manifest R --estimate-manifest E
//
// Every subcommand accepts --config FILE and repeated --set section.key=value.

#include "tokense/audio.hpp"
#include "tokense/checkpoint.hpp"
#include "tokense/codec.hpp"
#include "tokense/config.hpp"
#include "tokense/degrade.hpp"
#include "tokense/eval.hpp"
#include "tokense/orchestrator.hpp"
#include "tokense/synth.hpp"
#include "tokense/trainer.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace tokense;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  int threads = 0;
  bool deterministic = false;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "INI run config");
  app->add_option("--set", c.overrides, "override a config key: section.key=value");
  app->add_option("--threads", c.threads, "worker threads (default: TOKENSE_THREADS or all cores)");
  app->add_flag("--deterministic", c.deterministic, "serialize all worker pools");
  app->add_option("--seed", c.seed, "run seed (overrides run.seed)");
}

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw Error("cli", "--set expects section.key=value, got '" + o + "'");
    cfg.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  cfg.encoder.bands = cfg.codec.bands;
  cfg.validate();
  return cfg;
}

int threads_for(const Common& c) { return c.deterministic ? 1 : resolve_threads(c.threads); }

void announce(const std::string& cmd, const RunConfig& cfg) {
  std::cout << cmd << ": config_hash=" << hex64(cfg.hash()) << " seed=" << cfg.seed << std::endl;
}

std::string provenance(const RunConfig& cfg, const std::string& extra = {}) {
  std::string s = "tokense config=" + hex64(cfg.hash()) + " seed=" + std::to_string(cfg.seed);
  if (!extra.empty()) s += " " + extra;
  return s;
}

// Looks up key=value in a provenance comment.
std::optional<std::string> comment_field(const std::string& comment, const std::string& key) {
  std::istringstream in(comment);
  for (std::string tok; in >> tok;)
    if (tok.rfind(key + "=", 0) == 0) return tok.substr(key.size() + 1);
  return std::nullopt;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cli", "cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

struct LoadedAssets {
  std::vector<Utterance> clean;
  DegradeAssets assets;
};

LoadedAssets load_assets(const std::string& manifest_path) {
  const Manifest m = load_manifest(manifest_path);
  LoadedAssets a;
  for (const auto& e : m.entries) {
    AudioBuffer buf = read_wav(e.path);
    switch (e.kind) {
      case AssetKind::kClean: a.clean.push_back({e.utterance_id, e.speaker(), std::move(buf)}); break;
      case AssetKind::kNoise: a.assets.noises.push_back(std::move(buf)); break;
      case AssetKind::kRir: a.assets.rirs.push_back(Rir::normalized(std::move(buf.samples))); break;
    }
  }
  if (a.clean.empty()) throw Error("data_io", "manifest '" + manifest_path + "' lists no clean utterances");
  a.assets.speech = a.clean;
  return a;
}

void write_checked(const AudioBuffer& buf, const fs::path& path, const std::string& comment) {
  const auto r = write_wav(buf, path, comment);
  if (r.clamped_samples > 0)
    std::cerr << "warning: " << path.string() << ": " << r.clamped_samples << " samples clamped to [-1, 1]\n";
}

// --- subcommands --------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int per_speaker = 20;
  double seconds = 1.0;
};

int cmd_synth(const Common& c, const SynthArgs& a) {
  const RunConfig cfg = resolve_config(c);
  announce("synth-corpus", cfg);
  const auto corpus = synth::two_timbre_corpus(a.per_speaker, a.seconds, cfg.seed);
  const fs::path dir(a.out);
  fs::create_directories(dir / "wav");
  Manifest m;
  const std::string note = provenance(cfg);
  for (const auto& u : corpus.utterances) {
    const fs::path p = dir / "wav" / (u.id + ".wav");
    write_checked(u.audio, p, note);
    m.entries.push_back({u.id, p, AssetKind::kClean, u.audio.duration_sec()});
  }
  for (std::size_t i = 0; i < corpus.noises.size(); ++i) {
    const std::string id = "noise-" + std::to_string(i);
    const fs::path p = dir / "wav" / (id + ".wav");
    write_checked(corpus.noises[i], p, note);
    m.entries.push_back({id, p, AssetKind::kNoise, corpus.noises[i].duration_sec()});
  }
  for (std::size_t i = 0; i < corpus.rirs.size(); ++i) {
    const std::string id = "rir-" + std::to_string(i);
    const fs::path p = dir / "wav" / (id + ".wav");
    const AudioBuffer b(corpus.rirs[i].taps);
    write_checked(b, p, note);
    m.entries.push_back({id, p, AssetKind::kRir, b.duration_sec()});
  }
  write_manifest(m, dir / "manifest.tsv");
  std::cout << "wrote " << m.size() << " entries to " << (dir / "manifest.tsv").string() << "\n";
  return 0;
}

struct DegradeArgs {
  std::string manifest, out, mode = "sr";
};

int cmd_degrade(const Common& c, const DegradeArgs& a) {
  const RunConfig cfg = resolve_config(c);
  announce("degrade", cfg);
  const Mode mode = parse_mode(a.mode);
  const LoadedAssets in = load_assets(a.manifest);
  const fs::path dir(a.out);
  fs::create_directories(dir / "wav");
  const std::size_t n = in.clean.size();
  std::vector<SimulatedTriple> triples(n);
  const Rng root(cfg.seed);
  parallel_for(n, threads_for(c), [&](std::size_t i) {
    const std::uint64_t seed = root.split(i).next_u64();
    triples[i] = simulate(in.clean[i], in.assets, mode, cfg.degrade, seed);
  });
  Manifest degraded, target, reference;
  std::ofstream report(dir / "report.tsv", std::ios::trunc);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& u = in.clean[i];
    const auto& t = triples[i];
    const std::string note = provenance(cfg, "mode=" + std::string(mode_name(mode)));
    const fs::path pd = dir / "wav" / (u.id + ".degraded.wav");
    const fs::path pt = dir / "wav" / (u.id + ".target.wav");
    write_checked(t.degraded, pd, note);
    write_checked(t.target, pt, note);
    degraded.entries.push_back({u.id, pd, AssetKind::kClean, t.degraded.duration_sec()});
    target.entries.push_back({u.id, pt, AssetKind::kClean, t.target.duration_sec()});
    if (t.reference) {
      const fs::path pr = dir / "wav" / (u.id + ".reference.wav");
      write_checked(*t.reference, pr, note);
      reference.entries.push_back({u.id, pr, AssetKind::kClean, t.reference->duration_sec()});
    }
    report << u.id << '\t' << t.report.rng_seed << '\t' << t.report.to_string() << '\n';
  }
  write_manifest(degraded, dir / "degraded.tsv");
  write_manifest(target, dir / "target.tsv");
  if (!reference.empty()) write_manifest(reference, dir / "reference.tsv");
  std::cout << "degraded " << n << " utterances into " << dir.string() << "\n";
  return 0;
}

struct TrainCodecArgs {
  std::string manifest, out;
};

int cmd_train_codec(const Common& c, const TrainCodecArgs& a) {
  const RunConfig cfg = resolve_config(c);
  announce("train-codec", cfg);
  const LoadedAssets in = load_assets(a.manifest);
  std::vector<AudioBuffer> corpus;
  for (const auto& u : in.clean) corpus.push_back(u.audio);
  Codec codec = Codec::train(corpus, cfg.codec.semantic_size, cfg.codec.global_size, cfg.codec.seed, cfg.codec.bands);
  codec.set_config_hash(cfg.hash());
  codec.save(a.out);
  std::cout << "codec fingerprint=" << hex64(codec.fingerprint()) << " written to " << a.out << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest, codec, out, resume;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  const RunConfig cfg = resolve_config(c);
  announce("train", cfg);
  const Codec codec = Codec::load(a.codec);
  const LoadedAssets in = load_assets(a.manifest);
  TrainingData data{in.clean, in.assets, cfg.degrade};
  const ModelConfig mc = cfg.model_config();
  if (codec.semantic_size() != mc.semantic_vocab || codec.global_size() != mc.global_vocab)
    throw Error("cli", "codec codebook sizes (" + std::to_string(codec.semantic_size()) + ", " +
                           std::to_string(codec.global_size()) + ") differ from [codec] config");

  TrainState state;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    if (ck.meta.codec_hash != codec.fingerprint())
      throw Error("trainer", "resume checkpoint was trained with a different codec");
    if (ck.meta.config_hash != cfg.hash())
      throw Error("trainer", "resume checkpoint was produced by a different config (" + hex64(ck.meta.config_hash) +
                                 ")");
    state = std::move(ck.state);
    std::cout << "resumed from " << a.resume << " at step " << state.step << "\n";
  } else {
    state = TrainState(LanguageModel<float>(mc, cfg.model_seed),
                       EncoderStack(cfg.encoder, mc.hidden, cfg.model_seed ^ 0xADA9ULL));
  }
  const auto pc = param_count(mc);
  std::cout << "params total=" << pc.total << " non_embedding=" << pc.non_embedding << "\n";

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const CheckpointMeta meta{cfg.hash(), codec.fingerprint(), cfg.train.seed};
  std::ofstream log(dir / "train.log", a.resume.empty() ? std::ios::trunc : std::ios::app);
  const FrozenSnapshot frozen = snapshot(state.encoder.frozen);
  Trainer trainer(state, codec, data, cfg.train, threads_for(c));
  trainer.run(
      trainer.total_steps(),
      [&](const StepLog& l) {
        const std::string line = l.to_string();
        std::cout << line << "\n";
        log << line << "\n";
      },
      [&](std::int64_t step) {
        save_checkpoint((dir / ("ckpt-" + std::to_string(step) + ".bin")).string(), state, meta);
      });
  if (!freeze_check(state.encoder, frozen)) throw Error("trainer", "frozen encoder parameters changed");
  save_checkpoint((dir / "model.bin").string(), state, meta);
  std::cout << "steps=" << state.step << " rejected=" << state.rejected_steps << " model written to "
            << (dir / "model.bin").string() << "\n";
  return 0;
}

struct InferArgs {
  std::string model, codec, mode, input, reference, output, input_manifest, reference_manifest, output_dir;
  std::string sampler;
  bool force = false;
};

int cmd_infer(const Common& c, const InferArgs& a) {
  RunConfig cfg = resolve_config(c);
  if (!a.sampler.empty()) cfg.infer.sampler = a.sampler;
  cfg.validate();
  announce("infer", cfg);
  const bool ss = a.mode == "ss";
  const Mode mode = ss ? Mode::kSR : parse_mode(a.mode);
  const bool needs_ref = !ss && mode != Mode::kSR;
  const bool batch = !a.input_manifest.empty();
  if (needs_ref && !batch && a.reference.empty())
    throw Error("cli", "--reference is required for --mode " + a.mode);
  if (needs_ref && batch && a.reference_manifest.empty())
    throw Error("cli", "--reference-manifest is required for --mode " + a.mode + " with --input-manifest");
  if (!batch && a.input.empty()) throw Error("cli", "--input (or --input-manifest) is required");
  if (!batch && a.output.empty()) throw Error("cli", "--output is required");
  if (batch && a.output_dir.empty()) throw Error("cli", "--output-dir is required with --input-manifest");
  if (a.model.empty()) throw Error("cli", "--model is required");
  if (a.codec.empty()) throw Error("cli", "--codec is required");

  const Codec codec = Codec::load(a.codec);
  const Checkpoint ck = load_checkpoint(a.model);
  if (ck.meta.codec_hash != codec.fingerprint() && !a.force)
    throw Error("cli", "model was trained with codec " + hex64(ck.meta.codec_hash) + " but --codec is " +
                           hex64(codec.fingerprint()) + " (use --force to override)");
  InferOptions opt;
  opt.sampler = cfg.infer.make_sampler();
  opt.seed = cfg.seed;
  opt.segment_sec = cfg.infer.segment_sec;
  opt.extra_tokens = cfg.infer.extra_tokens;
  opt.threads = threads_for(c);
  const Pipeline pipe(ck.state.model, codec, ck.state.encoder, opt);
  const std::string note = provenance(cfg, "codec=" + hex64(codec.fingerprint()) + " model=" +
                                               hex64(file_hash(a.model)) + " mode=" + a.mode);

  auto warn = [](const StageOutput& s, const std::string& id) {
    for (const auto& w : s.warnings()) std::cerr << "warning: " << id << ": " << w << "\n";
  };
  auto run_one = [&](const std::string& id, const AudioBuffer& in, const AudioBuffer* ref,
                     const fs::path& out) -> std::vector<std::pair<std::string, fs::path>> {
    if (ss) {
      const SsOutput r = pipe.run_ss(in);
      warn(r.sr, id);
      warn(r.speaker1, id);
      warn(r.speaker2, id);
      fs::path p1 = out, p2 = out;
      p1.replace_extension(".spk1" + out.extension().string());
      p2.replace_extension(".spk2" + out.extension().string());
      write_checked(r.speaker1.audio, p1, note);
      write_checked(r.speaker2.audio, p2, note);
      return {{"spk1", p1}, {"spk2", p2}};
    }
    StageOutput r = mode == Mode::kSR    ? pipe.run_sr(in)
                    : mode == Mode::kTSE ? pipe.run_tse(in, *ref)
                                         : pipe.run_rtse(in, *ref);
    warn(r, id);
    write_checked(r.audio, out, note);
    return {{"", out}};
  };

  if (!batch) {
    const AudioBuffer in = read_wav(a.input);
    std::optional<AudioBuffer> ref;
    if (needs_ref) ref = read_wav(a.reference);
    for (const auto& [tag, p] : run_one("input", in, ref ? &*ref : nullptr, a.output))
      std::cout << "wrote " << p.string() << "\n";
    return 0;
  }

  const Manifest inputs = load_manifest(a.input_manifest);
  std::map<std::string, fs::path> refs;
  if (needs_ref)
    for (const auto& e : load_manifest(a.reference_manifest).entries) refs[e.utterance_id] = e.path;
  const fs::path dir(a.output_dir);
  fs::create_directories(dir / "wav");
  std::map<std::string, Manifest> outs;
  for (const auto& e : inputs.entries) {
    const AudioBuffer in = read_wav(e.path);
    std::optional<AudioBuffer> ref;
    if (needs_ref) {
      auto it = refs.find(e.utterance_id);
      if (it == refs.end()) throw Error("cli", "no reference for utterance '" + e.utterance_id + "'");
      ref = read_wav(it->second);
    }
    for (const auto& [tag, p] : run_one(e.utterance_id, in, ref ? &*ref : nullptr, dir / "wav" / (e.utterance_id + ".wav")))
      outs[tag].entries.push_back({e.utterance_id, p, AssetKind::kClean, e.duration_sec});
  }
  for (const auto& [tag, m] : outs) {
    const fs::path mp = dir / (tag.empty() ? std::string("estimates.tsv") : "estimates." + tag + ".tsv");
    write_manifest(m, mp);
    std::cout << "wrote " << m.size() << " outputs, manifest " << mp.string() << "\n";
  }
  return 0;
}

struct EvalArgs {
  std::string reference_manifest, estimate_manifest, codec, model, output;
  bool force = false;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const RunConfig cfg = resolve_config(c);
  announce("eval", cfg);
  std::optional<Codec> codec;
  if (!a.codec.empty()) codec = Codec::load(a.codec);
  std::optional<Checkpoint> model;
  std::uint64_t model_hash = 0;
  if (!a.model.empty()) {
    model = load_checkpoint(a.model);
    model_hash = file_hash(a.model);
  }
  const FrozenEncoder encoder = model ? model->state.encoder.frozen : FrozenEncoder(cfg.encoder);

  const Manifest refs = load_manifest(a.reference_manifest);
  const Manifest ests = load_manifest(a.estimate_manifest);
  std::map<std::string, fs::path> by_id;
  for (const auto& e : ests.entries) by_id[e.utterance_id] = e.path;

  std::vector<std::pair<std::string, std::pair<fs::path, fs::path>>> pairs;
  for (const auto& r : refs.entries) {
    auto it = by_id.find(r.utterance_id);
    if (it == by_id.end()) throw Error("eval", "estimate manifest has no entry for '" + r.utterance_id + "'");
    pairs.push_back({r.utterance_id, {r.path, it->second}});
  }
  for (const auto& [id, paths] : pairs) {
    const std::string comment = read_wav_comment(paths.second);
    if (codec) {
      const auto h = comment_field(comment, "codec");
      if (h && *h != hex64(codec->fingerprint()) && !a.force)
        throw Error("eval", "'" + paths.second.string() + "' was produced with codec " + *h + ", not " +
                                hex64(codec->fingerprint()) + " (use --force)");
    }
    if (model) {
      const auto h = comment_field(comment, "model");
      if (h && *h != hex64(model_hash) && !a.force)
        throw Error("eval", "'" + paths.second.string() + "' was produced with model " + *h + ", not " +
                                hex64(model_hash) + " (use --force)");
    }
  }

  MetricReport report;
  report.rows.resize(pairs.size());
  parallel_for(pairs.size(), threads_for(c), [&](std::size_t i) {
    const auto& [id, paths] = pairs[i];
    report.rows[i] = evaluate_pair(id, read_wav(paths.first), read_wav(paths.second), &encoder,
                                   codec ? &*codec : nullptr);
  });
  const std::string text = report.to_string();
  std::cout << text;
  if (!a.output.empty()) {
    std::ofstream out(a.output, std::ios::trunc);
    if (!out) throw Error("eval", "cannot write '" + a.output + "'");
    out << text;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tokense: token-based speech enhancement toolkit"};
  app.require_subcommand(1);
  Common common;

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth-corpus", "write a synthetic two-timbre corpus and its manifest");
  add_common(synth, common);
  synth->add_option("--out", synth_args.out, "output directory")->required();
  synth->add_option("--per-speaker", synth_args.per_speaker, "utterances per speaker");
  synth->add_option("--seconds", synth_args.seconds, "utterance duration");

  DegradeArgs degrade_args;
  auto* degrade = app.add_subcommand("degrade", "simulate degraded/target/reference triples");
  add_common(degrade, common);
  degrade->add_option("--manifest", degrade_args.manifest, "asset manifest")->required();
  degrade->add_option("--mode", degrade_args.mode, "sr | tse | rtse");
  degrade->add_option("--out", degrade_args.out, "output directory")->required();

  TrainCodecArgs codec_args;
  auto* train_codec = app.add_subcommand("train-codec", "fit the codec codebooks");
  add_common(train_codec, common);
  train_codec->add_option("--manifest", codec_args.manifest, "asset manifest")->required();
  train_codec->add_option("--out", codec_args.out, "codec checkpoint path")->required();

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "train the language model and adapter");
  add_common(train, common);
  train->add_option("--manifest", train_args.manifest, "asset manifest")->required();
  train->add_option("--codec", train_args.codec, "codec checkpoint")->required();
  train->add_option("--out", train_args.out, "output directory")->required();
  train->add_option("--resume", train_args.resume, "checkpoint to resume from");

  InferArgs infer_args;
  auto* infer = app.add_subcommand("infer", "run SR, TSE, rTSE or SS inference");
  add_common(infer, common);
  infer->add_option("--model", infer_args.model, "model checkpoint");
  infer->add_option("--codec", infer_args.codec, "codec checkpoint");
  infer->add_option("--mode", infer_args.mode, "sr | tse | rtse | ss")
      ->required()
      ->check(CLI::IsMember({"sr", "tse", "rtse", "ss"}));
  infer->add_option("--input", infer_args.input, "input WAV");
  infer->add_option("--reference", infer_args.reference, "reference WAV (tse, rtse)");
  infer->add_option("--output", infer_args.output, "output WAV (ss writes .spk1/.spk2)");
  infer->add_option("--input-manifest", infer_args.input_manifest, "manifest of inputs");
  infer->add_option("--reference-manifest", infer_args.reference_manifest, "manifest of references, by id");
  infer->add_option("--output-dir", infer_args.output_dir, "output directory for manifest inputs");
  infer->add_option("--sampler", infer_args.sampler, "greedy | topk")->check(CLI::IsMember({"greedy", "topk"}));
  infer->add_flag("--force", infer_args.force, "ignore codec/model hash mismatch");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "score estimates against references");
  add_common(eval, common);
  eval->add_option("--reference-manifest", eval_args.reference_manifest, "reference manifest")->required();
  eval->add_option("--estimate-manifest", eval_args.estimate_manifest, "estimate manifest")->required();
  eval->add_option("--codec", eval_args.codec, "codec checkpoint (enables token accuracy)");
  eval->add_option("--model", eval_args.model, "model checkpoint (encoder for speaker similarity)");
  eval->add_option("--output", eval_args.output, "report path");
  eval->add_flag("--force", eval_args.force, "ignore codec/model hash mismatch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(common, synth_args);
    if (degrade->parsed()) return cmd_degrade(common, degrade_args);
    if (train_codec->parsed()) return cmd_train_codec(common, codec_args);
    if (train->parsed()) return cmd_train(common, train_args);
    if (infer->parsed()) return cmd_infer(common, infer_args);
    if (eval->parsed()) return cmd_eval(common, eval_args);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
