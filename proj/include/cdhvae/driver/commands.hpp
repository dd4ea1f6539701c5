#pragma once

// Subcommand bodies behind the command-line tool. Each takes the resolved
// configuration and an output directory, writes its artifacts plus
// resolved_config.cfg there, and reports through `out` (results) and `log`
// (progress). Failures are thrown as cdhvae::Error; the tool maps the kind to
// an exit code.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "cdhvae/analysis/plot.hpp"
#include "cdhvae/analysis/probe.hpp"
#include "cdhvae/analysis/sweep.hpp"
#include "cdhvae/analysis/toy_corpus.hpp"
#include "cdhvae/conversion/conversion.hpp"
#include "cdhvae/driver/run_config.hpp"
#include "cdhvae/features/dataset.hpp"
#include "cdhvae/trainer/trainer.hpp"

namespace cdhvae::driver {

namespace fs = std::filesystem;

struct Context {
  RunConfig config;
  fs::path out_dir;
  LogSink out = [](const std::string& s) { std::cout << s << '\n'; };
  LogSink log = log_to_stderr;
};

namespace detail {

inline void write_resolved(const Context& ctx) {
  io::write_text(ctx.out_dir / "resolved_config.cfg", resolved_text(ctx.config));
}

inline std::string require(const std::string& value, const char* key) {
  if (value.empty()) throw ConfigError(std::string(key) + " is required");
  return value;
}

inline features::DatasetManifest load_manifest(const RunConfig& rc) {
  fs::path p = require(rc.data.manifest, "data.manifest");
  if (fs::is_directory(p)) p /= "manifest.txt";
  if (!fs::exists(p)) throw InputError("manifest not found: " + p.string());
  return features::load_dataset(p);
}

inline trainer::Checkpoint load_checkpoint(const std::string& path, const char* key) {
  fs::path p = require(path, key);
  if (fs::is_directory(p)) p /= "checkpoint.bin";
  if (!fs::exists(p)) throw InputError("checkpoint not found: " + p.string());
  return trainer::load_checkpoint(p);
}

}  // namespace detail

/// Feature extraction over <corpus>/<speaker>/*.wav into a manifest directory.
inline void cmd_prepare(const Context& ctx) {
  const auto& rc = ctx.config;
  const fs::path corpus = detail::require(rc.data.corpus, "data.corpus");
  if (!fs::exists(corpus)) throw InputError("corpus path does not exist: " + corpus.string());
  const auto data = features::build_dataset(corpus, rc.mel, rc.model.segment_frames, ctx.log);
  const auto path = features::save_dataset(data, ctx.out_dir);
  detail::write_resolved(ctx);
  ctx.out("manifest " + path.string());
  ctx.out("segments " + std::to_string(data.size()) + " speakers " + std::to_string(data.vocab.size()) +
          " utterances " + std::to_string(data.utterances.size()));
}

/// Synthetic corpus of <speaker>/uNN.wav files with known speaker factors.
inline void cmd_toy_corpus(const Context& ctx) {
  const auto& toy = ctx.config.toy;
  analysis::write_toy_corpus(ctx.out_dir, toy);
  detail::write_resolved(ctx);
  ctx.out("toy corpus " + ctx.out_dir.string() + ": " + std::to_string(toy.speakers) + " speakers x " +
          std::to_string(toy.utterances) + " utterances");
}

/// Train from scratch, or continue a checkpoint given as `resume`.
inline void cmd_train(Context ctx, const std::string& resume = "") {
  const auto data = detail::load_manifest(ctx.config);
  std::optional<trainer::Checkpoint> from;
  if (!resume.empty()) {
    from = detail::load_checkpoint(resume, "--resume");
    // The architecture is whatever the checkpoint holds.
    ctx.config.model = from->model_config;
    ctx.log("resuming at epoch " + std::to_string(from->epoch) + " of " + std::to_string(ctx.config.train.epochs));
  }
  model::Cdhvae<float> m(ctx.config.model, static_cast<int>(data.vocab.size()),
                         derive_seed(ctx.config.seed, "model"));
  trainer::TrainOptions opt;
  opt.out_dir = ctx.out_dir;
  opt.log = ctx.log;
  opt.mel = data.mel;
  detail::write_resolved(ctx);
  const auto ck = trainer::train(m, data, ctx.config.train, opt, from ? &*from : nullptr);
  const auto& last = ck.history.empty() ? trainer::EpochRecord{} : ck.history.back();
  ctx.out("checkpoint " + (ctx.out_dir / "checkpoint.bin").string());
  ctx.out("epoch " + std::to_string(ck.epoch) + " step " + std::to_string(ck.step) + " loss " +
          format_fixed(last.loss, 4) + " rate " + format_fixed(last.rate, 4) + " distortion " +
          format_fixed(last.distortion, 4));
}

inline void cmd_convert(const Context& ctx) {
  const auto& c = ctx.config.convert;
  const auto ck = detail::load_checkpoint(c.checkpoint, "convert.checkpoint");
  const conversion::Converter conv(ck, c.use_ema);
  const fs::path input = detail::require(c.input, "convert.input");
  if (!fs::exists(input)) throw InputError("input not found: " + input.string());
  features::MelUtterance raw;
  if (features::is_audio_file(input)) {
    const auto wav = features::read_wav(input);
    raw.frames = features::extract_log_mel(wav.samples, wav.sample_rate, conv.mel());
  } else {
    raw = features::read_features(input);
  }
  const auto source = detail::require(c.source, "convert.source");
  const auto target = detail::require(c.target, "convert.target");
  const auto mode = conversion::parse_mode(c.mode);
  const std::uint64_t seed = derive_seed(ctx.config.seed, "convert");
  const auto y = conv.convert(raw, source, target, mode, seed, c.utterance_wise);

  const std::string stem = input.stem().string() + "_to_" + target;
  const auto out_path = ctx.out_dir / (stem + ".mel");
  features::write_features(out_path, y.frames, conv.vocab().id(target));
  conversion::ConversionRecord rec;
  rec.source_speaker = source;
  rec.target_speaker = target;
  rec.mode = c.mode;
  rec.seed = mode == conversion::ConversionMode::Sampled ? seed : 0;
  rec.model_checksum = conversion::hex32(conv.checksum());
  rec.frames = y.frame_count();
  rec.utterance_wise = c.utterance_wise;
  io::write_text(ctx.out_dir / (stem + ".txt"), section_text(rec));
  detail::write_resolved(ctx);
  ctx.out("converted " + out_path.string() + " (" + std::to_string(y.frame_count()) + " frames, " + source + " -> " +
          target + ", " + c.mode + ")");
}

inline void cmd_rd_sweep(const Context& ctx) {
  const auto& rc = ctx.config;
  const auto data = detail::load_manifest(rc);
  analysis::SweepOptions opt;
  opt.held_out_fraction = rc.data.held_out_fraction;
  opt.retry = rc.sweep.retry;
  opt.out_dir = ctx.out_dir;
  opt.log = ctx.log;
  opt.mel = data.mel;
  detail::write_resolved(ctx);
  const auto res = analysis::rd_sweep(data, rc.model, rc.sweep.betas, rc.train, opt);
  const auto files = analysis::emit_rd_plot(res, ctx.out_dir / "rd_plot.svg");

  std::string summary = "dataset_fingerprint\t" + conversion::hex32(res.dataset_fingerprint) + "\n";
  summary += "seed\t" + std::to_string(res.seed) + "\n";
  summary += "train_segments\t" + std::to_string(res.train_segments) + "\n";
  summary += "test_segments\t" + std::to_string(res.test_segments) + "\n";
  summary += "beta\trate\tdistortion\tinvariant_rate\tattempts\ttrain_seed\tcheckpoint\n";
  for (const auto& e : res.entries)
    summary += format_fixed(e.beta, 6) + "\t" + format_fixed(e.point.rate, 6) + "\t" +
               format_fixed(e.point.distortion, 6) + "\t" + format_fixed(e.point.invariant_rate, 6) + "\t" +
               std::to_string(e.attempts) + "\t" + std::to_string(e.train_seed) + "\t" + e.checkpoint_path + "\n";
  io::write_text(ctx.out_dir / "sweep.txt", summary);
  ctx.out(objective::rd_table(res.points()));
  ctx.out("plot " + files.plot.string() + "\ntable " + files.table.string());
  if (analysis::first_rd_violation(res.points()) != std::string::npos)
    ctx.log("warning: rate/distortion are not monotone in beta on this sweep");
}

inline void cmd_probe(const Context& ctx) {
  const auto& p = ctx.config.probe;
  const auto data = detail::load_manifest(ctx.config);
  const auto target = analysis::parse_probe_target(p.target);
  std::optional<model::Cdhvae<float>> m;
  if (target != analysis::ProbeTarget::RawMel) {
    const auto ck = detail::load_checkpoint(p.checkpoint, "probe.checkpoint");
    if (!(ck.vocab == data.vocab)) throw ConfigError("probe: checkpoint and dataset speaker vocabularies differ");
    m.emplace(trainer::instantiate<float>(ck));
  }
  const auto* mp = m ? &*m : nullptr;
  const auto seed = derive_seed(ctx.config.seed, "probe");
  auto opt = p.options;
  const auto report = analysis::speaker_probe(mp, data, target, seed, opt);
  std::string text = analysis::probe_text(report);
  if (p.control) {
    opt.permute_labels = true;
    const auto control = analysis::speaker_probe(mp, data, target, seed, opt);
    text += "control_accuracy\t" + format_fixed(control.accuracy, 6) + "\n";
    text += "control_within_3se_of_chance\t" +
            std::string(std::abs(control.accuracy - control.chance) <= 3 * control.chance_standard_error ? "true"
                                                                                                      : "false") +
            "\n";
  }
  io::write_text(ctx.out_dir / "probe.txt", text);
  detail::write_resolved(ctx);
  ctx.out(text);
}

inline void cmd_bench(const Context& ctx) {
  const auto& b = ctx.config.bench;
  std::optional<trainer::Checkpoint> ck;
  if (!b.checkpoint.empty()) ck = detail::load_checkpoint(b.checkpoint, "bench.checkpoint");
  const auto m = ck ? trainer::instantiate<float>(*ck)
                    : model::Cdhvae<float>(ctx.config.model, 2, derive_seed(ctx.config.seed, "model"));
  const auto& mel = ck ? ck->mel : ctx.config.mel;
  const double seg_seconds = static_cast<double>(m.config().segment_frames) * mel.hop_length / mel.sample_rate;
  const auto seed = derive_seed(ctx.config.seed, "bench");
  const auto sc = conversion::benchmark_scaling(m, b.segments, b.repeats, b.warmup, seg_seconds, seed);
  std::string text = conversion::benchmark_text(sc.single);
  text += "segments_doubled\t" + std::to_string(sc.doubled.segments) + "\n";
  text += "median_seconds_doubled\t" + format_fixed(sc.doubled.median_seconds, 6) + "\n";
  text += "time_ratio\t" + format_fixed(sc.ratio, 4) + "\n";
  const double ratio = sc.ratio;
  text += "linear_within_20pct\t" + std::string(std::abs(ratio - 2.0) <= 0.4 ? "true" : "false") + "\n";
  io::write_text(ctx.out_dir / "bench.txt", text);
  detail::write_resolved(ctx);
  ctx.out(text);
}

}  // namespace cdhvae::driver
