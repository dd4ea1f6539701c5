#pragma once

// Voice conversion. Levels l <= K come from the source posterior (encoder
// reads y_s); levels l > K come from the prior under y_t, which also drives
// the decoder. Mean mode threads posterior and prior means through the
// top-down chain, so it involves no randomness at all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "cdhvae/core/kvconfig.hpp"
#include "cdhvae/trainer/checkpoint.hpp"

namespace cdhvae::conversion {

enum class ConversionMode { Mean, Sampled };

inline std::string mode_name(ConversionMode m) { return m == ConversionMode::Mean ? "mean" : "sampled"; }

inline ConversionMode parse_mode(const std::string& s) {
  if (s == "mean") return ConversionMode::Mean;
  if (s == "sampled") return ConversionMode::Sampled;
  throw ConfigError("conversion mode must be mean or sampled, got '" + s + "'");
}

struct ConversionRequest {
  features::MelUtterance source;  // model-space (normalized) frames
  SpeakerId source_speaker;
  SpeakerId target_speaker;
  ConversionMode mode = ConversionMode::Mean;
  std::uint64_t seed = 0;       // sampled mode only
  bool utterance_wise = false;  // one pass over the whole utterance instead of T-frame segments
};

template <typename T>
struct ConvertedBatch {
  Tensor<T> output;         // (N, 1, 80, W) decoder mean
  model::LatentHierarchy<T> z;
};

/// One forward pass over a batch of source segments of width `frames`
/// (0 = the model's segment length).
template <typename T>
ConvertedBatch<T> convert_batch(const model::Cdhvae<T>& m, const Tensor<T>& x, SpeakerId ys, SpeakerId yt,
                                ConversionMode mode = ConversionMode::Mean, std::uint64_t seed = 0,
                                int frames = 0) {
  const auto& cfg = m.config();
  const int n = x.shape().n;
  const auto src = m.repeat(ys, n), dst = m.repeat(yt, n);
  m.check_speakers(src, n);
  m.check_speakers(dst, n);
  model::ForwardRequest<T> req;
  req.x = &x;
  req.encoder_speakers = src;
  req.decoder_speakers = dst;
  req.frames = frames;
  const bool mean = mode == ConversionMode::Mean;
  for (int l = 1; l <= cfg.groups; ++l) {
    if (l <= cfg.split) req.sources.push_back(mean ? model::LatentSource::PosteriorMean : model::LatentSource::PosteriorSample);
    else req.sources.push_back(mean ? model::LatentSource::PriorMean : model::LatentSource::PriorSample);
  }
  Rng rng(derive_seed(seed, "convert"));
  req.rng = &rng;
  ad::Tape<T> tape(false);
  const auto trace = m.forward(tape, req);
  ConvertedBatch<T> out;
  out.output = trace.output.value();
  out.z.split = cfg.split;
  for (const auto& lt : trace.levels) out.z.groups.push_back(lt.z.value());
  return out;
}

inline features::MelSegment convert_segment(const model::Cdhvae<float>& m, const features::MelSegment& x, SpeakerId ys,
                                            SpeakerId yt, ConversionMode mode = ConversionMode::Mean,
                                            std::uint64_t seed = 0) {
  if (x.frames.shape() != m.config().input_shape(1))
    throw InputError("convert_segment: segment " + x.frames.shape().str() + " does not match " +
                     m.config().input_shape(1).str());
  features::MelSegment out;
  out.speaker = yt;
  out.frames = convert_batch(m, x.frames, ys, yt, mode, seed).output;
  return out;
}

/// Segment, convert each segment, concatenate and trim; frame count is kept.
/// Segment i of a sampled conversion draws from sub-seed i.
inline features::MelUtterance convert_utterance(const model::Cdhvae<float>& m, const ConversionRequest& req) {
  features::check_mel_matrix(req.source.frames, "convert_utterance");
  const auto& cfg = m.config();
  if (req.utterance_wise) {
    // Edge-pad to a width the scales divide, convert in one pass, trim.
    const int frames = req.source.frame_count();
    const int unit = 1 << cfg.scales;
    const int width = (frames + unit - 1) / unit * unit;
    Tensor<float> x(cfg.input_shape(1, width));
    for (int b = 0; b < features::kMelBins; ++b)
      for (int t = 0; t < width; ++t) x.at(0, 0, b, t) = req.source.frames.at(0, 0, b, std::min(t, frames - 1));
    const auto y = convert_batch(m, x, req.source_speaker, req.target_speaker, req.mode, req.seed, width).output;
    features::MelUtterance out;
    out.speaker = req.target_speaker;
    out.source_id = req.source.source_id;
    out.frames = Tensor<float>(Shape{1, 1, features::kMelBins, frames});
    for (int b = 0; b < features::kMelBins; ++b)
      for (int t = 0; t < frames; ++t) out.frames.at(0, 0, b, t) = y.at(0, 0, b, t);
    return out;
  }
  auto seg = features::segment_utterance(req.source, cfg.segment_frames);
  std::vector<features::MelSegment> converted;
  for (std::size_t i = 0; i < seg.segments.size(); ++i)
    converted.push_back(convert_segment(m, seg.segments[i], req.source_speaker, req.target_speaker, req.mode,
                                        derive_seed(req.seed, static_cast<std::uint64_t>(i))));
  auto out = features::concat_segments(converted, seg.pad_lengths);
  out.speaker = req.target_speaker;
  out.source_id = req.source.source_id;
  return out;
}

/// A checkpoint bound to its vocabulary and normalization; converts raw log-mel.
class Converter {
 public:
  explicit Converter(const trainer::Checkpoint& ck, bool use_ema = false)
      : model_(trainer::instantiate<float>(ck, use_ema)),
        vocab_(ck.vocab),
        norm_(ck.normalization),
        mel_(ck.mel),
        checksum_(trainer::checkpoint_checksum(ck)) {
    if (static_cast<int>(vocab_.size()) != model_.vocab_size())
      throw ConfigError("checkpoint vocabulary has " + std::to_string(vocab_.size()) + " speakers, model expects " +
                        std::to_string(model_.vocab_size()));
  }

  const model::Cdhvae<float>& model() const noexcept { return model_; }
  const SpeakerVocab& vocab() const noexcept { return vocab_; }
  const features::Normalization& normalization() const noexcept { return norm_; }
  const features::MelParams& mel() const noexcept { return mel_; }
  std::uint32_t checksum() const noexcept { return checksum_; }

  /// Checks that `other` is the vocabulary this model was trained on.
  void require_vocab(const SpeakerVocab& other) const {
    if (other.size() != vocab_.size())
      throw ConfigError("vocabulary size " + std::to_string(other.size()) + " differs from the checkpoint's " +
                        std::to_string(vocab_.size()));
    if (!(other == vocab_)) throw ConfigError("speaker vocabulary differs from the checkpoint's");
  }

  /// Raw log-mel in, raw log-mel out; speakers by name.
  features::MelUtterance convert(const features::MelUtterance& raw, const std::string& source,
                                 const std::string& target, ConversionMode mode = ConversionMode::Mean,
                                 std::uint64_t seed = 0, bool utterance_wise = false) const {
    ConversionRequest req;
    req.source = raw;
    req.source.frames = norm_.normalize(raw.frames);
    req.source_speaker = vocab_.id(source);
    req.target_speaker = vocab_.id(target);
    req.mode = mode;
    req.seed = seed;
    req.utterance_wise = utterance_wise;
    auto out = convert_utterance(model_, req);
    out.frames = norm_.denormalize(out.frames);
    return out;
  }

 private:
  model::Cdhvae<float> model_;
  SpeakerVocab vocab_;
  features::Normalization norm_;
  features::MelParams mel_;
  std::uint32_t checksum_;
};

struct ConversionRecord {
  std::string source_speaker;
  std::string target_speaker;
  std::string mode = "mean";
  std::uint64_t seed = 0;
  std::string model_checksum;  // crc32 of the checkpoint file, hex
  int frames = 0;
  bool utterance_wise = false;

  template <typename V>
  void fields(V&& v) {
    v("source_speaker", source_speaker);
    v("target_speaker", target_speaker);
    v("mode", mode);
    v("seed", seed);
    v("model_checksum", model_checksum);
    v("frames", frames);
    v("utterance_wise", utterance_wise);
  }
};

inline std::string hex32(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

// ---- timing ----

struct BenchmarkReport {
  int segments = 0;
  int repeats = 0;
  double mean_seconds = 0;    // per run over all segments
  double stddev_seconds = 0;  // across repeats
  double median_seconds = 0;
  double seconds_per_segment = 0;
  double seconds_per_speech_second = 0;
  static constexpr double kReferenceSecondsPerSegment = 0.172;  // reference figure from other hardware
};

namespace detail {

inline std::vector<features::MelSegment> bench_inputs(const model::Cdhvae<float>& m, int segments, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "bench-input"));
  std::vector<features::MelSegment> inputs;
  for (int i = 0; i < segments; ++i) {
    features::MelSegment s;
    s.speaker = SpeakerId(0);
    s.frames = Tensor<float>(m.config().input_shape(1));
    for (auto& v : s.frames.values()) v = static_cast<float>(rng.uniform());
    inputs.push_back(std::move(s));
  }
  return inputs;
}

/// Seconds to convert the first `count` inputs, one pass each.
inline double time_conversion(const model::Cdhvae<float>& m, const std::vector<features::MelSegment>& inputs,
                              int count) {
  const SpeakerId ys(0), yt(m.vocab_size() > 1 ? 1 : 0);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < count; ++i) (void)convert_segment(m, inputs[static_cast<std::size_t>(i)], ys, yt);
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline BenchmarkReport summarize(std::vector<double> times, int segments, double segment_seconds) {
  BenchmarkReport rep;
  rep.segments = segments;
  rep.repeats = static_cast<int>(times.size());
  const double n = static_cast<double>(times.size());
  double sum = 0;
  for (double t : times) sum += t;
  rep.mean_seconds = sum / n;
  double sq = 0;
  for (double t : times) sq += (t - rep.mean_seconds) * (t - rep.mean_seconds);
  rep.stddev_seconds = times.size() > 1 ? std::sqrt(sq / (n - 1)) : 0.0;
  std::sort(times.begin(), times.end());
  const std::size_t h = times.size() / 2;
  rep.median_seconds = times.size() % 2 ? times[h] : 0.5 * (times[h - 1] + times[h]);
  rep.seconds_per_segment = rep.median_seconds / segments;
  if (segment_seconds > 0) rep.seconds_per_speech_second = rep.seconds_per_segment / segment_seconds;
  return rep;
}

}  // namespace detail

/// Wall-clock of converting `segments` random segments one pass each, after
/// `warmup` untimed runs. Latency does not depend on content: every segment
/// costs one decoder pass.
inline BenchmarkReport benchmark_conversion(const model::Cdhvae<float>& m, int segments, int repeats = 5,
                                            int warmup = 1, double segment_seconds = 0, std::uint64_t seed = 0) {
  if (segments < 1 || repeats < 1) throw ConfigError("bench: segments and repeats must be >= 1");
  const auto inputs = detail::bench_inputs(m, segments, seed);
  for (int i = 0; i < warmup; ++i) detail::time_conversion(m, inputs, segments);
  std::vector<double> times;
  for (int r = 0; r < repeats; ++r) times.push_back(detail::time_conversion(m, inputs, segments));
  return detail::summarize(std::move(times), segments, segment_seconds);
}

struct ScalingReport {
  BenchmarkReport single, doubled;
  double ratio = 0;  // doubled / single, from the medians
};

/// N against 2N segments with the two sizes interleaved (and their order
/// alternated) in every repeat, so drift in machine speed hits both alike.
inline ScalingReport benchmark_scaling(const model::Cdhvae<float>& m, int segments, int repeats = 5, int warmup = 1,
                                       double segment_seconds = 0, std::uint64_t seed = 0) {
  if (segments < 1 || repeats < 1) throw ConfigError("bench: segments and repeats must be >= 1");
  const auto inputs = detail::bench_inputs(m, 2 * segments, seed);
  for (int i = 0; i < warmup; ++i) detail::time_conversion(m, inputs, 2 * segments);
  std::vector<double> one, two;
  for (int r = 0; r < repeats; ++r) {
    if (r % 2 == 0) {
      one.push_back(detail::time_conversion(m, inputs, segments));
      two.push_back(detail::time_conversion(m, inputs, 2 * segments));
    } else {
      two.push_back(detail::time_conversion(m, inputs, 2 * segments));
      one.push_back(detail::time_conversion(m, inputs, segments));
    }
  }
  ScalingReport rep;
  rep.single = detail::summarize(std::move(one), segments, segment_seconds);
  rep.doubled = detail::summarize(std::move(two), 2 * segments, segment_seconds);
  rep.ratio = rep.doubled.median_seconds / rep.single.median_seconds;
  return rep;
}

inline std::string benchmark_text(const BenchmarkReport& r) {
  std::string s;
  s += "segments\t" + std::to_string(r.segments) + "\n";
  s += "repeats\t" + std::to_string(r.repeats) + "\n";
  s += "mean_seconds\t" + format_fixed(r.mean_seconds, 6) + "\n";
  s += "stddev_seconds\t" + format_fixed(r.stddev_seconds, 6) + "\n";
  s += "median_seconds\t" + format_fixed(r.median_seconds, 6) + "\n";
  s += "seconds_per_segment\t" + format_fixed(r.seconds_per_segment, 6) + "\n";
  s += "seconds_per_speech_second\t" + format_fixed(r.seconds_per_speech_second, 6) + "\n";
  s += "reference_seconds_per_segment\t" + format_fixed(BenchmarkReport::kReferenceSecondsPerSegment, 3) +
       "\t(different hardware; not compared)\n";
  s += "decoding\tsingle non-autoregressive pass per segment\n";
  return s;
}

}  // namespace cdhvae::conversion
