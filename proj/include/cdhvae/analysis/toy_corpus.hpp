#pragma once

// Synthetic multi-speaker corpus with known factors.
//
// Content: utterance u has an f0 contour and a syllable loudness pattern drawn
// from the seed; the same contents are spoken by every speaker.
// Speaker: a spectral envelope of three formant bumps plus a tilt. Each sample
// is additive harmonic synthesis, harmonic amplitude = envelope(k * f0), which
// is a harmonic excitation filtered by the speaker's envelope.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "cdhvae/core/random.hpp"
#include "cdhvae/features/dataset.hpp"

namespace cdhvae::analysis {

struct ToyCorpusConfig {
  int speakers = 4;
  int utterances = 8;  // per speaker; contents are shared
  double seconds = 1.0;
  int sample_rate = 48000;
  double max_harmonic_hz = 12000.0;
  std::uint64_t seed = 0;

  template <typename V>
  void fields(V&& v) {
    v("speakers", speakers);
    v("utterances", utterances);
    v("seconds", seconds);
    v("sample_rate", sample_rate);
    v("max_harmonic_hz", max_harmonic_hz);
    v("seed", seed);
  }

  void validate() const {
    if (speakers < 1 || utterances < 1) throw ConfigError("toy corpus: speakers and utterances must be >= 1");
    if (!(seconds > 0) || sample_rate < 8000) throw ConfigError("toy corpus: bad duration or sample rate");
  }
};

struct ToySpeaker {
  double formant[3];
  double bandwidth[3];
  double tilt;  // dB per octave above 200 Hz
};

struct ToyContent {
  double f0_base, f0_depth, f0_rate, f0_phase;
  std::vector<double> syllables;  // onset times in seconds
  double syllable_length;
};

inline std::string toy_speaker_name(int s) { return "toy" + std::string(s < 10 ? "0" : "") + std::to_string(s); }

inline std::vector<ToySpeaker> toy_speakers(const ToyCorpusConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "toy-speakers"));
  std::vector<ToySpeaker> out;
  for (int s = 0; s < cfg.speakers; ++s) {
    ToySpeaker sp{};
    sp.formant[0] = rng.uniform(300, 900);
    sp.formant[1] = rng.uniform(1000, 2400);
    sp.formant[2] = rng.uniform(2600, 4200);
    for (double& b : sp.bandwidth) b = rng.uniform(0.12, 0.25);  // in octaves
    sp.tilt = rng.uniform(-9, -3);
    out.push_back(sp);
  }
  return out;
}

inline std::vector<ToyContent> toy_contents(const ToyCorpusConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "toy-contents"));
  std::vector<ToyContent> out;
  for (int u = 0; u < cfg.utterances; ++u) {
    ToyContent c{};
    c.f0_base = rng.uniform(100, 220);
    c.f0_depth = rng.uniform(0.05, 0.25);
    c.f0_rate = rng.uniform(1.0, 4.0);
    c.f0_phase = rng.uniform(0, 2 * std::numbers::pi);
    c.syllable_length = rng.uniform(0.12, 0.25);
    for (double t = rng.uniform(0.0, 0.1); t < cfg.seconds; t += c.syllable_length + rng.uniform(0.02, 0.12))
      c.syllables.push_back(t);
    out.push_back(std::move(c));
  }
  return out;
}

/// Linear amplitude of the speaker's envelope at frequency f.
inline double toy_envelope(const ToySpeaker& sp, double f) {
  const double oct = std::log2(std::max(f, 1.0) / 200.0);
  double db = sp.tilt * std::max(0.0, oct);
  for (int i = 0; i < 3; ++i) {
    const double d = std::log2(f / sp.formant[i]) / sp.bandwidth[i];
    db += 24.0 * std::exp(-0.5 * d * d);
  }
  return std::pow(10.0, db / 20.0);
}

inline std::vector<float> toy_waveform(const ToyCorpusConfig& cfg, const ToySpeaker& sp, const ToyContent& c,
                                       std::uint64_t noise_seed) {
  const int n = static_cast<int>(std::lround(cfg.seconds * cfg.sample_rate));
  const double dt = 1.0 / cfg.sample_rate;
  std::vector<double> f0(static_cast<std::size_t>(n)), gain(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double t = i * dt;
    f0[static_cast<std::size_t>(i)] = c.f0_base * (1 + c.f0_depth * std::sin(2 * std::numbers::pi * c.f0_rate * t + c.f0_phase));
    double g = 0;
    for (double on : c.syllables) {
      const double x = (t - on) / c.syllable_length;
      if (x > 0 && x < 1) g = std::max(g, std::sin(std::numbers::pi * x));
    }
    gain[static_cast<std::size_t>(i)] = g;
  }
  // Harmonic k has phase k * phi, so exp(i k phi) is a running complex
  // power; envelope gains are refreshed every kControl samples.
  constexpr int kControl = 32;
  const int harmonics = static_cast<int>(cfg.max_harmonic_hz / (c.f0_base * (1 - c.f0_depth)));
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  std::vector<double> amp(static_cast<std::size_t>(harmonics) + 1, 0.0);
  double phi = 0;
  for (int i = 0; i < n; ++i) {
    const double f = f0[static_cast<std::size_t>(i)];
    phi = std::fmod(phi + 2 * std::numbers::pi * f * dt, 2 * std::numbers::pi);
    if (i % kControl == 0)
      for (int k = 1; k <= harmonics; ++k)
        amp[static_cast<std::size_t>(k)] = k * f < cfg.max_harmonic_hz ? toy_envelope(sp, k * f) / k : 0.0;
    if (gain[static_cast<std::size_t>(i)] == 0) continue;
    const double c1 = std::cos(phi), s1 = std::sin(phi);
    double ck = 1, sk = 0, acc = 0;
    for (int k = 1; k <= harmonics; ++k) {
      const double cn = ck * c1 - sk * s1;
      sk = sk * c1 + ck * s1;
      ck = cn;
      acc += amp[static_cast<std::size_t>(k)] * sk;
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  double peak = 0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  Rng noise(noise_seed);
  std::vector<float> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] =
        static_cast<float>(0.5 * out[static_cast<std::size_t>(i)] * gain[static_cast<std::size_t>(i)] / peak +
                           1e-3 * noise.normal());
  return w;
}

/// All (speaker, utterance) waveforms, speaker-major.
inline std::vector<features::Waveform> toy_waveforms(const ToyCorpusConfig& cfg) {
  cfg.validate();
  const auto speakers = toy_speakers(cfg);
  const auto contents = toy_contents(cfg);
  std::vector<features::Waveform> out;
  for (int s = 0; s < cfg.speakers; ++s)
    for (int u = 0; u < cfg.utterances; ++u)
      out.push_back({toy_waveform(cfg, speakers[static_cast<std::size_t>(s)], contents[static_cast<std::size_t>(u)],
                                  derive_seed(derive_seed(cfg.seed, "toy-noise"),
                                              static_cast<std::uint64_t>(s * cfg.utterances + u))),
                     cfg.sample_rate});
  return out;
}

inline SpeakerVocab toy_vocab(const ToyCorpusConfig& cfg) {
  std::vector<std::string> names;
  for (int s = 0; s < cfg.speakers; ++s) names.push_back(toy_speaker_name(s));
  return SpeakerVocab(names);
}

/// Write the corpus as <root>/<speaker>/uNN.wav, the layout build_dataset reads.
inline void write_toy_corpus(const std::filesystem::path& root, const ToyCorpusConfig& cfg) {
  const auto waves = toy_waveforms(cfg);
  for (int s = 0; s < cfg.speakers; ++s)
    for (int u = 0; u < cfg.utterances; ++u) {
      const std::string file = "u" + std::string(u < 10 ? "0" : "") + std::to_string(u) + ".wav";
      features::write_wav(root / toy_speaker_name(s) / file, waves[static_cast<std::size_t>(s * cfg.utterances + u)]);
    }
}

/// The same corpus as an in-memory dataset (no files).
inline features::DatasetManifest toy_dataset(const ToyCorpusConfig& cfg, const features::MelParams& mel,
                                             int segment_frames) {
  const auto waves = toy_waveforms(cfg);
  std::vector<features::MelUtterance> utts;
  for (int s = 0; s < cfg.speakers; ++s)
    for (int u = 0; u < cfg.utterances; ++u) {
      features::MelUtterance m;
      m.speaker = SpeakerId(s);
      m.frames = features::extract_log_mel(waves[static_cast<std::size_t>(s * cfg.utterances + u)].samples,
                                           cfg.sample_rate, mel);
      utts.push_back(std::move(m));
    }
  return features::make_dataset(std::move(utts), toy_vocab(cfg), mel, segment_frames);
}

}  // namespace cdhvae::analysis
