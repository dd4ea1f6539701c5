#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "cdhvae/core/error.hpp"
#include "cdhvae/core/tensor.hpp"

namespace cdhvae::features {

/// Number of mel bins of every feature matrix.
inline constexpr int kMelBins = 80;

/// STFT and filterbank settings. Frames are centred on t * hop + hop / 2, so a
/// waveform of n samples yields ceil(n / hop) frames.
struct MelParams {
  int sample_rate = 48000;
  int fft_size = 4096;
  int hop_length = 600;   // 12.5 ms
  int win_length = 2400;  // 50 ms
  int n_mels = kMelBins;
  double fmin = 0.0;
  double fmax = 24000.0;
  double log_floor = 1e-5;

  friend bool operator==(const MelParams&, const MelParams&) = default;

  template <typename V>
  void fields(V&& v) {
    v("sample_rate", sample_rate);
    v("fft_size", fft_size);
    v("hop_length", hop_length);
    v("win_length", win_length);
    v("n_mels", n_mels);
    v("fmin", fmin);
    v("fmax", fmax);
    v("log_floor", log_floor);
  }

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("mel: sample_rate must be positive");
    if (n_mels != kMelBins) throw ConfigError("mel: n_mels must be " + std::to_string(kMelBins));
    if (hop_length <= 0 || win_length <= 0) throw ConfigError("mel: hop/window must be positive");
    if (fft_size < win_length) throw ConfigError("mel: fft_size must be >= win_length");
    if (fmin < 0 || fmax <= fmin || fmax > sample_rate / 2.0 + 1e-9) throw ConfigError("mel: bad frequency range");
    if (!(log_floor > 0)) throw ConfigError("mel: log_floor must be positive");
  }
};

inline int next_pow2(int v) {
  int p = 1;
  while (p < v) p <<= 1;
  return p;
}

/// Defaults for a given rate: 12.5 ms hop, 50 ms window, FFT = next power of two.
inline MelParams default_mel_params(int sample_rate = 48000) {
  MelParams p;
  p.sample_rate = sample_rate;
  p.hop_length = static_cast<int>(std::lround(0.0125 * sample_rate));
  p.win_length = static_cast<int>(std::lround(0.05 * sample_rate));
  p.fft_size = next_pow2(p.win_length);
  p.fmax = sample_rate / 2.0;
  return p;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters with unit peak, equally spaced on the mel scale.
class MelFilterbank {
 public:
  explicit MelFilterbank(const MelParams& p) : bins_(p.fft_size / 2 + 1), n_mels_(p.n_mels) {
    p.validate();
    const double lo = hz_to_mel(p.fmin);
    const double hi = hz_to_mel(p.fmax);
    std::vector<double> edges(n_mels_ + 2);
    for (int i = 0; i < n_mels_ + 2; ++i) edges[i] = mel_to_hz(lo + (hi - lo) * i / (n_mels_ + 1));
    centers_.assign(edges.begin() + 1, edges.end() - 1);
    weights_.assign(static_cast<std::size_t>(n_mels_) * bins_, 0.0);
    const double hz_per_bin = static_cast<double>(p.sample_rate) / p.fft_size;
    for (int m = 0; m < n_mels_; ++m) {
      const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
      for (int k = 0; k < bins_; ++k) {
        const double f = k * hz_per_bin;
        double w = 0.0;
        if (f > left && f <= center) w = (f - left) / (center - left);
        else if (f > center && f < right) w = (right - f) / (right - center);
        weights_[static_cast<std::size_t>(m) * bins_ + k] = w;
      }
    }
  }

  const std::vector<double>& center_frequencies() const noexcept { return centers_; }
  int fft_bins() const noexcept { return bins_; }

  void apply(std::span<const double> magnitude, std::span<double> mel) const {
    for (int m = 0; m < n_mels_; ++m) {
      const double* w = weights_.data() + static_cast<std::size_t>(m) * bins_;
      double acc = 0.0;
      for (int k = 0; k < bins_; ++k) acc += w[k] * magnitude[k];
      mel[m] = acc;
    }
  }

 private:
  int bins_;
  int n_mels_;
  std::vector<double> centers_;
  std::vector<double> weights_;
};

/// Log-mel amplitude spectrogram as a (1, 1, n_mels, frames) tensor.
inline Tensor<float> extract_log_mel(std::span<const float> waveform, int sample_rate, const MelParams& p) {
  p.validate();
  if (waveform.empty()) throw InputError("extract_mel: empty waveform");
  if (sample_rate != p.sample_rate) {
    throw ConfigError("extract_mel: waveform sample rate " + std::to_string(sample_rate) +
                      " does not match configured " + std::to_string(p.sample_rate));
  }
  const MelFilterbank bank(p);
  const auto n = static_cast<std::int64_t>(waveform.size());
  const int frames = static_cast<int>((n + p.hop_length - 1) / p.hop_length);

  std::vector<double> window(p.win_length);
  for (int i = 0; i < p.win_length; ++i) {
    window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / p.win_length);
  }

  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  std::vector<double> buffer(p.fft_size);
  std::vector<std::complex<double>> spectrum;
  std::vector<double> magnitude(bank.fft_bins());
  std::vector<double> mel(p.n_mels);
  Tensor<float> out(Shape{1, 1, p.n_mels, frames});

  for (int t = 0; t < frames; ++t) {
    const std::int64_t center = static_cast<std::int64_t>(t) * p.hop_length + p.hop_length / 2;
    const std::int64_t start = center - p.win_length / 2;
    std::fill(buffer.begin(), buffer.end(), 0.0);
    for (int i = 0; i < p.win_length; ++i) {
      const std::int64_t s = start + i;
      if (s >= 0 && s < n) buffer[i] = window[i] * waveform[static_cast<std::size_t>(s)];
    }
    fft.fwd(spectrum, buffer);
    for (int k = 0; k < bank.fft_bins(); ++k) magnitude[k] = std::abs(spectrum[k]);
    bank.apply(magnitude, mel);
    for (int m = 0; m < p.n_mels; ++m) {
      out.at(0, 0, m, t) = static_cast<float>(std::log(std::max(mel[m], p.log_floor)));
    }
  }
  return out;
}

}  // namespace cdhvae::features
