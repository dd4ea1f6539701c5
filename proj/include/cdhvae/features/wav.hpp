#pragma once

// Minimal RIFF/WAVE reader and writer: PCM 16/24/32-bit integer and 32-bit
// IEEE float. Multi-channel input is averaged to mono.

#include <filesystem>
#include <vector>

#include "cdhvae/core/binary_io.hpp"

namespace cdhvae::features {

struct Waveform {
  std::vector<float> samples;
  int sample_rate = 0;
};

inline Waveform decode_wav(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  io::ByteReader r(bytes.data(), bytes.size(), context);
  if (r.raw(4) != "RIFF") throw InputError(context + ": not a RIFF file");
  r.u32();
  if (r.raw(4) != "WAVE") throw InputError(context + ": not a WAVE file");
  int format = 0, channels = 0, bits = 0;
  Waveform wav;
  bool have_fmt = false;
  while (r.remaining() >= 8) {
    const std::string id = r.raw(4);
    const std::uint32_t len = r.u32();
    if (len > r.remaining()) throw InputError(context + ": truncated chunk " + id);
    if (id == "fmt ") {
      if (len < 16) throw InputError(context + ": short fmt chunk");
      format = r.u16();
      channels = r.u16();
      wav.sample_rate = static_cast<int>(r.u32());
      r.u32();
      r.u16();
      bits = r.u16();
      if (format == 0xFFFE && len >= 26) {  // WAVE_FORMAT_EXTENSIBLE: subformat GUID's first word
        r.raw(8);
        format = r.u16();
        r.raw(len - 26);
      } else {
        r.raw(len - 16);
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw InputError(context + ": data before fmt");
      if (channels < 1) throw InputError(context + ": no channels");
      const int bytes_per = bits / 8;
      const bool pcm = format == 1 && (bits == 16 || bits == 24 || bits == 32);
      const bool flt = format == 3 && bits == 32;
      if (!pcm && !flt) throw InputError(context + ": unsupported sample format");
      const std::size_t frames = len / (static_cast<std::size_t>(bytes_per) * channels);
      wav.samples.resize(frames);
      for (std::size_t i = 0; i < frames; ++i) {
        double acc = 0;
        for (int c = 0; c < channels; ++c) {
          if (flt) {
            acc += r.f32();
          } else if (bits == 16) {
            const auto v = static_cast<std::int16_t>(r.u16());
            acc += v / 32768.0;
          } else if (bits == 24) {
            std::int32_t v = r.u16();
            v |= static_cast<std::int32_t>(r.u8()) << 16;
            if (v & 0x800000) v |= ~0xffffff;
            acc += v / 8388608.0;
          } else {
            acc += r.i32() / 2147483648.0;
          }
        }
        wav.samples[i] = static_cast<float>(acc / channels);
      }
      r.raw(len - frames * bytes_per * channels);
      return wav;
    } else {
      r.raw(len);
    }
    if (len % 2 == 1 && r.remaining() > 0) r.u8();
  }
  throw InputError(context + ": no data chunk");
}

inline Waveform read_wav(const std::filesystem::path& path) { return decode_wav(io::read_file(path), path.string()); }

/// Mono 32-bit float WAV.
inline void write_wav(const std::filesystem::path& path, const Waveform& wav) {
  io::ByteWriter w;
  const auto data_len = static_cast<std::uint32_t>(wav.samples.size() * 4);
  w.raw("RIFF");
  w.u32(36 + data_len);
  w.raw("WAVE");
  w.raw("fmt ");
  w.u32(16);
  w.u8(3);
  w.u8(0);
  w.u8(1);
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(wav.sample_rate));
  w.u32(static_cast<std::uint32_t>(wav.sample_rate) * 4);
  w.u8(4);
  w.u8(0);
  w.u8(32);
  w.u8(0);
  w.raw("data");
  w.u32(data_len);
  for (float s : wav.samples) w.f32(s);
  io::write_file(path, w.bytes());
}

}  // namespace cdhvae::features
