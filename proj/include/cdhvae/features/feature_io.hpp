#pragma once

// Feature file layout (all fields little-endian):
//
//   offset  size  field
//   0       8     magic "CDHVMEL\0"
//   8       4     u32 format version (1)
//   12      4     u32 mel bin count B
//   16      4     u32 frame count F
//   20      4     i32 speaker id (-1 when unknown)
//   24      4*B*F float32 log-mel values, row-major (bin-major: all frames of
//                 bin 0, then bin 1, ...)

#include <filesystem>

#include "cdhvae/core/binary_io.hpp"
#include "cdhvae/features/segment.hpp"

namespace cdhvae::features {

inline constexpr char kFeatureMagic[8] = {'C', 'D', 'H', 'V', 'M', 'E', 'L', '\0'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 24;

inline std::vector<std::uint8_t> encode_features(const Tensor<float>& mel, SpeakerId speaker) {
  check_mel_matrix(mel, "encode_features");
  io::ByteWriter w;
  w.raw(std::string_view(kFeatureMagic, 8));
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(mel.shape().h));
  w.u32(static_cast<std::uint32_t>(mel.shape().w));
  w.i32(speaker.value);
  for (float v : mel.values()) w.f32(v);
  return std::move(w.bytes());
}

inline MelUtterance decode_features(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  io::ByteReader r(bytes.data(), bytes.size(), context);
  if (r.raw(8) != std::string_view(kFeatureMagic, 8)) throw IntegrityError(context + ": not a feature file");
  const std::uint32_t version = r.u32();
  if (version != kFeatureVersion) {
    throw UnsupportedVersionError(context + ": feature format version " + std::to_string(version));
  }
  const auto bins = static_cast<int>(r.u32());
  const auto frames = static_cast<int>(r.u32());
  MelUtterance u;
  u.speaker = SpeakerId(r.i32());
  u.source_id = context;
  if (bins != kMelBins || frames < 1) throw IntegrityError(context + ": bad feature shape");
  if (r.remaining() != static_cast<std::size_t>(bins) * frames * 4) {
    throw IntegrityError(context + ": payload size does not match header");
  }
  u.frames = Tensor<float>(Shape{1, 1, bins, frames});
  for (auto& v : u.frames.values()) v = r.f32();
  return u;
}

inline void write_features(const std::filesystem::path& path, const Tensor<float>& mel, SpeakerId speaker) {
  io::write_file(path, encode_features(mel, speaker));
}

inline MelUtterance read_features(const std::filesystem::path& path) {
  return decode_features(io::read_file(path), path.string());
}

}  // namespace cdhvae::features
