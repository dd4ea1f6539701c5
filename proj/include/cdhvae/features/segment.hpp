#pragma once

#include <compare>
#include <cstdint>
#include <string>
#include <vector>

#include "cdhvae/core/error.hpp"
#include "cdhvae/core/tensor.hpp"
#include "cdhvae/features/mel.hpp"

namespace cdhvae {

/// Dense speaker index into a SpeakerVocab.
struct SpeakerId {
  std::int32_t value = -1;

  constexpr SpeakerId() = default;
  constexpr explicit SpeakerId(std::int32_t v) : value(v) {}
  friend constexpr auto operator<=>(const SpeakerId&, const SpeakerId&) = default;
};

}  // namespace cdhvae

namespace cdhvae::features {

/// Log-mel matrix of a whole utterance, stored as (1, 1, 80, frames).
struct MelUtterance {
  Tensor<float> frames;
  SpeakerId speaker;
  std::string source_id;

  int bins() const { return frames.shape().h; }
  int frame_count() const { return frames.shape().w; }
};

/// Fixed-width training and conversion unit, stored as (1, 1, 80, T).
struct MelSegment {
  Tensor<float> frames;
  SpeakerId speaker;

  int frame_count() const { return frames.shape().w; }
};

struct SegmentedUtterance {
  std::vector<MelSegment> segments;
  /// Frames of right padding per segment; only the last entry can be non-zero.
  std::vector<int> pad_lengths;
};

inline void check_mel_matrix(const Tensor<float>& m, const char* what) {
  const Shape s = m.shape();
  if (s.n != 1 || s.c != 1 || s.h != kMelBins) {
    throw InputError(std::string(what) + ": expected (1,1," + std::to_string(kMelBins) + ",F), got " + s.str());
  }
  if (s.w < 1) throw InputError(std::string(what) + ": no frames");
}

inline int segment_count(int frames, int width) { return (frames + width - 1) / width; }

/// Non-overlapping windows of `width` frames; the remainder is right-padded by
/// repeating the final frame.
inline SegmentedUtterance segment_utterance(const MelUtterance& u, int width) {
  if (width < 1) throw InputError("segment_utterance: segment width must be >= 1");
  if (u.frames.empty() || u.frames.shape().w < 1) throw InputError("segment_utterance: utterance has no frames");
  check_mel_matrix(u.frames, "segment_utterance");
  const int bins = u.bins();
  const int total = u.frame_count();
  SegmentedUtterance out;
  for (int start = 0; start < total; start += width) {
    MelSegment seg;
    seg.speaker = u.speaker;
    seg.frames = Tensor<float>(Shape{1, 1, bins, width});
    const int valid = std::min(width, total - start);
    for (int b = 0; b < bins; ++b)
      for (int t = 0; t < width; ++t) {
        const int src = start + std::min(t, valid - 1);
        seg.frames.at(0, 0, b, t) = u.frames.at(0, 0, b, src);
      }
    out.segments.push_back(std::move(seg));
    out.pad_lengths.push_back(width - valid);
  }
  return out;
}

/// Inverse of segment_utterance: concatenates and trims the padding.
inline MelUtterance concat_segments(const std::vector<MelSegment>& segments, const std::vector<int>& pad_lengths) {
  if (segments.empty()) throw InputError("concat_segments: no segments");
  if (pad_lengths.size() != segments.size()) throw InputError("concat_segments: pad metadata length mismatch");
  const int width = segments.front().frame_count();
  const int bins = segments.front().frames.shape().h;
  int total = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    check_mel_matrix(segments[i].frames, "concat_segments");
    if (segments[i].frame_count() != width) throw InputError("concat_segments: segments differ in width");
    const int pad = pad_lengths[i];
    if (pad < 0 || pad >= width) throw InputError("concat_segments: pad length out of range");
    if (pad != 0 && i + 1 != segments.size()) throw InputError("concat_segments: padding before the last segment");
    total += width - pad;
  }
  MelUtterance u;
  u.speaker = segments.front().speaker;
  u.frames = Tensor<float>(Shape{1, 1, bins, total});
  int offset = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const int valid = width - pad_lengths[i];
    for (int b = 0; b < bins; ++b)
      for (int t = 0; t < valid; ++t) u.frames.at(0, 0, b, offset + t) = segments[i].frames.at(0, 0, b, t);
    offset += valid;
  }
  return u;
}

}  // namespace cdhvae::features
