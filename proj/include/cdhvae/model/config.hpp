#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "cdhvae/core/error.hpp"
#include "cdhvae/core/tensor.hpp"
#include "cdhvae/features/mel.hpp"

namespace cdhvae::model {

/// Architecture of one CDHVAE. Latent groups are numbered 1..L in top-down
/// (generative) order; groups 1..K are speaker-invariant.
///
/// Latent scales are counted from the coarsest: scale i has resolution
/// (80 / 2^(S-i)) x (T / 2^(S-i)) for i = 0..S-1, so the finest latent scale is
/// half the input resolution.
struct ModelConfig {
  int groups = 8;                               // L
  int split = 3;                                // K
  int segment_frames = 40;                      // T
  int scales = 3;                               // S
  std::vector<int> groups_per_scale{2, 3, 3};   // coarsest first, sums to L
  std::vector<int> channel_multipliers{1, 1, 1};  // coarsest first
  int base_channels = 32;
  int latent_channels = 4;
  int speaker_embedding_dim = 64;
  int encoder_cells = 1;    // per scale, plus one at full resolution
  int decoder_cells = 1;    // after every latent group
  int cell_expansion = 2;   // decoder-cell inverted bottleneck
  bool depthwise = true;
  double cin_epsilon = 1e-5;
  double logvar_min = -8.0;
  double logvar_max = 4.0;

  template <typename V>
  void fields(V&& v) {
    v("groups", groups);
    v("split", split);
    v("segment_frames", segment_frames);
    v("scales", scales);
    v("groups_per_scale", groups_per_scale);
    v("channel_multipliers", channel_multipliers);
    v("base_channels", base_channels);
    v("latent_channels", latent_channels);
    v("speaker_embedding_dim", speaker_embedding_dim);
    v("encoder_cells", encoder_cells);
    v("decoder_cells", decoder_cells);
    v("cell_expansion", cell_expansion);
    v("depthwise", depthwise);
    v("cin_epsilon", cin_epsilon);
    v("logvar_min", logvar_min);
    v("logvar_max", logvar_max);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (groups < 1) fail("groups (L) must be >= 1");
    if (split < 1 || split > groups) fail("split (K) must satisfy 1 <= K <= L");
    if (segment_frames < 1) fail("segment_frames must be >= 1");
    if (scales < 1) fail("scales must be >= 1");
    if (static_cast<int>(groups_per_scale.size()) != scales) fail("groups_per_scale needs one entry per scale");
    if (static_cast<int>(channel_multipliers.size()) != scales) fail("channel_multipliers needs one entry per scale");
    for (int g : groups_per_scale)
      if (g < 0) fail("groups_per_scale entries must be >= 0");
    if (std::accumulate(groups_per_scale.begin(), groups_per_scale.end(), 0) != groups)
      fail("groups_per_scale must sum to groups (L)");
    for (int m : channel_multipliers)
      if (m < 1) fail("channel_multipliers entries must be >= 1");
    const int factor = 1 << scales;
    if (features::kMelBins % factor != 0 || segment_frames % factor != 0)
      fail("scale schedule needs 2^scales = " + std::to_string(factor) + " to divide 80 x " +
           std::to_string(segment_frames));
    if (base_channels < 1 || latent_channels < 1 || speaker_embedding_dim < 1) fail("channel counts must be >= 1");
    if (encoder_cells < 0 || decoder_cells < 0 || cell_expansion < 1) fail("cell counts must be non-negative");
    if (!(cin_epsilon > 0)) fail("cin_epsilon must be > 0");
    if (!(logvar_min < logvar_max)) fail("logvar_min must be below logvar_max");
  }

  /// Input segment shape for a batch of n.
  /// `frames` = 0 means segment_frames; other widths must divide by 2^scales.
  Shape input_shape(int n = 1, int frames = 0) const {
    return Shape{n, 1, features::kMelBins, frames > 0 ? frames : segment_frames};
  }

  /// Downsampling factor of latent scale i (coarsest = 0).
  int scale_factor(int i) const { return 1 << (scales - i); }
  int scale_channels(int i) const { return base_channels * channel_multipliers[static_cast<std::size_t>(i)]; }

  /// Latent scale (coarsest = 0) hosting 1-based group l.
  int scale_of_group(int l) const {
    int seen = 0;
    for (int i = 0; i < scales; ++i) {
      seen += groups_per_scale[static_cast<std::size_t>(i)];
      if (l <= seen) return i;
    }
    throw InputError("group index " + std::to_string(l) + " outside 1.." + std::to_string(groups));
  }

  /// Shape of z_l for a batch of n.
  Shape group_shape(int l, int n = 1, int frames = 0) const {
    const int f = scale_factor(scale_of_group(l));
    return Shape{n, latent_channels, features::kMelBins / f, (frames > 0 ? frames : segment_frames) / f};
  }

  bool speaker_invariant(int l) const { return l <= split; }
};

}  // namespace cdhvae::model
