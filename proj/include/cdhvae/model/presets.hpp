#pragma once

#include "cdhvae/model/config.hpp"

namespace cdhvae::model {

/// Desk-scale default: L = 8, K = 3 over three scales.
inline ModelConfig desk_config() { return ModelConfig{}; }

/// Two groups on one scale, a few hundred parameters. Used for gradient checks.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.groups = 2;
  c.split = 1;
  c.segment_frames = 4;
  c.scales = 1;
  c.groups_per_scale = {2};
  c.channel_multipliers = {1};
  c.base_channels = 2;
  c.latent_channels = 1;
  c.speaker_embedding_dim = 2;
  c.cell_expansion = 1;
  return c;
}

/// Deep configuration: L = 35, K = 10 over scales of 5, 10 and 20 groups.
inline ModelConfig deep_config() {
  ModelConfig c;
  c.groups = 35;
  c.split = 10;
  c.scales = 3;
  c.groups_per_scale = {5, 10, 20};
  c.channel_multipliers = {1, 1, 1};
  return c;
}

}  // namespace cdhvae::model
