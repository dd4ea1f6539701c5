#pragma once

#include <cstdint>
#include <string>

#include "cdhvae/core/error.hpp"

namespace cdhvae::trainer {

struct TrainConfig {
  int batch_size = 8;
  int epochs = 10;
  double learning_rate = 1e-3;
  std::string lr_schedule = "cosine";  // cosine | constant
  double min_lr_fraction = 0.0;        // cosine floor, as a fraction of learning_rate
  double beta = 1.0;
  std::uint64_t seed = 0;
  double grad_clip = 5.0;              // global L2 norm; 0 disables
  int checkpoint_every = 0;            // epochs; 0 writes only the final checkpoint
  int kl_warmup_epochs = 0;            // linear beta ramp; off by default
  double ema_decay = 0.0;              // parameter averaging; 0 = off
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  template <typename V>
  void fields(V&& v) {
    v("batch_size", batch_size);
    v("epochs", epochs);
    v("learning_rate", learning_rate);
    v("lr_schedule", lr_schedule);
    v("min_lr_fraction", min_lr_fraction);
    v("beta", beta);
    v("seed", seed);
    v("grad_clip", grad_clip);
    v("checkpoint_every", checkpoint_every);
    v("kl_warmup_epochs", kl_warmup_epochs);
    v("ema_decay", ema_decay);
    v("adam_beta1", adam_beta1);
    v("adam_beta2", adam_beta2);
    v("adam_epsilon", adam_epsilon);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (epochs < 0) fail("epochs must be >= 0");
    if (!(learning_rate > 0)) fail("learning_rate must be > 0");
    if (lr_schedule != "cosine" && lr_schedule != "constant") fail("lr_schedule must be cosine or constant");
    if (!(min_lr_fraction >= 0 && min_lr_fraction <= 1)) fail("min_lr_fraction must be in [0, 1]");
    if (!(beta >= 0)) fail("beta must be >= 0");
    if (!(grad_clip >= 0)) fail("grad_clip must be >= 0");
    if (checkpoint_every < 0 || kl_warmup_epochs < 0) fail("cadences must be >= 0");
    if (!(ema_decay >= 0 && ema_decay < 1)) fail("ema_decay must be in [0, 1)");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1 && adam_beta2 >= 0 && adam_beta2 < 1)) fail("adam betas must be in [0, 1)");
    if (!(adam_epsilon > 0)) fail("adam_epsilon must be > 0");
  }
};

}  // namespace cdhvae::trainer
