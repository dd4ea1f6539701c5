#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "cdhvae/core/random.hpp"
#include "cdhvae/core/tensor.hpp"
#include "cdhvae/model/config.hpp"

namespace cdhvae::model {

template <typename T>
struct DiagonalGaussian {
  Tensor<T> mean;
  Tensor<T> log_variance;

  const Shape& shape() const { return mean.shape(); }

  static DiagonalGaussian standard(Shape s) { return {Tensor<T>(s), Tensor<T>(s)}; }
};

/// z_1..z_L in top-down order. groups[l - 1] holds z_l.
template <typename T>
struct LatentHierarchy {
  std::vector<Tensor<T>> groups;
  int split = 0;

  int size() const { return static_cast<int>(groups.size()); }
  const Tensor<T>& operator()(int l) const { return groups[static_cast<std::size_t>(l - 1)]; }

  /// Groups 1..l.
  LatentHierarchy prefix(int l) const {
    return {std::vector<Tensor<T>>(groups.begin(), groups.begin() + l), split};
  }
};

/// Check that `z` holds `count` groups shaped as cfg declares (batch n).
template <typename T>
void check_latents(const ModelConfig& cfg, const std::vector<Tensor<T>>& z, int count, int n, const char* what) {
  if (static_cast<int>(z.size()) != count)
    throw InputError(std::string(what) + ": expected " + std::to_string(count) + " latent groups, got " +
                     std::to_string(z.size()));
  for (int l = 1; l <= count; ++l) {
    const Shape want = cfg.group_shape(l, n);
    if (z[static_cast<std::size_t>(l - 1)].shape() != want)
      throw InputError(std::string(what) + ": group " + std::to_string(l) + " has shape " +
                       z[static_cast<std::size_t>(l - 1)].shape().str() + ", expected " + want.str());
  }
}

/// mean + exp(log_variance / 2) * eps, eps ~ N(0, I) drawn from `seed`.
/// The differentiable version is ad::reparameterize.
template <typename T>
Tensor<T> sample_latents(const DiagonalGaussian<T>& g, std::uint64_t seed) {
  if (g.mean.shape() != g.log_variance.shape())
    throw InputError("sample_latents: mean " + g.mean.shape().str() + " vs log-variance " +
                     g.log_variance.shape().str());
  Rng rng(seed);
  const Tensor<T> eps = rng.normal_tensor<T>(g.mean.shape());
  Tensor<T> out = g.mean;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += std::exp(g.log_variance[i] * T(0.5)) * eps[i];
  return out;
}

}  // namespace cdhvae::model
