#pragma once

// beta-weighted ELBO and its rate / distortion accounting, in nats per segment.
//
//   rate        = sum_l KL(q(z_l | x, z_<l, y) || p(z_l | z_<l [, y]))
//   distortion  = -log N(x; decoder mean, I) = 0.5 * ||x - mean||^2 + 0.5 * D * log(2 pi)
//   loss        = beta * rate + distortion
//
// The KL at level l is evaluated in closed form at the sampled posterior chain
// z_<l, which gives the single-sample estimate of the nested expectations.

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "cdhvae/core/text.hpp"
#include "cdhvae/features/dataset.hpp"
#include "cdhvae/model/cdhvae.hpp"

namespace cdhvae::objective {

struct ObjectiveBreakdown {
  std::vector<double> per_level_kl;
  double distortion = 0;
  double beta = 0;
  double loss = 0;

  double rate() const {
    double r = 0;
    for (double k : per_level_kl) r += k;
    return r;
  }
  /// Rate of levels 1..k only.
  double rate_through(int k) const {
    double r = 0;
    for (int l = 0; l < k && l < static_cast<int>(per_level_kl.size()); ++l) r += per_level_kl[static_cast<std::size_t>(l)];
    return r;
  }
};

struct RDPoint {
  double beta = 0;
  double rate = 0;
  double distortion = 0;
  double invariant_rate = 0;  // levels l <= K
  std::size_t segments = 0;
};

/// Closed-form KL(q || p) summed over all elements.
template <typename T>
double kl_gaussian(const model::DiagonalGaussian<T>& q, const model::DiagonalGaussian<T>& p) {
  if (q.mean.shape() != p.mean.shape() || q.log_variance.shape() != q.mean.shape() ||
      p.log_variance.shape() != p.mean.shape())
    throw InputError("kl_gaussian: shape mismatch " + q.mean.shape().str() + " vs " + p.mean.shape().str());
  double acc = 0;
  for (std::size_t i = 0; i < q.mean.size(); ++i) {
    const double d = static_cast<double>(q.mean[i]) - p.mean[i];
    const double lq = q.log_variance[i], lp = p.log_variance[i];
    acc += 0.5 * (lp - lq + std::exp(lq - lp) + d * d * std::exp(-lp) - 1.0);
  }
  return acc;
}

/// Gaussian normalizer of the distortion for one 80 x T segment.
inline double distortion_constant(int segment_frames) {
  return 0.5 * features::kMelBins * segment_frames * std::log(2 * std::numbers::pi);
}

template <typename T>
struct ElboGraph {
  model::ForwardTrace<T> trace;
  std::vector<ad::Var<T>> level_kl;  // each (N, 1, 1, 1)
  ad::Var<T> distortion;             // (N, 1, 1, 1)
  ad::Var<T> loss;                   // batch mean of beta * rate + distortion
};

/// Differentiable single-sample estimate over a batch, recorded on `tape`.
template <typename T>
ElboGraph<T> elbo_graph(const model::Cdhvae<T>& m, ad::Tape<T>& tape, const Tensor<T>& x,
                        const std::vector<SpeakerId>& y, double beta, Rng& rng) {
  if (!(beta >= 0)) throw ConfigError("beta must be >= 0");
  model::ForwardRequest<T> req;
  req.x = &x;
  req.encoder_speakers = y;
  req.decoder_speakers = y;
  req.sources.assign(static_cast<std::size_t>(m.config().groups), model::LatentSource::PosteriorSample);
  req.rng = &rng;
  ElboGraph<T> g;
  g.trace = m.forward(tape, req);
  ad::Var<T> rate;
  for (const auto& lt : g.trace.levels) {
    g.level_kl.push_back(ad::gaussian_kl(lt.post_mean, lt.post_logvar, lt.prior_mean, lt.prior_logvar));
    rate = rate ? ad::add(rate, g.level_kl.back()) : g.level_kl.back();
  }
  g.distortion = ad::gaussian_nll_unit(x, g.trace.output);
  g.loss = ad::mean(ad::add(ad::scale(rate, static_cast<T>(beta)), g.distortion));
  return g;
}

namespace detail {

inline std::string level_report(const std::vector<double>& kl) {
  std::string s;
  for (std::size_t l = 0; l < kl.size(); ++l) s += " kl" + std::to_string(l + 1) + "=" + format_double(kl[l]);
  return s;
}

}  // namespace detail

/// Batch-mean breakdown of a recorded graph. Throws NumericalError on non-finite terms.
template <typename T>
ObjectiveBreakdown breakdown_of(const ElboGraph<T>& g, double beta) {
  ObjectiveBreakdown b;
  b.beta = beta;
  const int n = g.distortion.shape().n;
  for (const auto& k : g.level_kl) {
    double acc = 0;
    for (int i = 0; i < n; ++i) acc += k.value()[static_cast<std::size_t>(i)];
    b.per_level_kl.push_back(acc / n);
  }
  double d = 0;
  for (int i = 0; i < n; ++i) d += g.distortion.value()[static_cast<std::size_t>(i)];
  b.distortion = d / n;
  b.loss = beta * b.rate() + b.distortion;
  if (!std::isfinite(b.loss))
    throw NumericalError("non-finite objective: distortion=" + format_double(b.distortion) +
                         detail::level_report(b.per_level_kl));
  return b;
}

/// Value of the beta-ELBO terms for one segment (or a batch, averaged).
template <typename T>
ObjectiveBreakdown elbo_beta(const model::Cdhvae<T>& m, const Tensor<T>& x, const std::vector<SpeakerId>& y,
                             double beta, std::uint64_t seed) {
  ad::Tape<T> tape(false);
  Rng rng(seed);
  return breakdown_of(elbo_graph(m, tape, x, y, beta, rng), beta);
}

template <typename T>
ObjectiveBreakdown elbo_beta(const model::Cdhvae<T>& m, const Tensor<T>& x, SpeakerId y, double beta,
                             std::uint64_t seed) {
  return elbo_beta(m, x, model::Cdhvae<T>::repeat(y, x.shape().n), beta, seed);
}

/// Stack dataset segments into a batch tensor.
template <typename T>
std::pair<Tensor<T>, std::vector<SpeakerId>> make_batch(const features::DatasetManifest& data,
                                                        std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("empty batch");
  std::vector<Tensor<T>> items;
  std::vector<SpeakerId> speakers;
  items.reserve(indices.size());
  for (std::size_t i : indices) {
    auto seg = data.segment(i);
    if constexpr (std::is_same_v<T, float>) items.push_back(std::move(seg.frames));
    else items.push_back(seg.frames.template cast<T>());
    speakers.push_back(seg.speaker);
  }
  return {stack<T>(items), std::move(speakers)};
}

/// Rate and distortion averaged per segment over `data` (all segments when
/// sample_count is 0, else a fixed-seed subsample).
template <typename T>
RDPoint rd_evaluate(const model::Cdhvae<T>& m, const features::DatasetManifest& data, double beta,
                    std::size_t sample_count = 0, std::uint64_t seed = 0, int batch_size = 8) {
  if (data.size() == 0) throw InputError("rd_evaluate: empty dataset");
  std::vector<std::size_t> idx(data.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(derive_seed(seed, "rd-evaluate"));
  if (sample_count > 0 && sample_count < idx.size()) {
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(sample_count);
    std::sort(idx.begin(), idx.end());
  }
  RDPoint pt;
  pt.beta = beta;
  double rate = 0, inv = 0, dist = 0;
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(batch_size));
    const std::span<const std::size_t> chunk(idx.data() + start, end - start);
    auto [x, y] = make_batch<T>(data, chunk);
    const auto b = elbo_beta(m, x, y, beta, rng.next_u64());
    const double w = static_cast<double>(chunk.size());
    rate += w * b.rate();
    inv += w * b.rate_through(m.config().split);
    dist += w * b.distortion;
  }
  pt.segments = idx.size();
  pt.rate = rate / pt.segments;
  pt.invariant_rate = inv / pt.segments;
  pt.distortion = dist / pt.segments;
  return pt;
}

/// Tab-separated table: header, then one `beta rate distortion` row per point.
inline std::string rd_table(std::span<const RDPoint> points) {
  std::string s = "beta\trate\tdistortion\n";
  for (const auto& p : points)
    s += format_fixed(p.beta, 6) + "\t" + format_fixed(p.rate, 6) + "\t" + format_fixed(p.distortion, 6) + "\n";
  return s;
}

}  // namespace cdhvae::objective
