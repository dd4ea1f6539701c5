#pragma once

// The conditional hierarchical VAE.
//
// Bottom-up: stem conv, a full-resolution encoder cell, then per latent scale
// (finest first) a stride-2 resampling conv and encoder cells. Every encoder
// normalization site is speaker-conditioned.
//
// Top-down: a learned constant at the coarsest scale, then for each group l:
//   prior      p(z_l | z_<l [, y])   conv(swish(h)); N(0, I) for l = 1
//   posterior  q = p + conv(swish(e_s + conv1x1(h)))   (offsets to the prior)
//   combiner   h += conv1x1(z_l)
//   decoder cells, conditioned on y only when l >= K.
// Since the state h that feeds the prior of level l <= K has only passed
// through cells after groups < K, those priors never see y.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cdhvae/core/ops.hpp"
#include "cdhvae/core/random.hpp"
#include "cdhvae/features/segment.hpp"
#include "cdhvae/model/config.hpp"
#include "cdhvae/model/latents.hpp"

namespace cdhvae::model {

/// Where z_l comes from during a top-down pass.
enum class LatentSource { PosteriorSample, PosteriorMean, PriorSample, PriorMean, Given };

template <typename T>
struct LevelTrace {
  ad::Var<T> prior_mean, prior_logvar;
  ad::Var<T> post_mean, post_logvar;  // null when the posterior was not needed
  ad::Var<T> z;
};

template <typename T>
struct ForwardTrace {
  std::vector<LevelTrace<T>> levels;
  ad::Var<T> output;  // decoder mean; null when stopped early
};

template <typename T>
struct ForwardRequest {
  const Tensor<T>* x = nullptr;             // (N, 1, 80, T); needed by posterior sources
  std::vector<SpeakerId> encoder_speakers;  // y for the bottom-up path
  std::vector<SpeakerId> decoder_speakers;  // y for priors l > K and the decoder
  std::vector<LatentSource> sources;        // one per level
  const std::vector<Tensor<T>>* given = nullptr;
  Rng* rng = nullptr;     // for sampled sources
  int stop_at_prior = 0;  // > 0: return once the prior of this level is known
  int frames = 0;         // input width; 0 = segment_frames (others are inference-only)
};

template <typename T>
struct Encoding {
  std::vector<DiagonalGaussian<T>> posteriors;
  std::vector<DiagonalGaussian<T>> priors;
  LatentHierarchy<T> z;
};

namespace detail {

template <typename T>
struct Conv {
  ad::Parameter<T>* weight = nullptr;
  ad::Parameter<T>* bias = nullptr;
  ad::ConvSpec spec;

  ad::Var<T> operator()(ad::Tape<T>& t, const ad::Var<T>& x) const {
    return ad::conv2d(x, t.parameter(*weight), bias ? t.parameter(*bias) : ad::Var<T>(), spec);
  }
};

/// Dense k x k conv, or depthwise k x k followed by pointwise when separable.
template <typename T>
struct Mix {
  Conv<T> spatial;
  Conv<T> pointwise;  // unused for dense
  bool separable = false;

  ad::Var<T> operator()(ad::Tape<T>& t, const ad::Var<T>& x) const {
    auto h = spatial(t, x);
    return separable ? pointwise(t, h) : h;
  }
};

template <typename T>
struct Cin {
  int channels = 0;
  bool conditioned = false;
  ad::Parameter<T>* map = nullptr;   // (1, 1, 2C, D), conditioned only
  ad::Parameter<T>* bias = nullptr;  // (1, 2C, 1, 1): gamma then delta
};

template <typename T>
struct EncoderCell {
  int cin1, cin2;
  Mix<T> conv1, conv2;
};

template <typename T>
struct DecoderCell {
  int cin1, cin2, cin3, cin4;
  Conv<T> expand, contract;
  Mix<T> spatial;
};

template <typename T>
struct Group {
  int scale = 0;
  Conv<T> prior_head;    // absent for l = 1
  Conv<T> enc_combine;   // conv1x1(h) added to encoder features
  Conv<T> post_head;
  Conv<T> z_project;
  std::vector<DecoderCell<T>> cells;
};

}  // namespace detail

template <typename T>
class Cdhvae {
 public:
  static constexpr T kResidualScale = T(0.1);
  static constexpr double kHeadGain = 0.1;

  Cdhvae(ModelConfig cfg, int vocab_size, std::uint64_t seed)
      : cfg_(std::move(cfg)), vocab_size_(vocab_size), init_rng_(derive_seed(seed, "model-init")) {
    cfg_.validate();
    if (vocab_size_ < 1) throw ConfigError("model: vocabulary must contain at least one speaker");
    build();
  }

  Cdhvae(const Cdhvae&) = delete;
  Cdhvae& operator=(const Cdhvae&) = delete;
  Cdhvae(Cdhvae&&) noexcept = default;
  Cdhvae& operator=(Cdhvae&&) noexcept = default;

  const ModelConfig& config() const noexcept { return cfg_; }
  int vocab_size() const noexcept { return vocab_size_; }
  ad::ParameterStore<T>& parameters() noexcept { return store_; }
  const ad::ParameterStore<T>& parameters() const noexcept { return store_; }

  std::size_t cin_site_count() const noexcept { return cins_.size(); }
  int cin_site_channels(std::size_t site) const { return cins_.at(site).channels; }
  bool cin_site_conditioned(std::size_t site) const { return cins_.at(site).conditioned; }
  ad::Parameter<T>& cin_site_bias(std::size_t site) { return *cins_.at(site).bias; }
  ad::Parameter<T>* cin_site_map(std::size_t site) { return cins_.at(site).map; }

  /// Zero the posterior offset heads so that q = p at every level.
  void zero_posterior_heads() {
    for (auto& g : groups_) {
      g.post_head.weight->value.fill(T(0));
      g.post_head.bias->value.fill(T(0));
    }
  }

  /// One top-down pass recorded on `tape`.
  ForwardTrace<T> forward(ad::Tape<T>& tape, const ForwardRequest<T>& req) const {
    const int L = cfg_.groups;
    if (static_cast<int>(req.sources.size()) != L)
      throw InputError("forward: need one latent source per level (" + std::to_string(L) + ")");
    const int last = req.stop_at_prior > 0 ? req.stop_at_prior : L;
    if (last > L) throw InputError("forward: level " + std::to_string(last) + " beyond L");

    bool need_encoder = false, need_noise = false;
    for (int l = 1; l <= last; ++l) {
      const auto s = req.sources[static_cast<std::size_t>(l - 1)];
      if (l == last && req.stop_at_prior > 0) break;
      need_encoder |= s == LatentSource::PosteriorSample || s == LatentSource::PosteriorMean;
      need_noise |= s == LatentSource::PosteriorSample || s == LatentSource::PriorSample;
      if (s == LatentSource::Given && !req.given) throw InputError("forward: given latents missing");
    }
    if (need_noise && !req.rng) throw InputError("forward: sampled sources need an rng");

    int batch = 0;
    if (req.x) batch = req.x->shape().n;
    else if (req.given && !req.given->empty()) batch = req.given->front().shape().n;
    else if (!req.decoder_speakers.empty()) batch = static_cast<int>(req.decoder_speakers.size());
    if (batch < 1) throw InputError("forward: cannot infer batch size");
    const int width = req.frames > 0 ? req.frames : cfg_.segment_frames;
    if (width % (1 << cfg_.scales) != 0)
      throw InputError("forward: width " + std::to_string(width) + " is not a multiple of " +
                       std::to_string(1 << cfg_.scales));

    std::vector<ad::Var<T>> enc_features;
    if (need_encoder) {
      if (!req.x) throw InputError("forward: posterior sources need an input segment");
      if (req.x->shape() != cfg_.input_shape(batch, width))
        throw InputError("forward: input " + req.x->shape().str() + " does not match " +
                         cfg_.input_shape(batch, width).str());
      check_speakers(req.encoder_speakers, batch);
      enc_features = bottom_up(tape, tape.constant(*req.x), embed(tape, req.encoder_speakers));
    }
    if (req.given) {
      int count = 0;
      const int used = req.stop_at_prior > 0 ? last - 1 : last;
      for (int l = 1; l <= used; ++l)
        if (req.sources[static_cast<std::size_t>(l - 1)] == LatentSource::Given) count = l;
      if (static_cast<int>(req.given->size()) < count)
        throw InputError("forward: expected at least " + std::to_string(count) + " given latent groups, got " +
                         std::to_string(req.given->size()));
      for (int l = 1; l <= count; ++l) {
        const auto& g = (*req.given)[static_cast<std::size_t>(l - 1)];
        if (g.shape() != cfg_.group_shape(l, batch, width))
          throw InputError("forward: latent group " + std::to_string(l) + " has shape " + g.shape().str() +
                           ", expected " + cfg_.group_shape(l, batch, width).str());
      }
    }

    // Only cells at or after level K read the decoder speaker.
    ad::Var<T> emb_dec;
    if (last >= cfg_.split && !(req.stop_at_prior > 0 && req.stop_at_prior <= cfg_.split)) {
      check_speakers(req.decoder_speakers, batch);
      emb_dec = embed(tape, req.decoder_speakers);
    }

    ForwardTrace<T> trace;
    ad::Var<T> h = width == cfg_.segment_frames ? ad::broadcast_batch(tape.parameter(*top_), batch)
                                                : ad::broadcast_batch(tape.constant(tiled_top(width)), batch);
    int l = 0;
    for (int i = 0; i < cfg_.scales; ++i) {
      if (i > 0) h = up_[static_cast<std::size_t>(i)](tape, ad::upsample2(h));
      for (int g = 0; g < cfg_.groups_per_scale[static_cast<std::size_t>(i)]; ++g) {
        ++l;
        const auto& grp = groups_[static_cast<std::size_t>(l - 1)];
        const int zc = cfg_.latent_channels;
        LevelTrace<T> lt;
        if (l == 1) {
          lt.prior_mean = tape.constant(Tensor<T>(cfg_.group_shape(1, batch, width)));
          lt.prior_logvar = tape.constant(Tensor<T>(cfg_.group_shape(1, batch, width)));
        } else {
          auto p = grp.prior_head(tape, ad::swish(h));
          lt.prior_mean = ad::slice_channels(p, 0, zc);
          lt.prior_logvar = clamp_logvar(ad::slice_channels(p, zc, 2 * zc));
        }
        if (req.stop_at_prior == l) {
          trace.levels.push_back(lt);
          return trace;
        }
        const auto source = req.sources[static_cast<std::size_t>(l - 1)];
        if (source == LatentSource::PosteriorSample || source == LatentSource::PosteriorMean) {
          auto u = ad::add(enc_features[static_cast<std::size_t>(grp.scale)], grp.enc_combine(tape, h));
          auto d = grp.post_head(tape, ad::swish(u));
          lt.post_mean = ad::add(lt.prior_mean, ad::slice_channels(d, 0, zc));
          lt.post_logvar = clamp_logvar(ad::add(lt.prior_logvar, ad::slice_channels(d, zc, 2 * zc)));
        }
        switch (source) {
          case LatentSource::PosteriorSample:
            lt.z = ad::reparameterize(lt.post_mean, lt.post_logvar, req.rng->template normal_tensor<T>(lt.post_mean.shape()));
            break;
          case LatentSource::PosteriorMean:
            lt.z = lt.post_mean;
            break;
          case LatentSource::PriorSample:
            lt.z = ad::reparameterize(lt.prior_mean, lt.prior_logvar,
                                      req.rng->template normal_tensor<T>(lt.prior_mean.shape()));
            break;
          case LatentSource::PriorMean:
            lt.z = lt.prior_mean;
            break;
          case LatentSource::Given:
            lt.z = tape.constant((*req.given)[static_cast<std::size_t>(l - 1)]);
            break;
        }
        h = ad::add(h, grp.z_project(tape, lt.z));
        const ad::Var<T> cond = l >= cfg_.split ? emb_dec : ad::Var<T>();
        for (const auto& cell : grp.cells) h = decoder_cell(tape, cell, h, cond);
        trace.levels.push_back(lt);
      }
    }
    h = final_up_(tape, ad::upsample2(h));
    for (const auto& cell : post_cells_) h = decoder_cell(tape, cell, h, emb_dec);
    trace.output = out_conv_(tape, ad::swish(h));
    return trace;
  }

  // ---- value-level API (no gradients) ----

  /// Posteriors and a reparameterized sample z (noise drawn from `seed`).
  Encoding<T> encode(const Tensor<T>& x, const std::vector<SpeakerId>& y, std::uint64_t seed) const {
    return run_encode(x, y, LatentSource::PosteriorSample, seed);
  }
  Encoding<T> encode(const Tensor<T>& x, SpeakerId y, std::uint64_t seed) const {
    return encode(x, repeat(y, x.shape().n), seed);
  }

  /// Posterior means chained through the hierarchy (deterministic).
  Encoding<T> encode_mean(const Tensor<T>& x, const std::vector<SpeakerId>& y) const {
    return run_encode(x, y, LatentSource::PosteriorMean, 0);
  }
  Encoding<T> encode_mean(const Tensor<T>& x, SpeakerId y) const { return encode_mean(x, repeat(y, x.shape().n)); }

  /// Parameters of p(z_l | z_<l [, y]); `prefix` must hold exactly l - 1 groups.
  DiagonalGaussian<T> prior_params(const LatentHierarchy<T>& prefix, SpeakerId y, int l) const {
    if (l < 1 || l > cfg_.groups) throw InputError("prior_params: level " + std::to_string(l) + " outside 1..L");
    if (prefix.size() != l - 1)
      throw InputError("prior_params: level " + std::to_string(l) + " needs " + std::to_string(l - 1) +
                       " prefix groups, got " + std::to_string(prefix.size()));
    const int batch = l == 1 ? 1 : prefix.groups.front().shape().n;
    check_latents(cfg_, prefix.groups, l - 1, batch, "prior_params");
    ad::Tape<T> tape(false);
    ForwardRequest<T> req;
    req.decoder_speakers = repeat(y, batch);
    req.sources.assign(static_cast<std::size_t>(cfg_.groups), LatentSource::Given);
    req.given = &prefix.groups;
    req.stop_at_prior = l;
    const auto trace = forward(tape, req);
    const auto& lt = trace.levels.back();
    return {lt.prior_mean.value(), lt.prior_logvar.value()};
  }

  /// Decoder mean over the 80 x T grid.
  Tensor<T> decode(const LatentHierarchy<T>& z, const std::vector<SpeakerId>& y) const {
    if (z.size() != cfg_.groups)
      throw InputError("decode: incomplete hierarchy (" + std::to_string(z.size()) + " of " +
                       std::to_string(cfg_.groups) + " groups)");
    const int batch = z.groups.front().shape().n;
    check_latents(cfg_, z.groups, cfg_.groups, batch, "decode");
    ad::Tape<T> tape(false);
    ForwardRequest<T> req;
    req.decoder_speakers = y;
    req.sources.assign(static_cast<std::size_t>(cfg_.groups), LatentSource::Given);
    req.given = &z.groups;
    return forward(tape, req).output.value();
  }
  Tensor<T> decode(const LatentHierarchy<T>& z, SpeakerId y) const {
    return decode(z, repeat(y, z.size() ? z.groups.front().shape().n : 1));
  }

  /// Conditional instance normalization at one site, for inspection.
  Tensor<T> apply_cin(const Tensor<T>& features, SpeakerId y, std::size_t site) const {
    if (site >= cins_.size()) throw ConfigError("apply_cin: no CIN site " + std::to_string(site));
    const auto& c = cins_[site];
    if (features.shape().c != c.channels)
      throw ConfigError("apply_cin: site " + std::to_string(site) + " has " + std::to_string(c.channels) +
                        " channels, features have " + std::to_string(features.shape().c));
    ad::Tape<T> tape(false);
    const int n = features.shape().n;
    ad::Var<T> emb;
    if (c.conditioned) {
      const auto ys = repeat(y, n);
      check_speakers(ys, n);
      emb = embed(tape, ys);
    }
    return cin(tape, static_cast<int>(site), tape.constant(features), emb).value();
  }

  void check_speakers(const std::vector<SpeakerId>& y, int batch) const {
    if (static_cast<int>(y.size()) != batch)
      throw InputError("expected " + std::to_string(batch) + " speaker labels, got " + std::to_string(y.size()));
    for (auto s : y)
      if (s.value < 0 || s.value >= vocab_size_)
        throw InputError("speaker id " + std::to_string(s.value) + " outside vocabulary of size " +
                         std::to_string(vocab_size_));
  }

  static std::vector<SpeakerId> repeat(SpeakerId y, int n) { return std::vector<SpeakerId>(static_cast<std::size_t>(n), y); }

 private:
  using Var = ad::Var<T>;

  // ---- construction ----

  ad::Parameter<T>* normal_param(const std::string& name, Shape s, double sd) {
    Tensor<T> v(s);
    for (auto& e : v.values()) e = static_cast<T>(sd * init_rng_.normal());
    return &store_.add(name, std::move(v));
  }
  ad::Parameter<T>* const_param(const std::string& name, Shape s, T value = T(0)) {
    return &store_.add(name, Tensor<T>(s, value));
  }

  detail::Conv<T> make_conv(const std::string& name, int cin, int cout, int k, int stride = 1, double gain = 1.0) {
    detail::Conv<T> c;
    c.spec = ad::ConvSpec{k, stride, k / 2, false};
    c.weight = normal_param(name + ".w", Shape{cout, cin, k, k}, gain / std::sqrt(double(cin * k * k)));
    c.bias = const_param(name + ".b", Shape{1, cout, 1, 1});
    return c;
  }

  detail::Mix<T> make_mix(const std::string& name, int cin, int cout, int stride = 1) {
    detail::Mix<T> m;
    m.separable = cfg_.depthwise;
    if (!m.separable) {
      m.spatial = make_conv(name, cin, cout, 3, stride);
      return m;
    }
    m.spatial.spec = ad::ConvSpec{3, stride, 1, true};
    m.spatial.weight = normal_param(name + ".dw.w", Shape{cin, 1, 3, 3}, 1.0 / 3.0);
    m.spatial.bias = const_param(name + ".dw.b", Shape{1, cin, 1, 1});
    m.pointwise = make_conv(name + ".pw", cin, cout, 1);
    return m;
  }

  int make_cin(const std::string& name, int channels, bool conditioned) {
    detail::Cin<T> c;
    c.channels = channels;
    c.conditioned = conditioned;
    if (conditioned) {
      const int d = cfg_.speaker_embedding_dim;
      c.map = normal_param(name + ".map", Shape{1, 1, 2 * channels, d}, 0.1 / std::sqrt(double(d)));
    }
    Tensor<T> b(Shape{1, 2 * channels, 1, 1});
    for (int i = 0; i < channels; ++i) b[static_cast<std::size_t>(i)] = T(1);
    c.bias = &store_.add(name + ".b", std::move(b));
    cins_.push_back(c);
    return static_cast<int>(cins_.size()) - 1;
  }

  detail::EncoderCell<T> make_encoder_cell(const std::string& name, int c) {
    detail::EncoderCell<T> cell;
    cell.cin1 = make_cin(name + ".cin1", c, true);
    cell.conv1 = make_mix(name + ".conv1", c, c);
    cell.cin2 = make_cin(name + ".cin2", c, true);
    cell.conv2 = make_mix(name + ".conv2", c, c);
    return cell;
  }

  detail::DecoderCell<T> make_decoder_cell(const std::string& name, int c, bool conditioned) {
    const int e = c * cfg_.cell_expansion;
    detail::DecoderCell<T> cell;
    cell.cin1 = make_cin(name + ".cin1", c, conditioned);
    cell.expand = make_conv(name + ".expand", c, e, 1);
    cell.cin2 = make_cin(name + ".cin2", e, conditioned);
    cell.spatial = make_mix(name + ".spatial", e, e);
    cell.cin3 = make_cin(name + ".cin3", e, conditioned);
    cell.contract = make_conv(name + ".contract", e, c, 1);
    cell.cin4 = make_cin(name + ".cin4", c, conditioned);
    return cell;
  }

  void build() {
    const int S = cfg_.scales;
    const int zc = cfg_.latent_channels;
    const int base = cfg_.base_channels;
    embedding_ = normal_param("speaker.embedding", Shape{1, 1, cfg_.speaker_embedding_dim, vocab_size_}, 1.0);

    // Bottom-up.
    stem_ = make_conv("enc.stem", 1, base, 3);
    for (int k = 0; k < cfg_.encoder_cells; ++k)
      pre_cells_.push_back(make_encoder_cell("enc.full.cell" + std::to_string(k), base));
    down_.resize(static_cast<std::size_t>(S));
    enc_cells_.resize(static_cast<std::size_t>(S));
    for (int i = S - 1; i >= 0; --i) {
      const int cin = i == S - 1 ? base : cfg_.scale_channels(i + 1);
      const std::string p = "enc.s" + std::to_string(i);
      down_[static_cast<std::size_t>(i)] = make_mix(p + ".down", cin, cfg_.scale_channels(i), 2);
      for (int k = 0; k < cfg_.encoder_cells; ++k)
        enc_cells_[static_cast<std::size_t>(i)].push_back(
            make_encoder_cell(p + ".cell" + std::to_string(k), cfg_.scale_channels(i)));
    }

    // Top-down.
    const int f0 = cfg_.scale_factor(0);
    top_ = normal_param("dec.top", Shape{1, cfg_.scale_channels(0), features::kMelBins / f0, cfg_.segment_frames / f0},
                        1.0);
    up_.resize(static_cast<std::size_t>(S));
    int l = 0;
    for (int i = 0; i < S; ++i) {
      const int c = cfg_.scale_channels(i);
      if (i > 0) up_[static_cast<std::size_t>(i)] = make_mix("dec.s" + std::to_string(i) + ".up", cfg_.scale_channels(i - 1), c);
      for (int g = 0; g < cfg_.groups_per_scale[static_cast<std::size_t>(i)]; ++g) {
        ++l;
        const std::string p = "dec.z" + std::to_string(l);
        detail::Group<T> grp;
        grp.scale = i;
        // Small heads start every level near N(0, I) with q close to p.
        if (l > 1) grp.prior_head = make_conv(p + ".prior", c, 2 * zc, 3, 1, kHeadGain);
        grp.enc_combine = make_conv(p + ".combine", c, c, 1);
        grp.post_head = make_conv(p + ".posterior", c, 2 * zc, 3, 1, kHeadGain);
        grp.z_project = make_conv(p + ".project", zc, c, 1);
        for (int k = 0; k < cfg_.decoder_cells; ++k)
          grp.cells.push_back(make_decoder_cell(p + ".cell" + std::to_string(k), c, l >= cfg_.split));
        groups_.push_back(std::move(grp));
      }
    }
    final_up_ = make_mix("dec.full.up", cfg_.scale_channels(S - 1), base);
    for (int k = 0; k < cfg_.decoder_cells; ++k)
      post_cells_.push_back(make_decoder_cell("dec.full.cell" + std::to_string(k), base, true));
    out_conv_ = make_conv("dec.out", base, 1, 3);
  }

  // ---- forward pieces ----

  Var embed(ad::Tape<T>& tape, const std::vector<SpeakerId>& y) const {
    Tensor<T> onehot(Shape{static_cast<int>(y.size()), vocab_size_, 1, 1});
    for (std::size_t n = 0; n < y.size(); ++n) onehot.at(static_cast<int>(n), y[n].value, 0, 0) = T(1);
    return ad::linear(tape.constant(std::move(onehot)), tape.parameter(*embedding_));
  }

  Var cin(ad::Tape<T>& tape, int site, const Var& x, const Var& emb) const {
    const auto& c = cins_[static_cast<std::size_t>(site)];
    Var gb;
    if (c.conditioned) {
      if (!emb) throw InputError("speaker-conditioned normalization reached without a speaker");
      gb = ad::linear(emb, tape.parameter(*c.map), tape.parameter(*c.bias));
    } else {
      gb = tape.parameter(*c.bias);
    }
    return ad::instance_norm_affine(x, ad::slice_channels(gb, 0, c.channels),
                                    ad::slice_channels(gb, c.channels, 2 * c.channels), static_cast<T>(cfg_.cin_epsilon));
  }

  Var encoder_cell(ad::Tape<T>& tape, const detail::EncoderCell<T>& cell, const Var& x, const Var& emb) const {
    auto r = cell.conv1(tape, ad::swish(cin(tape, cell.cin1, x, emb)));
    r = cell.conv2(tape, ad::swish(cin(tape, cell.cin2, r, emb)));
    return ad::add(x, ad::scale(r, kResidualScale));
  }

  Var decoder_cell(ad::Tape<T>& tape, const detail::DecoderCell<T>& cell, const Var& x, const Var& emb) const {
    auto r = cell.expand(tape, cin(tape, cell.cin1, x, emb));
    r = cell.spatial(tape, ad::swish(cin(tape, cell.cin2, r, emb)));
    r = cell.contract(tape, ad::swish(cin(tape, cell.cin3, r, emb)));
    r = cin(tape, cell.cin4, r, emb);
    return ad::add(x, ad::scale(r, kResidualScale));
  }

  std::vector<Var> bottom_up(ad::Tape<T>& tape, const Var& x, const Var& emb) const {
    std::vector<Var> feats(static_cast<std::size_t>(cfg_.scales));
    Var h = stem_(tape, x);
    for (const auto& cell : pre_cells_) h = encoder_cell(tape, cell, h, emb);
    for (int i = cfg_.scales - 1; i >= 0; --i) {
      h = down_[static_cast<std::size_t>(i)](tape, h);
      for (const auto& cell : enc_cells_[static_cast<std::size_t>(i)]) h = encoder_cell(tape, cell, h, emb);
      feats[static_cast<std::size_t>(i)] = h;
    }
    return feats;
  }

  // The learned top constant repeated periodically along time, for inputs
  // wider or narrower than a training segment.
  Tensor<T> tiled_top(int width) const {
    const Tensor<T>& top = top_->value;
    const Shape s = top.shape();
    const int w = width / (1 << cfg_.scales);
    Tensor<T> out(Shape{1, s.c, s.h, w});
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < w; ++x) out.at(0, c, y, x) = top.at(0, c, y, x % s.w);
    return out;
  }

  Var clamp_logvar(const Var& v) const {
    return ad::clamp(v, static_cast<T>(cfg_.logvar_min), static_cast<T>(cfg_.logvar_max));
  }

  Encoding<T> run_encode(const Tensor<T>& x, const std::vector<SpeakerId>& y, LatentSource source,
                         std::uint64_t seed) const {
    ad::Tape<T> tape(false);
    Rng rng(seed);
    ForwardRequest<T> req;
    req.x = &x;
    req.encoder_speakers = y;
    req.decoder_speakers = y;
    req.sources.assign(static_cast<std::size_t>(cfg_.groups), source);
    req.rng = &rng;
    // The decoder output is not needed; stopping at the last prior would skip
    // z_L, so run the full pass.
    const auto trace = forward(tape, req);
    Encoding<T> enc;
    enc.z.split = cfg_.split;
    for (const auto& lt : trace.levels) {
      enc.posteriors.push_back({lt.post_mean.value(), lt.post_logvar.value()});
      enc.priors.push_back({lt.prior_mean.value(), lt.prior_logvar.value()});
      enc.z.groups.push_back(lt.z.value());
    }
    return enc;
  }

  ModelConfig cfg_;
  int vocab_size_;
  Rng init_rng_;
  ad::ParameterStore<T> store_;

  ad::Parameter<T>* embedding_ = nullptr;
  std::vector<detail::Cin<T>> cins_;
  detail::Conv<T> stem_;
  std::vector<detail::EncoderCell<T>> pre_cells_;
  std::vector<detail::Mix<T>> down_;
  std::vector<std::vector<detail::EncoderCell<T>>> enc_cells_;
  ad::Parameter<T>* top_ = nullptr;
  std::vector<detail::Mix<T>> up_;
  std::vector<detail::Group<T>> groups_;
  detail::Mix<T> final_up_;
  std::vector<detail::DecoderCell<T>> post_cells_;
  detail::Conv<T> out_conv_;
};

}  // namespace cdhvae::model
