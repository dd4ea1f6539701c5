#pragma once

// Minibatch optimization of the beta-ELBO with Adam, cosine learning-rate
// decay and global-norm gradient clipping.
//
// Randomness: the batch order of epoch e comes from derive_seed(seed, "order")
// and e; the reparameterization noise of step s from derive_seed(seed, "noise")
// and s. A resumed run therefore replays exactly what an uninterrupted run
// would have done.

#include <cmath>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cdhvae/core/text.hpp"
#include "cdhvae/objective/objective.hpp"
#include "cdhvae/trainer/checkpoint.hpp"

namespace cdhvae::trainer {

struct StepRecord {
  std::uint64_t step = 0;  // 1-based
  int epoch = 0;           // 1-based
  double loss = 0;
  double rate = 0;
  double distortion = 0;
  double beta = 0;
  double learning_rate = 0;
  double grad_norm = 0;       // before clipping
  double clipped_norm = 0;    // after clipping
};

struct TrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints and train_log.tsv
  LogSink log;
  std::function<void(const StepRecord&)> on_step;
  features::MelParams mel;  // recorded in checkpoints for conversion
  int stop_after_epoch = 0;  // return early (as if interrupted); the schedule still spans cfg.epochs
};

class Adam {
 public:
  explicit Adam(const ad::ParameterStore<float>& ps) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_.emplace_back(ps[i].value.shape());
      v_.emplace_back(ps[i].value.shape());
    }
  }

  void step(ad::ParameterStore<float>& ps, const TrainConfig& cfg, double lr, std::uint64_t t) {
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t i = 0; i < ps.size(); ++i) {
      auto& p = ps[i];
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = p.grad[k];
        m[k] = static_cast<float>(b1 * m[k] + (1 - b1) * g);
        v[k] = static_cast<float>(b2 * v[k] + (1 - b2) * g * g);
        const double mhat = m[k] / c1;
        const double vhat = v[k] / c2;
        p.value[k] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + cfg.adam_epsilon));
      }
    }
  }

  std::vector<Tensor<float>>& first() { return m_; }
  std::vector<Tensor<float>>& second() { return v_; }

 private:
  std::vector<Tensor<float>> m_, v_;
};

inline double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total) {
  if (cfg.lr_schedule == "constant" || total <= 1) return cfg.learning_rate;
  const double progress = static_cast<double>(step - 1) / static_cast<double>(total - 1);
  const double floor = cfg.min_lr_fraction;
  return cfg.learning_rate * (floor + (1 - floor) * 0.5 * (1 + std::cos(std::numbers::pi * progress)));
}

inline double scheduled_beta(const TrainConfig& cfg, int epoch) {
  if (cfg.kl_warmup_epochs <= 0) return cfg.beta;
  return cfg.beta * std::min(1.0, static_cast<double>(epoch) / cfg.kl_warmup_epochs);
}

inline std::uint64_t steps_per_epoch(std::size_t segments, int batch) {
  return (segments + static_cast<std::size_t>(batch) - 1) / static_cast<std::size_t>(batch);
}

inline std::string train_log_header() { return "epoch\tloss\trate\tdistortion\tlr\tgrad_norm\n"; }

inline std::string train_log_row(const EpochRecord& e) {
  return std::to_string(e.epoch) + "\t" + format_fixed(e.loss, 6) + "\t" + format_fixed(e.rate, 6) + "\t" +
         format_fixed(e.distortion, 6) + "\t" + format_double(e.learning_rate) + "\t" + format_fixed(e.grad_norm, 6) +
         "\n";
}

namespace detail {

inline std::vector<NamedTensor> name_like(const ad::ParameterStore<float>& ps, const std::vector<Tensor<float>>& ts) {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({ps[i].name, ts[i]});
  return out;
}

inline void restore_like(const ad::ParameterStore<float>& ps, const std::vector<NamedTensor>& src,
                         std::vector<Tensor<float>>& dst, const char* what) {
  if (src.size() != ps.size()) throw ConfigError(std::string("resume: ") + what + " does not match the model");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (src[i].name != ps[i].name || src[i].value.shape() != ps[i].value.shape())
      throw ConfigError(std::string("resume: ") + what + " entry " + src[i].name + " does not match the model");
    dst[i] = src[i].value;
  }
}

}  // namespace detail

/// Train `m` on `data` for cfg.epochs epochs in total (a resumed run continues
/// from the checkpoint's epoch). Returns the final checkpoint.
inline Checkpoint train(model::Cdhvae<float>& m, const features::DatasetManifest& data, const TrainConfig& cfg,
                        const TrainOptions& opt = {}, const Checkpoint* resume = nullptr) {
  cfg.validate();
  if (data.size() == 0) throw InputError("train: dataset has no segments");
  if (static_cast<int>(data.vocab.size()) != m.vocab_size())
    throw ConfigError("train: dataset has " + std::to_string(data.vocab.size()) + " speakers, model expects " +
                      std::to_string(m.vocab_size()));
  if (data.segment_frames != m.config().segment_frames)
    throw ConfigError("train: dataset segments have " + std::to_string(data.segment_frames) +
                      " frames, model expects " + std::to_string(m.config().segment_frames));

  auto& ps = m.parameters();
  Adam adam(ps);
  std::vector<Tensor<float>> ema;
  if (cfg.ema_decay > 0)
    for (std::size_t i = 0; i < ps.size(); ++i) ema.push_back(ps[i].value);

  Checkpoint ck;
  ck.model_config = m.config();
  ck.train_config = cfg;
  ck.mel = opt.mel;
  ck.normalization = data.normalization;
  ck.vocab = data.vocab;
  if (resume) {
    if (!(resume->vocab == data.vocab)) throw ConfigError("resume: checkpoint speaker vocabulary differs from dataset");
    load_parameters(m, resume->parameters, "resume");
    detail::restore_like(ps, resume->adam_m, adam.first(), "optimizer state");
    detail::restore_like(ps, resume->adam_v, adam.second(), "optimizer state");
    if (cfg.ema_decay > 0 && !resume->ema.empty()) {
      std::vector<Tensor<float>> e(ps.size());
      detail::restore_like(ps, resume->ema, e, "EMA state");
      ema = std::move(e);
    }
    ck.epoch = resume->epoch;
    ck.step = resume->step;
    ck.history = resume->history;
    ck.mel = resume->mel;
  }

  auto snapshot = [&] {
    ck.parameters = snapshot_parameters(m);
    ck.adam_m = detail::name_like(ps, adam.first());
    ck.adam_v = detail::name_like(ps, adam.second());
    ck.ema = ema.empty() ? std::vector<NamedTensor>{} : detail::name_like(ps, ema);
    return ck;
  };
  auto write_outputs = [&](bool final_write) {
    if (!opt.out_dir) return;
    const auto c = snapshot();
    if (final_write) save_checkpoint(c, *opt.out_dir / "checkpoint.bin");
    else save_checkpoint(c, *opt.out_dir / ("checkpoint_epoch" + std::to_string(c.epoch) + ".bin"));
    std::string log = train_log_header();
    for (const auto& e : c.history) log += train_log_row(e);
    io::write_text(*opt.out_dir / "train_log.tsv", log);
  };

  const std::uint64_t per_epoch = steps_per_epoch(data.size(), cfg.batch_size);
  const std::uint64_t total = per_epoch * static_cast<std::uint64_t>(cfg.epochs);
  const std::uint64_t order_seed = derive_seed(cfg.seed, "order");
  const std::uint64_t noise_seed = derive_seed(cfg.seed, "noise");

  for (int epoch = ck.epoch + 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng order_rng(derive_seed(order_seed, static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order.begin(), order.end());
    const double beta = scheduled_beta(cfg, epoch);

    double sum_loss = 0, sum_rate = 0, sum_dist = 0, sum_norm = 0, lr = cfg.learning_rate;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      auto [x, y] = objective::make_batch<float>(data, idx);
      const std::uint64_t step = ck.step + 1;
      lr = scheduled_lr(cfg, step, total);

      ps.zero_grad();
      ad::Tape<float> tape(true);
      Rng noise(derive_seed(noise_seed, step));
      auto graph = objective::elbo_graph(m, tape, x, y, beta, noise);
      objective::ObjectiveBreakdown b;
      try {
        b = objective::breakdown_of(graph, beta);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + ": " + e.what());
      }
      tape.backward(graph.loss);

      double sq = 0;
      for (std::size_t i = 0; i < ps.size(); ++i)
        for (float g : ps[i].grad.values()) sq += static_cast<double>(g) * g;
      const double norm = std::sqrt(sq);
      if (!std::isfinite(norm)) {
        std::string per_param;
        for (std::size_t i = 0; i < ps.size(); ++i) {
          double s = 0;
          for (float g : ps[i].grad.values()) s += static_cast<double>(g) * g;
          if (!std::isfinite(s)) per_param += " " + ps[i].name;
        }
        throw NumericalError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) +
                             ": non-finite gradient norm; loss=" + format_double(b.loss) +
                             objective::detail::level_report(b.per_level_kl) + "; non-finite in:" + per_param);
      }
      double clipped = norm;
      if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
        // The small margin keeps the rescaled float norm at or below the bound.
        const float s = static_cast<float>(cfg.grad_clip / (norm * (1 + 1e-6)));
        for (std::size_t i = 0; i < ps.size(); ++i)
          for (auto& g : ps[i].grad.values()) g *= s;
        double sq2 = 0;
        for (std::size_t i = 0; i < ps.size(); ++i)
          for (float g : ps[i].grad.values()) sq2 += static_cast<double>(g) * g;
        clipped = std::sqrt(sq2);
      }
      adam.step(ps, cfg, lr, step);
      if (!ema.empty())
        for (std::size_t i = 0; i < ps.size(); ++i)
          for (std::size_t k = 0; k < ema[i].size(); ++k)
            ema[i][k] = static_cast<float>(cfg.ema_decay * ema[i][k] + (1 - cfg.ema_decay) * ps[i].value[k]);
      ck.step = step;

      const double w = static_cast<double>(idx.size());
      sum_loss += w * b.loss;
      sum_rate += w * b.rate();
      sum_dist += w * b.distortion;
      sum_norm += norm;
      seen += idx.size();
      if (opt.on_step) opt.on_step({step, epoch, b.loss, b.rate(), b.distortion, beta, lr, norm, clipped});
    }

    EpochRecord rec{epoch, sum_loss / seen, sum_rate / seen, sum_dist / seen, lr,
                    sum_norm / static_cast<double>(per_epoch)};
    ck.history.push_back(rec);
    ck.epoch = epoch;
    if (opt.log)
      opt.log("epoch " + std::to_string(epoch) + "/" + std::to_string(cfg.epochs) + " loss " +
              format_fixed(rec.loss, 3) + " rate " + format_fixed(rec.rate, 3) + " distortion " +
              format_fixed(rec.distortion, 3));
    if (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs) write_outputs(false);
    if (epoch == opt.stop_after_epoch) break;
  }
  write_outputs(true);
  return snapshot();
}

}  // namespace cdhvae::trainer
