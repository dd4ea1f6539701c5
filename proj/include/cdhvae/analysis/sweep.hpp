#pragma once

// Beta sweeps: one model per beta, identical data split, initialization,
// batch order and evaluation noise, so that beta is the only thing varying.

#include <algorithm>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cdhvae/core/binary_io.hpp"
#include "cdhvae/objective/objective.hpp"
#include "cdhvae/trainer/trainer.hpp"

namespace cdhvae::analysis {

struct DatasetSplit {
  features::DatasetManifest train;
  features::DatasetManifest test;
};

/// Per-speaker held-out split of segment indices: each speaker with n >= 2
/// segments gives max(1, round(fraction * n)) of them to the test side.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    const features::DatasetManifest& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0 && fraction < 1)) throw ConfigError("held-out fraction must be in (0, 1)");
  std::vector<std::vector<std::size_t>> by_speaker(data.vocab.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    by_speaker[static_cast<std::size_t>(data.speaker_of(i).value)].push_back(i);
  std::vector<std::size_t> train, test;
  Rng rng(derive_seed(seed, "split"));
  for (auto& idx : by_speaker) {
    rng.shuffle(idx.begin(), idx.end());
    std::size_t n_test = 0;
    if (idx.size() >= 2)
      n_test = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size()))),
                                       1, idx.size() - 1);
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  if (train.empty() || test.empty()) throw InputError("dataset too small to hold out segments");
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {train, test};
}

inline DatasetSplit split_segments(const features::DatasetManifest& data, double fraction, std::uint64_t seed) {
  const auto [train, test] = split_indices(data, fraction, seed);
  return {data.subset(train), data.subset(test)};
}

/// CRC32 over the manifest text and every feature value.
inline std::uint32_t dataset_fingerprint(const features::DatasetManifest& data) {
  io::ByteWriter w;
  w.str(features::manifest_text(data));
  for (const auto& u : data.features)
    for (float v : u.frames.values()) w.f32(v);
  return io::crc32_of(w.bytes().data(), w.bytes().size());
}

struct SweepEntry {
  double beta = 0;
  objective::RDPoint point;
  std::uint64_t train_seed = 0;  // differs from the sweep's only after a retry
  int attempts = 1;
  std::string checkpoint_path;   // empty when nothing was written
  trainer::Checkpoint checkpoint;
};

struct SweepResult {
  std::vector<SweepEntry> entries;  // strictly increasing beta
  std::uint32_t dataset_fingerprint = 0;
  std::uint64_t seed = 0;
  std::size_t train_segments = 0, test_segments = 0;

  std::vector<objective::RDPoint> points() const {
    std::vector<objective::RDPoint> p;
    for (const auto& e : entries) p.push_back(e.point);
    return p;
  }
};

struct SweepOptions {
  double held_out_fraction = 0.25;
  bool retry = true;                 // one re-seed retry per point on an RD-order violation
  std::optional<std::filesystem::path> out_dir;
  LogSink log;
  features::MelParams mel;
};

/// Index of the first point breaking the expected order (rate non-increasing,
/// distortion non-decreasing in beta), or npos.
inline std::size_t first_rd_violation(const std::vector<objective::RDPoint>& p) {
  for (std::size_t i = 1; i < p.size(); ++i)
    if (p[i].rate > p[i - 1].rate || p[i].distortion < p[i - 1].distortion) return i;
  return std::string::npos;
}

inline std::string beta_label(double beta) { return "beta_" + format_double(beta); }

/// Train one model per beta on a held-out split and evaluate it on the other
/// side. If training aborts, the finished points are kept on disk and the
/// error propagates.
inline SweepResult rd_sweep(const features::DatasetManifest& data, const model::ModelConfig& mcfg,
                            std::vector<double> betas, const trainer::TrainConfig& tcfg,
                            const SweepOptions& opt = {}) {
  if (betas.empty()) throw ConfigError("sweep: no beta values");
  for (double b : betas)
    if (!(b >= 0)) throw ConfigError("sweep: beta must be >= 0, got " + format_double(b));
  std::sort(betas.begin(), betas.end());
  if (std::adjacent_find(betas.begin(), betas.end()) != betas.end()) throw ConfigError("sweep: duplicate beta");
  mcfg.validate();
  tcfg.validate();

  const auto split = split_segments(data, opt.held_out_fraction, tcfg.seed);
  SweepResult res;
  res.seed = tcfg.seed;
  res.dataset_fingerprint = dataset_fingerprint(data);
  res.train_segments = split.train.size();
  res.test_segments = split.test.size();
  const std::uint64_t eval_seed = derive_seed(tcfg.seed, "evaluate");

  auto write_table = [&] {
    if (!opt.out_dir) return;
    io::write_text(*opt.out_dir / "rd_table.tsv", objective::rd_table(res.points()));
  };
  auto run_point = [&](double beta, std::uint64_t train_seed, int attempt) {
    auto cfg = tcfg;
    cfg.beta = beta;
    cfg.seed = train_seed;
    // Initialization and batch order both follow the (possibly re-drawn) seed.
    model::Cdhvae<float> m(mcfg, static_cast<int>(data.vocab.size()), derive_seed(train_seed, "model"));
    trainer::TrainOptions topt;
    topt.mel = opt.mel;
    topt.log = opt.log;
    SweepEntry e;
    e.beta = beta;
    e.train_seed = train_seed;
    e.attempts = attempt;
    if (opt.out_dir) {
      topt.out_dir = *opt.out_dir / beta_label(beta);
      e.checkpoint_path = (*topt.out_dir / "checkpoint.bin").string();
    }
    if (opt.log) opt.log("sweep: beta " + format_double(beta) + " attempt " + std::to_string(attempt));
    e.checkpoint = trainer::train(m, split.train, cfg, topt);
    e.point = objective::rd_evaluate(m, split.test, beta, 0, eval_seed);
    return e;
  };

  for (double beta : betas) {
    res.entries.push_back(run_point(beta, tcfg.seed, 1));
    write_table();
  }
  if (opt.retry) {
    // Retrain the later point of a violating pair; if that does not resolve
    // it, retrain the earlier one. Each point is retried at most once.
    const std::uint64_t retry_seed = derive_seed(tcfg.seed, "retry");
    for (std::size_t i = first_rd_violation(res.points()); i != std::string::npos;
         i = first_rd_violation(res.points())) {
      std::size_t target = i;
      if (res.entries[target].attempts > 1) target = i - 1;
      if (res.entries[target].attempts > 1) break;
      res.entries[target] = run_point(res.entries[target].beta, retry_seed, 2);
      write_table();
    }
  }
  return res;
}

}  // namespace cdhvae::analysis
