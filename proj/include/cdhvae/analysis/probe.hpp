#pragma once

// Linear speaker probes: a multinomial logistic regression from flattened
// features (posterior means of a latent range, or the normalized mel itself)
// to speaker labels, fit on one side of a held-out split and scored on the
// other. The classifier is deliberately weak so that it measures linearly
// accessible speaker information rather than its own capacity.

#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cdhvae/analysis/sweep.hpp"
#include "cdhvae/model/cdhvae.hpp"

namespace cdhvae::analysis {

enum class ProbeTarget { InvariantLatents, DependentLatents, RawMel };

inline std::string probe_target_name(ProbeTarget t) {
  switch (t) {
    case ProbeTarget::InvariantLatents: return "z_le_K";
    case ProbeTarget::DependentLatents: return "z_gt_K";
    case ProbeTarget::RawMel: return "mel";
  }
  return "?";
}

inline ProbeTarget parse_probe_target(const std::string& s) {
  if (s == "z_le_K" || s == "invariant") return ProbeTarget::InvariantLatents;
  if (s == "z_gt_K" || s == "dependent") return ProbeTarget::DependentLatents;
  if (s == "mel" || s == "raw") return ProbeTarget::RawMel;
  throw ConfigError("probe target must be z_le_K, z_gt_K or mel, got '" + s + "'");
}

struct ProbeOptions {
  double held_out_fraction = 0.25;
  bool permute_labels = false;  // control: destroys any feature-label link
  int iterations = 300;
  double learning_rate = 0.5;
  double l2 = 1e-2;

  template <typename V>
  void fields(V&& v) {
    v("held_out_fraction", held_out_fraction);
    v("permute_labels", permute_labels);
    v("iterations", iterations);
    v("learning_rate", learning_rate);
    v("l2", l2);
  }

  void validate() const {
    if (!(held_out_fraction > 0 && held_out_fraction < 1)) throw ConfigError("probe: held_out_fraction must be in (0, 1)");
    if (iterations < 1 || !(learning_rate > 0) || !(l2 >= 0)) throw ConfigError("probe: bad optimizer settings");
  }
};

struct ProbeReport {
  ProbeTarget target = ProbeTarget::RawMel;
  bool permuted = false;
  double accuracy = 0;
  double chance = 0;                   // 1 / |Y|
  double standard_error = 0;           // binomial, at the measured accuracy
  double chance_standard_error = 0;    // binomial, at chance
  int speakers = 0;
  std::size_t train_count = 0, test_count = 0;
  std::size_t feature_dim = 0;
};

inline std::string probe_text(const ProbeReport& r) {
  std::string s;
  s += "target\t" + probe_target_name(r.target) + "\n";
  s += "permuted_labels\t" + std::string(r.permuted ? "true" : "false") + "\n";
  s += "accuracy\t" + format_fixed(r.accuracy, 6) + "\n";
  s += "standard_error\t" + format_fixed(r.standard_error, 6) + "\n";
  s += "chance\t" + format_fixed(r.chance, 6) + "\n";
  s += "chance_standard_error\t" + format_fixed(r.chance_standard_error, 6) + "\n";
  s += "speakers\t" + std::to_string(r.speakers) + "\n";
  s += "train_segments\t" + std::to_string(r.train_count) + "\n";
  s += "test_segments\t" + std::to_string(r.test_count) + "\n";
  s += "feature_dim\t" + std::to_string(r.feature_dim) + "\n";
  return s;
}

/// Softmax regression by full-batch gradient descent from zero weights
/// (deterministic). Rows of `x` are samples; labels are 0..classes-1.
class LinearProbe {
 public:
  void fit(const Eigen::MatrixXd& x, const std::vector<int>& labels, int classes, const ProbeOptions& opt) {
    const auto n = x.rows();
    mean_ = x.colwise().mean();
    Eigen::MatrixXd xc = x.rowwise() - mean_.transpose();
    scale_ = (xc.array().square().colwise().sum() / static_cast<double>(n)).sqrt().max(1e-8).inverse().matrix().transpose();
    xc = xc.array().rowwise() * scale_.transpose().array();
    w_ = Eigen::MatrixXd::Zero(x.cols(), classes);
    b_ = Eigen::VectorXd::Zero(classes);
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(n, classes);
    for (Eigen::Index i = 0; i < n; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1;
    for (int it = 0; it < opt.iterations; ++it) {
      const Eigen::MatrixXd p = softmax((xc * w_).rowwise() + b_.transpose());
      const Eigen::MatrixXd d = (p - y) / static_cast<double>(n);
      w_ -= opt.learning_rate * (xc.transpose() * d + opt.l2 * w_);
      b_ -= opt.learning_rate * d.colwise().sum().transpose();
    }
  }

  std::vector<int> predict(const Eigen::MatrixXd& x) const {
    Eigen::MatrixXd xc = x.rowwise() - mean_.transpose();
    xc = xc.array().rowwise() * scale_.transpose().array();
    const Eigen::MatrixXd logits = (xc * w_).rowwise() + b_.transpose();
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) logits.row(i).maxCoeff(&out[static_cast<std::size_t>(i)]);
    return out;
  }

 private:
  static Eigen::MatrixXd softmax(Eigen::MatrixXd z) {
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      z.row(i).array() -= z.row(i).maxCoeff();
      z.row(i) = z.row(i).array().exp().matrix();
      z.row(i) /= z.row(i).sum();
    }
    return z;
  }

  Eigen::VectorXd mean_, scale_;
  Eigen::MatrixXd w_;
  Eigen::VectorXd b_;
};

/// Flattened probe features for each listed segment, one row per segment.
inline Eigen::MatrixXd probe_features(const model::Cdhvae<float>* m, const features::DatasetManifest& data,
                                      const std::vector<std::size_t>& indices, ProbeTarget target) {
  std::vector<std::vector<float>> rows;
  for (std::size_t start = 0; start < indices.size(); start += 8) {
    const std::size_t end = std::min(indices.size(), start + 8);
    const std::span<const std::size_t> chunk(indices.data() + start, end - start);
    auto [x, y] = objective::make_batch<float>(data, chunk);
    const int n = x.shape().n;
    std::vector<std::vector<float>> part(static_cast<std::size_t>(n));
    if (target == ProbeTarget::RawMel) {
      const std::size_t per = x.size() / static_cast<std::size_t>(n);
      for (int i = 0; i < n; ++i)
        part[static_cast<std::size_t>(i)].assign(x.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                 x.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    } else {
      const auto enc = m->encode_mean(x, y);
      const int K = m->config().split, L = m->config().groups;
      const int lo = target == ProbeTarget::InvariantLatents ? 1 : K + 1;
      const int hi = target == ProbeTarget::InvariantLatents ? K : L;
      for (int l = lo; l <= hi; ++l) {
        const auto& z = enc.posteriors[static_cast<std::size_t>(l - 1)].mean;
        const std::size_t per = z.size() / static_cast<std::size_t>(n);
        for (int i = 0; i < n; ++i)
          part[static_cast<std::size_t>(i)].insert(part[static_cast<std::size_t>(i)].end(),
                                                   z.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                                                   z.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
      }
    }
    for (auto& r : part) rows.push_back(std::move(r));
  }
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return out;
}

/// Held-out speaker classification accuracy from the chosen features.
/// `m` may be null for the raw-mel probe.
inline ProbeReport speaker_probe(const model::Cdhvae<float>* m, const features::DatasetManifest& data,
                                 ProbeTarget target, std::uint64_t seed, const ProbeOptions& opt = {}) {
  opt.validate();
  const int classes = static_cast<int>(data.vocab.size());
  if (classes < 2) throw InputError("probe: need at least 2 speakers, dataset has " + std::to_string(classes));
  if (target != ProbeTarget::RawMel) {
    if (!m) throw ConfigError("probe: latent targets need a model");
    if (m->vocab_size() != classes) throw ConfigError("probe: model and dataset vocabularies differ in size");
    if (target == ProbeTarget::DependentLatents && m->config().split == m->config().groups)
      throw ConfigError("probe: z_gt_K is empty when K = L");
  }
  std::vector<int> labels(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.speaker_of(i).value;
  if (opt.permute_labels) {
    Rng rng(derive_seed(seed, "permute"));
    rng.shuffle(labels.begin(), labels.end());
  }
  const auto [train, test] = split_indices(data, opt.held_out_fraction, seed);
  auto pick = [&](const std::vector<std::size_t>& idx) {
    std::vector<int> out;
    for (auto i : idx) out.push_back(labels[i]);
    return out;
  };

  LinearProbe probe;
  const auto xtr = probe_features(m, data, train, target);
  probe.fit(xtr, pick(train), classes, opt);
  const auto pred = probe.predict(probe_features(m, data, test, target));
  const auto truth = pick(test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) correct += pred[i] == truth[i];

  ProbeReport r;
  r.target = target;
  r.permuted = opt.permute_labels;
  r.speakers = classes;
  r.train_count = train.size();
  r.test_count = test.size();
  r.feature_dim = static_cast<std::size_t>(xtr.cols());
  const double n = static_cast<double>(test.size());
  r.accuracy = static_cast<double>(correct) / n;
  r.chance = 1.0 / classes;
  r.standard_error = std::sqrt(r.accuracy * (1 - r.accuracy) / n);
  r.chance_standard_error = std::sqrt(r.chance * (1 - r.chance) / n);
  return r;
}

}  // namespace cdhvae::analysis
