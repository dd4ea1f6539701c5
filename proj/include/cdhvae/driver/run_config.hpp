#pragma once

// Everything a subcommand can be configured with, as one key-value tree:
//
//   seed = 0
//   [data]    corpus, manifest, held_out_fraction
//   [mel]     feature extraction
//   [toy]     synthetic corpus
//   [model]   architecture
//   [train]   optimization
//   [convert] checkpoint, input, source, target, mode, utterance_wise, use_ema
//   [sweep]   betas, retry
//   [probe]   checkpoint, target, control, classifier settings
//   [bench]   checkpoint, segments, repeats, warmup
//
// Resolution order: built-in defaults, then the --config file, then each
// --set override, then --seed. Unknown keys are errors. The resolved text is
// written into every output directory.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cdhvae/analysis/probe.hpp"
#include "cdhvae/analysis/toy_corpus.hpp"
#include "cdhvae/core/kvconfig.hpp"
#include "cdhvae/model/config.hpp"
#include "cdhvae/trainer/config.hpp"

namespace cdhvae::driver {

struct DataSection {
  std::string corpus;    // directory of <speaker>/*.wav
  std::string manifest;  // prepared dataset (manifest.txt)
  double held_out_fraction = 0.25;

  template <typename V>
  void fields(V&& v) {
    v("corpus", corpus);
    v("manifest", manifest);
    v("held_out_fraction", held_out_fraction);
  }
};

struct ConvertSection {
  std::string checkpoint;
  std::string input;  // .mel feature file, or .wav routed through feature extraction
  std::string source;
  std::string target;
  std::string mode = "mean";
  bool utterance_wise = false;
  bool use_ema = false;

  template <typename V>
  void fields(V&& v) {
    v("checkpoint", checkpoint);
    v("input", input);
    v("source", source);
    v("target", target);
    v("mode", mode);
    v("utterance_wise", utterance_wise);
    v("use_ema", use_ema);
  }
};

struct SweepSection {
  std::vector<double> betas{0.5, 1.0, 4.0};
  bool retry = true;

  template <typename V>
  void fields(V&& v) {
    v("betas", betas);
    v("retry", retry);
  }
};

struct ProbeSection {
  std::string checkpoint;
  std::string target = "z_le_K";
  bool control = true;  // also run the permuted-label control
  analysis::ProbeOptions options;

  template <typename V>
  void fields(V&& v) {
    v("checkpoint", checkpoint);
    v("target", target);
    v("control", control);
    options.fields(v);
  }
};

struct BenchSection {
  std::string checkpoint;  // empty: a freshly initialized model of [model]
  int segments = 10;
  int repeats = 9;
  int warmup = 1;

  template <typename V>
  void fields(V&& v) {
    v("checkpoint", checkpoint);
    v("segments", segments);
    v("repeats", repeats);
    v("warmup", warmup);
  }
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSection data;
  features::MelParams mel;
  analysis::ToyCorpusConfig toy;
  model::ModelConfig model;
  trainer::TrainConfig train;
  ConvertSection convert;
  SweepSection sweep;
  ProbeSection probe;
  BenchSection bench;

  template <typename F>
  void sections(F&& f) {
    f("data", data);
    f("mel", mel);
    f("toy", toy);
    f("model", model);
    f("train", train);
    f("convert", convert);
    f("sweep", sweep);
    f("probe", probe);
    f("bench", bench);
  }

  /// Derived values: one seed drives everything.
  void propagate_seed() {
    train.seed = seed;
    toy.seed = seed;
  }

  void validate() const {
    mel.validate();
    toy.validate();
    model.validate();
    train.validate();
    probe.options.validate();
    if (!(data.held_out_fraction > 0 && data.held_out_fraction < 1))
      throw ConfigError("data: held_out_fraction must be in (0, 1)");
    if (convert.mode != "mean" && convert.mode != "sampled") throw ConfigError("convert: mode must be mean or sampled");
    for (double b : sweep.betas)
      if (!(b >= 0)) throw ConfigError("sweep: betas must be >= 0");
    if (bench.segments < 1 || bench.repeats < 1 || bench.warmup < 0) throw ConfigError("bench: bad counts");
  }
};

inline constexpr const char* kDerivedKeys[] = {"train.seed", "toy.seed"};

inline RunConfig resolve(const KeyValueConfig& kv) {
  RunConfig rc;
  std::set<std::string> consumed;
  if (const auto* s = kv.find("seed")) {
    kv_detail::parse_into(*s, "seed", rc.seed);
    consumed.insert("seed");
  }
  rc.sections([&](const char* name, auto& section) { read_section(kv, name, section, consumed); });
  reject_unknown(kv, consumed);
  for (const char* k : kDerivedKeys)
    if (consumed.count(k)) throw ConfigError(std::string(k) + " is derived from the top-level seed; set `seed` instead");
  rc.propagate_seed();
  rc.validate();
  return rc;
}

/// Canonical text of a resolved config; parsing it gives the same config.
inline std::string resolved_text(RunConfig rc) {
  KeyValueConfig kv;
  kv.set("seed", std::to_string(rc.seed));
  rc.sections([&](const char* name, auto& section) { write_section(kv, name, section); });
  for (const char* k : kDerivedKeys) kv.erase(k);
  return kv.text();
}

struct RunSpec {
  std::string subcommand;
  std::optional<std::filesystem::path> config_path;
  std::vector<std::string> overrides;  // dotted key=value
  std::optional<std::filesystem::path> out_dir;
  std::optional<std::uint64_t> seed;
};

inline RunConfig resolve(const RunSpec& spec) {
  KeyValueConfig kv;
  if (spec.config_path) {
    const auto path = *spec.config_path;
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    kv = KeyValueConfig::parse(io::read_text(path), path.string());
  }
  for (const auto& o : spec.overrides) kv.apply_override(o);
  if (spec.seed) kv.set("seed", std::to_string(*spec.seed));
  return resolve(kv);
}

}  // namespace cdhvae::driver
