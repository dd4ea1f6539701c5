// Command-line front end. Every subcommand accepts --config, --set key=value,
// --out and --seed; the convenience flags below are shorthands for --set.
//
// Exit status: 0 ok, 1 unexpected failure, 2 configuration, 3 invalid input,
// 4 numerical, 5 I/O, 6 corrupt file, 7 unsupported file version.

#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdhvae/driver/commands.hpp"

namespace {

using cdhvae::driver::RunSpec;

struct Sub {
  CLI::App* app = nullptr;
  RunSpec spec;
  std::string out = "out";
  // Shorthand flag -> dotted key, filled by CLI11 and turned into overrides.
  std::vector<std::pair<std::string, std::string>> shorthands;
  std::vector<std::unique_ptr<std::string>> storage;
  std::vector<std::unique_ptr<bool>> switches;
  std::vector<std::pair<std::string, bool*>> toggles;

  void common() {
    app->add_option("--config", spec.config_path, "Key-value config file")->check(CLI::ExistingFile);
    app->add_option("--set", spec.overrides, "Override, e.g. --set train.lr=1e-3 (repeatable)");
    app->add_option("--out", out, "Output directory")->capture_default_str();
    app->add_option("--seed", spec.seed, "Top-level seed");
  }

  void option(const std::string& flag, const std::string& key, const std::string& help) {
    storage.push_back(std::make_unique<std::string>());
    app->add_option(flag, *storage.back(), help + " (" + key + ")");
    shorthands.emplace_back(key, flag);
  }

  void toggle(const std::string& flag, const std::string& key, const std::string& help) {
    switches.push_back(std::make_unique<bool>(false));
    app->add_flag(flag, *switches.back(), help + " (" + key + ")");
    toggles.emplace_back(key, switches.back().get());
  }

  RunSpec finish() {
    // Shorthands apply after explicit --set so they read as the most specific.
    for (std::size_t i = 0; i < shorthands.size(); ++i)
      if (app->count(shorthands[i].second) > 0) spec.overrides.push_back(shorthands[i].first + "=" + *storage[i]);
    for (auto& [key, value] : toggles)
      if (*value) spec.overrides.push_back(key + "=true");
    spec.subcommand = app->get_name();
    spec.out_dir = out;
    return spec;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speaker-disentangling hierarchical VAE for mel-spectrogram voice conversion"};
  app.require_subcommand(1);
  std::vector<Sub> subs(7);
  const char* names[] = {"prepare", "toy-corpus", "train", "convert", "rd-sweep", "probe", "bench"};
  const char* about[] = {
      "Extract log-mel segments from <corpus>/<speaker>/*.wav",
      "Write a synthetic multi-speaker corpus",
      "Train a model on a prepared dataset",
      "Convert an utterance to a target speaker",
      "Train one model per beta and plot rate against distortion",
      "Linear speaker probe on latents or raw features",
      "Time conversion of N and 2N segments",
  };
  for (std::size_t i = 0; i < subs.size(); ++i) {
    subs[i].app = app.add_subcommand(names[i], about[i]);
    subs[i].common();
  }
  auto& prepare = subs[0];
  prepare.option("--corpus", "data.corpus", "Corpus root");
  auto& toy = subs[1];
  toy.option("--speakers", "toy.speakers", "Number of speakers");
  toy.option("--utterances", "toy.utterances", "Utterances per speaker");
  auto& train = subs[2];
  train.option("--data", "data.manifest", "Prepared dataset directory or manifest");
  std::string resume;
  train.app->add_option("--resume", resume, "Continue from this checkpoint");
  auto& convert = subs[3];
  convert.option("--checkpoint", "convert.checkpoint", "Trained checkpoint");
  convert.option("--input", "convert.input", ".mel feature file or .wav");
  convert.option("--source", "convert.source", "Source speaker name");
  convert.option("--target", "convert.target", "Target speaker name");
  convert.option("--mode", "convert.mode", "mean or sampled");
  convert.toggle("--utterance-wise", "convert.utterance_wise", "One pass over the whole utterance");
  convert.toggle("--ema", "convert.use_ema", "Use EMA weights");
  auto& sweep = subs[4];
  sweep.option("--data", "data.manifest", "Prepared dataset directory or manifest");
  sweep.option("--betas", "sweep.betas", "Comma-separated beta values");
  auto& probe = subs[5];
  probe.option("--data", "data.manifest", "Prepared dataset directory or manifest");
  probe.option("--checkpoint", "probe.checkpoint", "Trained checkpoint");
  probe.option("--target", "probe.target", "z_le_K, z_gt_K or mel");
  auto& bench = subs[6];
  bench.option("--checkpoint", "bench.checkpoint", "Trained checkpoint (default: fresh model)");
  bench.option("--segments", "bench.segments", "Segments in the base batch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cdhvae::exit_code(cdhvae::ErrorKind::Configuration);
  }

  try {
    for (auto& s : subs) {
      if (!s.app->parsed()) continue;
      const auto spec = s.finish();
      cdhvae::driver::Context ctx;
      ctx.config = cdhvae::driver::resolve(spec);
      ctx.out_dir = *spec.out_dir;
      const auto& name = spec.subcommand;
      if (name == "prepare") cdhvae::driver::cmd_prepare(ctx);
      else if (name == "toy-corpus") cdhvae::driver::cmd_toy_corpus(ctx);
      else if (name == "train") cdhvae::driver::cmd_train(ctx, resume);
      else if (name == "convert") cdhvae::driver::cmd_convert(ctx);
      else if (name == "rd-sweep") cdhvae::driver::cmd_rd_sweep(ctx);
      else if (name == "probe") cdhvae::driver::cmd_probe(ctx);
      else if (name == "bench") cdhvae::driver::cmd_bench(ctx);
    }
  } catch (const cdhvae::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cdhvae::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
