#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include <gtest/gtest.h>

#include "cdhvae/driver/commands.hpp"

using namespace cdhvae;
using namespace cdhvae::driver;
namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kTiny = {
    "model.groups=2",        "model.split=1",        "model.scales=1",
    "model.groups_per_scale=2", "model.channel_multipliers=1", "model.base_channels=4",
    "model.latent_channels=2", "model.speaker_embedding_dim=4", "model.segment_frames=8",
    "toy.speakers=2",        "toy.utterances=3",     "toy.seconds=0.5",
    "train.epochs=2",        "train.batch_size=4",   "bench.segments=2",
    "bench.repeats=2",
};

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cdhvae_driver_" + name);
  fs::remove_all(dir);
  return dir;
}

Context context(std::vector<std::string> extra, const fs::path& out) {
  RunSpec spec;
  spec.overrides = kTiny;
  spec.overrides.insert(spec.overrides.end(), extra.begin(), extra.end());
  Context ctx;
  ctx.config = resolve(spec);
  ctx.out_dir = out;
  ctx.out = [](const std::string&) {};
  ctx.log = [](const std::string&) {};
  return ctx;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CDHVAE_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(RunConfig, DefaultsAreDesk) {
  const auto rc = resolve(KeyValueConfig{});
  EXPECT_EQ(rc.model.groups, 8);
  EXPECT_EQ(rc.model.split, 3);
  EXPECT_EQ(rc.train.seed, 0u);
  EXPECT_EQ(rc.sweep.betas, (std::vector<double>{0.5, 1.0, 4.0}));
}

TEST(RunConfig, LaterSourcesWin) {
  const auto dir = scratch("precedence");
  io::write_text(dir / "a.cfg", "seed = 5\n[train]\nbeta = 2\nepochs = 7\n");
  RunSpec spec;
  spec.config_path = dir / "a.cfg";
  spec.overrides = {"train.beta=3"};
  auto rc = resolve(spec);
  EXPECT_EQ(rc.train.beta, 3.0);
  EXPECT_EQ(rc.train.epochs, 7);
  EXPECT_EQ(rc.seed, 5u);
  EXPECT_EQ(rc.train.seed, 5u);
  spec.seed = 9;
  rc = resolve(spec);
  EXPECT_EQ(rc.seed, 9u);
  EXPECT_EQ(rc.toy.seed, 9u);
  fs::remove_all(dir);
}

TEST(RunConfig, ResolvedTextRoundTrips) {
  RunSpec spec;
  spec.overrides = {"train.beta=0.25", "sweep.betas=1,2", "convert.mode=sampled", "seed=4"};
  const auto rc = resolve(spec);
  const auto text = resolved_text(rc);
  EXPECT_EQ(text.find("train.seed"), std::string::npos);
  const auto again = resolve(KeyValueConfig::parse(text, "resolved"));
  EXPECT_EQ(resolved_text(again), text);
  EXPECT_EQ(again.train.beta, 0.25);
  EXPECT_EQ(again.sweep.betas, (std::vector<double>{1, 2}));
}

TEST(RunConfig, Rejections) {
  RunSpec spec;
  spec.overrides = {"train.betaa=1"};
  EXPECT_THROW(resolve(spec), ConfigError);
  spec.overrides = {"train.seed=1"};
  EXPECT_THROW(resolve(spec), ConfigError);
  spec.overrides = {"model.split=9"};
  EXPECT_THROW(resolve(spec), ConfigError);
  spec.overrides = {"convert.mode=loud"};
  EXPECT_THROW(resolve(spec), ConfigError);
  spec.overrides = {"train.epochs=many"};
  EXPECT_THROW(resolve(spec), ConfigError);
  spec.overrides = {};
  spec.config_path = "/nonexistent/x.cfg";
  EXPECT_THROW(resolve(spec), ConfigError);
}

TEST(Commands, EndToEnd) {
  const auto root = scratch("e2e");
  cmd_toy_corpus(context({}, root / "toy"));
  cmd_prepare(context({"data.corpus=" + (root / "toy").string()}, root / "data"));
  ASSERT_TRUE(fs::exists(root / "data" / "manifest.txt"));

  const std::string data = "data.manifest=" + (root / "data").string();
  cmd_train(context({data}, root / "train"));
  const auto ck = root / "train" / "checkpoint.bin";
  ASSERT_TRUE(fs::exists(ck));
  EXPECT_TRUE(fs::exists(root / "train" / "resolved_config.cfg"));

  // Resuming a finished run with more epochs continues from epoch 2.
  cmd_train(context({data, "train.epochs=3"}, root / "resumed"), ck.string());
  EXPECT_EQ(trainer::load_checkpoint(root / "resumed" / "checkpoint.bin").epoch, 3);

  fs::path input;
  for (const auto& e : fs::recursive_directory_iterator(root / "data"))
    if (e.path().extension() == ".mel") {
      input = e.path();
      break;
    }
  ASSERT_FALSE(input.empty());
  const auto raw = features::read_features(input);
  const auto vocab = trainer::load_checkpoint(ck).vocab;
  const std::vector<std::string> conv = {"convert.checkpoint=" + ck.string(), "convert.input=" + input.string(),
                                         "convert.source=" + vocab.name(SpeakerId(0)),
                                         "convert.target=" + vocab.name(SpeakerId(1))};
  cmd_convert(context(conv, root / "conv"));
  const auto out = root / "conv" / (input.stem().string() + "_to_" + vocab.name(SpeakerId(1)) + ".mel");
  ASSERT_TRUE(fs::exists(out));
  EXPECT_EQ(features::read_features(out).frame_count(), raw.frame_count());
  const auto first = io::read_file(out);
  cmd_convert(context(conv, root / "conv"));
  EXPECT_EQ(io::read_file(out), first);
  const auto record = io::read_text(out.parent_path() / (out.stem().string() + ".txt"));
  EXPECT_NE(record.find("model_checksum"), std::string::npos);

  auto bad = conv;
  bad.back() = "convert.target=nobody";
  EXPECT_THROW(cmd_convert(context(bad, root / "conv2")), Error);

  cmd_probe(context({data, "probe.target=mel"}, root / "probe"));
  EXPECT_NE(io::read_text(root / "probe" / "probe.txt").find("control_accuracy"), std::string::npos);
  cmd_probe(context({data, "probe.checkpoint=" + ck.string()}, root / "probe2"));

  cmd_bench(context({"bench.checkpoint=" + ck.string()}, root / "bench"));
  EXPECT_NE(io::read_text(root / "bench" / "bench.txt").find("time_ratio"), std::string::npos);
  fs::remove_all(root);
}

TEST(Commands, MissingInputs) {
  const auto root = scratch("missing");
  EXPECT_THROW(cmd_train(context({}, root)), ConfigError);
  EXPECT_THROW(cmd_train(context({"data.manifest=" + (root / "none").string()}, root)), InputError);
  EXPECT_THROW(cmd_prepare(context({"data.corpus=" + (root / "none").string()}, root)), InputError);
  fs::remove_all(root);
}

TEST(Cli, ExitCodes) {
  const auto root = scratch("cli");
  EXPECT_EQ(run_cli("--help"), 0);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("train --bogus"), 2);
  EXPECT_EQ(run_cli("train --set train.nothing=1 --out " + root.string()), 2);
  EXPECT_EQ(run_cli("train --data " + (root / "none").string() + " --out " + root.string()), 3);
  fs::create_directories(root);
  io::write_text(root / "bad.bin", "not a checkpoint");
  EXPECT_EQ(run_cli("bench --checkpoint " + (root / "bad.bin").string() + " --out " + root.string()), 6);
  // An output path below a regular file cannot be created.
  EXPECT_EQ(run_cli("toy-corpus --set toy.seconds=0.1 --set toy.speakers=1 --set toy.utterances=1 --out " +
                    (root / "bad.bin" / "sub").string()),
            5);
  EXPECT_EQ(run_cli("toy-corpus --set toy.seconds=0.1 --set toy.speakers=1 --set toy.utterances=1 --out " +
                    (root / "ok").string()),
            0);
  fs::remove_all(root);
}

TEST(RunConfig, ShippedConfigsResolve) {
  const fs::path dir = CDHVAE_CONFIG_DIR;
  RunSpec spec;
  spec.config_path = dir / "deep.cfg";
  const auto deep = resolve(spec);
  EXPECT_EQ(deep.model.groups, 35);
  EXPECT_EQ(deep.model.split, 10);
  EXPECT_EQ(deep.train.beta, 10.0);
  EXPECT_EQ(deep.train.batch_size, 8);
  EXPECT_EQ(deep.train.epochs, 200);
  for (const char* name : {"desk.cfg", "toy.cfg"}) {
    spec.config_path = dir / name;
    EXPECT_NO_THROW(resolve(spec)) << name;
  }
}
