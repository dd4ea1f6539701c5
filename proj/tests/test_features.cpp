#include <cmath>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "cdhvae/core/random.hpp"
#include "cdhvae/features/dataset.hpp"

using namespace cdhvae;
using namespace cdhvae::features;
namespace fs = std::filesystem;

namespace {

std::vector<float> tone(double hz, double seconds, int sr, double amp = 0.5) {
  std::vector<float> w(static_cast<std::size_t>(std::lround(seconds * sr)));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<float>(amp * std::sin(2 * std::numbers::pi * hz * i / sr));
  return w;
}

MelUtterance random_utterance(int frames, std::uint64_t seed) {
  MelUtterance u;
  u.speaker = SpeakerId(0);
  u.frames = Rng(seed).normal_tensor<float>(Shape{1, 1, kMelBins, frames});
  return u;
}

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("cdhvae_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Mel, DefaultsFollowSegmentGeometry) {
  const auto p = default_mel_params(48000);
  EXPECT_EQ(p.hop_length, 600);
  EXPECT_EQ(p.win_length, 2400);
  EXPECT_EQ(p.fft_size, 4096);
  EXPECT_EQ(p.n_mels, 80);
  EXPECT_DOUBLE_EQ(p.fmax, 24000.0);
}

TEST(Mel, SilenceHitsTheFloor) {
  const auto p = default_mel_params();
  std::vector<float> silence(24000, 0.0f);
  const auto mel = extract_log_mel(silence, 48000, p);
  for (float v : mel.values()) EXPECT_EQ(v, static_cast<float>(std::log(1e-5)));
}

TEST(Mel, HalfSecondGivesFortyFrames) {
  const auto p = default_mel_params();
  const auto mel = extract_log_mel(tone(300, 0.5, 48000), 48000, p);
  EXPECT_EQ(mel.shape(), (Shape{1, 1, 80, 40}));
  EXPECT_TRUE(mel.all_finite());
}

TEST(Mel, PureToneLandsInNearestFilter) {
  // Oracle: filter centres straight from the mel-scale definition.
  const double mel_hi = 2595.0 * std::log10(1.0 + 24000.0 / 700.0);
  int nearest = -1;
  double best = 1e300;
  for (int m = 0; m < 80; ++m) {
    const double c = 700.0 * (std::pow(10.0, mel_hi * (m + 1) / 81.0 / 2595.0) - 1.0);
    if (std::abs(c - 440.0) < best) {
      best = std::abs(c - 440.0);
      nearest = m;
    }
  }
  const auto mel = extract_log_mel(tone(440, 0.5, 48000), 48000, default_mel_params());
  // Interior frames (the edge frames see zero padding).
  for (int t = 2; t < mel.shape().w - 2; ++t) {
    int arg = 0;
    for (int m = 1; m < 80; ++m)
      if (mel.at(0, 0, m, t) > mel.at(0, 0, arg, t)) arg = m;
    EXPECT_EQ(arg, nearest) << "frame " << t;
  }
}

TEST(Mel, DeterministicBitForBit) {
  const auto w = tone(523.25, 0.3, 48000);
  const auto a = extract_log_mel(w, 48000, default_mel_params());
  const auto b = extract_log_mel(w, 48000, default_mel_params());
  EXPECT_TRUE(a == b);
}

TEST(Mel, Errors) {
  const auto p = default_mel_params();
  EXPECT_THROW(extract_log_mel(std::vector<float>{}, 48000, p), InputError);
  EXPECT_THROW(extract_log_mel(tone(100, 0.1, 16000), 16000, p), ConfigError);
}

TEST(Segment, ExactMultiple) {
  const auto s = segment_utterance(random_utterance(120, 1), 40);
  ASSERT_EQ(s.segments.size(), 3u);
  EXPECT_EQ(s.pad_lengths, (std::vector<int>{0, 0, 0}));
}

TEST(Segment, IdentityCase) {
  const auto u = random_utterance(40, 2);
  const auto s = segment_utterance(u, 40);
  ASSERT_EQ(s.segments.size(), 1u);
  EXPECT_TRUE(s.segments[0].frames == u.frames);
}

TEST(Segment, RemainderIsEdgePadded) {
  const auto u = random_utterance(95, 3);
  const auto s = segment_utterance(u, 40);
  ASSERT_EQ(s.segments.size(), 3u);
  EXPECT_EQ(s.pad_lengths, (std::vector<int>{0, 0, 25}));
  for (int b = 0; b < 80; ++b)
    for (int t = 15; t < 40; ++t) EXPECT_EQ(s.segments[2].frames.at(0, 0, b, t), u.frames.at(0, 0, b, 94));
}

TEST(Segment, ConcatExamples) {
  auto three = segment_utterance(random_utterance(120, 4), 40);
  EXPECT_EQ(concat_segments(three.segments, three.pad_lengths).frame_count(), 120);
  auto one = segment_utterance(random_utterance(15, 5), 40);
  ASSERT_EQ(one.pad_lengths, std::vector<int>{25});
  EXPECT_EQ(concat_segments(one.segments, one.pad_lengths).frame_count(), 15);
}

TEST(Segment, RoundTripProperty) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    const int frames = 1 + static_cast<int>(rng.below(300));
    const int width = 1 + static_cast<int>(rng.below(64));
    const auto u = random_utterance(frames, 1000 + trial);
    const auto s = segment_utterance(u, width);
    EXPECT_EQ(static_cast<int>(s.segments.size()), (frames + width - 1) / width);
    EXPECT_TRUE(concat_segments(s.segments, s.pad_lengths).frames == u.frames) << frames << "/" << width;
  }
}

TEST(Segment, Errors) {
  MelUtterance empty;
  EXPECT_THROW(segment_utterance(empty, 40), InputError);
  EXPECT_THROW(segment_utterance(random_utterance(10, 6), 0), InputError);
  auto s = segment_utterance(random_utterance(95, 7), 40);
  EXPECT_THROW(concat_segments(s.segments, {0, 25, 0}), InputError);
  EXPECT_THROW(concat_segments(s.segments, {0, 0}), InputError);
  EXPECT_THROW(concat_segments(s.segments, {0, 0, 40}), InputError);
  EXPECT_THROW(concat_segments({}, {}), InputError);
}

TEST(Normalization, Invertible) {
  Normalization n{1e-5, -11.5129, 14.25};
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const float x = static_cast<float>(rng.uniform(-11.5, 2.7));
    EXPECT_NEAR(n.denormalize(n.normalize(x)), x, 1e-6 * std::max(1.0f, std::abs(x)));
  }
}

TEST(FeatureFile, HeaderLayoutAndRoundTrip) {
  const auto u = random_utterance(7, 8);
  const auto bytes = encode_features(u.frames, SpeakerId(3));
  ASSERT_EQ(bytes.size(), kFeatureHeaderBytes + 80u * 7u * 4u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 7), "CDHVMEL");
  EXPECT_EQ(bytes[8], 1);   // version
  EXPECT_EQ(bytes[12], 80); // bins
  EXPECT_EQ(bytes[16], 7);  // frames
  EXPECT_EQ(bytes[20], 3);  // speaker
  const auto back = decode_features(bytes, "mem");
  EXPECT_TRUE(back.frames == u.frames);
  EXPECT_EQ(back.speaker, SpeakerId(3));

  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  EXPECT_THROW(decode_features(truncated, "mem"), IntegrityError);
  auto wrong_version = bytes;
  wrong_version[8] = 9;
  EXPECT_THROW(decode_features(wrong_version, "mem"), UnsupportedVersionError);
  auto wrong_magic = bytes;
  wrong_magic[0] = 'X';
  EXPECT_THROW(decode_features(wrong_magic, "mem"), IntegrityError);
}

TEST(Wav, RoundTrip) {
  const auto dir = scratch_dir("wav");
  Waveform w{tone(220, 0.01, 48000), 48000};
  write_wav(dir / "a.wav", w);
  const auto back = read_wav(dir / "a.wav");
  EXPECT_EQ(back.sample_rate, 48000);
  EXPECT_EQ(back.samples, w.samples);
}

class CorpusTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = scratch_dir("corpus");
    // One second at 48 kHz = 80 frames per utterance.
    write_wav(root_ / "bob" / "u1.wav", {tone(200, 1.0, 48000), 48000});
    write_wav(root_ / "alice" / "u1.wav", {tone(330, 1.0, 48000), 48000});
  }
  fs::path root_;
};

TEST_F(CorpusTest, CountsSegmentsAndSpeakers) {
  const auto m = build_dataset(root_, default_mel_params(), 40, [](const std::string&) {});
  EXPECT_EQ(m.size(), 4u);
  EXPECT_EQ(m.vocab.size(), 2u);
  EXPECT_EQ(m.vocab.names(), (std::vector<std::string>{"alice", "bob"}));
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto seg = m.segment(i);
    EXPECT_EQ(seg.frames.shape(), (Shape{1, 1, 80, 40}));
    for (float v : seg.frames.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST_F(CorpusTest, RebuildIsStableAndManifestRoundTrips) {
  const auto a = build_dataset(root_, default_mel_params(), 40, [](const std::string&) {});
  const auto b = build_dataset(root_, default_mel_params(), 40, [](const std::string&) {});
  EXPECT_EQ(manifest_text(a), manifest_text(b));
  const auto out = scratch_dir("manifest");
  const auto path = save_dataset(a, out);
  const auto loaded = load_dataset(path);
  EXPECT_EQ(manifest_text(loaded), manifest_text(a));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(loaded.segment(i).frames == a.segment(i).frames);
}

TEST_F(CorpusTest, UnreadableFileSkippedWithWarning) {
  io::write_text(root_ / "bob" / "broken.wav", "not a wav");
  std::vector<std::string> warnings;
  const auto m = build_dataset(root_, default_mel_params(), 40, [&](const std::string& s) { warnings.push_back(s); });
  EXPECT_EQ(m.size(), 4u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("broken.wav"), std::string::npos);
}

TEST_F(CorpusTest, SingleSpeakerWarns) {
  fs::remove_all(root_ / "bob");
  std::vector<std::string> warnings;
  const auto m = build_dataset(root_, default_mel_params(), 40, [&](const std::string& s) { warnings.push_back(s); });
  EXPECT_EQ(m.vocab.size(), 1u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("fewer than 2 speakers"), std::string::npos);
}

TEST(Corpus, EmptyCorpusIsAnError) {
  const auto root = scratch_dir("empty_corpus");
  EXPECT_THROW(build_dataset(root, default_mel_params(), 40), InputError);
  EXPECT_THROW(build_dataset(root / "missing", default_mel_params(), 40), InputError);
}
