#pragma once

#include <algorithm>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cdhvae/core/binary_io.hpp"
#include "cdhvae/core/text.hpp"
#include "cdhvae/features/feature_io.hpp"
#include "cdhvae/features/mel.hpp"
#include "cdhvae/features/segment.hpp"
#include "cdhvae/features/wav.hpp"

namespace cdhvae {

/// Ordered speaker names; the position of a name is its SpeakerId.
class SpeakerVocab {
 public:
  SpeakerVocab() = default;
  explicit SpeakerVocab(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      const auto& n = names_[i];
      if (n.empty() || n.find_first_of(" \t\r\n") != std::string::npos) {
        throw InputError("speaker name must be non-empty without whitespace: '" + n + "'");
      }
      if (!index_.emplace(n, static_cast<std::int32_t>(i)).second) throw InputError("duplicate speaker name: " + n);
    }
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  bool contains(SpeakerId id) const noexcept { return id.value >= 0 && static_cast<std::size_t>(id.value) < names_.size(); }

  std::optional<SpeakerId> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return SpeakerId(it->second);
  }

  SpeakerId id(const std::string& name) const {
    if (auto s = find(name)) return *s;
    std::string known;
    for (const auto& n : names_) known += (known.empty() ? "" : ", ") + n;
    throw InputError("unknown speaker '" + name + "'; known speakers: " + known);
  }

  const std::string& name(SpeakerId id) const {
    if (!contains(id)) throw InputError("speaker id " + std::to_string(id.value) + " not in vocabulary");
    return names_[static_cast<std::size_t>(id.value)];
  }

  friend bool operator==(const SpeakerVocab& a, const SpeakerVocab& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::int32_t> index_;
};

namespace features {

/// Corpus-level min-max scaling of log-mel values to [0, 1].
struct Normalization {
  double floor = 1e-5;
  double shift = 0.0;
  double scale = 1.0;

  float normalize(float v) const { return static_cast<float>((v - shift) / scale); }
  float denormalize(float v) const { return static_cast<float>(v * scale + shift); }

  Tensor<float> normalize(const Tensor<float>& t) const {
    Tensor<float> out = t;
    for (auto& v : out.values()) v = normalize(v);
    return out;
  }
  Tensor<float> denormalize(const Tensor<float>& t) const {
    Tensor<float> out = t;
    for (auto& v : out.values()) v = denormalize(v);
    return out;
  }

  friend bool operator==(const Normalization&, const Normalization&) = default;

  template <typename V>
  void fields(V&& v) {
    v("floor", floor);
    v("shift", shift);
    v("scale", scale);
  }
};

struct UtteranceRecord {
  std::string path;  // relative to the manifest directory
  SpeakerId speaker;
  int frames = 0;
};

struct SegmentRef {
  int utterance = 0;
  int start = 0;
  int pad = 0;
};

/// The training set: segments with speaker labels, plus everything needed to
/// reproduce their features.
struct DatasetManifest {
  MelParams mel;
  int segment_frames = 40;
  Normalization normalization;
  SpeakerVocab vocab;
  std::vector<UtteranceRecord> utterances;
  std::vector<SegmentRef> segments;
  std::vector<MelUtterance> features;  // raw log-mel, parallel to `utterances`

  std::size_t size() const noexcept { return segments.size(); }

  SpeakerId speaker_of(std::size_t i) const { return utterances.at(segments.at(i).utterance).speaker; }

  /// Normalized segment i, edge-padded like segment_utterance.
  MelSegment segment(std::size_t i) const {
    const SegmentRef& ref = segments.at(i);
    const MelUtterance& u = features.at(static_cast<std::size_t>(ref.utterance));
    const int width = segment_frames;
    const int valid = width - ref.pad;
    MelSegment seg;
    seg.speaker = u.speaker;
    seg.frames = Tensor<float>(Shape{1, 1, kMelBins, width});
    for (int b = 0; b < kMelBins; ++b)
      for (int t = 0; t < width; ++t) {
        seg.frames.at(0, 0, b, t) = normalization.normalize(u.frames.at(0, 0, b, ref.start + std::min(t, valid - 1)));
      }
    return seg;
  }

  /// Same data, restricted to the given segment indices.
  DatasetManifest subset(const std::vector<std::size_t>& indices) const {
    DatasetManifest out = *this;
    out.segments.clear();
    for (auto i : indices) out.segments.push_back(segments.at(i));
    return out;
  }

  void validate() const {
    mel.validate();
    if (segment_frames < 1) throw ConfigError("manifest: segment_frames must be >= 1");
    if (segments.empty()) throw InputError("manifest: dataset has no segments");
    if (features.size() != utterances.size()) throw InputError("manifest: features not loaded");
    if (!(normalization.scale > 0)) throw InputError("manifest: normalization scale must be positive");
    for (std::size_t i = 0; i < utterances.size(); ++i) {
      if (!vocab.contains(utterances[i].speaker)) throw InputError("manifest: utterance speaker not in vocab");
      if (features[i].frame_count() != utterances[i].frames) throw InputError("manifest: frame count mismatch");
    }
    for (const auto& s : segments) {
      if (s.utterance < 0 || static_cast<std::size_t>(s.utterance) >= utterances.size()) {
        throw InputError("manifest: segment references unknown utterance");
      }
      const int frames = utterances[static_cast<std::size_t>(s.utterance)].frames;
      if (s.pad < 0 || s.pad >= segment_frames || s.start < 0 || s.start + segment_frames - s.pad > frames) {
        throw InputError("manifest: segment out of range");
      }
    }
  }
};

inline Normalization corpus_normalization(const std::vector<MelUtterance>& utts, double floor) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto& u : utts)
    for (float v : u.frames.values()) {
      lo = std::min<double>(lo, v);
      hi = std::max<double>(hi, v);
    }
  Normalization n;
  n.floor = floor;
  n.shift = lo;
  n.scale = hi > lo ? hi - lo : 1.0;
  return n;
}

/// Assemble a dataset from in-memory utterances; speaker ids must index `vocab`.
inline DatasetManifest make_dataset(std::vector<MelUtterance> utts, SpeakerVocab vocab, const MelParams& mel,
                                    int segment_frames) {
  if (utts.empty()) throw InputError("dataset: no utterances");
  if (segment_frames < 1) throw ConfigError("dataset: segment_frames must be >= 1");
  DatasetManifest m;
  m.mel = mel;
  m.segment_frames = segment_frames;
  m.vocab = std::move(vocab);
  m.normalization = corpus_normalization(utts, mel.log_floor);
  std::map<std::int32_t, int> per_speaker;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    auto& u = utts[i];
    check_mel_matrix(u.frames, "dataset");
    if (!m.vocab.contains(u.speaker)) throw InputError("dataset: utterance speaker not in vocab");
    const int k = per_speaker[u.speaker.value]++;
    UtteranceRecord rec;
    rec.speaker = u.speaker;
    rec.frames = u.frame_count();
    rec.path = "features/" + m.vocab.name(u.speaker) + "/" + std::to_string(k) + ".mel";
    m.utterances.push_back(rec);
    const int n = segment_count(rec.frames, segment_frames);
    for (int s = 0; s < n; ++s) {
      const int start = s * segment_frames;
      m.segments.push_back({static_cast<int>(i), start, std::max(0, start + segment_frames - rec.frames)});
    }
  }
  m.features = std::move(utts);
  m.validate();
  return m;
}

inline bool is_audio_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return ext == ".wav";
}

/// Scan <root>/<speaker>/*.wav, extract log-mel features and segment them.
/// Speakers and files are visited in sorted order so ids are stable.
inline DatasetManifest build_dataset(const std::filesystem::path& root, const MelParams& mel, int segment_frames,
                                     const LogSink& log = log_to_stderr) {
  namespace fs = std::filesystem;
  mel.validate();
  if (!fs::is_directory(root)) throw InputError("corpus root is not a directory: " + root.string());
  std::vector<fs::path> speaker_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) speaker_dirs.push_back(e.path());
  }
  std::sort(speaker_dirs.begin(), speaker_dirs.end());

  std::vector<std::string> names;
  std::vector<MelUtterance> utts;
  for (const auto& dir : speaker_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && is_audio_file(e.path())) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    const SpeakerId id(static_cast<std::int32_t>(names.size()));
    std::size_t kept = 0;
    for (const auto& f : files) {
      Waveform wav;
      try {
        wav = read_wav(f);
        if (wav.samples.empty()) throw InputError("empty waveform");
      } catch (const Error& e) {
        log("warning: skipping unreadable file " + f.string() + ": " + e.what());
        continue;
      }
      MelUtterance u;
      u.frames = extract_log_mel(wav.samples, wav.sample_rate, mel);
      u.speaker = id;
      u.source_id = fs::relative(f, root).generic_string();
      utts.push_back(std::move(u));
      ++kept;
    }
    if (kept > 0) names.push_back(dir.filename().string());
  }
  if (utts.empty()) throw InputError("corpus contains no readable audio: " + root.string());
  if (names.size() < 2) log("warning: corpus has fewer than 2 speakers; conversion will be impossible");
  return make_dataset(std::move(utts), SpeakerVocab(std::move(names)), mel, segment_frames);
}

inline std::string manifest_text(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# cdhvae dataset manifest\n";
  os << "format 1\n";
  os << "sample_rate " << m.mel.sample_rate << '\n';
  os << "fft_size " << m.mel.fft_size << '\n';
  os << "hop_length " << m.mel.hop_length << '\n';
  os << "win_length " << m.mel.win_length << '\n';
  os << "n_mels " << m.mel.n_mels << '\n';
  os << "fmin " << format_double(m.mel.fmin) << '\n';
  os << "fmax " << format_double(m.mel.fmax) << '\n';
  os << "log_floor " << format_double(m.mel.log_floor) << '\n';
  os << "segment_frames " << m.segment_frames << '\n';
  os << "norm_floor " << format_double(m.normalization.floor) << '\n';
  os << "norm_shift " << format_double(m.normalization.shift) << '\n';
  os << "norm_scale " << format_double(m.normalization.scale) << '\n';
  os << "speakers " << m.vocab.size() << '\n';
  for (std::size_t i = 0; i < m.vocab.size(); ++i) os << "speaker " << i << ' ' << m.vocab.names()[i] << '\n';
  os << "utterances " << m.utterances.size() << '\n';
  for (std::size_t i = 0; i < m.utterances.size(); ++i) {
    const auto& u = m.utterances[i];
    os << "utterance " << i << ' ' << u.speaker.value << ' ' << u.frames << ' ' << u.path << '\n';
  }
  os << "segments " << m.segments.size() << '\n';
  for (const auto& s : m.segments) os << "segment " << s.utterance << ' ' << s.start << ' ' << s.pad << '\n';
  return os.str();
}

/// Writes <dir>/manifest.txt and one feature file per utterance.
inline std::filesystem::path save_dataset(const DatasetManifest& m, const std::filesystem::path& dir) {
  m.validate();
  for (std::size_t i = 0; i < m.utterances.size(); ++i) {
    write_features(dir / m.utterances[i].path, m.features[i].frames, m.utterances[i].speaker);
  }
  const auto path = dir / "manifest.txt";
  io::write_text(path, manifest_text(m));
  return path;
}

inline DatasetManifest load_dataset(const std::filesystem::path& manifest_path) {
  std::istringstream in(io::read_text(manifest_path));
  DatasetManifest m;
  std::map<std::string, std::string> kv;
  std::vector<std::string> speaker_names;
  std::string line;
  auto fail = [&](const std::string& why) { throw InputError(manifest_path.string() + ": " + why); };
  while (std::getline(in, line)) {
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    std::istringstream ls{std::string(t)};
    std::string key;
    ls >> key;
    if (key == "speaker") {
      std::size_t idx;
      std::string name;
      if (!(ls >> idx >> name) || idx != speaker_names.size()) fail("bad speaker line");
      speaker_names.push_back(name);
    } else if (key == "utterance") {
      std::size_t idx;
      UtteranceRecord u;
      if (!(ls >> idx >> u.speaker.value >> u.frames >> u.path) || idx != m.utterances.size()) fail("bad utterance line");
      m.utterances.push_back(u);
    } else if (key == "segment") {
      SegmentRef s;
      if (!(ls >> s.utterance >> s.start >> s.pad)) fail("bad segment line");
      m.segments.push_back(s);
    } else {
      std::string value;
      std::getline(ls, value);
      kv[key] = std::string(trim(value));
    }
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) fail("missing key " + k);
    return it->second;
  };
  if (get("format") != "1") throw UnsupportedVersionError(manifest_path.string() + ": manifest format " + get("format"));
  m.mel.sample_rate = static_cast<int>(parse_int(get("sample_rate"), "sample_rate"));
  m.mel.fft_size = static_cast<int>(parse_int(get("fft_size"), "fft_size"));
  m.mel.hop_length = static_cast<int>(parse_int(get("hop_length"), "hop_length"));
  m.mel.win_length = static_cast<int>(parse_int(get("win_length"), "win_length"));
  m.mel.n_mels = static_cast<int>(parse_int(get("n_mels"), "n_mels"));
  m.mel.fmin = parse_double(get("fmin"), "fmin");
  m.mel.fmax = parse_double(get("fmax"), "fmax");
  m.mel.log_floor = parse_double(get("log_floor"), "log_floor");
  m.segment_frames = static_cast<int>(parse_int(get("segment_frames"), "segment_frames"));
  m.normalization.floor = parse_double(get("norm_floor"), "norm_floor");
  m.normalization.shift = parse_double(get("norm_shift"), "norm_shift");
  m.normalization.scale = parse_double(get("norm_scale"), "norm_scale");
  if (parse_int(get("speakers"), "speakers") != static_cast<long long>(speaker_names.size())) fail("speaker count");
  if (parse_int(get("utterances"), "utterances") != static_cast<long long>(m.utterances.size())) fail("utterance count");
  if (parse_int(get("segments"), "segments") != static_cast<long long>(m.segments.size())) fail("segment count");
  m.vocab = SpeakerVocab(std::move(speaker_names));
  const auto dir = manifest_path.parent_path();
  for (const auto& u : m.utterances) {
    auto f = read_features(dir / u.path);
    if (f.speaker != u.speaker) fail("feature file speaker mismatch: " + u.path);
    m.features.push_back(std::move(f));
  }
  m.validate();
  return m;
}

}  // namespace features
}  // namespace cdhvae
