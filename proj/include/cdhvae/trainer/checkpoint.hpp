#pragma once

// Checkpoint container, little-endian:
//
//   offset 0   "CDHVCKPT"      magic
//          8   u32 version     (= 1)
//         12   u32 crc32       of the payload
//         16   u64 length      of the payload
//         24   payload
//
// payload: model config, train config, mel params and normalization as
// key-value text; speaker names; epoch and step; epoch history; then four
// tensor tables (parameters, Adam first and second moments, EMA shadow), each
// a count followed by (name, n, c, h, w, f32 data).

#include <filesystem>
#include <string>
#include <vector>

#include "cdhvae/core/binary_io.hpp"
#include "cdhvae/core/kvconfig.hpp"
#include "cdhvae/features/dataset.hpp"
#include "cdhvae/model/cdhvae.hpp"
#include "cdhvae/trainer/config.hpp"

namespace cdhvae::trainer {

inline constexpr char kCheckpointMagic[8] = {'C', 'D', 'H', 'V', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct EpochRecord {
  int epoch = 0;
  double loss = 0;
  double rate = 0;
  double distortion = 0;
  double learning_rate = 0;
  double grad_norm = 0;  // mean pre-clip norm over the epoch's steps
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  model::ModelConfig model_config;
  TrainConfig train_config;
  features::MelParams mel;
  features::Normalization normalization;
  SpeakerVocab vocab;
  int epoch = 0;            // completed epochs
  std::uint64_t step = 0;   // completed optimizer steps
  std::vector<EpochRecord> history;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> adam_m, adam_v;
  std::vector<NamedTensor> ema;
};

namespace detail {

inline void write_tensors(io::ByteWriter& w, const std::vector<NamedTensor>& ts) {
  w.u32(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.str(t.name);
    const Shape s = t.value.shape();
    for (int d : {s.n, s.c, s.h, s.w}) w.i32(d);
    for (float v : t.value.values()) w.f32(v);
  }
}

inline std::vector<NamedTensor> read_tensors(io::ByteReader& r, const std::string& context) {
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str();
    Shape s{r.i32(), r.i32(), r.i32(), r.i32()};
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) throw IntegrityError(context + ": bad tensor shape for " + t.name);
    if (s.size() * 4 > r.remaining()) throw IntegrityError(context + ": tensor " + t.name + " overruns the file");
    t.value = Tensor<float>(s);
    for (auto& v : t.value.values()) v = r.f32();
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter p;
  p.str(section_text(c.model_config));
  p.str(section_text(c.train_config));
  p.str(section_text(c.mel));
  p.str(section_text(c.normalization));
  p.u32(static_cast<std::uint32_t>(c.vocab.size()));
  for (const auto& n : c.vocab.names()) p.str(n);
  p.u32(static_cast<std::uint32_t>(c.epoch));
  p.u64(c.step);
  p.u32(static_cast<std::uint32_t>(c.history.size()));
  for (const auto& h : c.history) {
    p.u32(static_cast<std::uint32_t>(h.epoch));
    for (double v : {h.loss, h.rate, h.distortion, h.learning_rate, h.grad_norm}) p.f64(v);
  }
  detail::write_tensors(p, c.parameters);
  detail::write_tensors(p, c.adam_m);
  detail::write_tensors(p, c.adam_v);
  detail::write_tensors(p, c.ema);

  io::ByteWriter w;
  w.raw(std::string_view(kCheckpointMagic, 8));
  w.u32(kCheckpointVersion);
  w.u32(io::crc32_of(p.bytes().data(), p.bytes().size()));
  w.u64(p.bytes().size());
  w.bytes().insert(w.bytes().end(), p.bytes().begin(), p.bytes().end());
  return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& context) {
  io::ByteReader h(bytes.data(), bytes.size(), context);
  if (h.raw(8) != std::string_view(kCheckpointMagic, 8)) throw IntegrityError(context + ": not a checkpoint file");
  const std::uint32_t version = h.u32();
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError(context + ": checkpoint version " + std::to_string(version) +
                                  " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t crc = h.u32();
  const std::uint64_t length = h.u64();
  if (length != h.remaining()) throw IntegrityError(context + ": truncated or padded checkpoint");
  const std::uint8_t* payload = bytes.data() + h.position();
  if (io::crc32_of(payload, length) != crc) throw IntegrityError(context + ": checksum mismatch");

  io::ByteReader r(payload, length, context);
  Checkpoint c;
  c.model_config = parse_section_text<model::ModelConfig>(r.str(), context + " (model config)");
  c.train_config = parse_section_text<TrainConfig>(r.str(), context + " (train config)");
  c.mel = parse_section_text<features::MelParams>(r.str(), context + " (mel params)");
  c.normalization = parse_section_text<features::Normalization>(r.str(), context + " (normalization)");
  std::vector<std::string> names(r.u32());
  for (auto& n : names) n = r.str();
  c.vocab = SpeakerVocab(std::move(names));
  c.epoch = static_cast<int>(r.u32());
  c.step = r.u64();
  c.history.resize(r.u32());
  for (auto& e : c.history) {
    e.epoch = static_cast<int>(r.u32());
    e.loss = r.f64();
    e.rate = r.f64();
    e.distortion = r.f64();
    e.learning_rate = r.f64();
    e.grad_norm = r.f64();
  }
  c.parameters = detail::read_tensors(r, context);
  c.adam_m = detail::read_tensors(r, context);
  c.adam_v = detail::read_tensors(r, context);
  c.ema = detail::read_tensors(r, context);
  if (r.remaining() != 0) throw IntegrityError(context + ": trailing bytes in checkpoint payload");
  c.model_config.validate();
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  // Write-then-rename so a crash never leaves a half-written checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  io::write_file(tmp, encode_checkpoint(c));
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

/// CRC32 of the encoded file; identifies a model in provenance records.
inline std::uint32_t checkpoint_checksum(const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  return io::crc32_of(bytes.data(), bytes.size());
}

template <typename T>
std::vector<NamedTensor> snapshot_parameters(const model::Cdhvae<T>& m) {
  std::vector<NamedTensor> out;
  const auto& ps = m.parameters();
  for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({ps[i].name, ps[i].value.template cast<float>()});
  return out;
}

/// Copy named tensors into a model; every model parameter must be present.
template <typename T>
void load_parameters(model::Cdhvae<T>& m, const std::vector<NamedTensor>& tensors, const std::string& context) {
  auto& ps = m.parameters();
  if (tensors.size() != ps.size())
    throw ConfigError(context + ": checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(ps.size()));
  for (const auto& t : tensors) {
    auto* p = ps.find(t.name);
    if (!p) throw ConfigError(context + ": unexpected parameter " + t.name);
    if (p->value.shape() != t.value.shape())
      throw ConfigError(context + ": parameter " + t.name + " has shape " + t.value.shape().str() + ", model expects " +
                        p->value.shape().str());
    if constexpr (std::is_same_v<T, float>) p->value = t.value;
    else p->value = t.value.template cast<T>();
  }
}

/// Rebuild the model stored in a checkpoint. With `use_ema`, the averaged
/// weights are used when present.
template <typename T = float>
model::Cdhvae<T> instantiate(const Checkpoint& c, bool use_ema = false) {
  model::Cdhvae<T> m(c.model_config, static_cast<int>(c.vocab.size()), 0);
  load_parameters(m, use_ema && !c.ema.empty() ? c.ema : c.parameters, "checkpoint");
  return m;
}

}  // namespace cdhvae::trainer
