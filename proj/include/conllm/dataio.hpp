#pragma once

// Embedding bundles: in-memory dataset type, the CEB v1 binary format,
// stratified splitting and seeded batching.
//
// CEB v1 (little-endian):
//   0..3    magic "CEB1"
//   4       version (1)
//   5..8    sample count, u32
//   9..20   d_a, d_v, d_av, u32 each
//   per sample:
//           id length u16, id bytes (UTF-8)
//           label u8 (0 authentic, 1 manipulated)
//           presence mask u8 (bit0 audio, bit1 video, bit2 audio-visual)
//           for each present modality in (a, v, av) order: d_m float32
//   trailer CRC-64/XZ of all preceding bytes, u64

#include "conllm/crc64.hpp"
#include "conllm/errors.hpp"
#include "conllm/rng.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace conllm {

static_assert(std::endian::native == std::endian::little, "CEB I/O assumes a little-endian host");

enum class Modality : std::uint8_t { audio = 0, video = 1, audiovisual = 2 };

inline constexpr std::array<Modality, 3> kModalities{Modality::audio, Modality::video,
                                                     Modality::audiovisual};
inline constexpr std::size_t kNumModalities = 3;

inline constexpr std::size_t index_of(Modality m) noexcept { return static_cast<std::size_t>(m); }

inline constexpr std::string_view to_string(Modality m) noexcept {
  switch (m) {
    case Modality::audio: return "audio";
    case Modality::video: return "video";
    case Modality::audiovisual: return "audiovisual";
  }
  return "?";
}

using Dims = std::array<std::uint32_t, kNumModalities>;

enum class Label : std::uint8_t { authentic = 0, manipulated = 1 };

struct Sample {
  std::string id;
  Label label = Label::authentic;
  std::array<std::optional<std::vector<float>>, kNumModalities> z;

  bool has(Modality m) const noexcept { return z[index_of(m)].has_value(); }
  const std::vector<float>& embedding(Modality m) const { return *z[index_of(m)]; }

  std::uint8_t presence_mask() const noexcept {
    std::uint8_t mask = 0;
    for (std::size_t i = 0; i < kNumModalities; ++i)
      if (z[i]) mask |= static_cast<std::uint8_t>(1u << i);
    return mask;
  }

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct EmbeddingBundle {
  Dims dims{0, 0, 0};
  std::vector<Sample> samples;
  // Free text describing where the embeddings came from. Kept in memory only;
  // the CEB payload does not carry it.
  std::string provenance;

  std::size_t size() const noexcept { return samples.size(); }
  bool empty() const noexcept { return samples.empty(); }

  std::size_t count(Label l) const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                  [l](const Sample& s) { return s.label == l; }));
  }

  // Payload equality: dims and samples in order. Provenance is ignored.
  friend bool operator==(const EmbeddingBundle& a, const EmbeddingBundle& b) {
    return a.dims == b.dims && a.samples == b.samples;
  }
};

// Checks bundle invariants; throws FormatError naming the offending sample.
inline void validate_bundle(const EmbeddingBundle& b) {
  std::unordered_set<std::string_view> ids;
  for (std::size_t i = 0; i < b.samples.size(); ++i) {
    const Sample& s = b.samples[i];
    const std::string where = "sample " + std::to_string(i) + " ('" + s.id + "')";
    if (!ids.insert(s.id).second)
      throw FormatError(FormatFault::duplicate_id, where + " repeats an id", 0);
    if (s.id.size() > 0xFFFF)
      throw FormatError(FormatFault::invalid_bundle, where + " id longer than 65535 bytes", 0);
    if (s.label != Label::authentic && s.label != Label::manipulated)
      throw FormatError(FormatFault::bad_label, where + " has an invalid label", 0);
    if (s.presence_mask() == 0)
      throw FormatError(FormatFault::bad_presence, where + " has no modality", 0);
    for (Modality m : kModalities) {
      if (!s.has(m)) continue;
      if (b.dims[index_of(m)] == 0 || s.embedding(m).size() != b.dims[index_of(m)])
        throw FormatError(FormatFault::dim_mismatch,
                          where + " " + std::string(to_string(m)) + " has length " +
                              std::to_string(s.embedding(m).size()) + ", bundle declares " +
                              std::to_string(b.dims[index_of(m)]),
                          0);
    }
  }
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void f64(double v) { raw(&v, sizeof v); }
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() noexcept { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader; reading past `end` throws a
// truncation error at the current offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::size_t end) : data_(data), end_(end) {}

  std::size_t offset() const noexcept { return pos_; }

  template <typename T>
  T read(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ > end_ || end_ - pos_ < n)
      throw FormatError(FormatFault::truncated, std::string("file ends while reading ") + what,
                        pos_);
  }

  std::span<const std::uint8_t> data_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return bytes;
}

// Writes via a sibling temp file and rename so readers never see a partial file.
inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("error writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

}  // namespace detail

inline constexpr std::string_view kCebMagic = "CEB1";
inline constexpr std::uint8_t kCebVersion = 1;
inline constexpr std::size_t kCebHeaderBytes = 21;

inline std::vector<std::uint8_t> encode_bundle(const EmbeddingBundle& b) {
  validate_bundle(b);
  detail::ByteWriter w;
  w.bytes(kCebMagic);
  w.u8(kCebVersion);
  w.u32(static_cast<std::uint32_t>(b.samples.size()));
  for (std::uint32_t d : b.dims) w.u32(d);
  for (const Sample& s : b.samples) {
    w.u16(static_cast<std::uint16_t>(s.id.size()));
    w.bytes(s.id);
    w.u8(static_cast<std::uint8_t>(s.label));
    w.u8(s.presence_mask());
    for (Modality m : kModalities)
      if (s.has(m))
        for (float v : s.embedding(m)) w.f32(v);
  }
  w.u64(crc64(w.buffer()));
  return std::move(w.buffer());
}

inline EmbeddingBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCebMagic.data(), 4) != 0)
    throw FormatError(FormatFault::bad_magic, "expected \"CEB1\"", 0);
  if (bytes.size() < kCebHeaderBytes + 8)
    throw FormatError(FormatFault::truncated, "file shorter than header and trailer",
                      bytes.size());
  const std::size_t payload_end = bytes.size() - 8;
  detail::ByteReader r(bytes, payload_end);
  r.string(4, "magic");
  const auto version = r.read<std::uint8_t>("version");
  if (version != kCebVersion)
    throw FormatError(FormatFault::bad_version, "version " + std::to_string(version), 4);

  EmbeddingBundle b;
  const auto count = r.read<std::uint32_t>("sample count");
  for (auto& d : b.dims) d = r.read<std::uint32_t>("dims");
  // Every sample needs at least 4 bytes; reject absurd counts before reserving.
  if (count > (payload_end - r.offset()) / 4)
    throw FormatError(FormatFault::truncated,
                      "sample count " + std::to_string(count) + " exceeds file size", 5);
  b.samples.reserve(count);

  std::unordered_set<std::string> ids;
  for (std::uint32_t i = 0; i < count; ++i) {
    Sample s;
    const std::size_t id_at = r.offset();
    const auto id_len = r.read<std::uint16_t>("id length");
    s.id = r.string(id_len, "id");
    if (!ids.insert(s.id).second)
      throw FormatError(FormatFault::duplicate_id, "sample id '" + s.id + "'", id_at);
    const std::size_t label_at = r.offset();
    const auto label = r.read<std::uint8_t>("label");
    if (label > 1)
      throw FormatError(FormatFault::bad_label, "label " + std::to_string(label), label_at);
    s.label = static_cast<Label>(label);
    const std::size_t mask_at = r.offset();
    const auto mask = r.read<std::uint8_t>("presence mask");
    if (mask == 0 || mask > 0b111)
      throw FormatError(FormatFault::bad_presence, "mask " + std::to_string(mask), mask_at);
    for (Modality m : kModalities) {
      if (!(mask & (1u << index_of(m)))) continue;
      const std::uint32_t d = b.dims[index_of(m)];
      if (d == 0)
        throw FormatError(FormatFault::dim_mismatch,
                          "sample '" + s.id + "' has " + std::string(to_string(m)) +
                              " but header dimension is 0",
                          mask_at);
      std::vector<float> z(d);
      for (float& v : z) v = r.read<float>("embedding");
      s.z[index_of(m)] = std::move(z);
    }
    b.samples.push_back(std::move(s));
  }
  if (r.offset() != payload_end)
    throw FormatError(FormatFault::trailing_bytes,
                      std::to_string(payload_end - r.offset()) + " unexpected bytes before trailer",
                      r.offset());
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + payload_end, 8);
  if (stored != crc64(bytes.first(payload_end)))
    throw FormatError(FormatFault::bad_crc, "stored CRC-64 does not match contents", payload_end);
  return b;
}

inline void write_bundle(const EmbeddingBundle& b, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_bundle(b));
}

inline EmbeddingBundle read_bundle(const std::filesystem::path& path) {
  auto bytes = detail::read_file_bytes(path);
  EmbeddingBundle b = decode_bundle(bytes);
  b.provenance = "file:" + path.filename().string();
  return b;
}

// Subset in the given index order; provenance is inherited.
inline EmbeddingBundle select(const EmbeddingBundle& b, std::span<const std::size_t> indices) {
  EmbeddingBundle out;
  out.dims = b.dims;
  out.provenance = b.provenance;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) out.samples.push_back(b.samples.at(i));
  return out;
}

struct Split {
  EmbeddingBundle train;
  EmbeddingBundle eval;
};

// Label-stratified split. Each class contributes round(eval_fraction * n_class)
// samples to eval, clamped so both sides keep at least one sample of each
// class that has two or more. Samples keep their original relative order.
inline Split split(const EmbeddingBundle& b, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0))
    throw ParameterError("split: eval_fraction must lie in (0, 1)");
  if (b.size() < 2) throw ContractError("split: need at least 2 samples");
  std::vector<std::size_t> train_idx, eval_idx;
  for (Label l : {Label::authentic, Label::manipulated}) {
    std::vector<std::size_t> cls;
    for (std::size_t i = 0; i < b.size(); ++i)
      if (b.samples[i].label == l) cls.push_back(i);
    if (cls.empty())
      throw ContractError("split: cannot stratify, no samples with label " +
                          std::to_string(static_cast<int>(l)));
    CounterRng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(l)));
    shuffle(cls.begin(), cls.end(), rng);
    auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(cls.size())));
    if (cls.size() >= 2) n_eval = std::clamp<std::size_t>(n_eval, 1, cls.size() - 1);
    eval_idx.insert(eval_idx.end(), cls.begin(), cls.begin() + static_cast<std::ptrdiff_t>(n_eval));
    train_idx.insert(train_idx.end(), cls.begin() + static_cast<std::ptrdiff_t>(n_eval), cls.end());
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(eval_idx.begin(), eval_idx.end());
  return {select(b, train_idx), select(b, eval_idx)};
}

using Batch = std::vector<std::size_t>;

// Per-epoch shuffled batches of sample indices; the final short batch is kept.
inline std::vector<Batch> batch_iter(const EmbeddingBundle& b, std::size_t batch_size,
                                     std::uint64_t seed, std::uint64_t epoch) {
  if (batch_size < 2)
    throw ParameterError("batch_iter: batch_size must be >= 2 for in-batch negatives");
  std::vector<std::size_t> order(b.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  CounterRng rng(derive_seed(seed, "batch", epoch));
  shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(stop));
  }
  return batches;
}

}  // namespace conllm
