#include "dtq/trace_io.hpp"

#include <cstring>
#include <fstream>

#include "json.hpp"

namespace dtq {

namespace {

constexpr char kArchiveMagic[8] = {'D', 'T', 'Q', 'A', 'R', 'C', 'H', 'V'};
constexpr char kChunkMagic[8] = {'D', 'T', 'Q', 'T', 'R', 'A', 'C', 'E'};
constexpr char kCheckpointMagic[8] = {'D', 'T', 'Q', 'C', 'K', 'P', 'T', '\0'};
constexpr uint16_t kFormatVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T)); // little-endian host assumed
  out.append(buf, sizeof(T));
}

class Reader {
public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > bytes_.size())
      throw FormatError(std::string("truncated ") + what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_bytes(std::size_t n, const char* what) {
    if (pos_ + n > bytes_.size())
      throw FormatError(std::string("truncated ") + what);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

} // namespace

uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, int bits) {
  if (!bits_supported(bits)) throw FormatError("pack_codes: unsupported bit width");
  std::vector<uint8_t> out((codes.size() * static_cast<std::size_t>(bits) + 7) / 8, 0);
  std::size_t bitpos = 0;
  for (uint8_t code : codes) {
    if (code >= (1u << bits)) throw FormatError("pack_codes: code out of range");
    out[bitpos / 8] |= static_cast<uint8_t>(code << (bitpos % 8));
    if (bitpos % 8 + static_cast<std::size_t>(bits) > 8) // straddles a byte boundary
      out[bitpos / 8 + 1] |= static_cast<uint8_t>(code >> (8 - bitpos % 8));
    bitpos += static_cast<std::size_t>(bits);
  }
  return out;
}

std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, int bits,
                                  std::size_t count) {
  if (!bits_supported(bits)) throw FormatError("unpack_codes: unsupported bit width");
  if (bytes.size() != (count * static_cast<std::size_t>(bits) + 7) / 8)
    throw FormatError("unpack_codes: bad packing length");
  std::vector<uint8_t> out(count);
  const uint8_t mask = static_cast<uint8_t>((1u << bits) - 1);
  std::size_t bitpos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    uint16_t v = bytes[bitpos / 8] >> (bitpos % 8);
    if (bitpos % 8 + static_cast<std::size_t>(bits) > 8 && bitpos / 8 + 1 < bytes.size())
      v |= static_cast<uint16_t>(bytes[bitpos / 8 + 1]) << (8 - bitpos % 8);
    out[i] = static_cast<uint8_t>(v & mask);
    bitpos += static_cast<std::size_t>(bits);
  }
  return out;
}

void write_trace(const std::string& path, const TraceArchive& archive) {
  nlohmann::json manifest;
  manifest["model_id"] = archive.model_id;
  manifest["format_version"] = kFormatVersion;
  manifest["endianness"] = "little";
  manifest["step_count"] = archive.step_count;
  manifest["cfg"] = archive.cfg;
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& tr : archive.traces) {
    entries.push_back({{"layer", tr.layer_name},
                       {"rows", tr.x.rows()},
                       {"cols", tr.x.cols()},
                       {"timestep", tr.timestep},
                       {"condition", static_cast<int>(tr.condition)}});
  }
  manifest["entries"] = std::move(entries);
  const std::string manifest_text = manifest.dump();

  std::string out;
  out.append(kArchiveMagic, sizeof(kArchiveMagic));
  put<uint16_t>(out, kFormatVersion);
  put<uint64_t>(out, manifest_text.size());
  out.append(manifest_text);

  for (const auto& tr : archive.traces) {
    out.append(kChunkMagic, sizeof(kChunkMagic));
    put<uint16_t>(out, kFormatVersion);
    put<uint32_t>(out, static_cast<uint32_t>(tr.x.rows()));
    put<uint32_t>(out, static_cast<uint32_t>(tr.x.cols()));
    put<uint32_t>(out, static_cast<uint32_t>(tr.timestep));
    put<uint8_t>(out, static_cast<uint8_t>(tr.condition));
    put<uint64_t>(out, fnv1a64(tr.layer_name));
    put<uint8_t>(out, 0); // padding to 32 bytes
    for (double v : tr.x.data()) put<float>(out, static_cast<float>(v));
  }
  write_file(path, out);
}

TraceArchive read_trace(const std::string& path) {
  Reader r(read_file(path));
  if (r.get_bytes(8, "archive header") != std::string(kArchiveMagic, 8))
    throw FormatError("archive magic mismatch");
  const uint16_t version = r.get<uint16_t>("archive header");
  if (version != kFormatVersion)
    throw FormatError("unsupported archive format version " + std::to_string(version));
  const uint64_t manifest_len = r.get<uint64_t>("archive header");
  const std::string manifest_text = r.get_bytes(manifest_len, "manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad manifest: ") + e.what());
  }

  TraceArchive archive;
  archive.model_id = manifest.value("model_id", "");
  archive.step_count = manifest.value("step_count", std::size_t{0});
  archive.cfg = manifest.value("cfg", false);

  const auto& entries = manifest.at("entries");
  for (const auto& entry : entries) {
    if (r.get_bytes(8, "chunk header") != std::string(kChunkMagic, 8))
      throw FormatError("chunk magic mismatch");
    const uint16_t chunk_version = r.get<uint16_t>("chunk header");
    if (chunk_version != kFormatVersion)
      throw FormatError("unsupported chunk format version");
    const uint32_t rows = r.get<uint32_t>("chunk header");
    const uint32_t cols = r.get<uint32_t>("chunk header");
    const uint32_t timestep = r.get<uint32_t>("chunk header");
    const uint8_t condition = r.get<uint8_t>("chunk header");
    const uint64_t name_hash = r.get<uint64_t>("chunk header");
    r.get<uint8_t>("chunk header");

    const std::string layer = entry.at("layer").get<std::string>();
    if (rows != entry.at("rows").get<uint32_t>() ||
        cols != entry.at("cols").get<uint32_t>())
      throw FormatError("chunk shape does not match manifest entry");
    if (name_hash != fnv1a64(layer))
      throw FormatError("chunk layer hash does not match manifest entry");
    if (rows == 0 || cols == 0) throw FormatError("chunk with empty shape");

    ActivationTrace tr;
    tr.layer_name = layer;
    tr.timestep = timestep;
    tr.condition = static_cast<Condition>(condition);
    tr.x = Matrix(rows, cols);
    for (double& v : tr.x.data()) v = static_cast<double>(r.get<float>("chunk payload"));
    archive.traces.push_back(std::move(tr));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last chunk");
  if (archive.traces.size() != entries.size())
    throw FormatError("chunk count does not match manifest");
  return archive;
}

std::size_t QuantCheckpoint::payload_bytes() const {
  std::size_t total = 0;
  for (const auto& layer : layers) {
    const int bits = layer.weights.params.empty() ? 8 : layer.weights.params[0].bits;
    total += (layer.weights.ints.size() * static_cast<std::size_t>(bits) + 7) / 8;
    total += layer.weights.params.size() * 4; // f32 scale per group
    if (!layer.weights.symmetric)
      total += layer.weights.params.size() * 4; // i32 zero point
    total += layer.mask.size() * 4;
    total += (layer.rotation_diag.size() + 7) / 8; // sign bits
  }
  return total;
}

std::size_t QuantCheckpoint::baseline_bytes() const {
  std::size_t total = 0;
  for (const auto& layer : layers) total += layer.weights.ints.size() * 2;
  return total;
}

void write_checkpoint(const std::string& path, const QuantCheckpoint& ckpt) {
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<uint16_t>(out, kFormatVersion);
  put<uint32_t>(out, static_cast<uint32_t>(ckpt.layers.size()));
  for (const auto& layer : ckpt.layers) {
    put<uint16_t>(out, static_cast<uint16_t>(layer.name.size()));
    out.append(layer.name);
    const auto& w = layer.weights;
    put<uint32_t>(out, static_cast<uint32_t>(w.rows));
    put<uint32_t>(out, static_cast<uint32_t>(w.cols));
    const int bits = w.params.empty() ? 8 : w.params[0].bits;
    put<uint8_t>(out, static_cast<uint8_t>(bits));
    put<uint8_t>(out, static_cast<uint8_t>(w.scheme.kind));
    put<uint32_t>(out, static_cast<uint32_t>(w.scheme.group_size));
    put<uint8_t>(out, w.symmetric ? 1 : 0);
    put<uint32_t>(out, static_cast<uint32_t>(w.params.size()));
    for (const auto& p : w.params) put<float>(out, static_cast<float>(p.scale));
    if (!w.symmetric)
      for (const auto& p : w.params) put<int32_t>(out, p.zero_point);
    const std::vector<uint8_t> packed = pack_codes(w.ints, bits);
    put<uint64_t>(out, packed.size());
    out.append(reinterpret_cast<const char*>(packed.data()), packed.size());

    put<uint32_t>(out, static_cast<uint32_t>(layer.mask.size()));
    for (float v : layer.mask) put<float>(out, v);
    put<uint32_t>(out, static_cast<uint32_t>(layer.rotation_diag.size()));
    if (!layer.rotation_diag.empty()) {
      std::vector<uint8_t> signs((layer.rotation_diag.size() + 7) / 8, 0);
      for (std::size_t i = 0; i < layer.rotation_diag.size(); ++i)
        if (layer.rotation_diag[i] > 0) signs[i / 8] |= uint8_t(1u << (i % 8));
      out.append(reinterpret_cast<const char*>(signs.data()), signs.size());
    }
  }
  write_file(path, out);
}

QuantCheckpoint read_checkpoint(const std::string& path) {
  Reader r(read_file(path));
  if (r.get_bytes(8, "checkpoint header") != std::string(kCheckpointMagic, 8))
    throw FormatError("checkpoint magic mismatch");
  const uint16_t version = r.get<uint16_t>("checkpoint header");
  if (version != kFormatVersion)
    throw FormatError("unsupported checkpoint format version " +
                      std::to_string(version));
  const uint32_t n_layers = r.get<uint32_t>("checkpoint header");

  QuantCheckpoint ckpt;
  for (uint32_t i = 0; i < n_layers; ++i) {
    CheckpointLayer layer;
    const uint16_t name_len = r.get<uint16_t>("layer name");
    layer.name = r.get_bytes(name_len, "layer name");
    auto& w = layer.weights;
    w.rows = r.get<uint32_t>("layer shape");
    w.cols = r.get<uint32_t>("layer shape");
    const int bits = r.get<uint8_t>("layer bits");
    if (!bits_supported(bits)) throw FormatError("checkpoint with unsupported bits");
    w.scheme.kind = static_cast<Grouping>(r.get<uint8_t>("layer scheme"));
    w.scheme.group_size = r.get<uint32_t>("layer scheme");
    w.symmetric = r.get<uint8_t>("layer scheme") != 0;
    const uint32_t n_groups = r.get<uint32_t>("layer params");
    w.params.resize(n_groups);
    for (auto& p : w.params) {
      p.bits = bits;
      p.scale = static_cast<double>(r.get<float>("layer params"));
      p.zero_point = w.symmetric ? (1 << (bits - 1)) : 0;
    }
    if (!w.symmetric)
      for (auto& p : w.params) p.zero_point = r.get<int32_t>("layer params");
    const uint64_t packed_len = r.get<uint64_t>("layer weights");
    const std::string packed = r.get_bytes(packed_len, "layer weights");
    w.ints = unpack_codes(
        std::span(reinterpret_cast<const uint8_t*>(packed.data()), packed.size()),
        bits, w.rows * w.cols);

    const uint32_t mask_len = r.get<uint32_t>("layer mask");
    layer.mask.resize(mask_len);
    for (float& v : layer.mask) v = r.get<float>("layer mask");
    const uint32_t rot_len = r.get<uint32_t>("layer rotation");
    if (rot_len > 0) {
      const std::string signs = r.get_bytes((rot_len + 7) / 8, "layer rotation");
      layer.rotation_diag.resize(rot_len);
      for (uint32_t j = 0; j < rot_len; ++j)
        layer.rotation_diag[j] =
            (static_cast<uint8_t>(signs[j / 8]) >> (j % 8)) & 1 ? 1 : -1;
    }
    ckpt.layers.push_back(std::move(layer));
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last layer");
  return ckpt;
}

} // namespace dtq
