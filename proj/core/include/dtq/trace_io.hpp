// Binary persistence: activation-trace archives and quantized checkpoints.
// Both formats are little-endian and versioned; unknown versions and
// corrupted headers are rejected loudly.
//
// Trace archive layout:
//   "DTQARCHV" | u16 version | u64 manifest length | manifest (JSON text)
//   then one chunk per trace:
//   "DTQTRACE" | u16 version | u32 rows | u32 cols | u32 timestep |
//   u8 condition | u64 layer-name hash | 1 pad byte | rows*cols f32 payload

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dtq/balance.hpp"
#include "dtq/quant.hpp"
#include "dtq/toydit.hpp"

namespace dtq {

class FormatError : public std::runtime_error {
public:
  explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

uint64_t fnv1a64(std::string_view s);

// Packs a stream of b-bit codes LSB-first into bytes; the tail of the last
// byte is zero. unpack needs the original count back.
std::vector<uint8_t> pack_codes(std::span<const uint8_t> codes, int bits);
std::vector<uint8_t> unpack_codes(std::span<const uint8_t> bytes, int bits,
                                  std::size_t count);

struct TraceArchive {
  std::string model_id;
  std::size_t step_count = 0;
  bool cfg = false;
  std::vector<ActivationTrace> traces;
};

void write_trace(const std::string& path, const TraceArchive& archive);
TraceArchive read_trace(const std::string& path);

struct CheckpointLayer {
  std::string name;
  QuantizedTensor weights;
  std::vector<float> mask;          // empty when no scaling mask
  std::vector<int8_t> rotation_diag; // empty when no rotation
};

struct QuantCheckpoint {
  std::vector<CheckpointLayer> layers;

  // Packed weight codes plus per-group 32-bit params, excluding metadata.
  std::size_t payload_bytes() const;
  // 16-bit-per-weight reference for memory-ratio reporting.
  std::size_t baseline_bytes() const;
};

void write_checkpoint(const std::string& path, const QuantCheckpoint& ckpt);
QuantCheckpoint read_checkpoint(const std::string& path);

} // namespace dtq
