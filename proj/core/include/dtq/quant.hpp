// Grouped min-max quantization for 2-D matrices (tokens x channels):
// parameter computation, quantize/dequantize, error decomposition and
// incoherence measurement.
//
// Rounding is round-half-to-even throughout so results are deterministic
// across platforms.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "dtq/matrix.hpp"

namespace dtq {

// scale s, zero point z and bit width b of one quantization group.
struct QuantParams {
  double scale = 1.0;
  int32_t zero_point = 0;
  int bits = 8;
};

enum class Grouping : uint8_t {
  PerTensor = 0,
  PerToken = 1,        // one group per row of X
  PerChannel = 2,      // one group per column
  PerOutputChannel = 3, // one group per row of W ([C_out, C_in])
  PerGroup = 4,        // contiguous sub-groups of group_size along each row
};

struct GroupingScheme {
  Grouping kind = Grouping::PerTensor;
  std::size_t group_size = 0; // only for PerGroup

  static GroupingScheme per_tensor() { return {Grouping::PerTensor, 0}; }
  static GroupingScheme per_token() { return {Grouping::PerToken, 0}; }
  static GroupingScheme per_channel() { return {Grouping::PerChannel, 0}; }
  static GroupingScheme per_output_channel() { return {Grouping::PerOutputChannel, 0}; }
  static GroupingScheme per_group(std::size_t size) { return {Grouping::PerGroup, size}; }

  std::size_t group_count(std::size_t rows, std::size_t cols) const;
  // Group index owning element (r, c).
  std::size_t group_of(std::size_t r, std::size_t c, std::size_t cols) const;
  bool operator==(const GroupingScheme&) const = default;
};

enum class QuantMode : uint8_t { Static = 0, Dynamic = 1 };

struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<uint8_t> ints; // row-major codes, one per element
  GroupingScheme scheme;
  std::vector<QuantParams> params; // one per group
  bool symmetric = false;

  uint8_t code(std::size_t r, std::size_t c) const { return ints[r * cols + c]; }
  const QuantParams& params_of(std::size_t r, std::size_t c) const {
    return params[scheme.group_of(r, c, cols)];
  }
};

struct QuantErrorReport {
  double rounding_mse = 0.0;
  double clamping_mse = 0.0;
  double total_mse = 0.0;
  double max_abs_err = 0.0;
};

// Round-half-to-even, the only rounding used in this library.
double round_even(double v);

bool bits_supported(int bits);

// Min-max parameters of one group: s = (max - min) / (2^b - 1),
// z = round(-min / s) clamped into code range, with the range first widened
// to include zero so one-sided groups stay clip-free. A constant group gets
// s = 1.
QuantParams compute_minmax_params(std::span<const double> group, int bits);

// Symmetric parameters (weights): z pinned to the mid-code 2^(b-1) so a
// dequantized zero is exact; s = max|x| / (2^(b-1) - 1).
QuantParams compute_symmetric_params(std::span<const double> group, int bits);

// Min-max (or symmetric) params for every group of a matrix under a scheme.
std::vector<QuantParams> compute_params(const Matrix& x, const GroupingScheme& scheme,
                                        int bits, bool symmetric = false);

// x_int = clamp(round(x / s) + z, 0, 2^b - 1) per group. Static mode uses
// frozen calibration params; Dynamic computes them from x itself.
QuantizedTensor quantize(const Matrix& x, const GroupingScheme& scheme, int bits,
                         QuantMode mode,
                         const std::vector<QuantParams>* frozen_params = nullptr,
                         bool symmetric = false);

// Entry-wise s * (x_int - z).
Matrix dequantize(const QuantizedTensor& q);

Matrix fake_quantize(const Matrix& x, const GroupingScheme& scheme, int bits,
                     QuantMode mode,
                     const std::vector<QuantParams>* frozen_params = nullptr,
                     bool symmetric = false);

// Splits total reconstruction MSE into the part caused by clamping (entries
// whose pre-clamp code fell outside the code range) and plain rounding.
QuantErrorReport error_report(const Matrix& x, const QuantizedTensor& q);

// mu(x) = max|x| * sqrt(g) / ||x||_2; always in [1, sqrt(g)] for nonzero x.
double incoherence(std::span<const double> group);

} // namespace dtq
