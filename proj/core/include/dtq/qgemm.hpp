// Reference integer GEMM for quantized linear layers. Weights carry
// per-output-channel symmetric params, activations are quantized per token
// on the fly, and every value summed in an accumulator shares its group's
// (s, z) pair. Accumulation is 64-bit and overflow-checked.

#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dtq/matrix.hpp"
#include "dtq/quant.hpp"

namespace dtq {

struct QuantLinear {
  QuantizedTensor w_q; // [C_out, C_in], PerOutputChannel, symmetric
  std::optional<std::vector<double>> bias; // length C_out
  int act_bits = 8;

  std::size_t out_channels() const { return w_q.rows; }
  std::size_t in_channels() const { return w_q.cols; }
};

// Builds a QuantLinear from float weights.
QuantLinear make_quant_linear(const Matrix& w, int weight_bits, int act_bits,
                              const std::optional<std::vector<double>>& bias = {});

// Y[t,o] = s_x[t] * s_w[o] * sum_c (X_int[t,c] - z_x[t]) * W_sym[o,c] + bias[o],
// with activations quantized dynamically per token. The zero-point correction
// uses per-output-channel weight sums so the inner loop is a pure integer dot.
Matrix qlinear_forward(const Matrix& x, const QuantLinear& layer);

// The floating-point path the integer path must match: fake-quantized
// activations times dequantized weights.
Matrix qlinear_forward_float(const Matrix& x, const QuantLinear& layer);

struct LayerBytes {
  std::size_t weights = 0; // packed integer payload
  std::size_t params = 0;  // per-group scales/zero points as 32-bit values
};

// Packed payload size of one weight tensor: codes at `bits` each, rounded up
// to whole bytes, plus one 32-bit scale per group (symmetric weights carry no
// stored zero point).
LayerBytes weight_bytes(std::size_t rows, std::size_t cols, int bits,
                        std::size_t group_count);

// Total serialized payload of a layer set under a per-layer bit assignment,
// for memory-ratio accounting against a 16-bit-per-weight baseline.
std::size_t checkpoint_bytes(const std::vector<std::pair<Matrix, int>>& layers);

std::size_t fp16_baseline_bytes(const std::vector<std::pair<Matrix, int>>& layers);

} // namespace dtq
