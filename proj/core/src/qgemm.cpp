#include "dtq/qgemm.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace dtq {

QuantLinear make_quant_linear(const Matrix& w, int weight_bits, int act_bits,
                              const std::optional<std::vector<double>>& bias) {
  if (!bits_supported(weight_bits) || !bits_supported(act_bits))
    throw std::invalid_argument("make_quant_linear: unsupported bit width");
  if (bias && bias->size() != w.rows())
    throw std::invalid_argument("make_quant_linear: bias length != C_out");
  QuantLinear layer;
  layer.w_q = quantize(w, GroupingScheme::per_output_channel(), weight_bits,
                       QuantMode::Dynamic, nullptr, /*symmetric=*/true);
  layer.bias = bias;
  layer.act_bits = act_bits;
  return layer;
}

Matrix qlinear_forward(const Matrix& x, const QuantLinear& layer) {
  const std::size_t c_in = layer.in_channels();
  const std::size_t c_out = layer.out_channels();
  if (x.cols() != c_in)
    throw std::invalid_argument("qlinear_forward: X cols != C_in");

  // Worst-case |term| is (2^ab - 1) * 2^(wb - 1); C_in of them must fit i64.
  const int64_t max_term =
      static_cast<int64_t>((1 << layer.act_bits) - 1) *
      (int64_t{1} << (layer.w_q.params.empty() ? 7 : layer.w_q.params[0].bits - 1));
  if (max_term > std::numeric_limits<int64_t>::max() / static_cast<int64_t>(c_in))
    throw std::overflow_error("qlinear_forward: accumulator could overflow");

  const QuantizedTensor x_q =
      quantize(x, GroupingScheme::per_token(), layer.act_bits, QuantMode::Dynamic);

  // W_sym[o,c] = code - z_w and its per-row sums for the z_x correction.
  std::vector<int32_t> w_sym(c_out * c_in);
  std::vector<int64_t> w_row_sum(c_out, 0);
  for (std::size_t o = 0; o < c_out; ++o) {
    const int32_t z_w = layer.w_q.params[o].zero_point;
    for (std::size_t c = 0; c < c_in; ++c) {
      const int32_t v = static_cast<int32_t>(layer.w_q.code(o, c)) - z_w;
      w_sym[o * c_in + c] = v;
      w_row_sum[o] += v;
    }
  }

  Matrix y(x.rows(), c_out);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const QuantParams& px = x_q.params[t];
    const uint8_t* xi = x_q.ints.data() + t * c_in;
    for (std::size_t o = 0; o < c_out; ++o) {
      const int32_t* wo = w_sym.data() + o * c_in;
      int64_t acc = 0;
      for (std::size_t c = 0; c < c_in; ++c)
        acc += static_cast<int64_t>(xi[c]) * wo[c];
      acc -= static_cast<int64_t>(px.zero_point) * w_row_sum[o];
      double out = px.scale * layer.w_q.params[o].scale * static_cast<double>(acc);
      if (layer.bias) out += (*layer.bias)[o];
      y(t, o) = out;
    }
  }
  return y;
}

Matrix qlinear_forward_float(const Matrix& x, const QuantLinear& layer) {
  const Matrix x_fq =
      fake_quantize(x, GroupingScheme::per_token(), layer.act_bits, QuantMode::Dynamic);
  const Matrix w_deq = dequantize(layer.w_q);
  Matrix y = matmul_nt(x_fq, w_deq);
  if (layer.bias)
    for (std::size_t t = 0; t < y.rows(); ++t)
      for (std::size_t o = 0; o < y.cols(); ++o) y(t, o) += (*layer.bias)[o];
  return y;
}

LayerBytes weight_bytes(std::size_t rows, std::size_t cols, int bits,
                        std::size_t group_count) {
  LayerBytes b;
  b.weights = (rows * cols * static_cast<std::size_t>(bits) + 7) / 8;
  b.params = group_count * 4; // f32 scale per group
  return b;
}

std::size_t checkpoint_bytes(const std::vector<std::pair<Matrix, int>>& layers) {
  std::size_t total = 0;
  for (const auto& [w, bits] : layers) {
    const LayerBytes b = weight_bytes(w.rows(), w.cols(), bits, w.rows());
    total += b.weights + b.params;
  }
  return total;
}

std::size_t fp16_baseline_bytes(const std::vector<std::pair<Matrix, int>>& layers) {
  std::size_t total = 0;
  for (const auto& [w, bits] : layers) total += w.rows() * w.cols() * 2;
  return total;
}

} // namespace dtq
