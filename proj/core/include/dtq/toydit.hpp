// Desk-scale diffusion-transformer surrogate. One transformer block with
// self/cross/temporal attention and an FFN, driven by a deterministic
// reverse-diffusion loop over seeded Gaussian-mixture frames. Its job is to
// manifest token-, condition-, timestep- and channel-wise activation
// variation and to let quantization error propagate end to end; it is not a
// trained model.

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dtq/balance.hpp"
#include "dtq/matrix.hpp"
#include "dtq/plan.hpp"
#include "dtq/quant.hpp"

namespace dtq {

enum class LayerKind : uint8_t {
  SelfAttnQKV = 0,
  SelfAttnProj,
  CrossAttnQKV,
  CrossAttnProj,
  TemporalAttnQKV,
  TemporalAttnProj,
  FFN1,
  FFN2,
};
constexpr std::size_t kNumLayers = 8;

const std::array<std::string, kNumLayers>& layer_names();
const std::string& layer_name(LayerKind k);
LayerKind layer_kind(const std::string& name);
LayerGroup layer_group(LayerKind k);

struct ToyBlock {
  std::size_t width = 0;  // channel count C, power of two
  std::size_t tokens = 0; // tokens per frame
  std::size_t frames = 0;
  uint64_t seed = 0;

  std::array<Matrix, kNumLayers> weights;
  std::vector<double> scale_shift_scale; // static per-channel scale, length C
  std::vector<double> scale_shift_shift; // static per-channel shift, length C
  Matrix t_embed_w1; // [16, 8] over sinusoidal timestep features
  Matrix t_embed_w2; // [2C, 16] -> per-channel (scale, shift)
  Matrix context;    // fixed conditioning matrix, [8, C]

  const Matrix& weight(LayerKind k) const { return weights[static_cast<std::size_t>(k)]; }
};

enum class Condition : uint8_t { Uncond = 0, Cond = 1 };

struct ActivationTrace {
  std::string layer_name;
  std::size_t timestep = 0;
  Condition condition = Condition::Cond;
  Matrix x;
};

enum class BalanceKind : uint8_t { None = 0, ScaleOnly, RotateOnly, StaticDynamic };

// Quantization applied to every linear layer during a run. weight_bits or
// act_bits of 16 means floating-point passthrough on that side.
struct LayerQuantSetting {
  int weight_bits = 16;
  int act_bits = 16;
  GroupingScheme act_scheme = GroupingScheme::per_token();
  QuantMode act_mode = QuantMode::Dynamic;
  BalanceKind balance = BalanceKind::None;
};

struct CalibrationData {
  int act_bits = 8;
  double alpha = 0.5;
  // Per-layer frozen PerTensor activation params at act_bits.
  std::map<std::string, QuantParams> act_params;
  // Per-layer transforms fitted to the static (zeroed time-embedding) base.
  std::map<std::string, BalanceTransform> balance;
  // Per-layer static-base per-channel absmax, kept for reporting.
  std::map<std::string, std::vector<double>> static_absmax;
};

struct QuantConfig {
  LayerQuantSetting base;
  std::optional<MixedPrecisionPlan> plan; // overrides weight bits per cell
  std::optional<CalibrationData> calib;   // required for Static mode or balance
};

struct DenoiseRun {
  std::size_t steps = 0;
  bool cfg = true;
  uint64_t seed = 0;
  std::size_t frames = 0;
  std::size_t tokens = 0;
  Matrix output;                       // final state, [frames*tokens, width]
  std::vector<Matrix> cross_outputs;   // conditional cross-attn proj output per step
  std::vector<ActivationTrace> traces; // layer inputs per (layer, step, condition)
};

struct BuildOptions {
  std::size_t width = 64;
  std::size_t tokens = 16;
  std::size_t frames = 4;
  uint64_t seed = 0;
};

ToyBlock build_toy_model(const BuildOptions& opts);

// x * (1 + scale(t)) + shift(t) per channel, where (scale, shift)(t) is the
// static scale-shift table plus the timestep-embedding MLP output.
Matrix modulate(const Matrix& x, const ToyBlock& block, std::size_t t,
                std::size_t total_steps, bool zero_time_embed = false);

struct RunOptions {
  std::size_t steps = 8; // divisible by 4
  bool cfg = true;
  uint64_t seed = 1;
  bool record_traces = true;
  std::optional<QuantConfig> quant;
};

DenoiseRun run_denoise(const ToyBlock& block, const RunOptions& opts);

// Fits static masks/rotations and frozen PerTensor activation params from a
// floating-point calibration pass.
CalibrationData calibrate(const ToyBlock& block, std::size_t steps, int act_bits,
                          int weight_bits, uint64_t seed);

struct VariationReport {
  double token_cv = 0.0;
  double channel_cv = 0.0;
  std::optional<double> timestep_cv; // absent with fewer than two steps
  std::optional<double> condition_cv;
};

VariationReport variation_stats(const std::vector<ActivationTrace>& traces);

} // namespace dtq
