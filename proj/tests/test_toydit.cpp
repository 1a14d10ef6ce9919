#include <cmath>

#include "doctest.h"
#include "dtq/toydit.hpp"

using namespace dtq;

namespace {

BuildOptions small_build() {
  BuildOptions b;
  b.width = 32;
  b.tokens = 8;
  b.frames = 2;
  b.seed = 0;
  return b;
}

} // namespace

TEST_CASE("build validates dimensions") {
  BuildOptions b = small_build();
  b.width = 48;
  CHECK_THROWS(build_toy_model(b));
  b = small_build();
  b.tokens = 2;
  CHECK_THROWS(build_toy_model(b));
  b = small_build();
  b.frames = 1;
  CHECK_THROWS(build_toy_model(b));
}

TEST_CASE("same seed builds bit-identical models") {
  const ToyBlock a = build_toy_model(small_build());
  const ToyBlock b = build_toy_model(small_build());
  for (std::size_t i = 0; i < kNumLayers; ++i)
    CHECK(a.weights[i] == b.weights[i]);
  CHECK(a.scale_shift_scale == b.scale_shift_scale);
  CHECK(a.context == b.context);
}

TEST_CASE("different seeds differ") {
  BuildOptions b2 = small_build();
  b2.seed = 1;
  const ToyBlock a = build_toy_model(small_build());
  const ToyBlock b = build_toy_model(b2);
  CHECK_FALSE(a.weights[0] == b.weights[0]);
}

TEST_CASE("zeroed modulation is the identity") {
  ToyBlock block = build_toy_model(small_build());
  std::fill(block.scale_shift_scale.begin(), block.scale_shift_scale.end(), 0.0);
  std::fill(block.scale_shift_shift.begin(), block.scale_shift_shift.end(), 0.0);
  for (double& v : block.t_embed_w2.data()) v = 0.0;
  Matrix x(4, 32);
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = double(i) * 0.1;
  CHECK(modulate(x, block, 3, 8) == x);
}

TEST_CASE("shift-only modulation broadcasts over tokens") {
  ToyBlock block = build_toy_model(small_build());
  std::fill(block.scale_shift_scale.begin(), block.scale_shift_scale.end(), 0.0);
  for (double& v : block.t_embed_w2.data()) v = 0.0;
  const Matrix zero(4, 32, 0.0);
  const Matrix out = modulate(zero, block, 0, 8);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c)
      CHECK(out(r, c) == doctest::Approx(block.scale_shift_shift[c]));
}

TEST_CASE("modulated channel ranges vary across timesteps") {
  const ToyBlock block = build_toy_model({});
  RunOptions opts;
  opts.steps = 8;
  const DenoiseRun run = run_denoise(block, opts);
  // coefficient of variation of per-trace absmax across t, first layer
  std::vector<double> amax;
  for (const auto& tr : run.traces)
    if (tr.layer_name == "SelfAttnQKV" && tr.condition == Condition::Cond)
      amax.push_back(max_abs(tr.x));
  REQUIRE(amax.size() == 8);
  double mean = 0.0;
  for (double v : amax) mean += v;
  mean /= double(amax.size());
  double var = 0.0;
  for (double v : amax) var += (v - mean) * (v - mean);
  const double cv = std::sqrt(var / double(amax.size())) / mean;
  CHECK(cv > 0.1);
}

TEST_CASE("16-bit passthrough reproduces the FP run bit-identically") {
  const ToyBlock block = build_toy_model(small_build());
  RunOptions fp;
  fp.steps = 4;
  const DenoiseRun ref = run_denoise(block, fp);

  RunOptions pass = fp;
  QuantConfig qc;
  qc.base.weight_bits = 16;
  qc.base.act_bits = 16;
  pass.quant = qc;
  const DenoiseRun quant = run_denoise(block, pass);
  CHECK(quant.output == ref.output);
}

TEST_CASE("runs are deterministic given (seed, config)") {
  const ToyBlock block = build_toy_model(small_build());
  RunOptions opts;
  opts.steps = 4;
  QuantConfig qc;
  qc.base.weight_bits = 8;
  qc.base.act_bits = 8;
  opts.quant = qc;
  const DenoiseRun a = run_denoise(block, opts);
  const DenoiseRun b = run_denoise(block, opts);
  CHECK(a.output == b.output);
  REQUIRE(a.traces.size() == b.traces.size());
  for (std::size_t i = 0; i < a.traces.size(); ++i)
    CHECK(a.traces[i].x == b.traces[i].x);
}

TEST_CASE("step count is validated") {
  const ToyBlock block = build_toy_model(small_build());
  RunOptions opts;
  opts.steps = 6;
  CHECK_THROWS(run_denoise(block, opts));
  opts.steps = 0;
  CHECK_THROWS(run_denoise(block, opts));
}

TEST_CASE("conditional and unconditional traces differ") {
  const ToyBlock block = build_toy_model({});
  RunOptions opts;
  opts.steps = 4;
  const DenoiseRun run = run_denoise(block, opts);
  // compare per-token means of CrossAttnProj inputs at step 0
  const Matrix* cond = nullptr;
  const Matrix* uncond = nullptr;
  for (const auto& tr : run.traces) {
    if (tr.layer_name != "CrossAttnProj" || tr.timestep != 0) continue;
    (tr.condition == Condition::Cond ? cond : uncond) = &tr.x;
  }
  REQUIRE(cond != nullptr);
  REQUIRE(uncond != nullptr);
  double diff = 0.0;
  for (std::size_t r = 0; r < cond->rows(); ++r) {
    double mc = 0.0, mu = 0.0;
    for (std::size_t c = 0; c < cond->cols(); ++c) {
      mc += (*cond)(r, c);
      mu += (*uncond)(r, c);
    }
    diff += std::abs(mc - mu) / double(cond->cols());
  }
  CHECK(diff > 0.0);
}

TEST_CASE("output error shrinks as weight bits grow") {
  const ToyBlock block = build_toy_model({});
  RunOptions fp;
  fp.steps = 8;
  fp.record_traces = false;
  const DenoiseRun ref = run_denoise(block, fp);

  double prev = std::numeric_limits<double>::infinity();
  for (int bits : {4, 6, 8}) {
    RunOptions opts = fp;
    QuantConfig qc;
    qc.base.weight_bits = bits;
    qc.base.act_bits = 16;
    opts.quant = qc;
    const double err = mse(run_denoise(block, opts).output, ref.output);
    CHECK(err < prev);
    prev = err;
  }
}

TEST_CASE("variation stats: constant traces give zero CVs") {
  std::vector<ActivationTrace> traces;
  for (std::size_t t = 0; t < 3; ++t)
    traces.push_back({"L", t, Condition::Cond, Matrix(4, 4, 2.5)});
  const VariationReport rep = variation_stats(traces);
  CHECK(rep.token_cv == 0.0);
  CHECK(rep.channel_cv == 0.0);
  REQUIRE(rep.timestep_cv.has_value());
  CHECK(*rep.timestep_cv == 0.0);
  CHECK_FALSE(rep.condition_cv.has_value()); // single condition only
}

TEST_CASE("variation stats: single trace has no timestep dimension") {
  std::vector<ActivationTrace> traces;
  traces.push_back({"L", 0, Condition::Cond, Matrix(2, 2, 1.0)});
  const VariationReport rep = variation_stats(traces);
  CHECK_FALSE(rep.timestep_cv.has_value());
}

TEST_CASE("default model shows all four variation phenomena") {
  const ToyBlock block = build_toy_model({});
  RunOptions opts;
  opts.steps = 8;
  const DenoiseRun run = run_denoise(block, opts);
  const VariationReport rep = variation_stats(run.traces);
  CHECK(rep.token_cv > 0.0);
  CHECK(rep.channel_cv > 0.0);
  REQUIRE(rep.timestep_cv.has_value());
  CHECK(*rep.timestep_cv > 0.0);
  REQUIRE(rep.condition_cv.has_value());
  CHECK(*rep.condition_cv > 0.0);
  // channel variation dominates on the default build
  CHECK(rep.channel_cv > rep.token_cv);
  CHECK(rep.channel_cv > *rep.timestep_cv);
  CHECK(rep.channel_cv > *rep.condition_cv);
}

TEST_CASE("calibration produces params and transforms for every layer") {
  const ToyBlock block = build_toy_model(small_build());
  const CalibrationData calib = calibrate(block, 4, 8, 4, 0);
  for (const auto& name : layer_names()) {
    REQUIRE(calib.act_params.count(name) == 1);
    REQUIRE(calib.balance.count(name) == 1);
    const auto& t = calib.balance.at(name);
    REQUIRE(t.mask.has_value());
    REQUIRE(t.rotation.has_value());
    CHECK(t.rotation->n == block.weight(layer_kind(name)).cols());
  }
}
