#include "dtq/toydit.hpp"

#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>

namespace dtq {

namespace {

const std::array<std::string, kNumLayers> kLayerNames = {
    "SelfAttnQKV",    "SelfAttnProj",     "CrossAttnQKV", "CrossAttnProj",
    "TemporalAttnQKV", "TemporalAttnProj", "FFN1",         "FFN2"};

constexpr double kCfgScale = 2.0;
constexpr std::size_t kContextRows = 8;
constexpr std::size_t kTimeFeatures = 8;
constexpr std::size_t kTimeHidden = 16;

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev,
                     std::mt19937_64& rng) {
  Matrix m(rows, cols);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

std::vector<double> timestep_features(std::size_t t, std::size_t total_steps) {
  std::vector<double> f(kTimeFeatures);
  const double tt = static_cast<double>(t) / static_cast<double>(total_steps);
  for (std::size_t k = 0; k < kTimeFeatures / 2; ++k) {
    const double w = 2.0 * std::numbers::pi * static_cast<double>(k + 1) * tt;
    f[2 * k] = std::sin(w);
    f[2 * k + 1] = std::cos(w);
  }
  return f;
}

// Row-wise softmax(Q K^T / sqrt(d)) V for one attention head.
Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix scores = matmul_nt(q, k);
  Matrix out(q.rows(), v.cols());
  std::vector<double> w(k.rows());
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < scores.cols(); ++j)
      mx = std::max(mx, scores(i, j) * inv_sqrt_d);
    double sum = 0.0;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      w[j] = std::exp(scores(i, j) * inv_sqrt_d - mx);
      sum += w[j];
    }
    for (std::size_t j = 0; j < scores.cols(); ++j) w[j] /= sum;
    for (std::size_t c = 0; c < v.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < k.rows(); ++j) acc += w[j] * v(j, c);
      out(i, c) = acc;
    }
  }
  return out;
}

Matrix slice_cols(const Matrix& m, std::size_t c0, std::size_t n) {
  Matrix out(m.rows(), n);
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < n; ++c) out(r, c) = m(r, c0 + c);
  return out;
}

Matrix slice_rows(const Matrix& m, std::size_t r0, std::size_t n) {
  Matrix out(n, m.cols());
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(r0 + r, c);
  return out;
}

void add_in_place(Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

struct ForwardCtx {
  const ToyBlock* block = nullptr;
  std::size_t t = 0;
  std::size_t steps = 1;
  Condition cond = Condition::Cond;
  bool zero_time_embed = false;
  const QuantConfig* quant = nullptr;
  std::vector<ActivationTrace>* traces = nullptr;
  std::map<std::string, Matrix>* capture = nullptr; // static-base inputs
  Matrix* cross_out = nullptr;
};

// One linear layer application with optional balance + fake quantization.
// `record` is false for secondary inputs (the context side of cross attention)
// so each (layer, step, condition) yields exactly one trace.
Matrix apply_linear(const ForwardCtx& ctx, LayerKind kind, const Matrix& x,
                    bool record = true) {
  const std::string& name = layer_name(kind);
  if (record) {
    if (ctx.traces)
      ctx.traces->push_back({name, ctx.t, ctx.cond, x});
    if (ctx.capture)
      ctx.capture->insert_or_assign(name, x);
  }
  const Matrix& w = ctx.block->weight(kind);
  if (ctx.quant == nullptr) return matmul_nt(x, w);

  const QuantConfig& qc = *ctx.quant;
  int weight_bits = qc.base.weight_bits;
  if (qc.plan) {
    const std::size_t range_idx = ctx.t * kNumRanges / ctx.steps;
    weight_bits = qc.plan->bits_for(name, range_idx);
  }
  const int act_bits = qc.base.act_bits;
  const bool balanced = qc.base.balance != BalanceKind::None;
  if (weight_bits >= 16 && act_bits >= 16 && !balanced) return matmul_nt(x, w);

  Matrix xb = x, wb = w;
  if (balanced) {
    if (!qc.calib)
      throw std::invalid_argument("run_denoise: balance requires calibration data");
    const BalanceTransform& full = qc.calib->balance.at(name);
    BalanceTransform t;
    if (qc.base.balance != BalanceKind::RotateOnly) t.mask = full.mask;
    if (qc.base.balance != BalanceKind::ScaleOnly) t.rotation = full.rotation;
    auto [xr, wr] = apply_balance(xb, wb, t);
    xb = std::move(xr);
    wb = std::move(wr);
  }
  if (act_bits < 16) {
    if (qc.base.act_mode == QuantMode::Static) {
      if (qc.base.act_scheme.kind != Grouping::PerTensor)
        throw std::invalid_argument(
            "run_denoise: static activation params supported for PerTensor only");
      if (balanced)
        throw std::invalid_argument(
            "run_denoise: static activation params cannot follow a balance transform");
      if (!qc.calib)
        throw std::invalid_argument("run_denoise: Static mode requires calibration data");
      const std::vector<QuantParams> frozen = {qc.calib->act_params.at(name)};
      xb = fake_quantize(xb, qc.base.act_scheme, act_bits, QuantMode::Static, &frozen);
    } else {
      xb = fake_quantize(xb, qc.base.act_scheme, act_bits, QuantMode::Dynamic);
    }
  }
  if (weight_bits < 16)
    wb = fake_quantize(wb, GroupingScheme::per_output_channel(), weight_bits,
                       QuantMode::Dynamic, nullptr, /*symmetric=*/true);
  return matmul_nt(xb, wb);
}

// One transformer-block forward over the [frames*tokens, width] state.
// The four branches run in parallel off the same modulated input and their
// residuals sum, so each pathway owns its contribution to the output.
Matrix block_forward(const ForwardCtx& ctx, const Matrix& x) {
  const ToyBlock& b = *ctx.block;
  const std::size_t c = b.width, n = b.tokens, f = b.frames;

  Matrix h = modulate(x, b, ctx.t, ctx.steps, ctx.zero_time_embed);
  Matrix state = x;

  // self attention within each frame
  Matrix qkv = apply_linear(ctx, LayerKind::SelfAttnQKV, h);
  Matrix attn_out(x.rows(), c);
  for (std::size_t fr = 0; fr < f; ++fr) {
    const Matrix blockq = slice_rows(qkv, fr * n, n);
    const Matrix a = attention(slice_cols(blockq, 0, c), slice_cols(blockq, c, c),
                               slice_cols(blockq, 2 * c, c));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t cc = 0; cc < c; ++cc) attn_out(fr * n + r, cc) = a(r, cc);
  }
  add_in_place(state, apply_linear(ctx, LayerKind::SelfAttnProj, attn_out));

  // cross attention against the conditioning context (zeroed when uncond)
  Matrix qkv_x = apply_linear(ctx, LayerKind::CrossAttnQKV, h);
  Matrix ctx_mat = b.context;
  if (ctx.cond == Condition::Uncond)
    for (double& v : ctx_mat.data()) v = 0.0;
  Matrix qkv_ctx = apply_linear(ctx, LayerKind::CrossAttnQKV, ctx_mat, /*record=*/false);
  Matrix ca = attention(slice_cols(qkv_x, 0, c), slice_cols(qkv_ctx, c, c),
                        slice_cols(qkv_ctx, 2 * c, c));
  Matrix cross_proj = apply_linear(ctx, LayerKind::CrossAttnProj, ca);
  if (ctx.cross_out && ctx.cond == Condition::Cond) *ctx.cross_out = cross_proj;
  add_in_place(state, cross_proj);

  // temporal attention across frames at each token position
  Matrix qkv_t = apply_linear(ctx, LayerKind::TemporalAttnQKV, h);
  Matrix tattn(x.rows(), c);
  Matrix qf(f, 3 * c);
  for (std::size_t tok = 0; tok < n; ++tok) {
    for (std::size_t fr = 0; fr < f; ++fr)
      for (std::size_t cc = 0; cc < 3 * c; ++cc) qf(fr, cc) = qkv_t(fr * n + tok, cc);
    const Matrix a = attention(slice_cols(qf, 0, c), slice_cols(qf, c, c),
                               slice_cols(qf, 2 * c, c));
    for (std::size_t fr = 0; fr < f; ++fr)
      for (std::size_t cc = 0; cc < c; ++cc) tattn(fr * n + tok, cc) = a(fr, cc);
  }
  // the temporal pathway writes frame-level features: its projection is
  // pooled over tokens within each frame before entering the residual stream
  Matrix tproj = apply_linear(ctx, LayerKind::TemporalAttnProj, tattn);
  for (std::size_t fr = 0; fr < f; ++fr)
    for (std::size_t cc = 0; cc < c; ++cc) {
      double mean = 0.0;
      for (std::size_t r = 0; r < n; ++r) mean += tproj(fr * n + r, cc);
      mean /= static_cast<double>(n);
      for (std::size_t r = 0; r < n; ++r) tproj(fr * n + r, cc) = mean;
    }
  add_in_place(state, tproj);

  // feed-forward
  Matrix ffn_h = apply_linear(ctx, LayerKind::FFN1, h);
  for (double& v : ffn_h.data()) v = gelu(v);
  add_in_place(state, apply_linear(ctx, LayerKind::FFN2, ffn_h));
  return state;
}

Matrix initial_state(const ToyBlock& block, uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  return random_matrix(block.frames * block.tokens, block.width, 1.0, rng);
}

// Deterministic Gaussian-mixture target the loop contracts toward.
Matrix mixture_target(const ToyBlock& block, uint64_t seed) {
  std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dULL + 7);
  std::normal_distribution<double> dist(0.0, 1.0);
  const std::size_t k = 4; // mixture components
  std::vector<std::vector<double>> centers(k, std::vector<double>(block.width));
  for (auto& ctr : centers)
    for (double& v : ctr) v = 2.0 * dist(rng);
  Matrix target(block.frames * block.tokens, block.width);
  for (std::size_t r = 0; r < target.rows(); ++r) {
    const auto& ctr = centers[rng() % k];
    for (std::size_t c = 0; c < target.cols(); ++c)
      target(r, c) = ctr[c] + 0.3 * dist(rng);
  }
  return target;
}

double cv(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (std::abs(mean) < 1e-300) return 0.0;
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return std::sqrt(var) / std::abs(mean);
}

} // namespace

const std::array<std::string, kNumLayers>& layer_names() { return kLayerNames; }

const std::string& layer_name(LayerKind k) {
  return kLayerNames[static_cast<std::size_t>(k)];
}

LayerKind layer_kind(const std::string& name) {
  for (std::size_t i = 0; i < kNumLayers; ++i)
    if (kLayerNames[i] == name) return static_cast<LayerKind>(i);
  throw std::invalid_argument("layer_kind: unknown layer " + name);
}

LayerGroup layer_group(LayerKind k) {
  switch (k) {
    case LayerKind::CrossAttnQKV:
    case LayerKind::CrossAttnProj: return LayerGroup::Alignment;
    case LayerKind::TemporalAttnQKV:
    case LayerKind::TemporalAttnProj: return LayerGroup::Temporal;
    default: return LayerGroup::Quality;
  }
}

ToyBlock build_toy_model(const BuildOptions& opts) {
  const std::size_t c = opts.width;
  if (c < 16 || (c & (c - 1)) != 0)
    throw std::invalid_argument("build_toy_model: width must be a power of two >= 16");
  if (opts.tokens < 4) throw std::invalid_argument("build_toy_model: tokens must be >= 4");
  if (opts.frames < 2) throw std::invalid_argument("build_toy_model: frames must be >= 2");

  ToyBlock b;
  b.width = c;
  b.tokens = opts.tokens;
  b.frames = opts.frames;
  b.seed = opts.seed;

  std::mt19937_64 rng(opts.seed * 0x9e3779b97f4a7c15ULL + 0x1234);
  const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(c));
  b.weights[static_cast<std::size_t>(LayerKind::SelfAttnQKV)] =
      random_matrix(3 * c, c, inv_sqrt_c, rng);
  b.weights[static_cast<std::size_t>(LayerKind::SelfAttnProj)] =
      random_matrix(c, c, 0.5 * inv_sqrt_c, rng);
  b.weights[static_cast<std::size_t>(LayerKind::CrossAttnQKV)] =
      random_matrix(3 * c, c, inv_sqrt_c, rng);
  b.weights[static_cast<std::size_t>(LayerKind::CrossAttnProj)] =
      random_matrix(c, c, 0.5 * inv_sqrt_c, rng);
  b.weights[static_cast<std::size_t>(LayerKind::TemporalAttnQKV)] =
      random_matrix(3 * c, c, inv_sqrt_c, rng);
  // the temporal projection residual is pooled over tokens within each frame
  // before it joins the state, so this pathway carries frame-level features
  b.weights[static_cast<std::size_t>(LayerKind::TemporalAttnProj)] =
      random_matrix(c, c, 0.5 * inv_sqrt_c, rng);
  b.weights[static_cast<std::size_t>(LayerKind::FFN1)] =
      random_matrix(4 * c, c, inv_sqrt_c, rng);
  b.weights[static_cast<std::size_t>(LayerKind::FFN2)] =
      random_matrix(c, 4 * c, 0.25 * inv_sqrt_c, rng);

  // Heavy-tailed (log-normal) per-channel magnitudes so channel imbalance is
  // present already at step 0.
  std::normal_distribution<double> normal(0.0, 1.0);
  b.scale_shift_scale.resize(c);
  b.scale_shift_shift.resize(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double sign_s = (rng() & 1) ? 1.0 : -1.0;
    const double sign_h = (rng() & 1) ? 1.0 : -1.0;
    b.scale_shift_scale[ch] = sign_s * 0.4 * std::exp(1.2 * normal(rng));
    b.scale_shift_shift[ch] = sign_h * 0.2 * std::exp(1.0 * normal(rng));
  }

  b.t_embed_w1 = random_matrix(kTimeHidden, kTimeFeatures,
                               1.0 / std::sqrt(double(kTimeFeatures)), rng);
  b.t_embed_w2 = random_matrix(2 * c, kTimeHidden,
                               0.3 / std::sqrt(double(kTimeHidden)), rng);
  // log-normal row gains give the time embedding its own outlier channels
  for (std::size_t r = 0; r < 2 * c; ++r) {
    const double gain = std::exp(0.8 * normal(rng));
    for (std::size_t i = 0; i < kTimeHidden; ++i) b.t_embed_w2(r, i) *= gain;
  }

  b.context = random_matrix(kContextRows, c, 1.0, rng);
  return b;
}

Matrix modulate(const Matrix& x, const ToyBlock& block, std::size_t t,
                std::size_t total_steps, bool zero_time_embed) {
  if (x.cols() != block.width)
    throw std::invalid_argument("modulate: channel mismatch");
  std::vector<double> scale = block.scale_shift_scale;
  std::vector<double> shift = block.scale_shift_shift;
  if (!zero_time_embed) {
    const std::vector<double> feats = timestep_features(t, total_steps);
    std::vector<double> hidden(kTimeHidden, 0.0);
    for (std::size_t i = 0; i < kTimeHidden; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < kTimeFeatures; ++j)
        acc += block.t_embed_w1(i, j) * feats[j];
      hidden[i] = std::tanh(acc);
    }
    for (std::size_t ch = 0; ch < block.width; ++ch) {
      double sc = 0.0, sh = 0.0;
      for (std::size_t i = 0; i < kTimeHidden; ++i) {
        sc += block.t_embed_w2(ch, i) * hidden[i];
        sh += block.t_embed_w2(block.width + ch, i) * hidden[i];
      }
      scale[ch] += sc;
      shift[ch] += sh;
    }
  }
  Matrix out = x;
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t ch = 0; ch < x.cols(); ++ch)
      out(r, ch) = x(r, ch) * (1.0 + scale[ch]) + shift[ch];
  return out;
}

DenoiseRun run_denoise(const ToyBlock& block, const RunOptions& opts) {
  if (opts.steps < 4 || opts.steps % 4 != 0)
    throw std::invalid_argument("run_denoise: steps must be >= 4 and divisible by 4");

  DenoiseRun run;
  run.steps = opts.steps;
  run.cfg = opts.cfg;
  run.seed = opts.seed;
  run.frames = block.frames;
  run.tokens = block.tokens;

  Matrix x = initial_state(block, opts.seed);
  const Matrix target = mixture_target(block, opts.seed);
  const double dt = 1.0 / static_cast<double>(opts.steps);

  ForwardCtx ctx;
  ctx.block = &block;
  ctx.steps = opts.steps;
  ctx.quant = opts.quant ? &*opts.quant : nullptr;
  ctx.traces = opts.record_traces ? &run.traces : nullptr;

  for (std::size_t t = 0; t < opts.steps; ++t) {
    ctx.t = t;
    Matrix cross_out;
    ctx.cross_out = &cross_out;

    ctx.cond = Condition::Cond;
    Matrix out_c = block_forward(ctx, x);
    Matrix d = out_c; // residual direction out - x
    for (std::size_t i = 0; i < d.size(); ++i) d.data()[i] -= x.data()[i];

    if (opts.cfg) {
      ctx.cross_out = nullptr;
      ctx.cond = Condition::Uncond;
      Matrix out_u = block_forward(ctx, x);
      for (std::size_t i = 0; i < d.size(); ++i) {
        const double du = out_u.data()[i] - x.data()[i];
        const double dc = d.data()[i];
        d.data()[i] = du + kCfgScale * (dc - du);
      }
    }
    run.cross_outputs.push_back(std::move(cross_out));

    // contract toward the mixture target while following the block residual
    for (std::size_t i = 0; i < x.size(); ++i)
      x.data()[i] += dt * (target.data()[i] - x.data()[i]) + dt * d.data()[i];
  }
  run.output = std::move(x);
  return run;
}

CalibrationData calibrate(const ToyBlock& block, std::size_t steps, int act_bits,
                          int weight_bits, uint64_t seed) {
  CalibrationData calib;
  calib.act_bits = act_bits;

  // floating-point trace pass for activation ranges
  RunOptions fp_opts;
  fp_opts.steps = steps;
  fp_opts.cfg = true;
  fp_opts.seed = seed;
  const DenoiseRun fp = run_denoise(block, fp_opts);
  std::map<std::string, std::pair<double, double>> ranges;
  for (const auto& tr : fp.traces) {
    auto [it, inserted] = ranges.try_emplace(tr.layer_name, 1e300, -1e300);
    for (double v : tr.x.data()) {
      it->second.first = std::min(it->second.first, v);
      it->second.second = std::max(it->second.second, v);
    }
  }
  for (const auto& [name, mm] : ranges) {
    const std::array<double, 2> span = {mm.first, mm.second};
    calib.act_params[name] = compute_minmax_params(span, act_bits);
  }

  // static base: one forward at t = 0 with the time embedding zeroed
  std::map<std::string, Matrix> capture;
  ForwardCtx ctx;
  ctx.block = &block;
  ctx.steps = steps;
  ctx.t = 0;
  ctx.cond = Condition::Cond;
  ctx.zero_time_embed = true;
  ctx.capture = &capture;
  block_forward(ctx, initial_state(block, seed));

  double alpha_sum = 0.0;
  for (std::size_t i = 0; i < kNumLayers; ++i) {
    const auto k = static_cast<LayerKind>(i);
    const std::string& name = layer_name(k);
    const Matrix& base = capture.at(name);
    const Matrix& w = block.weight(k);
    const double alpha = choose_alpha(base, w, act_bits, weight_bits);
    alpha_sum += alpha;
    BalanceTransform t;
    t.mask = compute_scaling_mask(col_absmax(base), col_absmax(w), alpha);
    t.rotation = hadamard_matrix(w.cols(), /*randomize=*/true, seed ^ (0xd1b54a32d192ed03ULL * (i + 1)));
    calib.balance[name] = std::move(t);
    calib.static_absmax[name] = col_absmax(base);
  }
  calib.alpha = alpha_sum / static_cast<double>(kNumLayers);
  return calib;
}

VariationReport variation_stats(const std::vector<ActivationTrace>& traces) {
  if (traces.empty())
    throw std::invalid_argument("variation_stats: empty trace set");
  VariationReport rep;
  double token_acc = 0.0, channel_acc = 0.0;
  for (const auto& tr : traces) {
    token_acc += cv(row_absmax(tr.x));
    channel_acc += cv(col_absmax(tr.x));
  }
  rep.token_cv = token_acc / static_cast<double>(traces.size());
  rep.channel_cv = channel_acc / static_cast<double>(traces.size());

  // timestep-wise: absmax series over steps per (layer, condition)
  std::map<std::pair<std::string, int>, std::map<std::size_t, double>> by_step;
  // condition-wise: absmax per condition per (layer, step)
  std::map<std::pair<std::string, std::size_t>, std::map<int, double>> by_cond;
  for (const auto& tr : traces) {
    const double amax = max_abs(tr.x);
    by_step[{tr.layer_name, static_cast<int>(tr.condition)}][tr.timestep] = amax;
    by_cond[{tr.layer_name, tr.timestep}][static_cast<int>(tr.condition)] = amax;
  }
  double ts_acc = 0.0;
  std::size_t ts_n = 0;
  for (const auto& [key, series] : by_step) {
    if (series.size() < 2) continue;
    std::vector<double> vals;
    for (const auto& [step, v] : series) vals.push_back(v);
    ts_acc += cv(vals);
    ++ts_n;
  }
  if (ts_n > 0) rep.timestep_cv = ts_acc / static_cast<double>(ts_n);
  double cond_acc = 0.0;
  std::size_t cond_n = 0;
  for (const auto& [key, vals_by_cond] : by_cond) {
    if (vals_by_cond.size() < 2) continue;
    std::vector<double> vals;
    for (const auto& [cond, v] : vals_by_cond) vals.push_back(v);
    cond_acc += cv(vals);
    ++cond_n;
  }
  if (cond_n > 0) rep.condition_cv = cond_acc / static_cast<double>(cond_n);
  return rep;
}

} // namespace dtq
