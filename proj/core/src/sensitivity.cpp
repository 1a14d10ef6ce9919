#include "dtq/sensitivity.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <cmath>
#include <stdexcept>

namespace dtq {

namespace {

constexpr double kEps = 1e-12;

// High-frequency component: adjacent-token differences within each frame,
// one entry per (frame, token pair, channel).
std::vector<double> high_freq_field(const Matrix& state, std::size_t frames,
                                    std::size_t tokens) {
  std::vector<double> field;
  field.reserve(frames * (tokens - 1) * state.cols());
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t i = 0; i + 1 < tokens; ++i)
      for (std::size_t c = 0; c < state.cols(); ++c)
        field.push_back(state(f * tokens + i + 1, c) - state(f * tokens + i, c));
  return field;
}

// Per-token magnitudes of adjacent-frame differences, one entry per
// (frame pair, token).
std::vector<double> inter_frame_mags(const Matrix& state, std::size_t frames,
                                     std::size_t tokens) {
  std::vector<double> mags;
  mags.reserve((frames - 1) * tokens);
  for (std::size_t f = 0; f + 1 < frames; ++f)
    for (std::size_t i = 0; i < tokens; ++i) {
      double sq = 0.0;
      for (std::size_t c = 0; c < state.cols(); ++c) {
        const double d = state((f + 1) * tokens + i, c) - state(f * tokens + i, c);
        sq += d * d;
      }
      mags.push_back(std::sqrt(sq / static_cast<double>(state.cols())));
    }
  return mags;
}

double cosine_distance(const Matrix& a, const Matrix& b) {
  double na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a.data()[i] * a.data()[i];
    nb += b.data()[i] * b.data()[i];
  }
  if (na == 0.0 && nb == 0.0) return 0.0;
  if (na == 0.0 || nb == 0.0) return 1.0;
  // 1 - cos computed as half the squared distance of the unit vectors, so
  // identical inputs give exactly zero
  const double ia = 1.0 / std::sqrt(na), ib = 1.0 / std::sqrt(nb);
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] * ia - b.data()[i] * ib;
    sq += d * d;
  }
  return 0.5 * sq;
}

RunOptions probe_options(const SensitivityOptions& opts, MixedPrecisionPlan plan) {
  RunOptions run;
  run.steps = opts.steps;
  run.cfg = true;
  run.seed = opts.seed;
  run.record_traces = false;
  QuantConfig qc;
  qc.base.weight_bits = 16;
  qc.base.act_bits = 16; // probes isolate weight sensitivity
  qc.plan = std::move(plan);
  run.quant = std::move(qc);
  return run;
}

MixedPrecisionPlan passthrough_plan() {
  MixedPrecisionPlan plan;
  for (const auto& name : layer_names()) plan.bits[name] = {16, 16, 16, 16};
  return plan;
}

} // namespace

std::array<TimestepRange, kNumRanges> partition_timesteps(std::size_t steps) {
  if (steps == 0 || steps % kNumRanges != 0)
    throw std::invalid_argument("partition_timesteps: steps must be divisible by 4");
  std::array<TimestepRange, kNumRanges> out;
  const std::size_t span = steps / kNumRanges;
  for (std::size_t i = 0; i < kNumRanges; ++i)
    out[i] = {i, i * span, (i + 1) * span};
  return out;
}

ProxyMetrics proxy_metrics(const DenoiseRun& run_q, const DenoiseRun& run_fp) {
  if (run_q.steps != run_fp.steps || run_q.seed != run_fp.seed ||
      !run_q.output.same_shape(run_fp.output) ||
      run_q.frames != run_fp.frames)
    throw std::invalid_argument("proxy_metrics: mismatched runs");
  ProxyMetrics m;

  // energy of the deviation of the high-frequency component, relative to the
  // FP high-frequency energy
  const auto hf_fp = high_freq_field(run_fp.output, run_fp.frames, run_fp.tokens);
  const auto hf_q = high_freq_field(run_q.output, run_q.frames, run_q.tokens);
  double hf_dev = 0.0, hf_ref = 0.0;
  for (std::size_t i = 0; i < hf_fp.size(); ++i) {
    const double d = hf_q[i] - hf_fp[i];
    hf_dev += d * d;
    hf_ref += hf_fp[i] * hf_fp[i];
  }
  m.quality = hf_dev / (hf_ref + kEps);

  if (run_q.cross_outputs.size() != run_fp.cross_outputs.size())
    throw std::invalid_argument("proxy_metrics: cross-output step count mismatch");
  double cos_acc = 0.0;
  for (std::size_t s = 0; s < run_q.cross_outputs.size(); ++s)
    cos_acc += cosine_distance(run_q.cross_outputs[s], run_fp.cross_outputs[s]);
  m.alignment = cos_acc / static_cast<double>(run_q.cross_outputs.size());

  const auto mag_fp = inter_frame_mags(run_fp.output, run_fp.frames, run_fp.tokens);
  const auto mag_q = inter_frame_mags(run_q.output, run_q.frames, run_q.tokens);
  double dev = 0.0, ref = 0.0;
  for (std::size_t i = 0; i < mag_fp.size(); ++i) {
    dev += std::abs(mag_q[i] - mag_fp[i]);
    ref += mag_fp[i];
  }
  m.temporal = dev / (ref + kEps);
  return m;
}

MetricHeatmap build_heatmap(const std::array<ProxyMetrics, 3>& group_runs,
                            const ProxyMetrics& /*fp_reference*/) {
  // relative deltas; the proxies are already (M_FP - M_Q)-style relative terms
  double raw[3][3];
  for (std::size_t g = 0; g < 3; ++g) {
    raw[g][0] = group_runs[g].quality;
    raw[g][1] = group_runs[g].alignment;
    raw[g][2] = group_runs[g].temporal;
  }
  // Z-score standardization over all values
  double mean = 0.0;
  for (auto& row : raw)
    for (double v : row) mean += v;
  mean /= 9.0;
  double var = 0.0;
  for (auto& row : raw)
    for (double v : row) var += (v - mean) * (v - mean);
  const double stddev = std::sqrt(var / 9.0);
  MetricHeatmap hm;
  for (std::size_t g = 0; g < 3; ++g) {
    double z[3];
    double mx = -1e300;
    for (std::size_t m = 0; m < 3; ++m) {
      z[m] = stddev > 0.0 ? (raw[g][m] - mean) / stddev : 0.0;
      mx = std::max(mx, z[m]);
    }
    double sum = 0.0;
    for (std::size_t m = 0; m < 3; ++m) {
      hm.values[g][m] = std::exp(z[m] - mx);
      sum += hm.values[g][m];
    }
    for (std::size_t m = 0; m < 3; ++m) hm.values[g][m] /= sum;
  }
  return hm;
}

GroupBudget group_budgets(const std::array<double, 3>& group_mses,
                          const std::array<std::size_t, 3>& group_cells,
                          double budget_avg_bits, int low_bits, int high_bits) {
  if (budget_avg_bits < low_bits - 1e-9 || budget_avg_bits > high_bits + 1e-9)
    throw std::invalid_argument("group_budgets: budget outside [low, high] bits");
  for (double m : group_mses)
    if (!(m >= 0.0) || !std::isfinite(m))
      throw std::invalid_argument("group_budgets: invalid group MSE");

  GroupBudget out;
  out.cells = group_cells;
  const std::size_t total_cells = group_cells[0] + group_cells[1] + group_cells[2];
  const double frac = (budget_avg_bits - low_bits) / double(high_bits - low_bits);
  std::size_t promotions =
      static_cast<std::size_t>(std::floor(frac * double(total_cells) + 1e-9));
  promotions = std::min(promotions, total_cells);

  const double mse_sum = group_mses[0] + group_mses[1] + group_mses[2];
  std::array<double, 3> weight;
  if (mse_sum <= 0.0)
    weight = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  else
    for (std::size_t g = 0; g < 3; ++g) weight[g] = group_mses[g] / mse_sum;

  // largest-remainder apportionment, capped at group capacity
  std::array<double, 3> quota;
  std::size_t assigned = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    quota[g] = weight[g] * double(promotions);
    out.promotions[g] = std::min(static_cast<std::size_t>(std::floor(quota[g] + 1e-9)),
                                 group_cells[g]);
    assigned += out.promotions[g];
  }
  while (assigned < promotions) {
    int best = -1;
    double best_rem = -1.0;
    for (int g = 0; g < 3; ++g) {
      if (out.promotions[g] >= group_cells[g]) continue;
      const double rem = quota[g] - double(out.promotions[g]);
      if (rem > best_rem) {
        best_rem = rem;
        best = g;
      }
    }
    if (best < 0) break; // every group saturated
    ++out.promotions[best];
    ++assigned;
  }
  return out;
}

namespace {

void sort_records(std::vector<SensitivityRecord>& recs) {
  std::sort(recs.begin(), recs.end(), [](const auto& a, const auto& b) {
    if (a.metric_delta != b.metric_delta) return a.metric_delta > b.metric_delta;
    if (a.range_idx != b.range_idx) return a.range_idx < b.range_idx;
    return a.layer < b.layer;
  });
}

MixedPrecisionPlan plan_floor(const std::vector<SensitivityRecord>& records,
                              int low_bits) {
  MixedPrecisionPlan plan;
  for (const auto& rec : records) {
    auto [it, inserted] = plan.bits.try_emplace(
        rec.layer, std::array<int, kNumRanges>{low_bits, low_bits, low_bits, low_bits});
    (void)it;
  }
  return plan;
}

} // namespace

MixedPrecisionPlan allocate_plan(const std::vector<SensitivityRecord>& records,
                                 const GroupBudget& budget, int low_bits,
                                 int high_bits) {
  MixedPrecisionPlan plan = plan_floor(records, low_bits);
  std::size_t total_cells = 0, total_promoted = 0;
  for (std::size_t g = 0; g < 3; ++g) {
    std::vector<SensitivityRecord> group_recs;
    for (const auto& rec : records)
      if (static_cast<std::size_t>(rec.group) == g) group_recs.push_back(rec);
    if (group_recs.size() != budget.cells[g])
      throw std::invalid_argument("allocate_plan: record count != budget cell count");
    sort_records(group_recs);
    const std::size_t promote = std::min(budget.promotions[g], group_recs.size());
    for (std::size_t i = 0; i < promote; ++i)
      plan.bits[group_recs[i].layer][group_recs[i].range_idx] = high_bits;
    total_cells += group_recs.size();
    total_promoted += promote;
  }
  plan.budget = low_bits + (high_bits - low_bits) *
                               double(total_promoted) / double(total_cells);
  return plan;
}

MixedPrecisionPlan allocate_plan_global(const std::vector<SensitivityRecord>& records,
                                        double budget_avg_bits, int low_bits,
                                        int high_bits) {
  if (budget_avg_bits < low_bits - 1e-9 || budget_avg_bits > high_bits + 1e-9)
    throw std::invalid_argument("allocate_plan_global: infeasible budget");
  MixedPrecisionPlan plan = plan_floor(records, low_bits);
  std::vector<SensitivityRecord> sorted = records;
  sort_records(sorted);
  const double frac = (budget_avg_bits - low_bits) / double(high_bits - low_bits);
  const std::size_t promote =
      static_cast<std::size_t>(std::floor(frac * double(sorted.size()) + 1e-9));
  for (std::size_t i = 0; i < promote && i < sorted.size(); ++i)
    plan.bits[sorted[i].layer][sorted[i].range_idx] = high_bits;
  plan.budget = budget_avg_bits;
  return plan;
}

double average_bits(const MixedPrecisionPlan& plan, BudgetMode mode,
                    const std::map<std::string, std::size_t>& layer_params) {
  double acc = 0.0, weight_acc = 0.0;
  for (const auto& [layer, bits] : plan.bits) {
    double w = 1.0;
    if (mode == BudgetMode::ParameterWeighted) {
      auto it = layer_params.find(layer);
      if (it == layer_params.end())
        throw std::invalid_argument("average_bits: missing param count for " + layer);
      w = double(it->second);
    }
    for (int b : bits) {
      acc += w * b;
      weight_acc += w;
    }
  }
  return acc / weight_acc;
}

namespace {

// Runs one low-bit probe per (layer, range) cell, possibly across worker
// threads; `delta` maps a probe run to the record's metric_delta.
template <typename DeltaFn>
std::vector<SensitivityRecord> probe_cells(const ToyBlock& block,
                                           const SensitivityOptions& opts,
                                           DeltaFn delta) {
  RunOptions fp_opts;
  fp_opts.steps = opts.steps;
  fp_opts.seed = opts.seed;
  fp_opts.record_traces = false;
  const DenoiseRun fp = run_denoise(block, fp_opts);

  const std::size_t n_cells = kNumLayers * kNumRanges;
  std::vector<SensitivityRecord> records(n_cells);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n_cells; i = next.fetch_add(1)) {
      const std::string& name = layer_names()[i / kNumRanges];
      const std::size_t r = i % kNumRanges;
      MixedPrecisionPlan plan = passthrough_plan();
      plan.bits[name][r] = opts.low_bits;
      const DenoiseRun probe = run_denoise(block, probe_options(opts, std::move(plan)));
      const LayerGroup group = layer_group(layer_kind(name));
      records[i] = {name, r, group, delta(probe, fp, group)};
    }
  };
  const std::size_t n_threads = std::min(std::max<std::size_t>(opts.max_threads, 1),
                                         n_cells);
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return records;
}

} // namespace

std::vector<SensitivityRecord> measure_sensitivity(const ToyBlock& block,
                                                   const SensitivityOptions& opts) {
  return probe_cells(block, opts,
                     [](const DenoiseRun& probe, const DenoiseRun& fp, LayerGroup g) {
                       return proxy_metrics(probe, fp).by_group(g);
                     });
}

std::vector<SensitivityRecord> measure_mse_sensitivity(const ToyBlock& block,
                                                       const SensitivityOptions& opts) {
  return probe_cells(block, opts,
                     [](const DenoiseRun& probe, const DenoiseRun& fp, LayerGroup) {
                       return mse(probe.output, fp.output);
                     });
}

double mse_sensitivity(const ToyBlock& block, const SensitivityOptions& opts,
                       const std::string& layer, std::size_t range_idx) {
  RunOptions fp_opts;
  fp_opts.steps = opts.steps;
  fp_opts.seed = opts.seed;
  fp_opts.record_traces = false;
  const DenoiseRun fp = run_denoise(block, fp_opts);
  MixedPrecisionPlan plan = passthrough_plan();
  plan.bits[layer].at(range_idx) = opts.low_bits;
  const DenoiseRun probe = run_denoise(block, probe_options(opts, std::move(plan)));
  return mse(probe.output, fp.output);
}

GroupProbe probe_groups(const ToyBlock& block, const SensitivityOptions& opts) {
  RunOptions fp_opts;
  fp_opts.steps = opts.steps;
  fp_opts.seed = opts.seed;
  fp_opts.record_traces = false;
  const DenoiseRun fp = run_denoise(block, fp_opts);

  GroupProbe out;
  for (std::size_t g = 0; g < 3; ++g) {
    MixedPrecisionPlan plan = passthrough_plan();
    for (const auto& name : layer_names())
      if (static_cast<std::size_t>(layer_group(layer_kind(name))) == g)
        plan.bits[name] = {opts.low_bits, opts.low_bits, opts.low_bits, opts.low_bits};
    const DenoiseRun probe = run_denoise(block, probe_options(opts, std::move(plan)));
    out.metrics[g] = proxy_metrics(probe, fp);
    out.output_mse[g] = mse(probe.output, fp.output);
  }
  return out;
}

} // namespace dtq
