// Metric-decoupled mixed-precision allocation: proxy metrics per quality
// aspect, group/metric attribution heatmap, per-group budgets from MSE, and
// greedy bit assignment per (layer, timestep-range) cell.

#pragma once

#include <array>
#include <string>
#include <vector>

#include "dtq/plan.hpp"
#include "dtq/toydit.hpp"

namespace dtq {

struct ProxyMetrics {
  double quality = 0.0;   // relative high-frequency deviation energy of final frames
  double alignment = 0.0; // cosine distance of cross-attention outputs vs FP
  double temporal = 0.0;  // per-token inter-frame difference-magnitude deviation vs FP

  double by_group(LayerGroup g) const {
    switch (g) {
      case LayerGroup::Quality: return quality;
      case LayerGroup::Alignment: return alignment;
      case LayerGroup::Temporal: return temporal;
    }
    return 0.0;
  }
};

ProxyMetrics proxy_metrics(const DenoiseRun& run_q, const DenoiseRun& run_fp);

struct SensitivityRecord {
  std::string layer;
  std::size_t range_idx = 0;
  LayerGroup group = LayerGroup::Quality;
  double metric_delta = 0.0;
};

// 3x3 group-by-metric attribution; each row is a probability vector.
struct MetricHeatmap {
  std::array<std::array<double, 3>, 3> values{}; // [group][metric]
};

// Relative metric deltas per whole-group quantized run, Z-scored per metric
// and softmaxed per group row.
MetricHeatmap build_heatmap(const std::array<ProxyMetrics, 3>& group_runs,
                            const ProxyMetrics& fp_reference);

struct GroupBudget {
  std::array<std::size_t, 3> promotions{}; // high-bit cell count per group
  std::array<std::size_t, 3> cells{};      // group sizes
};

// Splits the global promotion budget across the three groups proportionally
// to their MSE impact, with largest-remainder rounding.
GroupBudget group_budgets(const std::array<double, 3>& group_mses,
                          const std::array<std::size_t, 3>& group_cells,
                          double budget_avg_bits, int low_bits, int high_bits);

// Greedy within-group promotion in descending metric_delta order; ties broken
// by (range index, layer name).
MixedPrecisionPlan allocate_plan(const std::vector<SensitivityRecord>& records,
                                 const GroupBudget& budget, int low_bits,
                                 int high_bits);

// Baseline: single global greedy over final-output-MSE deltas, ignoring
// group structure.
MixedPrecisionPlan allocate_plan_global(const std::vector<SensitivityRecord>& records,
                                        double budget_avg_bits, int low_bits,
                                        int high_bits);

double average_bits(const MixedPrecisionPlan& plan, BudgetMode mode,
                    const std::map<std::string, std::size_t>& layer_params);

// Per-cell sensitivity runs on the toy model. `low_bits` is the weight bit
// width applied to the probed cell; everything else stays floating point.
struct SensitivityOptions {
  std::size_t steps = 8;
  uint64_t seed = 1;
  int low_bits = 4;
  int act_bits = 8;
  // worker threads for the per-cell probe fan-out; results are aggregated in
  // cell order regardless of the thread count
  std::size_t max_threads = 1;
};

// metric_delta = the probed layer's own group proxy when that cell alone is
// quantized low.
std::vector<SensitivityRecord> measure_sensitivity(const ToyBlock& block,
                                                   const SensitivityOptions& opts);

// Same probe, but metric_delta = final-output MSE vs the FP run.
std::vector<SensitivityRecord> measure_mse_sensitivity(const ToyBlock& block,
                                                       const SensitivityOptions& opts);

double mse_sensitivity(const ToyBlock& block, const SensitivityOptions& opts,
                       const std::string& layer, std::size_t range_idx);

// One run per whole group quantized low, for heatmap and budget inputs.
struct GroupProbe {
  std::array<ProxyMetrics, 3> metrics; // proxy metrics per group run
  std::array<double, 3> output_mse{};  // final-output MSE per group run
};
GroupProbe probe_groups(const ToyBlock& block, const SensitivityOptions& opts);

} // namespace dtq
