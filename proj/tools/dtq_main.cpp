// dtq: command-line driver for the quantization pipeline on the built-in
// toy diffusion transformer. Subcommands cover trace capture, calibration,
// checkpoint emission, sensitivity analysis, plan allocation, evaluation,
// and consolidated reporting.
//
// Exit codes: 0 success, 2 config validation, 3 missing input,
// 4 infeasible budget, 5 artifact format error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "artifacts.hpp"
#include "plots.hpp"

#include "dtq/balance.hpp"
#include "dtq/quant.hpp"
#include "dtq/sensitivity.hpp"
#include "dtq/toydit.hpp"
#include "dtq/trace_io.hpp"

namespace fs = std::filesystem;
using namespace dtq;
using dtq::cli::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissing = 3;
constexpr int kExitBudget = 4;
constexpr int kExitFormat = 5;

class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

class MissingInput : public std::runtime_error {
public:
  explicit MissingInput(const std::string& what) : std::runtime_error(what) {}
};

class InfeasibleBudget : public std::runtime_error {
public:
  explicit InfeasibleBudget(const std::string& what) : std::runtime_error(what) {}
};

struct RunConfig {
  BuildOptions model;
  std::size_t steps = 8;
  bool cfg = true;
  uint64_t run_seed = 1;
  int weight_bits = 4;
  int act_bits = 8;
  std::string act_scheme = "per_token";
  std::string act_mode = "dynamic";
  std::string balance = "static_dynamic";
  double budget = 5.25;
  std::string plan_path; // empty means no plan
  std::string out_dir = "out";
};

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + ctx);
  }
}

bool valid_bits(int b) { return b == 2 || b == 4 || b == 6 || b == 8 || b == 16; }

void validate(const RunConfig& c) {
  auto pow2 = [](std::size_t n) { return n > 0 && (n & (n - 1)) == 0; };
  if (!pow2(c.model.width) || c.model.width < 8)
    throw ConfigError("model.width must be a power of two >= 8");
  if (c.model.tokens == 0 || c.model.frames == 0)
    throw ConfigError("model.tokens and model.frames must be positive");
  if (c.steps == 0 || c.steps % kNumRanges != 0)
    throw ConfigError("run.steps must be a positive multiple of 4");
  if (!valid_bits(c.weight_bits) || !valid_bits(c.act_bits))
    throw ConfigError("quant bits must be one of 2, 4, 6, 8, 16");
  if (c.act_scheme != "per_tensor" && c.act_scheme != "per_token")
    throw ConfigError("quant.act_scheme must be per_tensor or per_token");
  if (c.act_mode != "static" && c.act_mode != "dynamic")
    throw ConfigError("quant.act_mode must be static or dynamic");
  if (c.balance != "none" && c.balance != "scale_only" && c.balance != "rotate_only" &&
      c.balance != "static_dynamic")
    throw ConfigError(
        "quant.balance must be none, scale_only, rotate_only or static_dynamic");
  if (c.act_mode == "static" && (c.act_scheme != "per_tensor" || c.balance != "none"))
    throw ConfigError("static activation mode requires per_tensor scheme and no balance");
}

RunConfig load_config(const std::string& path) {
  RunConfig c;
  if (path.empty()) return c;
  if (!fs::exists(path)) throw MissingInput("config file not found: " + path);
  json j;
  try {
    j = cli::load_json(path);
  } catch (const cli::ArtifactError& e) {
    throw ConfigError(e.what());
  }
  check_keys(j, {"model", "run", "quant", "budget", "plan", "out"}, "config root");
  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, {"width", "tokens", "frames", "seed"}, "config.model");
    if (m.contains("width")) c.model.width = m["width"].get<std::size_t>();
    if (m.contains("tokens")) c.model.tokens = m["tokens"].get<std::size_t>();
    if (m.contains("frames")) c.model.frames = m["frames"].get<std::size_t>();
    if (m.contains("seed")) c.model.seed = m["seed"].get<uint64_t>();
  }
  if (j.contains("run")) {
    const json& r = j["run"];
    check_keys(r, {"steps", "cfg", "seed"}, "config.run");
    if (r.contains("steps")) c.steps = r["steps"].get<std::size_t>();
    if (r.contains("cfg")) c.cfg = r["cfg"].get<bool>();
    if (r.contains("seed")) c.run_seed = r["seed"].get<uint64_t>();
  }
  if (j.contains("quant")) {
    const json& q = j["quant"];
    check_keys(q, {"weight_bits", "act_bits", "act_scheme", "act_mode", "balance"},
               "config.quant");
    if (q.contains("weight_bits")) c.weight_bits = q["weight_bits"].get<int>();
    if (q.contains("act_bits")) c.act_bits = q["act_bits"].get<int>();
    if (q.contains("act_scheme")) c.act_scheme = q["act_scheme"].get<std::string>();
    if (q.contains("act_mode")) c.act_mode = q["act_mode"].get<std::string>();
    if (q.contains("balance")) c.balance = q["balance"].get<std::string>();
  }
  if (j.contains("budget")) c.budget = j["budget"].get<double>();
  if (j.contains("plan")) c.plan_path = j["plan"].get<std::string>();
  if (j.contains("out")) c.out_dir = j["out"].get<std::string>();
  return c;
}

// "w4a8" or a single width applied to both weights and activations.
void apply_bits_spec(RunConfig& c, const std::string& spec) {
  int w = 0, a = 0;
  if (std::sscanf(spec.c_str(), "w%da%d", &w, &a) == 2 ||
      std::sscanf(spec.c_str(), "W%dA%d", &w, &a) == 2) {
    c.weight_bits = w;
    c.act_bits = a;
    return;
  }
  char tail = 0;
  if (std::sscanf(spec.c_str(), "%d%c", &w, &tail) == 1) {
    c.weight_bits = w;
    c.act_bits = w;
    return;
  }
  throw ConfigError("cannot parse --bits spec \"" + spec + "\" (use N or wNaM)");
}

BalanceKind balance_kind(const std::string& s) {
  if (s == "none") return BalanceKind::None;
  if (s == "scale_only") return BalanceKind::ScaleOnly;
  if (s == "rotate_only") return BalanceKind::RotateOnly;
  return BalanceKind::StaticDynamic;
}

std::size_t worker_threads() {
  const char* env = std::getenv("DTQ_THREADS");
  if (env == nullptr) return 1;
  const long n = std::strtol(env, nullptr, 10);
  return n < 1 ? 1 : static_cast<std::size_t>(n);
}

fs::path out_path(const RunConfig& c, const std::string& name) {
  fs::create_directories(c.out_dir);
  return fs::path(c.out_dir) / name;
}

void require_exists(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw MissingInput(what + " not found: " + p.string());
}

json load_artifact(const fs::path& p, const std::string& what) {
  require_exists(p, what);
  return cli::load_json(p.string());
}

RunOptions run_options(const RunConfig& c) {
  RunOptions o;
  o.steps = c.steps;
  o.cfg = c.cfg;
  o.seed = c.run_seed;
  return o;
}

LayerQuantSetting base_setting(const RunConfig& c) {
  LayerQuantSetting s;
  s.weight_bits = c.weight_bits;
  s.act_bits = c.act_bits;
  s.act_scheme = c.act_scheme == "per_tensor" ? GroupingScheme::per_tensor()
                                              : GroupingScheme::per_token();
  s.act_mode = c.act_mode == "static" ? QuantMode::Static : QuantMode::Dynamic;
  s.balance = balance_kind(c.balance);
  return s;
}

// ---- subcommands ---------------------------------------------------------

int cmd_trace(const RunConfig& c) {
  const ToyBlock block = build_toy_model(c.model);
  RunOptions opts = run_options(c);
  opts.record_traces = true;
  const DenoiseRun run = run_denoise(block, opts);

  TraceArchive archive;
  archive.model_id = "toydit-w" + std::to_string(c.model.width) + "-s" +
                     std::to_string(c.model.seed);
  archive.step_count = run.steps;
  archive.cfg = run.cfg;
  archive.traces = run.traces;
  const fs::path path = out_path(c, "trace.bin");
  write_trace(path.string(), archive);
  std::printf("trace: %zu traces over %zu steps -> %s\n", archive.traces.size(),
              archive.step_count, path.string().c_str());
  return 0;
}

int cmd_calibrate(const RunConfig& c) {
  const fs::path trace_path = out_path(c, "trace.bin");
  require_exists(trace_path, "trace archive");
  const TraceArchive archive = read_trace(trace_path.string());
  if (archive.traces.empty()) throw ConfigError("trace archive has no traces");

  const ToyBlock block = build_toy_model(c.model);
  const CalibrationData calib =
      calibrate(block, archive.step_count, c.act_bits, c.weight_bits, c.model.seed);
  const fs::path path = out_path(c, "calibration.json");
  cli::save_json(path.string(), cli::calibration_to_json(calib));
  std::printf("calibrate: alpha %.4f over %zu layers -> %s\n", calib.alpha,
              calib.act_params.size(), path.string().c_str());
  return 0;
}

std::map<std::string, int> layer_bits(const RunConfig& c) {
  std::map<std::string, int> bits;
  for (const auto& name : layer_names()) bits[name] = c.weight_bits;
  if (!c.plan_path.empty()) {
    const MixedPrecisionPlan plan =
        cli::plan_from_json(load_artifact(c.plan_path, "plan file"));
    // checkpoints hold one width per layer, so a per-range plan collapses to
    // the per-layer majority with ties promoted
    for (const auto& [name, range_bits] : plan.bits) {
      int hi_val = 0, lo_val = 16;
      for (int b : range_bits) {
        hi_val = std::max(hi_val, b);
        lo_val = std::min(lo_val, b);
      }
      int high = 0;
      for (int b : range_bits) high += (b == hi_val);
      bits[name] = high * 2 >= int(kNumRanges) ? hi_val : lo_val;
    }
  }
  return bits;
}

int cmd_quantize(const RunConfig& c) {
  const CalibrationData calib = cli::calibration_from_json(
      load_artifact(out_path(c, "calibration.json"), "calibration file"));
  const ToyBlock block = build_toy_model(c.model);
  const std::map<std::string, int> bits = layer_bits(c);

  QuantCheckpoint ckpt;
  for (const auto& name : layer_names()) {
    const Matrix& w = block.weight(layer_kind(name));
    const BalanceTransform& t = calib.balance.at(name);
    const auto [ignored, wb] = apply_balance(Matrix(1, w.cols(), 1.0), w, t);
    CheckpointLayer layer;
    layer.name = name;
    layer.weights = quantize(wb, GroupingScheme::per_output_channel(), bits.at(name),
                             QuantMode::Dynamic, nullptr, /*symmetric=*/true);
    for (auto& p : layer.weights.params) p.scale = double(float(p.scale));
    if (t.mask)
      for (double v : t.mask->s) layer.mask.push_back(float(v));
    if (t.rotation)
      layer.rotation_diag.assign(t.rotation->sign_diag.begin(),
                                 t.rotation->sign_diag.end());
    ckpt.layers.push_back(std::move(layer));
  }
  const fs::path path = out_path(c, "checkpoint.bin");
  write_checkpoint(path.string(), ckpt);
  const double payload_ratio =
      double(ckpt.payload_bytes()) / double(ckpt.baseline_bytes());
  const double file_ratio =
      double(fs::file_size(path)) / double(ckpt.baseline_bytes());
  std::printf("quantize: %zu layers -> %s\n", ckpt.layers.size(),
              path.string().c_str());
  std::printf("  payload %.3fx of 16-bit baseline, file %.3fx\n", payload_ratio,
              file_ratio);
  return 0;
}

int cmd_sensitivity(const RunConfig& c) {
  const ToyBlock block = build_toy_model(c.model);
  SensitivityOptions opts;
  opts.steps = c.steps;
  opts.seed = c.run_seed;
  opts.low_bits = c.weight_bits;
  opts.act_bits = c.act_bits;
  opts.max_threads = worker_threads();

  const std::vector<SensitivityRecord> records = measure_sensitivity(block, opts);
  const GroupProbe probe = probe_groups(block, opts);
  cli::save_json(out_path(c, "sensitivity.json").string(),
                 cli::records_to_json(records, probe.output_mse));
  const MetricHeatmap hm = build_heatmap(probe.metrics, {});
  cli::save_json(out_path(c, "heatmap.json").string(), cli::heatmap_to_json(hm));
  std::printf("sensitivity: %zu cells probed with %zu thread(s) -> %s\n",
              records.size(), opts.max_threads,
              out_path(c, "sensitivity.json").string().c_str());
  return 0;
}

int cmd_allocate(const RunConfig& c) {
  const int low = c.weight_bits, high = 8;
  if (c.budget < double(low) || c.budget > double(high))
    throw InfeasibleBudget("budget " + std::to_string(c.budget) +
                           " outside the [" + std::to_string(low) + ", " +
                           std::to_string(high) + "] bit range");

  std::array<double, 3> group_mse{};
  const std::vector<SensitivityRecord> records = cli::records_from_json(
      load_artifact(out_path(c, "sensitivity.json"), "sensitivity records"),
      &group_mse);
  std::array<std::size_t, 3> cells{};
  for (const auto& r : records) cells[static_cast<std::size_t>(r.group)]++;

  MixedPrecisionPlan plan =
      allocate_plan(records, group_budgets(group_mse, cells, c.budget, low, high),
                    low, high);
  plan.budget = c.budget;
  const fs::path path = out_path(c, "plan.json");
  cli::save_json(path.string(), cli::plan_to_json(plan));
  std::size_t promoted = 0;
  for (const auto& [name, bits] : plan.bits)
    for (int b : bits) promoted += (b == high);
  std::printf("allocate: budget %.2f -> %zu of %zu cells at %d bits -> %s\n",
              c.budget, promoted, records.size(), high, path.string().c_str());
  return 0;
}

struct EvalResult {
  double output_mse = 0.0;
  ProxyMetrics proxies;
  json per_layer = json::object();
};

EvalResult run_eval(const RunConfig& c) {
  const ToyBlock block = build_toy_model(c.model);
  RunOptions fp_opts = run_options(c);
  fp_opts.record_traces = false;
  const DenoiseRun fp = run_denoise(block, fp_opts);

  RunOptions q_opts = fp_opts;
  const bool passthrough = c.weight_bits >= 16 && c.act_bits >= 16 &&
                           c.balance == "none" && c.plan_path.empty();
  QuantConfig qc;
  if (!passthrough) {
    qc.base = base_setting(c);
    if (qc.base.balance != BalanceKind::None || qc.base.act_mode == QuantMode::Static) {
      qc.calib = cli::calibration_from_json(
          load_artifact(out_path(c, "calibration.json"), "calibration file"));
    }
    if (!c.plan_path.empty())
      qc.plan = cli::plan_from_json(load_artifact(c.plan_path, "plan file"));
    q_opts.quant = qc;
  }
  const DenoiseRun q = run_denoise(block, q_opts);

  EvalResult res;
  double acc = 0.0;
  for (std::size_t i = 0; i < fp.output.size(); ++i) {
    const double d = q.output.data()[i] - fp.output.data()[i];
    acc += d * d;
  }
  res.output_mse = acc / double(fp.output.size());
  res.proxies = proxy_metrics(q, fp);

  for (const auto& name : layer_names()) {
    const Matrix& w = block.weight(layer_kind(name));
    Matrix wb = w;
    if (!passthrough && qc.base.balance != BalanceKind::None) {
      BalanceTransform t = qc.calib->balance.at(name);
      if (qc.base.balance == BalanceKind::ScaleOnly) t.rotation.reset();
      if (qc.base.balance == BalanceKind::RotateOnly) t.mask.reset();
      wb = apply_balance(Matrix(1, w.cols(), 1.0), w, t).second;
    }
    json entry;
    if (c.weight_bits < 16) {
      const QuantizedTensor qt =
          quantize(wb, GroupingScheme::per_output_channel(), c.weight_bits,
                   QuantMode::Dynamic, nullptr, /*symmetric=*/true);
      const QuantErrorReport err = error_report(wb, qt);
      entry["weight_mse"] = err.total_mse;
      entry["weight_max_abs_err"] = err.max_abs_err;
    } else {
      entry["weight_mse"] = 0.0;
      entry["weight_max_abs_err"] = 0.0;
    }
    double mu_acc = 0.0;
    for (std::size_t r = 0; r < wb.rows(); ++r)
      mu_acc += incoherence({wb.row_ptr(r), wb.cols()});
    entry["weight_incoherence_mean"] = mu_acc / double(wb.rows());
    res.per_layer[name] = entry;
  }
  return res;
}

int cmd_eval(const RunConfig& c) {
  const EvalResult res = run_eval(c);
  json j;
  j["weight_bits"] = c.weight_bits;
  j["act_bits"] = c.act_bits;
  j["balance"] = c.balance;
  j["plan"] = c.plan_path;
  j["output_mse"] = res.output_mse;
  j["proxies"] = {{"quality", res.proxies.quality},
                  {"alignment", res.proxies.alignment},
                  {"temporal", res.proxies.temporal}};
  j["layers"] = res.per_layer;
  const fs::path path = out_path(c, "eval.json");
  cli::save_json(path.string(), j);
  std::printf("eval: W%dA%d balance=%s%s\n", c.weight_bits, c.act_bits,
              c.balance.c_str(), c.plan_path.empty() ? "" : " (plan)");
  std::printf("  output MSE      %.6e\n", res.output_mse);
  std::printf("  proxy quality   %.6e\n", res.proxies.quality);
  std::printf("  proxy alignment %.6e\n", res.proxies.alignment);
  std::printf("  proxy temporal  %.6e\n", res.proxies.temporal);
  std::printf("  -> %s\n", path.string().c_str());
  return 0;
}

int cmd_report(const RunConfig& c) {
  const fs::path plots = out_path(c, "plots");
  fs::create_directories(plots);
  std::string text;

  // error-vs-bits curve, weight sweep at the configured activation width
  std::vector<int> sweep_bits = {2, 4, 6, 8, 16};
  std::vector<double> sweep_mse;
  for (int b : sweep_bits) {
    RunConfig cb = c;
    cb.weight_bits = b;
    sweep_mse.push_back(run_eval(cb).output_mse);
  }
  json curve;
  curve["act_bits"] = c.act_bits;
  curve["balance"] = c.balance;
  curve["weight_bits"] = sweep_bits;
  curve["output_mse"] = sweep_mse;
  cli::save_json((plots / "error_vs_bits.json").string(), curve);
  cli::plot_error_vs_bits((plots / "error_vs_bits.svg").string(), sweep_bits,
                          sweep_mse);
  text += "output MSE vs weight bits (A" + std::to_string(c.act_bits) + ", " +
          c.balance + ")\n";
  for (std::size_t i = 0; i < sweep_bits.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof(line), "  W%-2d  %.6e\n", sweep_bits[i], sweep_mse[i]);
    text += line;
  }

  // activation variation bars from the floating-point traces
  const ToyBlock block = build_toy_model(c.model);
  RunOptions opts = run_options(c);
  opts.record_traces = true;
  const DenoiseRun run = run_denoise(block, opts);
  const VariationReport var = variation_stats(run.traces);
  std::vector<std::string> labels = {"token", "channel"};
  std::vector<double> cvs = {var.token_cv, var.channel_cv};
  if (var.timestep_cv) {
    labels.push_back("timestep");
    cvs.push_back(*var.timestep_cv);
  }
  if (var.condition_cv) {
    labels.push_back("condition");
    cvs.push_back(*var.condition_cv);
  }
  json var_j;
  for (std::size_t i = 0; i < labels.size(); ++i) var_j[labels[i]] = cvs[i];
  cli::save_json((plots / "variation.json").string(), var_j);
  cli::plot_variation_bars((plots / "variation.svg").string(), labels, cvs);
  text += "\nactivation variation (coefficient of variation)\n";
  for (std::size_t i = 0; i < labels.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof(line), "  %-9s %.4f\n", labels[i].c_str(), cvs[i]);
    text += line;
  }

  // heatmap from the sensitivity artifacts
  const MetricHeatmap hm = cli::heatmap_from_json(
      load_artifact(out_path(c, "heatmap.json"), "heatmap file"));
  cli::save_json((plots / "heatmap.json").string(), cli::heatmap_to_json(hm));
  cli::plot_heatmap((plots / "heatmap.svg").string(), hm);
  text += "\nlayer-group / proxy-metric attribution (rows sum to 1)\n";
  text += "  group      quality  alignment  temporal\n";
  const char* groups[3] = {"Quality", "Alignment", "Temporal"};
  for (std::size_t g = 0; g < 3; ++g) {
    char line[80];
    std::snprintf(line, sizeof(line), "  %-9s  %6.3f   %6.3f    %6.3f\n", groups[g],
                  hm.values[g][0], hm.values[g][1], hm.values[g][2]);
    text += line;
  }

  const fs::path path = out_path(c, "report.txt");
  std::ofstream out(path);
  out << text;
  out.close();
  std::fputs(text.c_str(), stdout);
  std::printf("report: tables -> %s, plots -> %s\n", path.string().c_str(),
              plots.string().c_str());
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"post-training quantization toolkit for the built-in toy "
               "diffusion transformer"};
  app.require_subcommand(1);

  std::string config_path, bits_spec, out_dir;
  std::optional<uint64_t> seed;
  std::optional<double> budget;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "override the run seed");
  app.add_option("--bits", bits_spec, "bit spec: N (both sides) or wNaM");
  app.add_option("--budget", budget, "average weight-bit budget for allocate");
  app.add_option("--out", out_dir, "artifact output directory");
  app.fallthrough();

  for (const char* name : {"trace", "calibrate", "quantize", "sensitivity",
                           "allocate", "eval", "report"})
    app.add_subcommand(name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }

  try {
    RunConfig cfg = load_config(config_path);
    if (seed) cfg.run_seed = *seed;
    if (!bits_spec.empty()) apply_bits_spec(cfg, bits_spec);
    if (budget) cfg.budget = *budget;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    validate(cfg);

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "trace") return cmd_trace(cfg);
    if (cmd == "calibrate") return cmd_calibrate(cfg);
    if (cmd == "quantize") return cmd_quantize(cfg);
    if (cmd == "sensitivity") return cmd_sensitivity(cfg);
    if (cmd == "allocate") return cmd_allocate(cfg);
    if (cmd == "eval") return cmd_eval(cfg);
    if (cmd == "report") return cmd_report(cfg);
    return kExitConfig;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error (config): %s\n", e.what());
    return kExitConfig;
  } catch (const MissingInput& e) {
    std::fprintf(stderr, "error (missing input): %s\n", e.what());
    return kExitMissing;
  } catch (const InfeasibleBudget& e) {
    std::fprintf(stderr, "error (budget): %s\n", e.what());
    return kExitBudget;
  } catch (const cli::ArtifactError& e) {
    std::fprintf(stderr, "error (format): %s\n", e.what());
    return kExitFormat;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error (format): %s\n", e.what());
    return kExitFormat;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error (format): %s\n", e.what());
    return kExitFormat;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error (config): %s\n", e.what());
    return kExitConfig;
  }
}
