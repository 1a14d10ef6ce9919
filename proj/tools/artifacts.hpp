// JSON serialization of the CLI's human-readable artifacts: calibration
// files, sensitivity records, heatmaps, mixed-precision plans, and eval
// reports. Binary formats (trace archives, checkpoints) live in dtq/trace_io.

#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "dtq/plan.hpp"
#include "dtq/sensitivity.hpp"
#include "dtq/toydit.hpp"

namespace dtq::cli {

using nlohmann::json;

class ArtifactError : public std::runtime_error {
public:
  explicit ArtifactError(const std::string& what) : std::runtime_error(what) {}
};

inline json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ArtifactError("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ArtifactError(path + ": " + e.what());
  }
  return j;
}

inline void save_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw ArtifactError("cannot write " + path);
  out << j.dump(2) << "\n";
}

inline const char* group_name(LayerGroup g) {
  switch (g) {
    case LayerGroup::Quality: return "quality";
    case LayerGroup::Alignment: return "alignment";
    case LayerGroup::Temporal: return "temporal";
  }
  return "quality";
}

// ---- calibration ---------------------------------------------------------

inline json calibration_to_json(const CalibrationData& c) {
  json j;
  j["act_bits"] = c.act_bits;
  j["alpha"] = c.alpha;
  json params = json::object();
  for (const auto& [name, p] : c.act_params)
    params[name] = {{"scale", p.scale}, {"zero_point", p.zero_point}, {"bits", p.bits}};
  j["act_params"] = params;
  json balance = json::object();
  for (const auto& [name, t] : c.balance) {
    json jt;
    if (t.mask) jt["mask"] = {{"alpha", t.mask->alpha}, {"s", t.mask->s}};
    if (t.rotation) {
      std::vector<int> diag(t.rotation->sign_diag.begin(), t.rotation->sign_diag.end());
      jt["rotation"] = {{"n", t.rotation->n}, {"sign_diag", diag}};
    }
    balance[name] = jt;
  }
  j["balance"] = balance;
  json absmax = json::object();
  for (const auto& [name, v] : c.static_absmax) absmax[name] = v;
  j["static_absmax"] = absmax;
  return j;
}

inline CalibrationData calibration_from_json(const json& j) {
  CalibrationData c;
  c.act_bits = j.at("act_bits").get<int>();
  c.alpha = j.at("alpha").get<double>();
  for (const auto& [name, p] : j.at("act_params").items()) {
    QuantParams q;
    q.scale = p.at("scale").get<double>();
    q.zero_point = p.at("zero_point").get<int32_t>();
    q.bits = p.at("bits").get<int>();
    c.act_params[name] = q;
  }
  for (const auto& [name, t] : j.at("balance").items()) {
    BalanceTransform bt;
    if (t.contains("mask")) {
      ScalingMask m;
      m.alpha = t.at("mask").at("alpha").get<double>();
      m.s = t.at("mask").at("s").get<std::vector<double>>();
      bt.mask = std::move(m);
    }
    if (t.contains("rotation")) {
      RotationMatrix r;
      r.n = t.at("rotation").at("n").get<std::size_t>();
      for (int s : t.at("rotation").at("sign_diag").get<std::vector<int>>())
        r.sign_diag.push_back(static_cast<int8_t>(s));
      bt.rotation = std::move(r);
    }
    c.balance[name] = std::move(bt);
  }
  if (j.contains("static_absmax"))
    for (const auto& [name, v] : j.at("static_absmax").items())
      c.static_absmax[name] = v.get<std::vector<double>>();
  return c;
}

// ---- sensitivity records + heatmap ---------------------------------------

inline json records_to_json(const std::vector<SensitivityRecord>& records,
                            const std::array<double, 3>& group_mse) {
  json j;
  j["group_output_mse"] = group_mse;
  json cells = json::array();
  for (const auto& r : records)
    cells.push_back({{"layer", r.layer},
                     {"range", r.range_idx},
                     {"group", group_name(r.group)},
                     {"metric_delta", r.metric_delta}});
  j["records"] = cells;
  return j;
}

inline std::vector<SensitivityRecord> records_from_json(const json& j,
                                                        std::array<double, 3>* group_mse) {
  if (group_mse) *group_mse = j.at("group_output_mse").get<std::array<double, 3>>();
  std::vector<SensitivityRecord> out;
  for (const auto& cell : j.at("records")) {
    SensitivityRecord r;
    r.layer = cell.at("layer").get<std::string>();
    r.range_idx = cell.at("range").get<std::size_t>();
    const std::string g = cell.at("group").get<std::string>();
    if (g == "quality") r.group = LayerGroup::Quality;
    else if (g == "alignment") r.group = LayerGroup::Alignment;
    else if (g == "temporal") r.group = LayerGroup::Temporal;
    else throw ArtifactError("unknown layer group: " + g);
    r.metric_delta = cell.at("metric_delta").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

inline json heatmap_to_json(const MetricHeatmap& hm) {
  json rows = json::array();
  const char* groups[3] = {"quality", "alignment", "temporal"};
  for (std::size_t g = 0; g < 3; ++g)
    rows.push_back({{"group", groups[g]},
                    {"quality", hm.values[g][0]},
                    {"alignment", hm.values[g][1]},
                    {"temporal", hm.values[g][2]}});
  return json{{"rows", rows}};
}

inline MetricHeatmap heatmap_from_json(const json& j) {
  MetricHeatmap hm;
  std::size_t g = 0;
  for (const auto& row : j.at("rows")) {
    if (g >= 3) throw ArtifactError("heatmap has more than three rows");
    hm.values[g][0] = row.at("quality").get<double>();
    hm.values[g][1] = row.at("alignment").get<double>();
    hm.values[g][2] = row.at("temporal").get<double>();
    ++g;
  }
  if (g != 3) throw ArtifactError("heatmap must have three rows");
  return hm;
}

// ---- mixed-precision plan ------------------------------------------------

inline json plan_to_json(const MixedPrecisionPlan& plan) {
  json layers = json::object();
  for (const auto& [name, bits] : plan.bits) layers[name] = bits;
  return json{{"budget", plan.budget}, {"bits", layers}};
}

inline MixedPrecisionPlan plan_from_json(const json& j) {
  MixedPrecisionPlan plan;
  plan.budget = j.at("budget").get<double>();
  for (const auto& [name, bits] : j.at("bits").items()) {
    const auto v = bits.get<std::vector<int>>();
    if (v.size() != kNumRanges)
      throw ArtifactError("plan entry for " + name + " must list 4 range bits");
    std::array<int, kNumRanges> a{};
    std::copy(v.begin(), v.end(), a.begin());
    plan.bits[name] = a;
  }
  return plan;
}

} // namespace dtq::cli
