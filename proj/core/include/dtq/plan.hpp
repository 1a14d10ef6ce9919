// Mixed-precision plan types shared between the model runner and the
// sensitivity analysis.

#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <stdexcept>
#include <string>

namespace dtq {

// The generation-quality aspect a layer type dominates.
enum class LayerGroup : uint8_t { Quality = 0, Alignment = 1, Temporal = 2 };

constexpr std::size_t kNumRanges = 4;

struct TimestepRange {
  std::size_t index = 0; // 0..3
  std::size_t begin = 0; // half-open [begin, end)
  std::size_t end = 0;
  bool contains(std::size_t step) const { return step >= begin && step < end; }
};

// Four equal half-open ranges over [0, steps); steps must be divisible by 4.
std::array<TimestepRange, kNumRanges> partition_timesteps(std::size_t steps);

// Bit-width assignment per (layer, timestep range).
struct MixedPrecisionPlan {
  std::map<std::string, std::array<int, kNumRanges>> bits;
  double budget = 8.0; // target average weight bits

  int bits_for(const std::string& layer, std::size_t range_idx) const {
    auto it = bits.find(layer);
    if (it == bits.end())
      throw std::invalid_argument("MixedPrecisionPlan: unknown layer " + layer);
    return it->second.at(range_idx);
  }
};

enum class BudgetMode : uint8_t { ParameterWeighted = 0, LayerCounted = 1 };

} // namespace dtq
