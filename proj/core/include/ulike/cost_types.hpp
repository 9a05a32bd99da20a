#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulike/nn_ops.hpp"

namespace ulike {

/// One row of a per-layer cost breakdown. MACs count multiply-accumulates
/// of matrix products, convolutions and the scan recurrence; everything
/// else (norms, activations, residual adds, softmax) goes in `elementwise`.
struct CostRow {
  std::string name;
  std::string type;
  VolumeShape in;
  VolumeShape out;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  std::uint64_t elementwise = 0;
  std::uint64_t attention_entries = 0;  // largest attention tensor held by this layer
};

/// Elementwise op weights used by the cost model.
namespace ew {
inline constexpr std::uint64_t kLayerNorm = 5;   // per normalized element
inline constexpr std::uint64_t kActivation = 4;  // SiLU, softplus, sigmoid
inline constexpr std::uint64_t kSoftmax = 4;     // per attention entry (exp + normalize)
inline constexpr std::uint64_t kAdd = 1;         // residual add, gate multiply, scaling
}  // namespace ew

using CostRows = std::vector<CostRow>;

}  // namespace ulike
