#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>

#include "ulike/nn_ops.hpp"
#include "ulike/tensor.hpp"

namespace ulike {

/// Spatial grid D×H×W that a scan order applies to.
struct GridShape {
  Index d = 1, h = 1, w = 1;

  constexpr Index voxels() const { return d * h * w; }
  static GridShape of(const VolumeShape& v) { return {v.d, v.h, v.w}; }
  friend constexpr bool operator==(const GridShape&, const GridShape&) = default;
};

/// Voxel-to-sequence orderings. "Left-right" is W-fastest (ForwardW),
/// "up-down" is H-fastest (HFirst), "front-back" is D-fastest (DFirst).
/// The three axis-fastest orders are cyclic rotations of the loop nest:
/// ForwardW = (D,H,W), HFirst = (W,D,H), DFirst = (H,W,D), slowest first.
enum class ScanKind { ForwardW, BackwardW, HFirst, DFirst, RandomPerm, AxisMajor };

std::string_view to_string(ScanKind kind);
ScanKind parse_scan_kind(std::string_view name);

/// Spatial axis ids for loop nests.
inline constexpr int kAxisD = 0, kAxisH = 1, kAxisW = 2;
using AxisNest = std::array<int, 3>;

/// A bijection between voxels (indexed in ForwardW order) and sequence
/// positions. Immutable lookup tables.
class ScanOrder {
 public:
  static ScanOrder make(ScanKind kind, GridShape shape, std::uint64_t seed = 0);
  /// Loop nest `nest` (slowest axis first), row-major within it.
  static ScanOrder axis_major(GridShape shape, AxisNest nest);
  static ScanOrder random(GridShape shape, std::uint64_t seed);

  ScanKind kind() const { return kind_; }
  const GridShape& shape() const { return shape_; }
  std::uint64_t seed() const { return seed_; }
  Index length() const { return static_cast<Index>(voxel_at_.size()); }

  /// voxel_at()[i] = ForwardW index of the voxel at sequence position i.
  std::span<const Index> voxel_at() const { return voxel_at_; }
  /// position_of()[v] = sequence position of voxel v.
  std::span<const Index> position_of() const { return position_of_; }

  /// CSV with header "position,index".
  void write_csv(std::ostream& os) const;

 private:
  ScanOrder(ScanKind kind, GridShape shape, std::uint64_t seed, Permutation voxel_at);

  ScanKind kind_;
  GridShape shape_;
  std::uint64_t seed_;
  Permutation voxel_at_;
  Permutation position_of_;
};

/// Fisher–Yates shuffle driven by a seeded mt19937_64.
ScanOrder make_random_order(GridShape shape, std::uint64_t seed);

/// C×D×H×W → L×C; row i holds voxel voxel_at()[i].
template <typename T>
Tensor<T> flatten(const Tensor<T>& x, const ScanOrder& order);
/// L×C → C×D×H×W; exact inverse of flatten (and its adjoint).
template <typename T>
Tensor<T> unflatten(const Tensor<T>& s, const ScanOrder& order);

}  // namespace ulike
