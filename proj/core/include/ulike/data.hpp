#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ulike/scan_order.hpp"
#include "ulike/tensor.hpp"

namespace ulike {

/// Random-ellipsoid body with small spherical lesions inside it, on a cubic
/// grid. Radii are fractions of the extent.
struct SyntheticVolumeSpec {
  Index extent = 32;
  double body_radius_min = 0.25;
  double body_radius_max = 0.40;
  Index lesions_min = 1;
  Index lesions_max = 4;
  double lesion_radius_min = 0.03;
  double lesion_radius_max = 0.08;
  std::array<double, 3> class_means{0.0, 1.0, 2.0};
  double noise_sigma = 0.25;
  std::uint64_t seed = 0;

  static constexpr Index kClasses = 3;  // background, body, lesion
  void validate() const;
};

struct LabelMap {
  GridShape shape;
  std::vector<std::int32_t> labels;  // ForwardW order
};

struct Sample {
  Tensor<float> image;  // 1×D×H×W
  LabelMap labels;
};

using Dataset = std::vector<Sample>;

/// Sample `index` of the stream defined by spec.seed; independent of how
/// many other samples are drawn.
Sample generate_sample(const SyntheticVolumeSpec& spec, std::uint64_t index);

/// Samples [first, first + n).
Dataset gen_dataset(const SyntheticVolumeSpec& spec, Index n, std::uint64_t first = 0);

struct DatasetSplit {
  Dataset train;
  Dataset val;
};

/// Train samples take stream indices [0, n_train), validation [n_train, n_train + n_val).
DatasetSplit gen_split(const SyntheticVolumeSpec& spec, Index n_train, Index n_val);

/// Per-class voxel counts summed over a dataset.
std::vector<std::uint64_t> class_voxel_counts(const Dataset& data, Index num_classes);

}  // namespace ulike
