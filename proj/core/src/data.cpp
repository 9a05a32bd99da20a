#include "ulike/data.hpp"

#include <algorithm>
#include <cmath>

#include "ulike/error.hpp"
#include "ulike/rng.hpp"

namespace ulike {

void SyntheticVolumeSpec::validate() const {
  if (extent < 4) throw ConfigError("synthetic data: extent must be ≥ 4");
  if (!(body_radius_min > 0) || body_radius_max < body_radius_min || body_radius_max > 0.5) {
    throw ConfigError("synthetic data: body radius range must satisfy 0 < min ≤ max ≤ 0.5");
  }
  if (!(lesion_radius_min > 0) || lesion_radius_max < lesion_radius_min) {
    throw ConfigError("synthetic data: lesion radius range must satisfy 0 < min ≤ max");
  }
  if (lesions_min < 1 || lesions_max < lesions_min) {
    throw ConfigError("synthetic data: lesion count range must satisfy 1 ≤ min ≤ max");
  }
  if (noise_sigma < 0) throw ConfigError("synthetic data: noise sigma must be ≥ 0");
}

Sample generate_sample(const SyntheticVolumeSpec& spec, std::uint64_t index) {
  spec.validate();
  const Index e = spec.extent;
  const double ext = static_cast<double>(e);
  Rng rng(derive_seed(spec.seed, index));

  LabelMap lm{{e, e, e}, std::vector<std::int32_t>(static_cast<std::size_t>(e * e * e), 0)};
  auto idx = [e](Index d, Index h, Index w) { return static_cast<std::size_t>((d * e + h) * e + w); };

  std::array<double, 3> centre{}, radius{};
  for (int a = 0; a < 3; ++a) {
    const auto k = static_cast<std::size_t>(a);
    radius[k] = ext * rng.uniform(spec.body_radius_min, spec.body_radius_max);
    centre[k] = ext / 2 + rng.uniform(-0.1, 0.1) * ext;
  }
  for (Index d = 0; d < e; ++d)
    for (Index h = 0; h < e; ++h)
      for (Index w = 0; w < e; ++w) {
        const double u = (static_cast<double>(d) - centre[0]) / radius[0];
        const double v = (static_cast<double>(h) - centre[1]) / radius[1];
        const double z = (static_cast<double>(w) - centre[2]) / radius[2];
        if (u * u + v * v + z * z <= 1.0) lm.labels[idx(d, h, w)] = 1;
      }

  const Index lesions =
      spec.lesions_min + static_cast<Index>(rng.below(static_cast<std::uint64_t>(spec.lesions_max - spec.lesions_min + 1)));
  for (Index l = 0; l < lesions; ++l) {
    const double r = ext * rng.uniform(spec.lesion_radius_min, spec.lesion_radius_max);
    // Lesion centres sit on voxels well inside the body.
    std::array<Index, 3> c{};
    for (int a = 0; a < 3; ++a) {
      const auto k = static_cast<std::size_t>(a);
      const double off = rng.uniform(-0.5, 0.5) * radius[k] / std::sqrt(3.0);
      c[k] = std::clamp<Index>(static_cast<Index>(std::lround(centre[k] + off)), 0, e - 1);
    }
    const Index span = static_cast<Index>(std::ceil(r));
    for (Index d = std::max<Index>(0, c[0] - span); d <= std::min(e - 1, c[0] + span); ++d)
      for (Index h = std::max<Index>(0, c[1] - span); h <= std::min(e - 1, c[1] + span); ++h)
        for (Index w = std::max<Index>(0, c[2] - span); w <= std::min(e - 1, c[2] + span); ++w) {
          const double dd = static_cast<double>(d - c[0]), dh = static_cast<double>(h - c[1]),
                       dw = static_cast<double>(w - c[2]);
          if (dd * dd + dh * dh + dw * dw <= r * r) lm.labels[idx(d, h, w)] = 2;
        }
  }

  Sample s{Tensor<float>({1, e, e, e}), std::move(lm)};
  for (std::size_t i = 0; i < s.labels.labels.size(); ++i) {
    const double mean = spec.class_means[static_cast<std::size_t>(s.labels.labels[i])];
    s.image[static_cast<Index>(i)] = static_cast<float>(mean + spec.noise_sigma * rng.normal());
  }
  return s;
}

Dataset gen_dataset(const SyntheticVolumeSpec& spec, Index n, std::uint64_t first) {
  if (n < 1) throw ConfigError("gen_dataset: n must be ≥ 1");
  Dataset out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(generate_sample(spec, first + static_cast<std::uint64_t>(i)));
  return out;
}

DatasetSplit gen_split(const SyntheticVolumeSpec& spec, Index n_train, Index n_val) {
  return {gen_dataset(spec, n_train, 0), gen_dataset(spec, n_val, static_cast<std::uint64_t>(n_train))};
}

std::vector<std::uint64_t> class_voxel_counts(const Dataset& data, Index num_classes) {
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : data)
    for (std::int32_t l : s.labels.labels) ++counts.at(static_cast<std::size_t>(l));
  return counts;
}

}  // namespace ulike
