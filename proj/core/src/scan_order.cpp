#include "ulike/scan_order.hpp"

#include <numeric>
#include <ostream>

#include "ulike/rng.hpp"

namespace ulike {

std::string_view to_string(ScanKind kind) {
  switch (kind) {
    case ScanKind::ForwardW: return "forward_w";
    case ScanKind::BackwardW: return "backward_w";
    case ScanKind::HFirst: return "h_first";
    case ScanKind::DFirst: return "d_first";
    case ScanKind::RandomPerm: return "random";
    case ScanKind::AxisMajor: return "axis_major";
  }
  return "?";
}

ScanKind parse_scan_kind(std::string_view name) {
  for (ScanKind k : {ScanKind::ForwardW, ScanKind::BackwardW, ScanKind::HFirst, ScanKind::DFirst,
                     ScanKind::RandomPerm}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown scan order '" + std::string(name) + "'");
}

ScanOrder::ScanOrder(ScanKind kind, GridShape shape, std::uint64_t seed, Permutation voxel_at)
    : kind_(kind), shape_(shape), seed_(seed), voxel_at_(std::move(voxel_at)) {
  position_of_ = inverse_permutation(voxel_at_);
}

ScanOrder ScanOrder::axis_major(GridShape shape, AxisNest nest) {
  if (!is_permutation(std::vector<Index>{nest[0], nest[1], nest[2]}, 3)) {
    throw ConfigError("axis_major: loop nest must be a permutation of (D, H, W)");
  }
  const std::array<Index, 3> ext{shape.d, shape.h, shape.w};
  const std::array<Index, 3> stride{shape.h * shape.w, shape.w, 1};
  Permutation order;
  order.reserve(static_cast<std::size_t>(shape.voxels()));
  const auto a0 = static_cast<std::size_t>(nest[0]);
  const auto a1 = static_cast<std::size_t>(nest[1]);
  const auto a2 = static_cast<std::size_t>(nest[2]);
  for (Index i = 0; i < ext[a0]; ++i)
    for (Index j = 0; j < ext[a1]; ++j)
      for (Index k = 0; k < ext[a2]; ++k) order.push_back(i * stride[a0] + j * stride[a1] + k * stride[a2]);
  return ScanOrder(ScanKind::AxisMajor, shape, 0, std::move(order));
}

ScanOrder ScanOrder::random(GridShape shape, std::uint64_t seed) {
  Permutation p(static_cast<std::size_t>(shape.voxels()));
  std::iota(p.begin(), p.end(), Index{0});
  Rng rng(seed);
  for (Index i = static_cast<Index>(p.size()) - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(p[static_cast<std::size_t>(i)], p[j]);
  }
  return ScanOrder(ScanKind::RandomPerm, shape, seed, std::move(p));
}

ScanOrder ScanOrder::make(ScanKind kind, GridShape shape, std::uint64_t seed) {
  if (shape.d < 1 || shape.h < 1 || shape.w < 1) throw ShapeError("scan order needs positive extents");
  auto with_kind = [&](AxisNest nest) {
    ScanOrder o = axis_major(shape, nest);
    return ScanOrder(kind, shape, 0, std::move(o.voxel_at_));
  };
  switch (kind) {
    case ScanKind::ForwardW:
      return with_kind({kAxisD, kAxisH, kAxisW});
    case ScanKind::BackwardW: {
      Permutation p = axis_major(shape, {kAxisD, kAxisH, kAxisW}).voxel_at_;
      std::reverse(p.begin(), p.end());
      return ScanOrder(kind, shape, 0, std::move(p));
    }
    case ScanKind::HFirst:
      return with_kind({kAxisW, kAxisD, kAxisH});
    case ScanKind::DFirst:
      return with_kind({kAxisH, kAxisW, kAxisD});
    case ScanKind::RandomPerm:
      return random(shape, seed);
    case ScanKind::AxisMajor:
      break;
  }
  throw ConfigError("ScanOrder::make: use axis_major() for explicit loop nests");
}

ScanOrder make_random_order(GridShape shape, std::uint64_t seed) { return ScanOrder::random(shape, seed); }

void ScanOrder::write_csv(std::ostream& os) const {
  os << "position,index\n";
  for (std::size_t i = 0; i < voxel_at_.size(); ++i) os << i << ',' << voxel_at_[i] << '\n';
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x, const ScanOrder& order) {
  const VolumeShape vs = VolumeShape::of(x.shape());
  if (GridShape::of(vs) != order.shape()) {
    throw ShapeError("flatten: volume " + to_string(vs) + " does not match scan order grid");
  }
  const Index l = vs.voxels(), c = vs.c;
  Tensor<T> out({l, c});
  const auto idx = order.voxel_at();
  for (Index ch = 0; ch < c; ++ch) {
    const T* src = x.raw() + ch * l;
    for (Index i = 0; i < l; ++i) out[i * c + ch] = src[idx[static_cast<std::size_t>(i)]];
  }
  return out;
}

template <typename T>
Tensor<T> unflatten(const Tensor<T>& s, const ScanOrder& order) {
  const GridShape g = order.shape();
  if (s.rank() != 2 || s.extent(0) != g.voxels()) {
    throw ShapeError("unflatten: sequence " + to_string(s.shape()) + " has wrong length for a " +
                     std::to_string(g.d) + "x" + std::to_string(g.h) + "x" + std::to_string(g.w) + " grid");
  }
  const Index l = s.extent(0), c = s.extent(1);
  Tensor<T> out({c, g.d, g.h, g.w});
  const auto idx = order.voxel_at();
  for (Index ch = 0; ch < c; ++ch) {
    T* dst = out.raw() + ch * l;
    for (Index i = 0; i < l; ++i) dst[idx[static_cast<std::size_t>(i)]] = s[i * c + ch];
  }
  return out;
}

template Tensor<float> flatten(const Tensor<float>&, const ScanOrder&);
template Tensor<double> flatten(const Tensor<double>&, const ScanOrder&);
template Tensor<float> unflatten(const Tensor<float>&, const ScanOrder&);
template Tensor<double> unflatten(const Tensor<double>&, const ScanOrder&);

}  // namespace ulike
