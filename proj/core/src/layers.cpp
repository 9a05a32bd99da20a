#include "ulike/layers.hpp"

#include <cmath>

#include "ulike/error.hpp"

namespace ulike {

std::string join_name(std::string_view prefix, std::string_view leaf) {
  if (prefix.empty()) return std::string(leaf);
  if (leaf.empty()) return std::string(prefix);
  std::string out(prefix);
  out += '.';
  out += leaf;
  return out;
}

template <typename T>
Tensor<T> fan_in_uniform(Extents shape, Index fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Index>(fan_in, 1)));
  for (T& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Index Layer<T>::parameter_count() {
  ParamList<T> list;
  collect(list, "");
  Index n = 0;
  for (const auto& p : list) n += p.value->size();
  return n;
}

namespace {

template <typename T>
void require_cached(const Tensor<T>& x, const std::string& type) {
  if (x.empty()) throw StateError(type + ": backward called without a preceding forward");
}

template <typename T>
void add_grad(Param<T>& p, const Tensor<T>& g) {
  if (!g.empty()) accumulate(p.grad, g);
}

std::uint64_t u64(Index v) { return static_cast<std::uint64_t>(v); }

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Conv3dLayer<T>::Conv3dLayer(const ConvSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const Index fan_in = spec_.in_channels / spec_.groups * spec_.kernel.volume();
  w_ = Param<T>(fan_in_uniform<T>(spec_.weight_shape(), fan_in, rng));
  if (spec_.bias) b_ = Param<T>(Tensor<T>({spec_.out_channels}));
}

template <typename T>
Tensor<T> Conv3dLayer<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return conv3d(x, spec_, w_.value, b_.value);
}

template <typename T>
Tensor<T> Conv3dLayer<T>::backward(const Tensor<T>& dy) {
  require_cached(x_, type());
  ConvGrads<T> g = conv3d_backward(x_, spec_, w_.value, dy);
  add_grad(w_, g.dw);
  if (spec_.bias) add_grad(b_, g.db);
  return std::move(g.dx);
}

template <typename T>
void Conv3dLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  add_param(out, prefix, "weight", w_);
  add_param(out, prefix, "bias", b_);
}

template <typename T>
void Conv3dLayer<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  const VolumeShape out = spec_.output_shape(in);
  CostRow r{prefix, type(), in, out};
  r.params = u64(spec_.weight_count());
  r.macs = u64(out.voxels() * spec_.out_channels * (spec_.in_channels / spec_.groups) * spec_.kernel.volume());
  rows.push_back(std::move(r));
}

// ---------------------------------------------------------------------------

template <typename T>
TConv3dLayer<T>::TConv3dLayer(const ConvSpec& spec, Rng& rng) : spec_(spec) {
  spec_.validate();
  const Index fan_in = spec_.in_channels / spec_.groups * spec_.kernel.volume();
  w_ = Param<T>(fan_in_uniform<T>(spec_.transposed_weight_shape(), fan_in, rng));
  if (spec_.bias) b_ = Param<T>(Tensor<T>({spec_.out_channels}));
}

template <typename T>
Tensor<T> TConv3dLayer<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return tconv3d(x, spec_, w_.value, b_.value);
}

template <typename T>
Tensor<T> TConv3dLayer<T>::backward(const Tensor<T>& dy) {
  require_cached(x_, type());
  ConvGrads<T> g = tconv3d_backward(x_, spec_, w_.value, dy);
  add_grad(w_, g.dw);
  if (spec_.bias) add_grad(b_, g.db);
  return std::move(g.dx);
}

template <typename T>
void TConv3dLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  add_param(out, prefix, "weight", w_);
  add_param(out, prefix, "bias", b_);
}

template <typename T>
void TConv3dLayer<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  const VolumeShape out = spec_.transposed_output_shape(in);
  CostRow r{prefix, type(), in, out};
  r.params = u64(element_count(spec_.transposed_weight_shape()) + (spec_.bias ? spec_.out_channels : 0));
  r.macs = u64(in.voxels() * spec_.in_channels * (spec_.out_channels / spec_.groups) * spec_.kernel.volume());
  rows.push_back(std::move(r));
}

// ---------------------------------------------------------------------------

template <typename T>
ChannelNorm<T>::ChannelNorm(NormSpec spec) : spec_(spec) {
  if (spec_.channels < 1 || !(spec_.epsilon > 0)) throw ConfigError("layer norm needs channels ≥ 1 and eps > 0");
  gain_ = Param<T>(Tensor<T>::filled({spec_.channels}, T(1)));
  shift_ = Param<T>(Tensor<T>({spec_.channels}));
}

template <typename T>
Tensor<T> ChannelNorm<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return layer_norm_cf(x, gain_.value, shift_.value, spec_.epsilon);
}

template <typename T>
Tensor<T> ChannelNorm<T>::backward(const Tensor<T>& dy) {
  require_cached(x_, type());
  AffineGrads<T> g = layer_norm_cf_backward(x_, gain_.value, dy, spec_.epsilon);
  add_grad(gain_, g.dgain);
  add_grad(shift_, g.dshift);
  return std::move(g.dx);
}

template <typename T>
void ChannelNorm<T>::collect(ParamList<T>& out, const std::string& prefix) {
  add_param(out, prefix, "gain", gain_);
  add_param(out, prefix, "shift", shift_);
}

template <typename T>
void ChannelNorm<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  CostRow r{prefix, type(), in, in};
  r.params = u64(2 * spec_.channels);
  r.elementwise = ew::kLayerNorm * u64(in.elements());
  rows.push_back(std::move(r));
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> SiLULayer<T>::forward(const Tensor<T>& x) {
  x_ = x;
  return silu(x);
}

template <typename T>
Tensor<T> SiLULayer<T>::backward(const Tensor<T>& dy) {
  require_cached(x_, type());
  return silu_backward(x_, dy);
}

template <typename T>
void SiLULayer<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  CostRow r{prefix, type(), in, in};
  r.elementwise = ew::kActivation * u64(in.elements());
  rows.push_back(std::move(r));
}

// ---------------------------------------------------------------------------

template <typename T>
Sequence<T>& Sequence<T>::add(std::string name, LayerPtr<T> layer) {
  layers_.push_back({std::move(name), std::move(layer)});
  return *this;
}

template <typename T>
VolumeShape Sequence<T>::output_shape(const VolumeShape& in) const {
  VolumeShape s = in;
  for (const auto& e : layers_) s = e.layer->output_shape(s);
  return s;
}

template <typename T>
Tensor<T> Sequence<T>::forward(const Tensor<T>& x) {
  Tensor<T> h = x;
  for (auto& e : layers_) h = e.layer->forward(h);
  return h;
}

template <typename T>
Tensor<T> Sequence<T>::backward(const Tensor<T>& dy) {
  Tensor<T> g = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = it->layer->backward(g);
  return g;
}

template <typename T>
void Sequence<T>::collect(ParamList<T>& out, const std::string& prefix) {
  for (auto& e : layers_) e.layer->collect(out, join_name(prefix, e.name));
}

template <typename T>
void Sequence<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  VolumeShape s = in;
  for (const auto& e : layers_) {
    e.layer->cost(s, join_name(prefix, e.name), rows);
    s = e.layer->output_shape(s);
  }
}

template <typename T>
void Sequence<T>::check_memory(const VolumeShape& in, std::uint64_t cap) const {
  VolumeShape s = in;
  for (const auto& e : layers_) {
    e.layer->check_memory(s, cap);
    s = e.layer->output_shape(s);
  }
}

template <typename T>
LayerPtr<T> make_conv_block(Index in_channels, Index out_channels, Index kernel, Index stride, Rng& rng) {
  auto block = std::make_unique<Sequence<T>>("conv_block");
  const ConvSpec spec = ConvSpec::cubic(in_channels, out_channels, kernel, stride, (kernel - 1) / 2);
  block->add("conv", std::make_unique<Conv3dLayer<T>>(spec, rng));
  block->add("norm", std::make_unique<ChannelNorm<T>>(NormSpec{out_channels, 1e-5}));
  block->add("act", std::make_unique<SiLULayer<T>>());
  return block;
}

#define ULIKE_INSTANTIATE(T)                                                                 \
  template Tensor<T> fan_in_uniform(Extents, Index, Rng&);                                   \
  template class Layer<T>;                                                                   \
  template class Conv3dLayer<T>;                                                             \
  template class TConv3dLayer<T>;                                                            \
  template class ChannelNorm<T>;                                                             \
  template class SiLULayer<T>;                                                               \
  template class Sequence<T>;                                                                \
  template LayerPtr<T> make_conv_block(Index, Index, Index, Index, Rng&);

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

}  // namespace ulike
