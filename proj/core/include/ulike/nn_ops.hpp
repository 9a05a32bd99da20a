#pragma once

#include <string>

#include "ulike/tensor.hpp"

namespace ulike {

/// Per-axis integer triple in (depth, height, width) order.
struct Triple {
  Index d = 1, h = 1, w = 1;

  static constexpr Triple cube(Index v) { return {v, v, v}; }
  constexpr Index volume() const { return d * h * w; }
  friend constexpr bool operator==(const Triple&, const Triple&) = default;
};

/// Channels plus spatial extents of one volume (C×D×H×W).
struct VolumeShape {
  Index c = 1, d = 1, h = 1, w = 1;

  constexpr Index voxels() const { return d * h * w; }
  constexpr Index elements() const { return c * voxels(); }
  Extents extents() const { return {c, d, h, w}; }
  static VolumeShape of(const Extents& e);
  friend constexpr bool operator==(const VolumeShape&, const VolumeShape&) = default;
};

std::string to_string(const VolumeShape& s);

struct ConvSpec {
  Index in_channels = 1;
  Index out_channels = 1;
  Triple kernel = Triple::cube(3);
  Triple stride = Triple::cube(1);
  Triple padding = Triple::cube(0);
  Index groups = 1;
  bool bias = true;

  static ConvSpec cubic(Index in, Index out, Index k, Index s = 1, Index p = 0, Index groups = 1);

  bool depthwise() const { return groups == in_channels && groups == out_channels; }
  /// Throws ConfigError when the channel/group structure is inconsistent.
  void validate() const;
  /// [C_out, C_in/groups, kd, kh, kw]
  Extents weight_shape() const;
  /// Transposed conv weight: [C_in, C_out/groups, kd, kh, kw]
  Extents transposed_weight_shape() const;
  /// floor((in + 2p − k)/s) + 1 per axis; ShapeError if any is < 1.
  VolumeShape output_shape(const VolumeShape& in) const;
  /// (in − 1)·s − 2p + k per axis; ShapeError if any is < 1.
  VolumeShape transposed_output_shape(const VolumeShape& in) const;
  Index weight_count() const { return element_count(weight_shape()) + (bias ? out_channels : 0); }
};

struct NormSpec {
  Index channels = 1;
  double epsilon = 1e-5;
};

template <typename T>
struct ConvGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> db;  // empty when the op has no bias
};

template <typename T>
struct AffineGrads {
  Tensor<T> dx;
  Tensor<T> dgain;
  Tensor<T> dshift;
};

// ---------------------------------------------------------------------------
// Convolutions. Volumes are C×D×H×W; zero padding everywhere. `bias` may be
// an empty tensor when spec.bias is false.

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w,
                             const Tensor<T>& dy);

/// Fractionally-strided convolution; weight layout [C_in, C_out/groups, k...].
/// Forward equals the input-adjoint of conv3d with the same weight tensor.
template <typename T>
Tensor<T> tconv3d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T>
ConvGrads<T> tconv3d_backward(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w,
                              const Tensor<T>& dy);

/// Depthwise 1D conv over C×L with `left_pad` zeros before and
/// k − 1 − left_pad after, so the output length equals L. The default
/// (left_pad = k − 1) is causal. weight: C×k.
template <typename T>
Tensor<T> dwconv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Index left_pad = -1);
template <typename T>
ConvGrads<T> dwconv1d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               bool has_bias, Index left_pad = -1);

/// Depthwise 3D conv, odd cubic kernel, symmetric padding (k − 1)/2.
/// weight: C×k×k×k. Computed independently of conv3d's kernel.
template <typename T>
Tensor<T> dwconv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T>
ConvGrads<T> dwconv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               bool has_bias);

// ---------------------------------------------------------------------------
// Affine maps.

/// Row-wise affine map: y = x·W + b, x: L×C_in, W: C_in×C_out, b: C_out.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T>
ConvGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                             bool has_bias);

/// The same map applied per voxel to a channel-first C_in×V matrix:
/// y = Wᵀ·x + b, producing C_out×V.
template <typename T>
Tensor<T> linear_cf(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);
template <typename T>
ConvGrads<T> linear_cf_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                bool has_bias);

// ---------------------------------------------------------------------------
// Normalization.

/// Normalizes each row of an L×C tensor over its C entries, then applies
/// gain/shift (length C).
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, double eps);
template <typename T>
AffineGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                                   double eps);

/// Channel-first variant: x is C×(anything); every voxel is normalized over
/// the leading channel axis.
template <typename T>
Tensor<T> layer_norm_cf(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, double eps);
template <typename T>
AffineGrads<T> layer_norm_cf_backward(const Tensor<T>& x, const Tensor<T>& gain,
                                      const Tensor<T>& dy, double eps);

// ---------------------------------------------------------------------------
// Activations.

template <typename T>
T sigmoid(T u);
template <typename T>
T softplus(T u);

template <typename T>
Tensor<T> silu(const Tensor<T>& x);
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy);
template <typename T>
Tensor<T> softplus(const Tensor<T>& x);
template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& dy);
/// Softmax over the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);
/// Takes the softmax output y, not the input.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy);

// ---------------------------------------------------------------------------
// Layout helpers for channel-first volumes.

/// C×V → V×C (any trailing extents collapse into V).
template <typename T>
Tensor<T> channels_last(const Tensor<T>& x);
/// V×C → C×D×H×W.
template <typename T>
Tensor<T> channels_first(const Tensor<T>& x, const VolumeShape& shape);
/// Concatenate along axis 0.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts);
/// Split along axis 0 into pieces with the given channel counts.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const Index> counts);

}  // namespace ulike
