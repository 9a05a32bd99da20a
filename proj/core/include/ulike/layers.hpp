#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ulike/cost_types.hpp"
#include "ulike/nn_ops.hpp"
#include "ulike/rng.hpp"
#include "ulike/tensor.hpp"

namespace ulike {

/// A trainable tensor and its accumulated gradient.
template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  Param() = default;
  explicit Param(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}
  Index size() const { return value.size(); }
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* value;
  Tensor<T>* grad;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

std::string join_name(std::string_view prefix, std::string_view leaf);

template <typename T>
void add_param(ParamList<T>& out, std::string_view prefix, std::string_view leaf, Param<T>& p) {
  if (!p.value.empty()) out.push_back({join_name(prefix, leaf), &p.value, &p.grad});
}

/// U(−1/√fan_in, 1/√fan_in).
template <typename T>
Tensor<T> fan_in_uniform(Extents shape, Index fan_in, Rng& rng);

/// A differentiable map on C×D×H×W volumes. forward() retains what
/// backward() needs; backward() adds parameter gradients into each
/// Param::grad and returns the input gradient. One forward/backward pair
/// may be in flight per instance.
template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual std::string type() const = 0;
  virtual VolumeShape output_shape(const VolumeShape& in) const = 0;
  virtual Tensor<T> forward(const Tensor<T>& x) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual void collect(ParamList<T>& out, const std::string& prefix) = 0;
  /// Appends analytic cost rows for an input of shape `in`.
  virtual void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const = 0;
  /// Throws MemoryGuardError if a forward at `in` would exceed `cap`
  /// attention entries.
  virtual void check_memory(const VolumeShape& /*in*/, std::uint64_t /*cap*/) const {}

  Index parameter_count();
};

template <typename T>
using LayerPtr = std::unique_ptr<Layer<T>>;

template <typename T>
class Conv3dLayer final : public Layer<T> {
 public:
  Conv3dLayer(const ConvSpec& spec, Rng& rng);

  std::string type() const override { return "conv3d"; }
  VolumeShape output_shape(const VolumeShape& in) const override { return spec_.output_shape(in); }
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;

  const ConvSpec& spec() const { return spec_; }
  Param<T>& weight() { return w_; }
  Param<T>& bias() { return b_; }

 private:
  ConvSpec spec_;
  Param<T> w_, b_;
  Tensor<T> x_;
};

template <typename T>
class TConv3dLayer final : public Layer<T> {
 public:
  TConv3dLayer(const ConvSpec& spec, Rng& rng);

  std::string type() const override { return "tconv3d"; }
  VolumeShape output_shape(const VolumeShape& in) const override {
    return spec_.transposed_output_shape(in);
  }
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;

  const ConvSpec& spec() const { return spec_; }
  Param<T>& weight() { return w_; }
  Param<T>& bias() { return b_; }

 private:
  ConvSpec spec_;
  Param<T> w_, b_;
  Tensor<T> x_;
};

/// Layer norm over the channel axis of a volume.
template <typename T>
class ChannelNorm final : public Layer<T> {
 public:
  explicit ChannelNorm(NormSpec spec);

  std::string type() const override { return "layernorm"; }
  VolumeShape output_shape(const VolumeShape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;

  Param<T>& gain() { return gain_; }
  Param<T>& shift() { return shift_; }

 private:
  NormSpec spec_;
  Param<T> gain_, shift_;
  Tensor<T> x_;
};

template <typename T>
class SiLULayer final : public Layer<T> {
 public:
  std::string type() const override { return "silu"; }
  VolumeShape output_shape(const VolumeShape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>&, const std::string&) override {}
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;

 private:
  Tensor<T> x_;
};

/// Named layers applied in order.
template <typename T>
class Sequence final : public Layer<T> {
 public:
  explicit Sequence(std::string type = "sequence") : type_(std::move(type)) {}

  Sequence& add(std::string name, LayerPtr<T> layer);
  std::size_t size() const { return layers_.size(); }
  Layer<T>& at(std::size_t i) { return *layers_.at(i).layer; }
  const std::string& name_at(std::size_t i) const { return layers_.at(i).name; }

  std::string type() const override { return type_; }
  VolumeShape output_shape(const VolumeShape& in) const override;
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;
  void check_memory(const VolumeShape& in, std::uint64_t cap) const override;

 private:
  struct Entry {
    std::string name;
    LayerPtr<T> layer;
  };
  std::string type_;
  std::vector<Entry> layers_;
};

/// conv → layer norm → SiLU, padding (k − 1)/2.
template <typename T>
LayerPtr<T> make_conv_block(Index in_channels, Index out_channels, Index kernel, Index stride, Rng& rng);

}  // namespace ulike
