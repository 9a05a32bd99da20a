#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ulike/layers.hpp"
#include "ulike/scan_order.hpp"
#include "ulike/ssm.hpp"

namespace ulike {

// ---------------------------------------------------------------------------
// Mamba layer

enum class DWConvKind { Conv1D, Conv3D };

struct MambaLayerConfig {
  Index channels = 16;
  Index expansion = 2;
  DWConvKind dwconv = DWConvKind::Conv3D;
  Index state_dim = 16;
  std::vector<ScanKind> directions{ScanKind::ForwardW};
  bool multiscale = false;  // three parallel depthwise 3D convs (3, 5, 7)
  bool gated = true;
  Discretization discretization = Discretization::EulerB;
  ScanAlgorithm algorithm = ScanAlgorithm::Sequential;
  std::uint64_t order_seed = 0;  // RandomPerm direction

  static constexpr Index kConv1DKernel = 4;
  static constexpr Index kConv3DKernel = 3;
  static constexpr std::array<Index, 3> kMultiscaleKernels{3, 5, 7};

  Index inner() const { return expansion * channels; }
  /// Channels seen by the SSMs (and the gate).
  Index ssm_width() const { return multiscale ? inner() * Index(kMultiscaleKernels.size()) : inner(); }
  void validate() const;
  Index parameter_count() const;
};

template <typename T>
struct MambaWeights {
  Param<T> norm_gain, norm_shift;
  Param<T> w_in, b_in;  // C×E·C
  Param<T> w_z, b_z;    // C×S (gated only)
  std::vector<Param<T>> conv_w, conv_b;
  std::vector<SSMParams<T>> ssm;
  std::vector<SSMParams<T>> ssm_grad;
  Param<T> w_out, b_out;  // S×C
};

/// Sum of per-direction unflattened outputs; all must share one shape.
template <typename T>
Tensor<T> multi_scan_merge(std::span<const Tensor<T>> outputs);

/// For each direction: flatten `a` (S×D×H×W), run that direction's SSM,
/// unflatten; results summed.
template <typename T>
Tensor<T> directional_ssm(const Tensor<T>& a, std::span<const ScanOrder> orders,
                          std::span<const SSMParams<T>> params,
                          ScanAlgorithm algorithm = ScanAlgorithm::Sequential,
                          Discretization mode = Discretization::EulerB);

/// layer norm → in-projection (and gate) → depthwise conv → SiLU →
/// directional SSMs summed → gate → out-projection → + x.
template <typename T>
class MambaLayer final : public Layer<T> {
 public:
  MambaLayer(const MambaLayerConfig& cfg, Rng& rng);

  std::string type() const override;
  VolumeShape output_shape(const VolumeShape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;

  const MambaLayerConfig& config() const { return cfg_; }
  MambaWeights<T>& weights() { return w_; }
  /// Scan orders for a grid, in direction order.
  const std::vector<ScanOrder>& orders(const GridShape& grid);

 private:
  struct Cache {
    VolumeShape shape;
    Tensor<T> x, u, xin, z, conv, act, merged, gated;
    std::vector<SelectiveScanCache<T>> scans;
  };

  Tensor<T> depthwise(const Tensor<T>& xin) const;

  MambaLayerConfig cfg_;
  MambaWeights<T> w_;
  std::optional<GridShape> grid_;
  std::vector<ScanOrder> orders_;
  Cache cache_;
};

// ---------------------------------------------------------------------------
// Attention

/// Softmax(q kᵀ/√d_h) v per head, heads concatenated. q: L×C, k, v: M×C.
/// Each head's probabilities are kept in `probs` when non-null.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                               std::vector<Tensor<T>>* probs = nullptr);

template <typename T>
struct AttentionGrads {
  Tensor<T> dq, dk, dv;
};

template <typename T>
AttentionGrads<T> multi_head_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                Index heads, const std::vector<Tensor<T>>& probs,
                                                const Tensor<T>& dy);

template <typename T>
struct AttentionWeights {
  Param<T> wq, bq, wk, bk, wv, bv, wo, bo;  // each C×C / C
};

/// Full-resolution self-attention with projections: x: L×C.
template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& x, const AttentionWeights<T>& w, Index heads);

template <typename T>
struct FeedForwardWeights {
  Param<T> w1, b1;  // C×F
  Param<T> w2, b2;  // F×C
};

/// linear → SiLU → linear on L×C rows.
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w);

enum class ReductionKind { StridedConv, AvgPool };

struct AttentionConfig {
  Index channels = 16;
  Index heads = 1;
  Index reduction = 1;  // 1 → vanilla attention
  Index ffn_expansion = 4;
  ReductionKind reduction_kind = ReductionKind::StridedConv;
  std::uint64_t memory_cap = std::uint64_t{1} << 26;  // attention entries

  void validate() const;
  /// Reduced key/value grid for an input grid; ShapeError if an extent < R.
  GridShape reduced(const GridShape& g) const;
  std::uint64_t attention_entries(const GridShape& g) const;
  Index parameter_count() const;
};

/// Pre-norm transformer layer on a volume:
///   t = x + Attn(LN(x)), out = t + FFN(LN(t)).
/// With reduction R > 1, keys and values come from LN(reduce_R(LN(x))),
/// where reduce_R is a kernel = stride = R conv (or R³ average pooling).
template <typename T>
class TransformerLayer final : public Layer<T> {
 public:
  TransformerLayer(const AttentionConfig& cfg, Rng& rng);

  std::string type() const override;
  VolumeShape output_shape(const VolumeShape& in) const override { return in; }
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;
  void check_memory(const VolumeShape& in, std::uint64_t cap) const override;

  const AttentionConfig& config() const { return cfg_; }
  AttentionWeights<T>& attention() { return attn_; }
  FeedForwardWeights<T>& ffn() { return ffn_; }
  Param<T>& norm1_gain() { return n1g_; }
  Param<T>& norm1_shift() { return n1s_; }
  Param<T>& norm2_gain() { return n2g_; }
  Param<T>& norm2_shift() { return n2s_; }
  /// Extents of the most recent attention matrix (per head): {L, M}.
  std::array<Index, 2> last_attention_extents() const { return last_extents_; }

 private:
  struct Cache {
    VolumeShape shape;
    Tensor<T> t, u, q, red_in, red_out, kv_src, k, v, att, t1, u2, h_pre, h_act;
    std::vector<Tensor<T>> probs;
  };

  AttentionConfig cfg_;
  Param<T> n1g_, n1s_, n2g_, n2s_;
  Param<T> sr_w_, sr_b_, srn_g_, srn_s_;  // reduction conv and its norm
  AttentionWeights<T> attn_;
  FeedForwardWeights<T> ffn_;
  Cache cache_;
  std::array<Index, 2> last_extents_{0, 0};
};

// ---------------------------------------------------------------------------
// Sequence-layer factory and multi-scale blocks

enum class SeqKind { Mamba, Transformer };

/// Settings for one h-layer; `channels` is filled in by the caller.
struct SeqLayerSpec {
  SeqKind kind = SeqKind::Mamba;
  MambaLayerConfig mamba;
  AttentionConfig attention;
};

template <typename T>
LayerPtr<T> make_seq_layer(const SeqLayerSpec& spec, Index channels, Rng& rng);

enum class MultiScaleKind { V1, V2, V3 };

std::vector<Index> multiscale_kernels(MultiScaleKind kind);

/// Parallel conv blocks (kernels 3/7 or 3/5/7) followed by sequence layers.
/// V1: one sequence layer per path, outputs summed.
/// V2/V3: paths concatenated, one sequence layer over the joint width,
/// then a 1×1×1 conv back to `out_channels`.
template <typename T>
class MultiScaleBlock final : public Layer<T> {
 public:
  MultiScaleBlock(MultiScaleKind kind, Index in_channels, Index out_channels, Index stride,
                  const SeqLayerSpec& seq, Rng& rng);

  std::string type() const override;
  VolumeShape output_shape(const VolumeShape& in) const override;
  Tensor<T> forward(const Tensor<T>& x) override;
  Tensor<T> backward(const Tensor<T>& dy) override;
  void collect(ParamList<T>& out, const std::string& prefix) override;
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const override;
  void check_memory(const VolumeShape& in, std::uint64_t cap) const override;

  MultiScaleKind kind() const { return kind_; }
  std::size_t paths() const { return convs_.size(); }
  Layer<T>& conv(std::size_t i) { return *convs_.at(i); }
  Layer<T>& seq(std::size_t i) { return *seqs_.at(i); }
  Layer<T>* projection() { return proj_.get(); }

 private:
  MultiScaleKind kind_;
  Index out_channels_;
  std::vector<LayerPtr<T>> convs_;
  std::vector<LayerPtr<T>> seqs_;
  LayerPtr<T> proj_;
};

}  // namespace ulike
