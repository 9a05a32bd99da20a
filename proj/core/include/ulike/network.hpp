#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ulike/blocks.hpp"
#include "ulike/cost_types.hpp"
#include "ulike/layers.hpp"
#include "ulike/serialize.hpp"

namespace ulike {

enum class Variant { Mamba1D, Mamba3D, Mamba3DMT, TransSRA, TransVanilla };
enum class MultiScale { None, V1, V2, V3, V4 };
/// Which stages a multi-scale scheme replaces. Auto: encoder stages for
/// V1–V3, every Mamba layer for V4.
enum class MultiScaleScope { Auto, Encoder, All };
enum class ScanStrategy { Single, DualFB, DualRand, Tri };

std::string_view to_string(Variant v);
std::string_view to_string(MultiScale m);
std::string_view to_string(MultiScaleScope s);
std::string_view to_string(ScanStrategy s);
Variant parse_variant(std::string_view s);
MultiScale parse_multiscale(std::string_view s);
MultiScaleScope parse_multiscale_scope(std::string_view s);
ScanStrategy parse_scan_strategy(std::string_view s);

/// single = {ForwardW}; dual_fb = {ForwardW, BackwardW};
/// dual_rand = {ForwardW, RandomPerm}; tri = {ForwardW, HFirst, DFirst}.
std::vector<ScanKind> scan_directions(ScanStrategy s);

inline constexpr int kStages = 4;

struct NetworkConfig {
  Variant variant = Variant::Mamba3D;
  Index in_channels = 1;
  Index num_classes = 3;
  Index stem_channels = 16;
  std::array<Index, kStages> stage_channels{32, 64, 128, 256};
  std::array<Index, kStages> stage_strides{2, 2, 2, 2};
  Index expansion = 2;
  Index state_dim = 16;
  MultiScale multiscale = MultiScale::None;
  MultiScaleScope multiscale_scope = MultiScaleScope::Auto;
  ScanStrategy scan = ScanStrategy::Single;
  bool gated = true;
  std::array<Index, kStages> sra_ratios{8, 4, 2, 1};
  std::array<Index, kStages> heads{1, 2, 4, 8};
  Index ffn_expansion = 4;
  ReductionKind reduction_kind = ReductionKind::StridedConv;
  Discretization discretization = Discretization::EulerB;
  ScanAlgorithm scan_algorithm = ScanAlgorithm::Sequential;
  std::uint64_t attention_cap = std::uint64_t{1} << 26;  // per-head score entries
  std::uint64_t seed = 0;

  bool is_mamba() const {
    return variant == Variant::Mamba1D || variant == Variant::Mamba3D || variant == Variant::Mamba3DMT;
  }
  /// Applies variant implications (Mamba3DMT ⇒ MSv4 + tri-scan, vanilla ⇒
  /// R = 1) and validates; throws ConfigError on conflicting options.
  NetworkConfig resolved() const;
  /// Product of the stage strides.
  Index downsampling() const;
  /// ShapeError naming the required multiple when the grid is not divisible.
  void check_input(const GridShape& g) const;
  bool multiscale_in_encoder() const;
  bool multiscale_in_decoder() const;
};

/// Per-stage h-layer settings for encoder stage `stage` (0-based); decoder
/// stages reuse the settings of the encoder stage at the same resolution.
SeqLayerSpec stage_seq_spec(const NetworkConfig& resolved, int stage, std::uint64_t layer_index);

/// Transposed-conv up block, skip concatenation, 1×1×1 fusing conv, layer
/// norm, SiLU, then the stage's h-layer.
template <typename T>
class DecoderStage {
 public:
  DecoderStage(Index in_channels, Index out_channels, Index stride, LayerPtr<T> h, Rng& rng);

  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& skip);
  struct Grads {
    Tensor<T> dx, dskip;
  };
  Grads backward(const Tensor<T>& dy);
  void collect(ParamList<T>& out, const std::string& prefix);
  /// `in` is the low-resolution input; the skip has the output shape.
  void cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const;
  void check_memory(const VolumeShape& in, std::uint64_t cap) const;
  VolumeShape output_shape(const VolumeShape& in) const;
  Layer<T>& h() { return *h_; }

  /// Intermediate outputs of the last forward, for diagnostics.
  const Tensor<T>& last_output() const { return out_; }

 private:
  Index out_channels_;
  TConv3dLayer<T> up_;
  Conv3dLayer<T> fuse_;
  ChannelNorm<T> norm_;
  SiLULayer<T> act_;
  LayerPtr<T> h_;
  Tensor<T> out_;
};

/// U-shaped segmentation network: stem, four encoder stages (f then h),
/// three decoder stages with skips from ES3, ES2, ES1, and an upsampling
/// head. Processes one C×D×H×W sample at a time.
template <typename T>
class Network {
 public:
  explicit Network(const NetworkConfig& cfg);

  const NetworkConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& x);
  /// Adds parameter gradients and returns the input gradient.
  Tensor<T> backward(const Tensor<T>& dlogits);
  /// Batched wrappers over a leading batch axis (B×C×D×H×W).
  Tensor<T> forward_batch(const Tensor<T>& x);

  /// Runs a forward pass and returns the name of the first component whose
  /// output contains a non-finite value.
  std::optional<std::string> first_nonfinite_layer(const Tensor<T>& x);

  ParamList<T> parameters();
  Index parameter_count();
  void zero_grad();

  /// Analytic cost rows at an input grid; no tensors are allocated.
  CostRows cost(const GridShape& input) const;
  /// Pre-flight memory guard for a forward at `input`.
  void check_memory(const GridShape& input) const;

  NamedTensors<T> state();
  void load_state(const NamedTensors<T>& entries);

  Layer<T>& stem() { return *stem_; }
  Layer<T>& encoder(int i) { return *enc_.at(static_cast<std::size_t>(i)); }
  DecoderStage<T>& decoder(int j) { return *dec_.at(static_cast<std::size_t>(j)); }
  TConv3dLayer<T>& head_up() { return *head_up_; }
  Conv3dLayer<T>& head_out() { return *head_out_; }

 private:
  Tensor<T> run(const Tensor<T>& x, std::optional<std::string>* nonfinite);

  NetworkConfig cfg_;
  LayerPtr<T> stem_;
  std::vector<LayerPtr<T>> enc_;
  std::vector<std::unique_ptr<DecoderStage<T>>> dec_;
  std::unique_ptr<TConv3dLayer<T>> head_up_;
  std::unique_ptr<Conv3dLayer<T>> head_out_;
  bool has_forward_ = false;
};

/// Stage-level structure report: one line per component with shapes and
/// parameter counts, then the skip topology.
std::string structure_text(const NetworkConfig& cfg, const CostRows& rows);
void write_structure_csv(std::ostream& os, const CostRows& rows);

/// Component prefix of a row name ("ES2.h" → "ES2").
std::string_view component_of(std::string_view row_name);

}  // namespace ulike
