#include <gtest/gtest.h>

#include "test_util.hpp"
#include "ulike/blocks.hpp"

using namespace ulike;
using ulike::testing::max_abs;
using ulike::testing::randn;

namespace {

MambaLayerConfig mamba_cfg(Index c, std::vector<ScanKind> dirs, DWConvKind kind = DWConvKind::Conv3D) {
  MambaLayerConfig m;
  m.channels = c;
  m.expansion = 2;
  m.state_dim = 4;
  m.dwconv = kind;
  m.directions = std::move(dirs);
  return m;
}

// Parameter count written out tensor by tensor.
Index mamba_params_oracle(Index c, Index e, Index n, Index dirs, Index conv_per_channel, bool ms) {
  const Index inner = e * c;
  const Index s = ms ? 3 * inner : inner;
  const Index norm = 2 * c;
  const Index in_proj = c * inner + inner;
  const Index gate = c * s + s;
  const Index conv = inner * conv_per_channel + (ms ? 3 : 1) * inner;
  const Index ssm = s * n /*A*/ + s /*D*/ + s * s + s /*delta*/ + 2 * s * n /*B, C*/;
  const Index out = s * c + c;
  return norm + in_proj + gate + conv + dirs * ssm + out;
}

}  // namespace

TEST(MambaLayer, ParameterCountMatchesTensorInventory) {
  struct P {
    DWConvKind kind;
    bool ms;
    Index dirs;
    Index conv;
  };
  for (const P& p : {P{DWConvKind::Conv1D, false, 1, 4}, P{DWConvKind::Conv3D, false, 1, 27},
                     P{DWConvKind::Conv3D, false, 3, 27}, P{DWConvKind::Conv3D, true, 1, 27 + 125 + 343}}) {
    MambaLayerConfig cfg = mamba_cfg(6, std::vector<ScanKind>(static_cast<std::size_t>(p.dirs), ScanKind::ForwardW), p.kind);
    if (p.dirs == 3) cfg.directions = {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst};
    cfg.multiscale = p.ms;
    Rng rng(1);
    MambaLayer<double> layer(cfg, rng);
    const Index expect = mamba_params_oracle(6, 2, 4, p.dirs, p.conv, p.ms);
    EXPECT_EQ(cfg.parameter_count(), expect);
    EXPECT_EQ(layer.parameter_count(), expect);
  }
}

TEST(MambaLayer, DirectionIncrementsAreEqual) {
  const auto single = mamba_cfg(8, {ScanKind::ForwardW}).parameter_count();
  const auto dual = mamba_cfg(8, {ScanKind::ForwardW, ScanKind::BackwardW}).parameter_count();
  const auto tri = mamba_cfg(8, {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst}).parameter_count();
  EXPECT_EQ(dual - single, tri - dual);
}

TEST(MambaLayer, MultiscaleHasMoreParameters) {
  auto plain = mamba_cfg(8, {ScanKind::ForwardW});
  auto ms = plain;
  ms.multiscale = true;
  EXPECT_GT(ms.parameter_count(), plain.parameter_count());
}

TEST(MambaLayer, ZeroOutputProjectionLeavesResidual) {
  Rng rng(2);
  MambaLayer<double> layer(mamba_cfg(3, {ScanKind::ForwardW}), rng);
  layer.weights().w_out.value.fill(0.0);
  const auto x = randn({3, 2, 3, 4}, 3);
  EXPECT_EQ(layer.forward(x), x);
}

TEST(MambaLayer, TypeNamesDirections) {
  Rng rng(4);
  EXPECT_EQ(MambaLayer<float>(mamba_cfg(2, {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst}), rng).type(),
            "mamba_3d[forward_w+h_first+d_first]");
  EXPECT_EQ(MambaLayer<float>(mamba_cfg(2, {ScanKind::ForwardW}, DWConvKind::Conv1D), rng).type(), "mamba_1d[forward_w]");
  MambaLayerConfig bad = mamba_cfg(2, {});
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(MambaLayer, TriScanCommutesWithCyclicAxisRotation) {
  // With per-direction SSM parameters tied and a rotation-symmetric depthwise
  // kernel, rotating the axes (D,H,W)→(H,W,D) permutes the three scan
  // directions among themselves, so the layer commutes with the rotation.
  MambaLayerConfig cfg = mamba_cfg(3, {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst});
  Rng rng(5);
  MambaLayer<double> layer(cfg, rng);
  auto& w = layer.weights();
  w.ssm[1] = w.ssm[0];
  w.ssm[2] = w.ssm[0];
  const Permutation rot{0, 2, 3, 1};  // y[c, h, w, d] = x[c, d, h, w] on a C×k×k×k kernel
  auto& k = w.conv_w[0].value;
  const auto k1 = permute_axes(k, rot), k2 = permute_axes(k1, rot);
  k = scale(add(add(k, k1), k2), 1.0 / 3.0);
  for (auto& b : {&w.b_in.value, &w.b_z.value, &w.conv_b[0].value, &w.b_out.value, &w.norm_shift.value}) {
    *b = randn(b->shape(), 6);
  }

  const auto x = randn({3, 2, 3, 4}, 7);
  const auto xr = permute_axes(x, rot);
  ASSERT_EQ(xr.shape(), (Extents{3, 3, 4, 2}));
  const auto y = layer.forward(x);
  const auto yr = layer.forward(xr);
  EXPECT_LE(max_abs(yr, permute_axes(y, rot)), 1e-10);
}

TEST(Attention, SraWithUnitRatioEqualsVanillaAttentionPlusFfn) {
  AttentionConfig cfg;
  cfg.channels = 8;
  cfg.heads = 2;
  cfg.reduction = 1;
  cfg.ffn_expansion = 4;
  Rng rng(8);
  TransformerLayer<double> layer(cfg, rng);
  layer.norm1_gain().value = randn({8}, 9);
  layer.norm1_shift().value = randn({8}, 10);
  layer.attention().bq.value = randn({8}, 11);
  layer.ffn().b1.value = randn({32}, 12);

  const auto x = randn({8, 2, 3, 4}, 13);
  const auto y = layer.forward(x);

  const auto rows = channels_last(x);
  const auto u = layer_norm(rows, layer.norm1_gain().value, layer.norm1_shift().value, 1e-5);
  const auto t = add(rows, vanilla_attention(u, layer.attention(), 2));
  const auto u2 = layer_norm(t, layer.norm2_gain().value, layer.norm2_shift().value, 1e-5);
  const auto ref = channels_first(add(t, feed_forward(u2, layer.ffn())), VolumeShape::of(x.shape()));
  EXPECT_LE(max_abs(y, ref), 1e-10);
  EXPECT_EQ(layer.type(), "attention[H=2]");
}

TEST(Attention, MultiHeadSplitsChannels) {
  // Two heads over disjoint channel halves equal two single-head attentions.
  const auto q = randn({5, 4}, 14), k = randn({3, 4}, 15), v = randn({3, 4}, 16);
  const auto both = multi_head_attention(q, k, v, 2);
  auto half = [](const Tensor<double>& m, Index lo) {
    Tensor<double> out({m.extent(0), 2});
    for (Index r = 0; r < m.extent(0); ++r)
      for (Index c = 0; c < 2; ++c) out.at({r, c}) = m.at({r, lo + c});
    return out;
  };
  for (Index h = 0; h < 2; ++h) {
    const auto one = multi_head_attention(half(q, 2 * h), half(k, 2 * h), half(v, 2 * h), 1);
    EXPECT_LE(max_abs(one, half(both, 2 * h)), 1e-14);
  }
  EXPECT_THROW(multi_head_attention(q, k, v, 3), ConfigError);
}

TEST(Attention, ReductionShrinksKeysByCube) {
  AttentionConfig cfg;
  cfg.channels = 4;
  cfg.reduction = 2;
  Rng rng(17);
  TransformerLayer<float> layer(cfg, rng);
  (void)layer.forward(randn<float>({4, 4, 4, 6}, 18));
  EXPECT_EQ(layer.last_attention_extents(), (std::array<Index, 2>{96, 12}));
  EXPECT_EQ(cfg.attention_entries({4, 4, 6}), 96u * 12);
  EXPECT_EQ(layer.type(), "sra_attention[R=2;H=1]");
  EXPECT_THROW(cfg.reduced({1, 4, 4}), ShapeError);
}

TEST(Attention, MemoryGuardTripsBeforeAllocation) {
  AttentionConfig cfg;
  cfg.channels = 4;
  cfg.memory_cap = 1000;
  Rng rng(19);
  TransformerLayer<float> layer(cfg, rng);
  EXPECT_THROW(layer.check_memory({4, 8, 8, 8}, cfg.memory_cap), MemoryGuardError);
  EXPECT_THROW(layer.forward(Tensor<float>({4, 8, 8, 8})), MemoryGuardError);
  EXPECT_NO_THROW(layer.check_memory({4, 2, 2, 2}, cfg.memory_cap));
  try {
    layer.check_memory({4, 8, 8, 8}, cfg.memory_cap);
  } catch (const MemoryGuardError& e) {
    EXPECT_EQ(e.requested(), 512u * 512);
    EXPECT_EQ(e.cap(), 1000u);
  }
}

TEST(Attention, ParameterCountWithReduction) {
  AttentionConfig cfg;
  cfg.channels = 8;
  cfg.ffn_expansion = 4;
  const Index base = 4 * 8 /*norms*/ + 4 * (64 + 8) /*q,k,v,o*/ + (8 * 32 + 32) + (32 * 8 + 8);
  EXPECT_EQ(cfg.parameter_count(), base);
  cfg.reduction = 2;
  EXPECT_EQ(cfg.parameter_count(), base + 8 * 8 * 8 + 8 + 2 * 8);
  cfg.reduction_kind = ReductionKind::AvgPool;
  EXPECT_EQ(cfg.parameter_count(), base + 2 * 8);
}

TEST(MultiScaleBlock, ShapesAndComposition) {
  SeqLayerSpec spec;
  spec.mamba = mamba_cfg(0, {ScanKind::ForwardW});
  for (MultiScaleKind k : {MultiScaleKind::V1, MultiScaleKind::V2, MultiScaleKind::V3}) {
    Rng rng(20);
    MultiScaleBlock<float> b(k, 2, 4, 2, spec, rng);
    EXPECT_EQ(b.paths(), multiscale_kernels(k).size());
    EXPECT_EQ(b.projection() == nullptr, k == MultiScaleKind::V1);
    const auto y = b.forward(randn<float>({2, 4, 6, 8}, 21));
    EXPECT_EQ(y.shape(), (Extents{4, 2, 3, 4}));
  }
  EXPECT_EQ(multiscale_kernels(MultiScaleKind::V3), (std::vector<Index>{3, 5, 7}));
}

TEST(MultiScaleBlock, V1SumsPerPathOutputs) {
  SeqLayerSpec spec;
  spec.mamba = mamba_cfg(0, {ScanKind::ForwardW});
  Rng rng(22);
  MultiScaleBlock<double> b(MultiScaleKind::V1, 2, 3, 1, spec, rng);
  const auto x = randn({2, 3, 3, 3}, 23);
  const auto y = b.forward(x);
  Tensor<double> ref = b.seq(0).forward(b.conv(0).forward(x));
  accumulate(ref, b.seq(1).forward(b.conv(1).forward(x)));
  EXPECT_LE(max_abs(y, ref), 1e-12);
}
