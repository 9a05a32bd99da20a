#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "ulike/instrument.hpp"
#include "ulike/nn_ops.hpp"

using namespace ulike;
using ulike::testing::max_abs;
using ulike::testing::randn;

namespace {

// Direct definition of a grouped, strided, zero-padded 3D convolution.
Tensor<double> conv_oracle(const Tensor<double>& x, const ConvSpec& s, const Tensor<double>& w,
                           const Tensor<double>& b) {
  const VolumeShape in = VolumeShape::of(x.shape());
  const VolumeShape out = s.output_shape(in);
  Tensor<double> y(out.extents());
  const Index cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  for (Index co = 0; co < s.out_channels; ++co) {
    const Index g = co / cout_g;
    for (Index od = 0; od < out.d; ++od)
      for (Index oh = 0; oh < out.h; ++oh)
        for (Index ow = 0; ow < out.w; ++ow) {
          double acc = b.empty() ? 0.0 : b[co];
          for (Index ci = 0; ci < cin_g; ++ci)
            for (Index kd = 0; kd < s.kernel.d; ++kd)
              for (Index kh = 0; kh < s.kernel.h; ++kh)
                for (Index kw = 0; kw < s.kernel.w; ++kw) {
                  const Index id = od * s.stride.d - s.padding.d + kd;
                  const Index ih = oh * s.stride.h - s.padding.h + kh;
                  const Index iw = ow * s.stride.w - s.padding.w + kw;
                  if (id < 0 || ih < 0 || iw < 0 || id >= in.d || ih >= in.h || iw >= in.w) continue;
                  acc += w.at({co, ci, kd, kh, kw}) * x.at({g * cin_g + ci, id, ih, iw});
                }
          y.at({co, od, oh, ow}) = acc;
        }
  }
  return y;
}

}  // namespace

TEST(Conv3d, MatchesDirectDefinition) {
  ConvSpec s = ConvSpec::cubic(4, 6, 3, 2, 1, 2);
  s.kernel = {3, 2, 3};
  const auto x = randn({4, 5, 6, 7}, 1), w = randn(s.weight_shape(), 2), b = randn({6}, 3);
  const auto y = conv3d(x, s, w, b);
  EXPECT_EQ(y.shape(), (Extents{6, 3, 4, 4}));
  EXPECT_LE(max_abs(y, conv_oracle(x, s, w, b)), 1e-12);
}

TEST(Conv3d, OutputShapeFormula) {
  const ConvSpec s = ConvSpec::cubic(1, 1, 3, 2, 1);
  EXPECT_EQ(s.output_shape({1, 32, 33, 7}), (VolumeShape{1, 16, 17, 4}));
  EXPECT_THROW(ConvSpec::cubic(1, 1, 5, 1, 0).output_shape({1, 3, 3, 3}), ShapeError);
  EXPECT_THROW(ConvSpec::cubic(3, 4, 3, 1, 1, 2).validate(), ConfigError);
}

TEST(Conv3d, MacCountIsDenseWorkload) {
  const ConvSpec s = ConvSpec::cubic(4, 8, 3, 1, 1, 2);
  const auto x = randn<float>({4, 5, 5, 5}, 4);
  const auto w = randn<float>(s.weight_shape(), 5);
  MacCounter mc;
  (void)conv3d(x, s, w, Tensor<float>({8}));
  EXPECT_EQ(mc.macs(), 125u * 8 * 2 * 27);
}

TEST(TConv3d, IsTheAdjointOfConv) {
  // <conv(x), y> = <x, tconv(y)> with the same weight tensor and no bias.
  ConvSpec s = ConvSpec::cubic(3, 4, 2, 2, 0);
  s.bias = false;
  ConvSpec t = ConvSpec::cubic(4, 3, 2, 2, 0);
  const auto x = randn({3, 6, 4, 8}, 6);
  const auto w = randn(s.weight_shape(), 7);
  const auto y = randn(s.output_shape(VolumeShape::of(x.shape())).extents(), 8);
  ASSERT_EQ(w.shape(), t.transposed_weight_shape());
  const double lhs = dot(conv3d(x, s, w, Tensor<double>{}), y);
  const auto ty = tconv3d(y, t, w, Tensor<double>({3}));
  ASSERT_EQ(ty.shape(), x.shape());
  EXPECT_NEAR(lhs, dot(x, ty), 1e-10);
}

TEST(TConv3d, UpsamplesByStride) {
  const ConvSpec t = ConvSpec::cubic(8, 4, 2, 2, 0);
  EXPECT_EQ(t.transposed_output_shape({8, 4, 5, 6}), (VolumeShape{4, 8, 10, 12}));
  const auto x = randn<float>({8, 2, 2, 2}, 9), w = randn<float>(t.transposed_weight_shape(), 10);
  MacCounter mc;
  (void)tconv3d(x, t, w, Tensor<float>({4}));
  EXPECT_EQ(mc.macs(), 8u * 8 * 4 * 8);
}

TEST(DwConv3d, EqualsGroupedConvWithGroupsEqualChannels) {
  const auto x = randn({5, 4, 3, 6}, 11), w = randn({5, 3, 3, 3}, 12), b = randn({5}, 13);
  const ConvSpec s = ConvSpec::cubic(5, 5, 3, 1, 1, 5);
  const auto ref = conv_oracle(x, s, w.reshaped({5, 1, 3, 3, 3}), b);
  EXPECT_LE(max_abs(dwconv3d(x, w, b), ref), 1e-12);
}

TEST(DwConv1d, CausalByDefault) {
  const auto x = randn({2, 9}, 14), w = randn({2, 4}, 15), b = randn({2}, 16);
  const auto y = dwconv1d(x, w, b);
  for (Index c = 0; c < 2; ++c) {
    for (Index t = 0; t < 9; ++t) {
      double acc = b[c];
      for (Index j = 0; j < 4; ++j) {
        const Index src = t - 3 + j;
        if (src >= 0) acc += w.at({c, j}) * x.at({c, src});
      }
      EXPECT_NEAR(y.at({c, t}), acc, 1e-12);
    }
  }
  // Output at t never depends on inputs after t.
  auto x2 = x;
  x2.at({0, 8}) += 5.0;
  const auto y2 = dwconv1d(x2, w, b);
  for (Index t = 0; t < 8; ++t) EXPECT_EQ(y2.at({0, t}), y.at({0, t}));
}

TEST(Linear, ChannelsFirstMatchesRowForm) {
  const auto x = randn({7, 3}, 17), w = randn({3, 5}, 18), b = randn({5}, 19);
  const auto rows = linear(x, w, b);
  const auto cf = linear_cf(transpose2d(x), w, b);
  EXPECT_LE(max_abs(transpose2d(cf), rows), 1e-12);
}

TEST(LayerNorm, NormalizesEachRow) {
  const auto x = randn({6, 8}, 20, 3.0);
  const auto y = layer_norm(x, Tensor<double>::filled({8}, 1.0), Tensor<double>({8}), 1e-5);
  for (Index r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (Index c = 0; c < 8; ++c) m += y.at({r, c});
    m /= 8;
    for (Index c = 0; c < 8; ++c) v += (y.at({r, c}) - m) * (y.at({r, c}) - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 8, 1.0, 1e-4);
  }
}

TEST(LayerNorm, ChannelFirstAgreesWithRowForm) {
  const auto x = randn({4, 2, 3, 5}, 21);
  const auto g = randn({4}, 22), s = randn({4}, 23);
  const auto cf = layer_norm_cf(x, g, s, 1e-5);
  const auto rows = layer_norm(transpose2d(x.reshaped({4, 30})), g, s, 1e-5);
  EXPECT_LE(max_abs(transpose2d(rows), cf.reshaped({4, 30})), 1e-12);
}

TEST(Activations, KnownValues) {
  EXPECT_NEAR(sigmoid(0.0), 0.5, 1e-15);
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(softplus(50.0), 50.0, 1e-12);
  EXPECT_GT(softplus(-50.0), 0.0);
  const Tensor<double> x({3}, {-1.0, 0.0, 2.0});
  const auto y = silu(x);
  EXPECT_NEAR(y[0], -1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Softmax, RowsSumToOneAndAreShiftInvariant) {
  const auto x = randn({4, 6}, 24, 10.0);
  const auto p = softmax(x);
  for (Index r = 0; r < 4; ++r) {
    double s = 0;
    for (Index c = 0; c < 6; ++c) s += p.at({r, c});
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
  auto shifted = x;
  for (Index c = 0; c < 6; ++c) shifted.at({1, c}) += 1000.0;
  EXPECT_LE(max_abs(softmax(shifted), p), 1e-12);
}

TEST(Layout, ChannelsLastAndFirstRoundTrip) {
  const auto x = randn({3, 2, 4, 5}, 25);
  const auto cl = channels_last(x);
  EXPECT_EQ(cl.shape(), (Extents{40, 3}));
  EXPECT_EQ(cl.at({7, 2}), x[2 * 40 + 7]);
  EXPECT_EQ(channels_first(cl, {3, 2, 4, 5}), x);
}

TEST(Layout, ConcatSplitRoundTrip) {
  const std::vector<Tensor<double>> parts{randn({2, 3, 3, 3}, 26), randn({5, 3, 3, 3}, 27)};
  const auto cat = concat_channels<double>(parts);
  EXPECT_EQ(cat.extent(0), 7);
  const std::vector<Index> counts{2, 5};
  const auto back = split_channels(cat, std::span<const Index>(counts));
  EXPECT_EQ(back[0], parts[0]);
  EXPECT_EQ(back[1], parts[1]);
}
