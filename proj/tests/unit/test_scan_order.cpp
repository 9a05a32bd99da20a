#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "test_util.hpp"
#include "ulike/scan_order.hpp"

using namespace ulike;
using ulike::testing::randn;

namespace {

const GridShape kGrid{2, 3, 4};

Index fw_index(Index d, Index h, Index w) { return (d * kGrid.h + h) * kGrid.w + w; }

}  // namespace

TEST(ScanOrder, EveryKindIsABijectionThatRoundTrips) {
  for (ScanKind k : {ScanKind::ForwardW, ScanKind::BackwardW, ScanKind::HFirst, ScanKind::DFirst,
                     ScanKind::RandomPerm}) {
    const ScanOrder o = ScanOrder::make(k, kGrid, 99);
    ASSERT_EQ(o.length(), 24);
    EXPECT_TRUE(is_permutation(o.voxel_at(), 24)) << to_string(k);
    for (Index i = 0; i < 24; ++i) EXPECT_EQ(o.position_of()[static_cast<std::size_t>(o.voxel_at()[static_cast<std::size_t>(i)])], i);
    const auto x = randn<float>({3, 2, 3, 4}, 5);
    EXPECT_EQ(unflatten(flatten(x, o), o), x) << to_string(k);
  }
}

TEST(ScanOrder, AxisFastestOrders) {
  const ScanOrder fw = ScanOrder::make(ScanKind::ForwardW, kGrid);
  for (Index i = 0; i < 24; ++i) EXPECT_EQ(fw.voxel_at()[static_cast<std::size_t>(i)], i);

  // H-fastest: nest (W, D, H).
  const ScanOrder hf = ScanOrder::make(ScanKind::HFirst, kGrid);
  std::vector<Index> expect;
  for (Index w = 0; w < 4; ++w)
    for (Index d = 0; d < 2; ++d)
      for (Index h = 0; h < 3; ++h) expect.push_back(fw_index(d, h, w));
  EXPECT_TRUE(std::equal(expect.begin(), expect.end(), hf.voxel_at().begin()));

  // D-fastest: nest (H, W, D).
  const ScanOrder df = ScanOrder::make(ScanKind::DFirst, kGrid);
  expect.clear();
  for (Index h = 0; h < 3; ++h)
    for (Index w = 0; w < 4; ++w)
      for (Index d = 0; d < 2; ++d) expect.push_back(fw_index(d, h, w));
  EXPECT_TRUE(std::equal(expect.begin(), expect.end(), df.voxel_at().begin()));
}

TEST(ScanOrder, BackwardReversesForward) {
  const ScanOrder fw = ScanOrder::make(ScanKind::ForwardW, kGrid);
  const ScanOrder bw = ScanOrder::make(ScanKind::BackwardW, kGrid);
  for (Index i = 0; i < 24; ++i) EXPECT_EQ(bw.voxel_at()[static_cast<std::size_t>(i)], fw.voxel_at()[static_cast<std::size_t>(23 - i)]);
}

TEST(ScanOrder, RandomIsSeedDeterministic) {
  const ScanOrder a = make_random_order({4, 4, 4}, 7), b = make_random_order({4, 4, 4}, 7),
                  c = make_random_order({4, 4, 4}, 8);
  EXPECT_TRUE(std::equal(a.voxel_at().begin(), a.voxel_at().end(), b.voxel_at().begin()));
  EXPECT_FALSE(std::equal(a.voxel_at().begin(), a.voxel_at().end(), c.voxel_at().begin()));
}

TEST(ScanOrder, FlattenPlacesVoxelsAtTheirPositions) {
  const auto x = randn<double>({2, 2, 3, 4}, 6);
  const ScanOrder o = ScanOrder::make(ScanKind::HFirst, kGrid);
  const auto s = flatten(x, o);
  ASSERT_EQ(s.shape(), (Extents{24, 2}));
  for (Index i = 0; i < 24; ++i) {
    const Index v = o.voxel_at()[static_cast<std::size_t>(i)];
    EXPECT_EQ(s.at({i, 1}), x[24 + v]);
  }
  EXPECT_THROW(flatten(randn<double>({2, 2, 2, 2}, 1), o), ShapeError);
}

TEST(ScanOrder, CsvExportAndNames) {
  std::ostringstream os;
  ScanOrder::make(ScanKind::BackwardW, {1, 1, 3}).write_csv(os);
  EXPECT_EQ(os.str(), "position,index\n0,2\n1,1\n2,0\n");
  for (ScanKind k : {ScanKind::ForwardW, ScanKind::BackwardW, ScanKind::HFirst, ScanKind::DFirst, ScanKind::RandomPerm})
    EXPECT_EQ(parse_scan_kind(to_string(k)), k);
  EXPECT_THROW(parse_scan_kind("diagonal"), ConfigError);
}
