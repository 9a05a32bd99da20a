#include <gtest/gtest.h>

#include <sstream>

#include "test_util.hpp"
#include "ulike/serialize.hpp"
#include "ulike/tensor.hpp"

using namespace ulike;
using ulike::testing::randn;

TEST(Tensor, ConstructionAndIndexing) {
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.size(), 24);
  EXPECT_EQ(t.strides(), (Extents{12, 4, 1}));
  t.at({1, 2, 3}) = 7.0;
  EXPECT_EQ(t[23], 7.0);
  EXPECT_THROW(t.at({2, 0, 0}), std::out_of_range);
  EXPECT_THROW(t.at({1, 0}), ShapeError);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
  EXPECT_EQ(t.reshaped({4, 6})[23], 7.0);
}

TEST(Tensor, ElementwiseRejectsMismatchedShapes) {
  Tensor<float> a({2, 3}), b({3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(hadamard(a, b), ShapeError);
}

TEST(Tensor, MatmulMatchesNaiveTripleLoop) {
  const auto a = randn({5, 7}, 1), b = randn({7, 3}, 2);
  const auto c = matmul(a, b);
  for (Index i = 0; i < 5; ++i) {
    for (Index j = 0; j < 3; ++j) {
      double s = 0;
      for (Index k = 0; k < 7; ++k) s += a.at({i, k}) * b.at({k, j});
      EXPECT_NEAR(c.at({i, j}), s, 1e-12);
    }
  }
  EXPECT_LE(ulike::testing::max_abs(matmul_tn(transpose2d(a), b), c), 1e-12);
  EXPECT_LE(ulike::testing::max_abs(matmul_nt(a, transpose2d(b)), c), 1e-12);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tensor, MatmulAdjointIdentity) {
  // <dc, a·b> is bilinear, so <da, a'> + <db, b'> must match the directional derivative.
  const auto a = randn({4, 6}, 3), b = randn({6, 5}, 4), dc = randn({4, 5}, 5);
  const auto g = matmul_backward(a, b, dc);
  const auto ea = randn({4, 6}, 6), eb = randn({6, 5}, 7);
  const double lhs = dot(g.da, ea) + dot(g.db, eb);
  const double rhs = dot(dc, matmul(ea, b)) + dot(dc, matmul(a, eb));
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Tensor, PermuteAxesRoundTrip) {
  const auto x = randn({2, 3, 4, 5}, 8);
  const Permutation p{2, 0, 3, 1};
  const auto y = permute_axes(x, p);
  EXPECT_EQ(y.shape(), (Extents{4, 2, 5, 3}));
  EXPECT_EQ(y.at({3, 1, 4, 2}), x.at({1, 2, 3, 4}));
  EXPECT_EQ(permute_axes_backward(y, p), x);
  EXPECT_THROW(permute_axes(x, Permutation{0, 0, 1, 2}), ShapeError);
}

TEST(Tensor, GatherScatterAreInverse) {
  const auto x = randn({6, 2}, 9);
  const Permutation idx{4, 1, 5, 0, 3, 2};
  const auto g = gather_seq(x, idx);
  EXPECT_EQ(g.at({0, 1}), x.at({4, 1}));
  EXPECT_EQ(scatter_seq(g, idx), x);
  EXPECT_EQ(inverse_permutation(inverse_permutation(idx)), idx);
  EXPECT_FALSE(is_permutation(Permutation{0, 2, 2}, 3));
}

TEST(Tensor, DiffHelpers) {
  Tensor<double> a({3}, {1.0, 2.0, 4.0}), b({3}, {1.0, 2.5, 4.0});
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 0.5);
  EXPECT_DOUBLE_EQ(max_relative_diff(a, b), 0.5 / 4.0);
  EXPECT_TRUE(all_finite(a));
  a[1] = std::nan("");
  EXPECT_FALSE(all_finite(a));
}

TEST(Serialize, TensorRoundTripIsExact) {
  const auto x = randn<float>({3, 1, 4}, 10);
  std::stringstream ss;
  write_tensor(ss, x);
  EXPECT_EQ(read_tensor<float>(ss), x);

  const auto d = randn<double>({2, 2}, 11);
  std::stringstream s2;
  write_tensor(s2, d);
  const auto back = read_tensor<double>(s2);
  EXPECT_EQ(back, d);
}

TEST(Serialize, RejectsCorruptRecords) {
  std::stringstream bad("NOTMAGIC");
  EXPECT_THROW(read_tensor<float>(bad), FormatError);

  std::stringstream ss;
  write_tensor(ss, randn<float>({4, 4}, 12));
  std::string bytes = ss.str();
  bytes.resize(bytes.size() - 3);
  std::stringstream truncated(bytes);
  EXPECT_THROW(read_tensor<float>(truncated), FormatError);
}

TEST(Serialize, CheckpointRoundTrip) {
  NamedTensors<double> entries{{"a.weight", randn({2, 3}, 13)}, {"b", randn({5}, 14)}};
  std::stringstream ss;
  write_checkpoint(ss, entries);
  const auto back = read_checkpoint<double>(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].first, "a.weight");
  EXPECT_EQ(back[1].second, entries[1].second);
}

TEST(Serialize, Fnv1aKnownValues) {
  // Reference values of the 64-bit FNV-1a function.
  EXPECT_EQ(fnv1a64("", 0), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(hex64(0xabcull), "0000000000000abc");
}

TEST(Rng, DeterministicAndInRange) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next(), b.next());
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    EXPECT_LT(r.below(7), 7u);
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
  }
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
}
