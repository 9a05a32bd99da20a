#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "ulike/instrument.hpp"
#include "ulike/nn_ops.hpp"
#include "ulike/ssm.hpp"

using namespace ulike;
using ulike::testing::max_abs;
using ulike::testing::randn;
using ulike::testing::randu;

namespace {

struct Case {
  Tensor<double> x, delta, a, b, c, d;
  ScanInputs<double> in() const { return {x, delta, a, b, c, d}; }
};

Case make_case(Index l, Index s, Index n, std::uint64_t seed) {
  return {randn({l, s}, seed), randu({l, s}, seed + 1, 0.01, 1.0), randu({s, n}, seed + 2, -3.0, -0.1),
          randn({l, n}, seed + 3), randn({l, n}, seed + 4), randn({s}, seed + 5)};
}

// Recurrence written out with the continuous-time definitions.
Tensor<double> scan_oracle(const Case& k, bool zoh) {
  const Index l = k.x.extent(0), s = k.x.extent(1), n = k.a.extent(1);
  Tensor<double> y({l, s});
  for (Index ch = 0; ch < s; ++ch) {
    std::vector<double> h(static_cast<std::size_t>(n), 0.0);
    for (Index t = 0; t < l; ++t) {
      double out = k.d[ch] * k.x.at({t, ch});
      for (Index j = 0; j < n; ++j) {
        const double dt = k.delta.at({t, ch}), av = k.a.at({ch, j});
        const double abar = std::exp(dt * av);
        const double bbar = zoh ? (abar - 1.0) / av * k.b.at({t, j}) : dt * k.b.at({t, j});
        h[j] = abar * h[j] + bbar * k.x.at({t, ch});
        out += k.c.at({t, j}) * h[j];
      }
      y.at({t, ch}) = out;
    }
  }
  return y;
}

}  // namespace

TEST(Discretize, EulerAndZeroOrderHold) {
  const Tensor<double> delta({1, 1}, {0.5}), a({1, 2}, {-2.0, -1e-14}), b({1, 1, 2}, {3.0, 4.0});
  const auto e = discretize(delta, a, b, Discretization::EulerB);
  EXPECT_NEAR(e.a_bar[0], std::exp(-1.0), 1e-15);
  EXPECT_NEAR(e.b_bar[0], 1.5, 1e-15);
  const auto z = discretize(delta, a, b, Discretization::ZeroOrderHold);
  EXPECT_NEAR(z.b_bar[0], (std::exp(-1.0) - 1.0) / -2.0 * 3.0, 1e-15);
  // A → 0 limit of (exp(ΔA) − 1)/A is Δ.
  EXPECT_NEAR(z.b_bar[1], 0.5 * 4.0, 1e-12);
}

TEST(Discretize, RejectsNonPositiveStep) {
  const Tensor<double> delta({1, 1}, {0.0}), a({1, 1}, {-1.0}), b({1, 1, 1}, {1.0});
  EXPECT_THROW(discretize(delta, a, b), std::domain_error);
}

TEST(ScanElement, CompositionIsAssociative) {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    ScanElement<double> p{rng.uniform(), rng.normal()}, q{rng.uniform(), rng.normal()}, r{rng.uniform(), rng.normal()};
    const auto lhs = compose(compose(p, q), r), rhs = compose(p, compose(q, r));
    EXPECT_NEAR(lhs.a, rhs.a, 1e-15);
    EXPECT_NEAR(lhs.b, rhs.b, 1e-14);
    const auto id = compose(ScanElement<double>::identity(), p);
    EXPECT_EQ(id.a, p.a);
    EXPECT_EQ(id.b, p.b);
  }
}

TEST(ScanCore, SequentialMatchesRecurrenceOracle) {
  for (bool zoh : {false, true}) {
    const Case k = make_case(37, 3, 5, 10);
    const auto mode = zoh ? Discretization::ZeroOrderHold : Discretization::EulerB;
    EXPECT_LE(max_abs(scan_core_seq(k.in(), mode), scan_oracle(k, zoh)), 1e-12);
  }
}

TEST(ScanCore, ParallelMatchesSequential) {
  Rng rng(11);
  for (Index l : {1, 2, 3, 7, 64, 100, 257}) {
    const Case k = make_case(l, 1 + Index(rng.below(4)), 1 + Index(rng.below(8)), 100 + std::uint64_t(l));
    for (auto mode : {Discretization::EulerB, Discretization::ZeroOrderHold}) {
      EXPECT_LE(max_relative_diff(scan_core_par(k.in(), mode), scan_core_seq(k.in(), mode)), 1e-12) << "L=" << l;
    }
  }
}

TEST(ScanCore, LengthOneIsBitIdentical) {
  const Case k = make_case(1, 4, 6, 12);
  EXPECT_EQ(scan_core_par(k.in()), scan_core_seq(k.in()));
}

TEST(ScanCore, StateIsCausal) {
  Case k = make_case(20, 2, 3, 13);
  const auto y = scan_core_seq(k.in());
  k.x.at({15, 0}) += 1.0;
  const auto y2 = scan_core_seq(k.in());
  for (Index t = 0; t < 15; ++t) EXPECT_EQ(y2.at({t, 0}), y.at({t, 0}));
  EXPECT_NE(y2.at({15, 0}), y.at({15, 0}));
}

TEST(ScanCore, WorkIsLinearInLength) {
  const Case a = make_case(512, 2, 4, 14), b = make_case(1024, 2, 4, 15);
  ScanWork wa, wb;
  (void)scan_core_par(a.in(), Discretization::EulerB, &wa);
  (void)scan_core_par(b.in(), Discretization::EulerB, &wb);
  const double ratio = double(wb.combines) / double(wa.combines);
  EXPECT_GE(ratio, 1.8);
  EXPECT_LE(ratio, 2.2);
  MacCounter mc;
  (void)scan_core_seq(a.in());
  EXPECT_EQ(mc.macs(), 3u * 512 * 2 * 4 + 512 * 2);
}

TEST(ScanCore, BackwardIndependentOfCheckpointInterval) {
  const Case k = make_case(33, 2, 3, 16);
  const auto dy = randn({33, 2}, 17);
  const auto ref = scan_core_backward(k.in(), dy, Discretization::EulerB, 1);
  for (Index seg : {0, 4, 7, 33, 100}) {
    const auto g = scan_core_backward(k.in(), dy, Discretization::EulerB, seg);
    EXPECT_LE(max_abs(g.dx, ref.dx), 1e-12);
    EXPECT_LE(max_abs(g.da, ref.da), 1e-12);
    EXPECT_LE(max_abs(g.ddelta, ref.ddelta), 1e-12);
  }
}

TEST(ScanCore, RejectsBadShapes) {
  const Case k = make_case(5, 2, 3, 18);
  const Tensor<double> wrong_b({4, 3});
  EXPECT_THROW(scan_core_seq<double>({k.x, k.delta, k.a, wrong_b, k.c, k.d}), ShapeError);
}

TEST(SelectiveScan, ParametersAndInit) {
  Rng rng(19);
  const auto p = SSMParams<double>::init(4, 3, rng);
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(SSMParams<double>::parameter_count(4, 3), 4 * 3 * 3 + 16 + 8);
  const auto a = p.a();
  for (Index i = 0; i < a.size(); ++i) EXPECT_LT(a[i], 0.0);
  EXPECT_DOUBLE_EQ(a.at({0, 2}), -3.0);
  for (Index c = 0; c < 4; ++c) {
    const double dt = softplus(p.b_delta[c]);
    EXPECT_GE(dt, 1e-3 * (1 - 1e-9));
    EXPECT_LE(dt, 1e-1 * (1 + 1e-9));
  }
  EXPECT_THROW(SSMParams<double>::zeros(0, 3), ConfigError);
}

TEST(SelectiveScan, ParallelMatchesSequentialInBothPrecisions) {
  Rng rng(20);
  for (Index l : {1, 2, 100, 1024}) {
    auto pd = SSMParams<double>::init(8, 16, rng);
    const auto x = randn({l, 8}, 21 + std::uint64_t(l));
    EXPECT_LE(max_relative_diff(selective_scan_par(x, pd), selective_scan_seq(x, pd)), 1e-10);
    const auto xf = x.cast<float>();
    SSMParams<float> pf{pd.a_log.cast<float>(), pd.d_skip.cast<float>(), pd.w_delta.cast<float>(),
                        pd.b_delta.cast<float>(), pd.w_b.cast<float>(), pd.w_c.cast<float>()};
    EXPECT_LE(max_relative_diff(selective_scan_par(xf, pf), selective_scan_seq(xf, pf)), 1e-5);
  }
}

TEST(SelectiveScan, BackwardNeedsForwardCache) {
  Rng rng(22);
  const auto p = SSMParams<double>::init(2, 2, rng);
  EXPECT_THROW(selective_scan_backward(Tensor<double>({3, 2}), SelectiveScanCache<double>{}, p), StateError);
  EXPECT_THROW(selective_scan(Tensor<double>({3, 5}), p), ShapeError);
}
