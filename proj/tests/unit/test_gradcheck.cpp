#include <gtest/gtest.h>

#include "ulike/error.hpp"
#include "ulike/gradcheck.hpp"

using namespace ulike;

class GradCheckSuite : public ::testing::TestWithParam<std::string> {};

TEST_P(GradCheckSuite, AnalyticMatchesNumeric) {
  const auto report = grad_check(GetParam());
  EXPECT_FALSE(report.groups.empty());
  for (const auto& g : report.groups) {
    EXPECT_GT(g.checked, 0) << g.name;
    EXPECT_LE(g.max_rel_error, report.tolerance) << GetParam() << " / " << g.name;
  }
  EXPECT_TRUE(report.pass());
}

INSTANTIATE_TEST_SUITE_P(AllComponents, GradCheckSuite, ::testing::ValuesIn(gradcheck_components()),
                         [](const auto& info) { return info.param; });

TEST(GradCheck, ToleranceTiers) {
  EXPECT_EQ(make_probe("matmul").tolerance, 1e-6);
  EXPECT_EQ(make_probe("silu").tolerance, 1e-4);
  EXPECT_EQ(make_probe("mamba_3d").tolerance, 1e-4);
  const auto net = make_probe("network_mamba_3d");
  EXPECT_EQ(net.tolerance, 1e-3);
  EXPECT_EQ(net.total_samples, 20);
}

TEST(GradCheck, IdentityIsExact) {
  const auto report = grad_check("identity");
  EXPECT_EQ(report.max_error(), 0.0);
}

TEST(GradCheck, InjectedBugIsCaught) {
  GradCheckOptions opts;
  opts.inject_bug = true;
  for (const char* name : {"matmul", "conv3d", "selective_scan", "mamba_3d"}) {
    const auto report = grad_check(name, opts);
    EXPECT_FALSE(report.pass()) << name;
    EXPECT_GT(report.groups.front().max_rel_error, 0.5) << name;
  }
}

TEST(GradCheck, UnknownOrEmptyComponent) {
  EXPECT_THROW(make_probe(""), ConfigError);
  EXPECT_THROW(make_probe("no_such_layer"), ConfigError);
  EXPECT_THROW(grad_check("no_such_layer"), ConfigError);
}

TEST(GradCheck, SeedSelectsCoordinatesDeterministically) {
  GradCheckOptions a;
  a.seed = 3;
  const auto r1 = grad_check("conv3d", a), r2 = grad_check("conv3d", a);
  ASSERT_EQ(r1.groups.size(), r2.groups.size());
  for (std::size_t i = 0; i < r1.groups.size(); ++i) EXPECT_EQ(r1.groups[i].max_rel_error, r2.groups[i].max_rel_error);
}

TEST(GradCheck, StencilIsExactOnQuadratics) {
  // f(x) = x², adjoint 2x·dy. The fourth-order combination has no
  // truncation error here, leaving only roundoff.
  GradProbe p;
  p.component = "square";
  auto x = std::make_shared<Tensor<double>>(Extents{5}, std::vector<double>{0.3, -1.2, 2.0, 0.7, -0.1});
  p.owner = x;
  p.names = {"x"};
  p.vars = {x.get()};
  p.forward = [x] {
    Tensor<double> y(x->shape());
    for (Index i = 0; i < y.size(); ++i) y[i] = (*x)[i] * (*x)[i];
    return y;
  };
  p.backward = [x](const Tensor<double>& dy) {
    Tensor<double> g(x->shape());
    for (Index i = 0; i < g.size(); ++i) g[i] = 2 * (*x)[i] * dy[i];
    return std::vector<Tensor<double>>{g};
  };
  p.tolerance = 1e-9;
  EXPECT_TRUE(run_grad_check(p).pass());
}
