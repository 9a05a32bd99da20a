#include "ulike/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ulike/blocks.hpp"
#include "ulike/error.hpp"
#include "ulike/metrics.hpp"
#include "ulike/network.hpp"
#include "ulike/rng.hpp"
#include "ulike/scan_order.hpp"
#include "ulike/ssm.hpp"

namespace ulike {

double GradCheckReport::max_error() const {
  double m = 0;
  for (const auto& g : groups) m = std::max(m, std::isnan(g.max_rel_error) ? INFINITY : g.max_rel_error);
  return m;
}

GradCheckReport run_grad_check(GradProbe& probe, const GradCheckOptions& opts) {
  Rng rng(derive_seed(opts.seed, 0x6C4EC));
  const Tensor<double> y0 = probe.forward();
  Tensor<double> r(y0.shape());
  for (double& v : r.data()) v = rng.normal();
  std::vector<Tensor<double>> analytic = probe.backward(r);
  if (analytic.size() != probe.vars.size()) throw StateError("grad_check: backward returned the wrong number of grads");
  if (opts.inject_bug && !analytic.empty()) analytic[0] = scale(analytic[0], -1.0);

  GradCheckReport rep;
  rep.component = probe.component;
  rep.tolerance = probe.tolerance;
  rep.groups.resize(probe.vars.size());
  for (std::size_t g = 0; g < probe.vars.size(); ++g) rep.groups[g].name = probe.names[g];

  auto difference = [&](Tensor<double>& x, Index i, double v, double h) {
    const double xp = v + h, xm = v - h;
    x[i] = xp;
    const Tensor<double> fp = probe.forward();
    x[i] = xm;
    const Tensor<double> fm = probe.forward();
    x[i] = v;
    double acc = 0;
    for (Index j = 0; j < fp.size(); ++j) acc += r[j] * (fp[j] - fm[j]);
    return acc / (xp - xm);
  };

  auto check = [&](std::size_t g, Index i) {
    Tensor<double>& x = *probe.vars[g];
    const double v = x[i];
    const double d1 = difference(x, i, v, opts.step);
    const double d2 = difference(x, i, v, 2 * opts.step);
    const double numeric = (4 * d1 - d2) / 3;
    const double a = analytic[g][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
    const double err = std::abs(a - numeric) / denom;
    auto& grp = rep.groups[g];
    grp.max_rel_error = std::isnan(err) ? err : std::max(grp.max_rel_error, err);
    ++grp.checked;
  };

  if (probe.total_samples > 0) {
    for (Index s = 0; s < probe.total_samples; ++s) {
      const auto g = static_cast<std::size_t>(rng.below(probe.vars.size()));
      const Index n = probe.vars[g]->size();
      check(g, static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    }
    std::erase_if(rep.groups, [](const GradCheckGroup& gr) { return gr.checked == 0; });
  } else {
    for (std::size_t g = 0; g < probe.vars.size(); ++g) {
      const Index n = probe.vars[g]->size();
      if (n <= opts.samples_per_group) {
        for (Index i = 0; i < n; ++i) check(g, i);
      } else {
        for (Index s = 0; s < opts.samples_per_group; ++s) check(g, static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
      }
    }
  }
  return rep;
}

namespace {

constexpr double kLinearTol = 1e-6;
constexpr double kSmoothTol = 1e-4;
constexpr double kNetworkTol = 1e-3;

Tensor<double> random_tensor(Extents shape, Rng& rng, double scale_ = 1.0) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = scale_ * rng.normal();
  return t;
}

Tensor<double> random_uniform(Extents shape, Rng& rng, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Probe over a list of owned tensors with plain function forward/backward.
struct Owned {
  std::vector<Tensor<double>> t;
};

GradProbe function_probe(std::string name, std::vector<std::string> names, std::vector<Tensor<double>> tensors,
                         std::function<Tensor<double>(const std::vector<Tensor<double>>&)> f,
                         std::function<std::vector<Tensor<double>>(const std::vector<Tensor<double>>&,
                                                                   const Tensor<double>&)>
                             adj,
                         double tol) {
  auto st = std::make_shared<Owned>();
  st->t = std::move(tensors);
  GradProbe p;
  p.component = std::move(name);
  p.names = std::move(names);
  for (auto& t : st->t) p.vars.push_back(&t);
  p.forward = [st, f] { return f(st->t); };
  p.backward = [st, adj](const Tensor<double>& dy) { return adj(st->t, dy); };
  p.tolerance = tol;
  p.owner = st;
  return p;
}

struct LayerState {
  std::unique_ptr<Layer<double>> layer;
  Tensor<double> x;
  ParamList<double> params;
};

GradProbe layer_probe(std::string name, std::unique_ptr<Layer<double>> layer, Tensor<double> x, double tol) {
  auto st = std::make_shared<LayerState>();
  st->layer = std::move(layer);
  st->x = std::move(x);
  st->layer->collect(st->params, "");
  GradProbe p;
  p.component = std::move(name);
  p.names.push_back("input");
  p.vars.push_back(&st->x);
  for (auto& np : st->params) {
    p.names.push_back(np.name);
    p.vars.push_back(np.value);
  }
  p.forward = [st] { return st->layer->forward(st->x); };
  p.backward = [st](const Tensor<double>& dy) {
    for (auto& np : st->params) np.grad->fill(0.0);
    st->layer->forward(st->x);
    std::vector<Tensor<double>> g{st->layer->backward(dy)};
    for (auto& np : st->params) g.push_back(*np.grad);
    return g;
  };
  p.tolerance = tol;
  p.owner = st;
  return p;
}

struct NetState {
  std::unique_ptr<Network<double>> net;
  Tensor<double> x;
  ParamList<double> params;
};

GradProbe network_probe(std::string name, const NetworkConfig& cfg, Index grid, Rng& rng) {
  auto st = std::make_shared<NetState>();
  st->net = std::make_unique<Network<double>>(cfg);
  st->x = random_tensor({cfg.in_channels, grid, grid, grid}, rng);
  st->params = st->net->parameters();
  GradProbe p;
  p.component = std::move(name);
  for (auto& np : st->params) {
    p.names.push_back(np.name);
    p.vars.push_back(np.value);
  }
  p.forward = [st] { return st->net->forward(st->x); };
  p.backward = [st](const Tensor<double>& dy) {
    st->net->zero_grad();
    st->net->forward(st->x);
    st->net->backward(dy);
    std::vector<Tensor<double>> g;
    for (auto& np : st->params) g.push_back(*np.grad);
    return g;
  };
  p.tolerance = kNetworkTol;
  p.total_samples = 20;
  p.owner = st;
  return p;
}

MambaLayerConfig small_mamba(DWConvKind kind, std::vector<ScanKind> dirs, bool ms = false, bool gated = true) {
  MambaLayerConfig c;
  c.channels = 3;
  c.expansion = 2;
  c.dwconv = kind;
  c.state_dim = 3;
  c.directions = std::move(dirs);
  c.multiscale = ms;
  c.gated = gated;
  c.order_seed = 11;
  return c;
}

NetworkConfig tiny_network(Variant v) {
  NetworkConfig c;
  c.variant = v;
  c.in_channels = 1;
  c.num_classes = 3;
  c.stem_channels = 4;
  c.stage_channels = {6, 6, 8, 8};
  c.expansion = 1;
  c.state_dim = 2;
  c.heads = {1, 1, 2, 2};
  c.sra_ratios = {2, 2, 2, 1};
  c.ffn_expansion = 2;
  c.seed = 5;
  return c;
}

using Builder = GradProbe (*)(Rng&);

struct Entry {
  const char* name;
  Builder build;
};

GradProbe p_identity(Rng& rng) {
  return function_probe(
      "identity", {"x"}, {random_tensor({3, 4}, rng)}, [](const auto& t) { return t[0]; },
      [](const auto&, const Tensor<double>& dy) { return std::vector<Tensor<double>>{dy}; }, kLinearTol);
}

GradProbe p_matmul(Rng& rng) {
  return function_probe(
      "matmul", {"a", "b"}, {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
      [](const auto& t) { return matmul(t[0], t[1]); },
      [](const auto& t, const Tensor<double>& dy) {
        auto g = matmul_backward(t[0], t[1], dy);
        return std::vector<Tensor<double>>{g.da, g.db};
      },
      kLinearTol);
}

GradProbe p_permute(Rng& rng) {
  static const Permutation perm{2, 0, 1};
  return function_probe(
      "permute_axes", {"x"}, {random_tensor({2, 3, 4}, rng)}, [](const auto& t) { return permute_axes(t[0], perm); },
      [](const auto&, const Tensor<double>& dy) { return std::vector<Tensor<double>>{permute_axes_backward(dy, perm)}; },
      kLinearTol);
}

GradProbe p_gather(Rng& rng) {
  static const Permutation idx{3, 0, 4, 1, 2};
  return function_probe(
      "gather_seq", {"x"}, {random_tensor({5, 2}, rng)}, [](const auto& t) { return gather_seq(t[0], idx); },
      [](const auto&, const Tensor<double>& dy) { return std::vector<Tensor<double>>{scatter_seq(dy, idx)}; },
      kLinearTol);
}

GradProbe p_flatten(Rng& rng) {
  auto order = std::make_shared<ScanOrder>(ScanOrder::make(ScanKind::RandomPerm, {2, 3, 4}, 7));
  return function_probe(
      "flatten", {"x"}, {random_tensor({2, 2, 3, 4}, rng)}, [order](const auto& t) { return flatten(t[0], *order); },
      [order](const auto&, const Tensor<double>& dy) { return std::vector<Tensor<double>>{unflatten(dy, *order)}; },
      kLinearTol);
}

GradProbe p_linear(Rng& rng) {
  return function_probe(
      "linear", {"x", "weight", "bias"}, {random_tensor({5, 3}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)},
      [](const auto& t) { return linear(t[0], t[1], t[2]); },
      [](const auto& t, const Tensor<double>& dy) {
        auto g = linear_backward(t[0], t[1], dy, true);
        return std::vector<Tensor<double>>{g.dx, g.dw, g.db};
      },
      kLinearTol);
}

GradProbe conv_probe(const char* name, ConvSpec spec, Extents in, bool transposed, Rng& rng) {
  Extents ws = transposed ? spec.transposed_weight_shape() : spec.weight_shape();
  return function_probe(
      name, {"x", "weight", "bias"},
      {random_tensor(std::move(in), rng), random_tensor(std::move(ws), rng), random_tensor({spec.out_channels}, rng)},
      [spec, transposed](const auto& t) { return transposed ? tconv3d(t[0], spec, t[1], t[2]) : conv3d(t[0], spec, t[1], t[2]); },
      [spec, transposed](const auto& t, const Tensor<double>& dy) {
        auto g = transposed ? tconv3d_backward(t[0], spec, t[1], dy) : conv3d_backward(t[0], spec, t[1], dy);
        return std::vector<Tensor<double>>{g.dx, g.dw, g.db};
      },
      kLinearTol);
}

GradProbe p_conv3d(Rng& rng) {
  ConvSpec s = ConvSpec::cubic(2, 3, 3, 2, 1);
  s.kernel = {3, 2, 3};
  return conv_probe("conv3d", s, {2, 4, 5, 3}, false, rng);
}

GradProbe p_conv3d_grouped(Rng& rng) {
  return conv_probe("conv3d_grouped", ConvSpec::cubic(4, 2, 3, 1, 1, 2), {4, 3, 3, 3}, false, rng);
}

GradProbe p_tconv3d(Rng& rng) {
  return conv_probe("tconv3d", ConvSpec::cubic(3, 2, 2, 2, 0), {3, 2, 3, 2}, true, rng);
}

GradProbe p_dwconv1d(Rng& rng) {
  return function_probe(
      "dwconv1d", {"x", "weight", "bias"}, {random_tensor({3, 9}, rng), random_tensor({3, 4}, rng), random_tensor({3}, rng)},
      [](const auto& t) { return dwconv1d(t[0], t[1], t[2]); },
      [](const auto& t, const Tensor<double>& dy) {
        auto g = dwconv1d_backward(t[0], t[1], dy, true);
        return std::vector<Tensor<double>>{g.dx, g.dw, g.db};
      },
      kLinearTol);
}

GradProbe p_dwconv3d(Rng& rng) {
  return function_probe(
      "dwconv3d", {"x", "weight", "bias"},
      {random_tensor({2, 3, 4, 3}, rng), random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)},
      [](const auto& t) { return dwconv3d(t[0], t[1], t[2]); },
      [](const auto& t, const Tensor<double>& dy) {
        auto g = dwconv3d_backward(t[0], t[1], dy, true);
        return std::vector<Tensor<double>>{g.dx, g.dw, g.db};
      },
      kLinearTol);
}

GradProbe p_layer_norm(Rng& rng) {
  return function_probe(
      "layer_norm", {"x", "gain", "shift"}, {random_tensor({4, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)},
      [](const auto& t) { return layer_norm(t[0], t[1], t[2], 1e-5); },
      [](const auto& t, const Tensor<double>& dy) {
        auto g = layer_norm_backward(t[0], t[1], dy, 1e-5);
        return std::vector<Tensor<double>>{g.dx, g.dgain, g.dshift};
      },
      kSmoothTol);
}

GradProbe p_layer_norm_cf(Rng& rng) {
  return function_probe(
      "layer_norm_cf", {"x", "gain", "shift"},
      {random_tensor({4, 2, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)},
      [](const auto& t) { return layer_norm_cf(t[0], t[1], t[2], 1e-5); },
      [](const auto& t, const Tensor<double>& dy) {
        auto g = layer_norm_cf_backward(t[0], t[1], dy, 1e-5);
        return std::vector<Tensor<double>>{g.dx, g.dgain, g.dshift};
      },
      kSmoothTol);
}

GradProbe p_silu(Rng& rng) {
  return function_probe(
      "silu", {"x"}, {random_tensor({3, 5}, rng, 2.0)}, [](const auto& t) { return silu(t[0]); },
      [](const auto& t, const Tensor<double>& dy) { return std::vector<Tensor<double>>{silu_backward(t[0], dy)}; },
      kSmoothTol);
}

GradProbe p_softplus(Rng& rng) {
  return function_probe(
      "softplus", {"x"}, {random_tensor({3, 5}, rng, 3.0)}, [](const auto& t) { return softplus(t[0]); },
      [](const auto& t, const Tensor<double>& dy) { return std::vector<Tensor<double>>{softplus_backward(t[0], dy)}; },
      kSmoothTol);
}

GradProbe p_softmax(Rng& rng) {
  return function_probe(
      "softmax", {"x"}, {random_tensor({3, 5}, rng, 2.0)}, [](const auto& t) { return softmax(t[0]); },
      [](const auto& t, const Tensor<double>& dy) {
        return std::vector<Tensor<double>>{softmax_backward(softmax(t[0]), dy)};
      },
      kSmoothTol);
}

GradProbe scan_core_probe(const char* name, Discretization mode, Rng& rng) {
  const Index l = 12, s = 3, n = 4;
  return function_probe(
      name, {"x", "delta", "a", "b", "c", "d"},
      {random_tensor({l, s}, rng), random_uniform({l, s}, rng, 0.05, 0.8), random_uniform({s, n}, rng, -2.0, -0.2),
       random_tensor({l, n}, rng), random_tensor({l, n}, rng), random_tensor({s}, rng)},
      [mode](const auto& t) { return scan_core_seq<double>({t[0], t[1], t[2], t[3], t[4], t[5]}, mode); },
      [mode](const auto& t, const Tensor<double>& dy) {
        auto g = scan_core_backward<double>({t[0], t[1], t[2], t[3], t[4], t[5]}, dy, mode, 5);
        return std::vector<Tensor<double>>{g.dx, g.ddelta, g.da, g.db, g.dc, g.dd};
      },
      kSmoothTol);
}

GradProbe p_scan_core(Rng& rng) { return scan_core_probe("scan_core", Discretization::EulerB, rng); }
GradProbe p_scan_core_zoh(Rng& rng) { return scan_core_probe("scan_core_zoh", Discretization::ZeroOrderHold, rng); }

GradProbe p_selective_scan(Rng& rng) {
  const Index l = 16, s = 3, n = 4;
  SSMParams<double> init = SSMParams<double>::init(s, n, rng);
  return function_probe(
      "selective_scan", {"x", "a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c"},
      {random_tensor({l, s}, rng), init.a_log, init.d_skip, init.w_delta, init.b_delta, init.w_b, init.w_c},
      [](const auto& t) {
        const SSMParams<double> p{t[1], t[2], t[3], t[4], t[5], t[6]};
        return selective_scan(t[0], p);
      },
      [](const auto& t, const Tensor<double>& dy) {
        const SSMParams<double> p{t[1], t[2], t[3], t[4], t[5], t[6]};
        SelectiveScanCache<double> cache;
        selective_scan(t[0], p, ScanAlgorithm::Sequential, Discretization::EulerB, &cache);
        SSMGrads<double> g = selective_scan_backward(dy, cache, p);
        return std::vector<Tensor<double>>{g.dx,         g.params.a_log, g.params.d_skip, g.params.w_delta,
                                           g.params.b_delta, g.params.w_b,  g.params.w_c};
      },
      kSmoothTol);
}

GradProbe p_attention(Rng& rng) {
  return function_probe(
      "attention", {"q", "k", "v"}, {random_tensor({5, 4}, rng), random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
      [](const auto& t) { return multi_head_attention(t[0], t[1], t[2], 2); },
      [](const auto& t, const Tensor<double>& dy) {
        std::vector<Tensor<double>> probs;
        multi_head_attention(t[0], t[1], t[2], 2, &probs);
        auto g = multi_head_attention_backward(t[0], t[1], t[2], 2, probs, dy);
        return std::vector<Tensor<double>>{g.dq, g.dk, g.dv};
      },
      kSmoothTol);
}

GradProbe p_dice_ce(Rng& rng) {
  auto labels = std::make_shared<std::vector<std::int32_t>>();
  for (int i = 0; i < 12; ++i) labels->push_back(static_cast<std::int32_t>(rng.below(3)));
  return function_probe(
      "dice_ce_loss", {"logits"}, {random_tensor({3, 2, 2, 3}, rng)},
      [labels](const auto& t) { return Tensor<double>({1}, {dice_ce_loss(t[0], *labels).loss}); },
      [labels](const auto& t, const Tensor<double>& dy) {
        return std::vector<Tensor<double>>{scale(dice_ce_loss(t[0], *labels).grad, dy[0])};
      },
      kSmoothTol);
}

GradProbe p_conv_block(Rng& rng) {
  return layer_probe("conv_block", make_conv_block<double>(2, 3, 3, 2, rng), random_tensor({2, 4, 4, 4}, rng), kSmoothTol);
}

GradProbe p_tconv_layer(Rng& rng) {
  return layer_probe("tconv_layer", std::make_unique<TConv3dLayer<double>>(ConvSpec::cubic(3, 2, 2, 2), rng),
                     random_tensor({3, 2, 2, 2}, rng), kLinearTol);
}

GradProbe mamba_probe(const char* name, MambaLayerConfig cfg, Rng& rng) {
  return layer_probe(name, std::make_unique<MambaLayer<double>>(cfg, rng), random_tensor({cfg.channels, 2, 3, 4}, rng),
                     kSmoothTol);
}

GradProbe p_mamba_1d(Rng& rng) { return mamba_probe("mamba_1d", small_mamba(DWConvKind::Conv1D, {ScanKind::ForwardW}), rng); }
GradProbe p_mamba_3d(Rng& rng) { return mamba_probe("mamba_3d", small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW}), rng); }
GradProbe p_mamba_ungated(Rng& rng) {
  return mamba_probe("mamba_ungated", small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW}, false, false), rng);
}
GradProbe p_mamba_dual_fb(Rng& rng) {
  return mamba_probe("mamba_dual_fb", small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW, ScanKind::BackwardW}), rng);
}
GradProbe p_mamba_dual_rand(Rng& rng) {
  return mamba_probe("mamba_dual_rand", small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW, ScanKind::RandomPerm}), rng);
}
GradProbe p_mamba_tri(Rng& rng) {
  return mamba_probe("mamba_tri",
                     small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst}), rng);
}
GradProbe p_mamba_msv4(Rng& rng) {
  return mamba_probe("mamba_msv4", small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW}, true), rng);
}
GradProbe p_mamba_3dmt(Rng& rng) {
  return mamba_probe("mamba_3dmt_layer",
                     small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW, ScanKind::HFirst, ScanKind::DFirst}, true), rng);
}

GradProbe transformer_probe(const char* name, Index r, ReductionKind kind, Rng& rng) {
  AttentionConfig c;
  c.channels = 4;
  c.heads = 2;
  c.reduction = r;
  c.ffn_expansion = 2;
  c.reduction_kind = kind;
  return layer_probe(name, std::make_unique<TransformerLayer<double>>(c, rng), random_tensor({4, 2, 4, 4}, rng), kSmoothTol);
}

GradProbe p_transformer(Rng& rng) { return transformer_probe("transformer", 1, ReductionKind::StridedConv, rng); }
GradProbe p_sra(Rng& rng) { return transformer_probe("sra", 2, ReductionKind::StridedConv, rng); }
GradProbe p_sra_pool(Rng& rng) { return transformer_probe("sra_avgpool", 2, ReductionKind::AvgPool, rng); }

GradProbe ms_probe(const char* name, MultiScaleKind kind, SeqKind seq, Rng& rng) {
  SeqLayerSpec spec;
  spec.kind = seq;
  spec.mamba = small_mamba(DWConvKind::Conv3D, {ScanKind::ForwardW});
  spec.attention.heads = 1;
  spec.attention.ffn_expansion = 2;
  return layer_probe(name, std::make_unique<MultiScaleBlock<double>>(kind, 2, 3, 2, spec, rng),
                     random_tensor({2, 4, 4, 4}, rng), kSmoothTol);
}

GradProbe p_msv1(Rng& rng) { return ms_probe("msv1", MultiScaleKind::V1, SeqKind::Mamba, rng); }
GradProbe p_msv2(Rng& rng) { return ms_probe("msv2", MultiScaleKind::V2, SeqKind::Mamba, rng); }
GradProbe p_msv3(Rng& rng) { return ms_probe("msv3", MultiScaleKind::V3, SeqKind::Mamba, rng); }
GradProbe p_msv2_trans(Rng& rng) { return ms_probe("msv2_transformer", MultiScaleKind::V2, SeqKind::Transformer, rng); }

GradProbe p_net_mamba_1d(Rng& rng) { return network_probe("network_mamba_1d", tiny_network(Variant::Mamba1D), 16, rng); }
GradProbe p_net_mamba_3d(Rng& rng) { return network_probe("network_mamba_3d", tiny_network(Variant::Mamba3D), 16, rng); }
GradProbe p_net_mamba_3dmt(Rng& rng) {
  return network_probe("network_mamba_3dmt", tiny_network(Variant::Mamba3DMT), 16, rng);
}
GradProbe p_net_trans_sra(Rng& rng) { return network_probe("network_trans_sra", tiny_network(Variant::TransSRA), 16, rng); }
GradProbe p_net_msv2(Rng& rng) {
  NetworkConfig c = tiny_network(Variant::Mamba3D);
  c.multiscale = MultiScale::V2;
  return network_probe("network_mamba_3d_msv2", c, 16, rng);
}

constexpr Entry kRegistry[] = {
    {"identity", p_identity},
    {"matmul", p_matmul},
    {"permute_axes", p_permute},
    {"gather_seq", p_gather},
    {"flatten", p_flatten},
    {"linear", p_linear},
    {"conv3d", p_conv3d},
    {"conv3d_grouped", p_conv3d_grouped},
    {"tconv3d", p_tconv3d},
    {"dwconv1d", p_dwconv1d},
    {"dwconv3d", p_dwconv3d},
    {"layer_norm", p_layer_norm},
    {"layer_norm_cf", p_layer_norm_cf},
    {"silu", p_silu},
    {"softplus", p_softplus},
    {"softmax", p_softmax},
    {"scan_core", p_scan_core},
    {"scan_core_zoh", p_scan_core_zoh},
    {"selective_scan", p_selective_scan},
    {"attention", p_attention},
    {"dice_ce_loss", p_dice_ce},
    {"conv_block", p_conv_block},
    {"tconv_layer", p_tconv_layer},
    {"mamba_1d", p_mamba_1d},
    {"mamba_3d", p_mamba_3d},
    {"mamba_ungated", p_mamba_ungated},
    {"mamba_dual_fb", p_mamba_dual_fb},
    {"mamba_dual_rand", p_mamba_dual_rand},
    {"mamba_tri", p_mamba_tri},
    {"mamba_msv4", p_mamba_msv4},
    {"mamba_3dmt_layer", p_mamba_3dmt},
    {"transformer", p_transformer},
    {"sra", p_sra},
    {"sra_avgpool", p_sra_pool},
    {"msv1", p_msv1},
    {"msv2", p_msv2},
    {"msv3", p_msv3},
    {"msv2_transformer", p_msv2_trans},
    {"network_mamba_1d", p_net_mamba_1d},
    {"network_mamba_3d", p_net_mamba_3d},
    {"network_mamba_3dmt", p_net_mamba_3dmt},
    {"network_trans_sra", p_net_trans_sra},
    {"network_mamba_3d_msv2", p_net_msv2},
};

}  // namespace

std::vector<std::string> gradcheck_components() {
  std::vector<std::string> out;
  for (const auto& e : kRegistry) out.emplace_back(e.name);
  return out;
}

GradProbe make_probe(std::string_view component, std::uint64_t seed) {
  if (component.empty()) throw ConfigError("grad_check: empty component name");
  for (const auto& e : kRegistry) {
    if (component == e.name) {
      Rng rng(derive_seed(seed, std::hash<std::string_view>{}(component) & 0xFFFF));
      return e.build(rng);
    }
  }
  throw ConfigError("grad_check: unknown component '" + std::string(component) + "'");
}

GradCheckReport grad_check(std::string_view component, const GradCheckOptions& opts) {
  GradProbe p = make_probe(component, opts.seed);
  return run_grad_check(p, opts);
}

}  // namespace ulike
