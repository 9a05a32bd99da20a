#include "ulike/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "ulike/error.hpp"

namespace ulike {

namespace {

constexpr double kNormEps = 1e-5;

std::uint64_t u64(Index v) { return static_cast<std::uint64_t>(v); }

template <typename T>
void require_cached(const Tensor<T>& x, const std::string& type) {
  if (x.empty()) throw StateError(type + ": backward called without a preceding forward");
}

template <typename T>
void add_grad(Param<T>& p, const Tensor<T>& g) {
  if (!g.empty()) accumulate(p.grad, g);
}

template <typename T>
void accumulate_ssm(SSMParams<T>& acc, const SSMParams<T>& g) {
  accumulate(acc.a_log, g.a_log);
  accumulate(acc.d_skip, g.d_skip);
  accumulate(acc.w_delta, g.w_delta);
  accumulate(acc.b_delta, g.b_delta);
  accumulate(acc.w_b, g.w_b);
  accumulate(acc.w_c, g.w_c);
}

/// Columns [start, start + n) of an L×C matrix.
template <typename T>
Tensor<T> take_cols(const Tensor<T>& x, Index start, Index n) {
  const Index rows = x.extent(0), c = x.extent(1);
  Tensor<T> out({rows, n});
  for (Index i = 0; i < rows; ++i) std::copy_n(x.raw() + i * c + start, n, out.raw() + i * n);
  return out;
}

template <typename T>
void put_cols(Tensor<T>& x, Index start, const Tensor<T>& part) {
  const Index rows = x.extent(0), c = x.extent(1), n = part.extent(1);
  for (Index i = 0; i < rows; ++i) std::copy_n(part.raw() + i * n, n, x.raw() + i * c + start);
}

template <typename T>
Tensor<T> avg_pool3d(const Tensor<T>& x, Index r, const VolumeShape& out) {
  const VolumeShape in = VolumeShape::of(x.shape());
  Tensor<T> y(out.extents());
  const T inv = T(1) / static_cast<T>(r * r * r);
  for (Index c = 0; c < in.c; ++c)
    for (Index d = 0; d < out.d; ++d)
      for (Index h = 0; h < out.h; ++h)
        for (Index w = 0; w < out.w; ++w) {
          T acc = 0;
          for (Index a = 0; a < r; ++a)
            for (Index b = 0; b < r; ++b)
              for (Index e = 0; e < r; ++e) acc += x.at({c, d * r + a, h * r + b, w * r + e});
          y.at({c, d, h, w}) = acc * inv;
        }
  return y;
}

template <typename T>
Tensor<T> avg_pool3d_backward(const Tensor<T>& dy, Index r, const VolumeShape& in) {
  const VolumeShape out = VolumeShape::of(dy.shape());
  Tensor<T> dx(in.extents());
  const T inv = T(1) / static_cast<T>(r * r * r);
  for (Index c = 0; c < in.c; ++c)
    for (Index d = 0; d < out.d; ++d)
      for (Index h = 0; h < out.h; ++h)
        for (Index w = 0; w < out.w; ++w) {
          const T g = dy.at({c, d, h, w}) * inv;
          for (Index a = 0; a < r; ++a)
            for (Index b = 0; b < r; ++b)
              for (Index e = 0; e < r; ++e) dx.at({c, d * r + a, h * r + b, w * r + e}) += g;
        }
  return dx;
}

}  // namespace

// ---------------------------------------------------------------------------
// MambaLayerConfig

void MambaLayerConfig::validate() const {
  if (channels < 1 || expansion < 1 || state_dim < 1) {
    throw ConfigError("mamba layer: channels, expansion and state_dim must be ≥ 1");
  }
  if (directions.empty()) throw ConfigError("mamba layer: at least one scan direction is required");
  for (std::size_t i = 0; i < directions.size(); ++i) {
    if (directions[i] == ScanKind::AxisMajor) throw ConfigError("mamba layer: axis_major is not a scan direction");
    for (std::size_t j = 0; j < i; ++j) {
      if (directions[i] == directions[j]) {
        throw ConfigError("mamba layer: duplicate scan direction " + std::string(to_string(directions[i])));
      }
    }
  }
  if (multiscale && dwconv != DWConvKind::Conv3D) {
    throw ConfigError("mamba layer: multi-scale depthwise convs require the 3D depthwise conv");
  }
}

Index MambaLayerConfig::parameter_count() const {
  const Index c = channels, e = inner(), s = ssm_width();
  Index n = 2 * c + c * e + e;
  if (gated) n += c * s + s;
  if (multiscale) {
    for (Index k : kMultiscaleKernels) n += e * k * k * k + e;
  } else if (dwconv == DWConvKind::Conv1D) {
    n += e * kConv1DKernel + e;
  } else {
    n += e * kConv3DKernel * kConv3DKernel * kConv3DKernel + e;
  }
  n += static_cast<Index>(directions.size()) * SSMParams<double>::parameter_count(s, state_dim);
  n += s * c + c;
  return n;
}

// ---------------------------------------------------------------------------
// Direction merge

template <typename T>
Tensor<T> multi_scan_merge(std::span<const Tensor<T>> outputs) {
  if (outputs.empty()) throw ShapeError("multi_scan_merge: no direction outputs");
  Tensor<T> sum = outputs[0];
  for (std::size_t i = 1; i < outputs.size(); ++i) {
    require_same_shape(sum, outputs[i], "multi_scan_merge");
    accumulate(sum, outputs[i]);
  }
  return sum;
}

template <typename T>
Tensor<T> directional_ssm(const Tensor<T>& a, std::span<const ScanOrder> orders,
                          std::span<const SSMParams<T>> params, ScanAlgorithm algorithm, Discretization mode) {
  if (orders.size() != params.size()) throw ConfigError("directional_ssm: one SSM per direction is required");
  std::vector<Tensor<T>> outs;
  outs.reserve(orders.size());
  for (std::size_t i = 0; i < orders.size(); ++i) {
    const Tensor<T> seq = flatten(a, orders[i]);
    outs.push_back(unflatten(selective_scan(seq, params[i], algorithm, mode), orders[i]));
  }
  return multi_scan_merge<T>(outs);
}

// ---------------------------------------------------------------------------
// MambaLayer

template <typename T>
MambaLayer<T>::MambaLayer(const MambaLayerConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const Index c = cfg_.channels, e = cfg_.inner(), s = cfg_.ssm_width();
  w_.norm_gain = Param<T>(Tensor<T>::filled({c}, T(1)));
  w_.norm_shift = Param<T>(Tensor<T>({c}));
  w_.w_in = Param<T>(fan_in_uniform<T>({c, e}, c, rng));
  w_.b_in = Param<T>(Tensor<T>({e}));
  if (cfg_.gated) {
    w_.w_z = Param<T>(fan_in_uniform<T>({c, s}, c, rng));
    w_.b_z = Param<T>(Tensor<T>({s}));
  }
  auto add_conv = [&](Extents shape, Index fan_in) {
    w_.conv_w.emplace_back(fan_in_uniform<T>(std::move(shape), fan_in, rng));
    w_.conv_b.emplace_back(Tensor<T>({e}));
  };
  if (cfg_.multiscale) {
    for (Index k : MambaLayerConfig::kMultiscaleKernels) add_conv({e, k, k, k}, k * k * k);
  } else if (cfg_.dwconv == DWConvKind::Conv1D) {
    add_conv({e, MambaLayerConfig::kConv1DKernel}, MambaLayerConfig::kConv1DKernel);
  } else {
    const Index k = MambaLayerConfig::kConv3DKernel;
    add_conv({e, k, k, k}, k * k * k);
  }
  for (std::size_t i = 0; i < cfg_.directions.size(); ++i) {
    w_.ssm.push_back(SSMParams<T>::init(s, cfg_.state_dim, rng));
    w_.ssm_grad.push_back(SSMParams<T>::zeros(s, cfg_.state_dim));
  }
  w_.w_out = Param<T>(fan_in_uniform<T>({s, c}, s, rng));
  w_.b_out = Param<T>(Tensor<T>({c}));
}

template <typename T>
std::string MambaLayer<T>::type() const {
  std::string t = cfg_.multiscale ? "mamba_msv4" : cfg_.dwconv == DWConvKind::Conv1D ? "mamba_1d" : "mamba_3d";
  t += '[';
  for (std::size_t i = 0; i < cfg_.directions.size(); ++i) {
    if (i > 0) t += '+';
    t += to_string(cfg_.directions[i]);
  }
  t += ']';
  return t;
}

template <typename T>
const std::vector<ScanOrder>& MambaLayer<T>::orders(const GridShape& grid) {
  if (!grid_ || *grid_ != grid) {
    orders_.clear();
    for (ScanKind k : cfg_.directions) orders_.push_back(ScanOrder::make(k, grid, cfg_.order_seed));
    grid_ = grid;
  }
  return orders_;
}

template <typename T>
Tensor<T> MambaLayer<T>::depthwise(const Tensor<T>& xin) const {
  const VolumeShape vs = cache_.shape;
  const Index e = cfg_.inner();
  if (cfg_.dwconv == DWConvKind::Conv1D && !cfg_.multiscale) {
    // The ForwardW sequence is the volume's memory order.
    return dwconv1d(xin, w_.conv_w[0].value, w_.conv_b[0].value);
  }
  const Tensor<T> vol = xin.reshaped({e, vs.d, vs.h, vs.w});
  if (!cfg_.multiscale) return dwconv3d(vol, w_.conv_w[0].value, w_.conv_b[0].value).reshaped({e, vs.voxels()});
  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < w_.conv_w.size(); ++i) parts.push_back(dwconv3d(vol, w_.conv_w[i].value, w_.conv_b[i].value));
  return concat_channels<T>(parts).reshaped({cfg_.ssm_width(), vs.voxels()});
}

template <typename T>
Tensor<T> MambaLayer<T>::forward(const Tensor<T>& x) {
  const VolumeShape vs = VolumeShape::of(x.shape());
  if (vs.c != cfg_.channels) {
    throw ShapeError("mamba layer: expected " + std::to_string(cfg_.channels) + " channels, got " + to_string(vs));
  }
  const Index v = vs.voxels(), s = cfg_.ssm_width();
  Cache& c = cache_;
  c = Cache{};
  c.shape = vs;
  c.x = x.reshaped({vs.c, v});
  c.u = layer_norm_cf(c.x, w_.norm_gain.value, w_.norm_shift.value, kNormEps);
  c.xin = linear_cf(c.u, w_.w_in.value, w_.b_in.value);
  if (cfg_.gated) c.z = linear_cf(c.u, w_.w_z.value, w_.b_z.value);
  c.conv = depthwise(c.xin);
  c.act = silu(c.conv);

  const auto& ords = orders(GridShape::of(vs));
  const Tensor<T> act_vol = c.act.reshaped({s, vs.d, vs.h, vs.w});
  c.merged = Tensor<T>({s, v});
  c.scans.resize(ords.size());
  for (std::size_t i = 0; i < ords.size(); ++i) {
    const Tensor<T> y = selective_scan(flatten(act_vol, ords[i]), w_.ssm[i], cfg_.algorithm, cfg_.discretization,
                                       &c.scans[i]);
    accumulate(c.merged, unflatten(y, ords[i]).reshaped({s, v}));
  }
  c.gated = cfg_.gated ? hadamard(c.merged, silu(c.z)) : c.merged;
  Tensor<T> out = linear_cf(c.gated, w_.w_out.value, w_.b_out.value);
  accumulate(out, c.x);
  return out.reshaped(x.shape());
}

template <typename T>
Tensor<T> MambaLayer<T>::backward(const Tensor<T>& dy) {
  Cache& c = cache_;
  require_cached(c.x, type());
  const VolumeShape vs = c.shape;
  const Index v = vs.voxels(), s = cfg_.ssm_width(), e = cfg_.inner();
  if (dy.size() != vs.elements()) throw ShapeError("mamba layer: upstream gradient has wrong size");
  const Tensor<T> dy2 = dy.reshaped({vs.c, v});

  ConvGrads<T> go = linear_cf_backward(c.gated, w_.w_out.value, dy2, true);
  add_grad(w_.w_out, go.dw);
  add_grad(w_.b_out, go.db);

  Tensor<T> dmerged, dz;
  if (cfg_.gated) {
    dmerged = hadamard(go.dx, silu(c.z));
    dz = silu_backward(c.z, hadamard(go.dx, c.merged));
  } else {
    dmerged = std::move(go.dx);
  }

  const auto& ords = orders(GridShape::of(vs));
  const Tensor<T> dm_vol = dmerged.reshaped({s, vs.d, vs.h, vs.w});
  Tensor<T> dact({s, v});
  for (std::size_t i = 0; i < ords.size(); ++i) {
    SSMGrads<T> g = selective_scan_backward(flatten(dm_vol, ords[i]), c.scans[i], w_.ssm[i]);
    accumulate_ssm(w_.ssm_grad[i], g.params);
    accumulate(dact, unflatten(g.dx, ords[i]).reshaped({s, v}));
  }
  const Tensor<T> dconv = silu_backward(c.conv, dact);

  Tensor<T> dxin;
  if (cfg_.dwconv == DWConvKind::Conv1D && !cfg_.multiscale) {
    ConvGrads<T> g = dwconv1d_backward(c.xin, w_.conv_w[0].value, dconv, true);
    add_grad(w_.conv_w[0], g.dw);
    add_grad(w_.conv_b[0], g.db);
    dxin = std::move(g.dx);
  } else {
    const Tensor<T> vol = c.xin.reshaped({e, vs.d, vs.h, vs.w});
    const std::vector<Index> counts(w_.conv_w.size(), e);
    const std::vector<Tensor<T>> parts = split_channels(dconv.reshaped({s, vs.d, vs.h, vs.w}), counts);
    dxin = Tensor<T>({e, vs.d, vs.h, vs.w});
    for (std::size_t i = 0; i < parts.size(); ++i) {
      ConvGrads<T> g = dwconv3d_backward(vol, w_.conv_w[i].value, parts[i], true);
      add_grad(w_.conv_w[i], g.dw);
      add_grad(w_.conv_b[i], g.db);
      accumulate(dxin, g.dx);
    }
    dxin = dxin.reshaped({e, v});
  }

  ConvGrads<T> gin = linear_cf_backward(c.u, w_.w_in.value, dxin, true);
  add_grad(w_.w_in, gin.dw);
  add_grad(w_.b_in, gin.db);
  Tensor<T> du = std::move(gin.dx);
  if (cfg_.gated) {
    ConvGrads<T> gz = linear_cf_backward(c.u, w_.w_z.value, dz, true);
    add_grad(w_.w_z, gz.dw);
    add_grad(w_.b_z, gz.db);
    accumulate(du, gz.dx);
  }
  AffineGrads<T> ln = layer_norm_cf_backward(c.x, w_.norm_gain.value, du, kNormEps);
  add_grad(w_.norm_gain, ln.dgain);
  add_grad(w_.norm_shift, ln.dshift);
  accumulate(ln.dx, dy2);
  return ln.dx.reshaped(dy.shape());
}

template <typename T>
void MambaLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  add_param(out, prefix, "norm.gain", w_.norm_gain);
  add_param(out, prefix, "norm.shift", w_.norm_shift);
  add_param(out, prefix, "in_proj.weight", w_.w_in);
  add_param(out, prefix, "in_proj.bias", w_.b_in);
  add_param(out, prefix, "gate_proj.weight", w_.w_z);
  add_param(out, prefix, "gate_proj.bias", w_.b_z);
  for (std::size_t i = 0; i < w_.conv_w.size(); ++i) {
    const std::string n = "dwconv" + std::to_string(i);
    add_param(out, prefix, n + ".weight", w_.conv_w[i]);
    add_param(out, prefix, n + ".bias", w_.conv_b[i]);
  }
  for (std::size_t i = 0; i < w_.ssm.size(); ++i) {
    const std::string n = join_name(prefix, "ssm" + std::to_string(i));
    SSMParams<T>& p = w_.ssm[i];
    SSMParams<T>& g = w_.ssm_grad[i];
    out.push_back({n + ".a_log", &p.a_log, &g.a_log});
    out.push_back({n + ".d_skip", &p.d_skip, &g.d_skip});
    out.push_back({n + ".w_delta", &p.w_delta, &g.w_delta});
    out.push_back({n + ".b_delta", &p.b_delta, &g.b_delta});
    out.push_back({n + ".w_b", &p.w_b, &g.w_b});
    out.push_back({n + ".w_c", &p.w_c, &g.w_c});
  }
  add_param(out, prefix, "out_proj.weight", w_.w_out);
  add_param(out, prefix, "out_proj.bias", w_.b_out);
}

template <typename T>
void MambaLayer<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  const std::uint64_t v = u64(in.voxels()), c = u64(cfg_.channels), e = u64(cfg_.inner()),
                      s = u64(cfg_.ssm_width()), n = u64(cfg_.state_dim), k = cfg_.directions.size();
  CostRow r{prefix, type(), in, in};
  r.params = u64(cfg_.parameter_count());
  std::uint64_t conv = 0;
  if (cfg_.multiscale) {
    for (Index kk : MambaLayerConfig::kMultiscaleKernels) conv += v * e * u64(kk * kk * kk);
  } else if (cfg_.dwconv == DWConvKind::Conv1D) {
    conv = v * e * u64(MambaLayerConfig::kConv1DKernel);
  } else {
    conv = v * e * 27;
  }
  const std::uint64_t per_dir = v * s * s + 2 * v * s * n + 3 * v * s * n + v * s;
  r.macs = v * c * e + (cfg_.gated ? v * c * s : 0) + conv + k * per_dir + v * s * c;
  r.elementwise = ew::kLayerNorm * v * c + ew::kActivation * v * s + k * ew::kActivation * v * s +
                  (k - 1) * ew::kAdd * v * s + (cfg_.gated ? (ew::kActivation + ew::kAdd) * v * s : 0) +
                  ew::kAdd * v * c;
  rows.push_back(std::move(r));
}

// ---------------------------------------------------------------------------
// Attention primitives

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Index heads,
                               std::vector<Tensor<T>>* probs) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || q.extent(1) != k.extent(1)) {
    throw ShapeError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                     to_string(v.shape()) + " are incompatible");
  }
  const Index c = q.extent(1);
  if (heads < 1 || c % heads != 0) throw ConfigError("attention: channels must be divisible by heads");
  const Index dh = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  Tensor<T> out(q.shape());
  if (probs != nullptr) probs->clear();
  for (Index h = 0; h < heads; ++h) {
    const Tensor<T> qh = take_cols(q, h * dh, dh), kh = take_cols(k, h * dh, dh), vh = take_cols(v, h * dh, dh);
    Tensor<T> p = softmax(scale(matmul_nt(qh, kh), sc));
    put_cols(out, h * dh, matmul(p, vh));
    if (probs != nullptr) probs->push_back(std::move(p));
  }
  return out;
}

template <typename T>
AttentionGrads<T> multi_head_attention_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                Index heads, const std::vector<Tensor<T>>& probs,
                                                const Tensor<T>& dy) {
  if (static_cast<Index>(probs.size()) != heads) throw StateError("attention backward: missing probabilities");
  const Index c = q.extent(1), dh = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  AttentionGrads<T> g{Tensor<T>(q.shape()), Tensor<T>(k.shape()), Tensor<T>(v.shape())};
  for (Index h = 0; h < heads; ++h) {
    const Tensor<T> qh = take_cols(q, h * dh, dh), kh = take_cols(k, h * dh, dh), vh = take_cols(v, h * dh, dh);
    const Tensor<T> doh = take_cols(dy, h * dh, dh);
    const Tensor<T>& p = probs[static_cast<std::size_t>(h)];
    put_cols(g.dv, h * dh, matmul_tn(p, doh));
    const Tensor<T> ds = scale(softmax_backward(p, matmul_nt(doh, vh)), sc);
    put_cols(g.dq, h * dh, matmul(ds, kh));
    put_cols(g.dk, h * dh, matmul_tn(ds, qh));
  }
  return g;
}

template <typename T>
Tensor<T> vanilla_attention(const Tensor<T>& x, const AttentionWeights<T>& w, Index heads) {
  const Tensor<T> q = linear(x, w.wq.value, w.bq.value);
  const Tensor<T> k = linear(x, w.wk.value, w.bk.value);
  const Tensor<T> v = linear(x, w.wv.value, w.bv.value);
  return linear(multi_head_attention(q, k, v, heads), w.wo.value, w.bo.value);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardWeights<T>& w) {
  return linear(silu(linear(x, w.w1.value, w.b1.value)), w.w2.value, w.b2.value);
}

// ---------------------------------------------------------------------------
// AttentionConfig

void AttentionConfig::validate() const {
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ConfigError("attention: channels (" + std::to_string(channels) + ") must be divisible by heads (" +
                      std::to_string(heads) + ")");
  }
  if (reduction < 1) throw ConfigError("attention: reduction ratio must be ≥ 1");
  if (ffn_expansion < 1) throw ConfigError("attention: FFN expansion must be ≥ 1");
}

GridShape AttentionConfig::reduced(const GridShape& g) const {
  if (reduction == 1) return g;
  if (g.d < reduction || g.h < reduction || g.w < reduction) {
    throw ShapeError("attention: grid " + std::to_string(g.d) + "x" + std::to_string(g.h) + "x" +
                     std::to_string(g.w) + " is smaller than reduction ratio " + std::to_string(reduction));
  }
  return {g.d / reduction, g.h / reduction, g.w / reduction};
}

std::uint64_t AttentionConfig::attention_entries(const GridShape& g) const {
  return u64(heads) * u64(g.voxels()) * u64(reduced(g).voxels());
}

Index AttentionConfig::parameter_count() const {
  const Index c = channels, f = ffn_expansion * channels;
  Index n = 4 * c + 4 * (c * c + c) + (c * f + f) + (f * c + c);
  if (reduction > 1) {
    n += 2 * c;
    if (reduction_kind == ReductionKind::StridedConv) n += c * c * reduction * reduction * reduction + c;
  }
  return n;
}

// ---------------------------------------------------------------------------
// TransformerLayer

template <typename T>
TransformerLayer<T>::TransformerLayer(const AttentionConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const Index c = cfg_.channels, f = cfg_.ffn_expansion * c, r = cfg_.reduction;
  n1g_ = Param<T>(Tensor<T>::filled({c}, T(1)));
  n1s_ = Param<T>(Tensor<T>({c}));
  n2g_ = Param<T>(Tensor<T>::filled({c}, T(1)));
  n2s_ = Param<T>(Tensor<T>({c}));
  if (r > 1) {
    if (cfg_.reduction_kind == ReductionKind::StridedConv) {
      sr_w_ = Param<T>(fan_in_uniform<T>({c, c, r, r, r}, c * r * r * r, rng));
      sr_b_ = Param<T>(Tensor<T>({c}));
    }
    srn_g_ = Param<T>(Tensor<T>::filled({c}, T(1)));
    srn_s_ = Param<T>(Tensor<T>({c}));
  }
  for (auto* p : {&attn_.wq, &attn_.wk, &attn_.wv, &attn_.wo}) *p = Param<T>(fan_in_uniform<T>({c, c}, c, rng));
  for (auto* p : {&attn_.bq, &attn_.bk, &attn_.bv, &attn_.bo}) *p = Param<T>(Tensor<T>({c}));
  ffn_.w1 = Param<T>(fan_in_uniform<T>({c, f}, c, rng));
  ffn_.b1 = Param<T>(Tensor<T>({f}));
  ffn_.w2 = Param<T>(fan_in_uniform<T>({f, c}, f, rng));
  ffn_.b2 = Param<T>(Tensor<T>({c}));
}

template <typename T>
std::string TransformerLayer<T>::type() const {
  return cfg_.reduction > 1 ? "sra_attention[R=" + std::to_string(cfg_.reduction) + ";H=" + std::to_string(cfg_.heads) + "]"
                            : "attention[H=" + std::to_string(cfg_.heads) + "]";
}

template <typename T>
void TransformerLayer<T>::check_memory(const VolumeShape& in, std::uint64_t cap) const {
  const std::uint64_t need = cfg_.attention_entries(GridShape::of(in));
  if (need > cap) {
    throw MemoryGuardError("attention at " + to_string(in) + " needs " + std::to_string(need) +
                               " attention entries, above the cap of " + std::to_string(cap),
                           need, cap);
  }
}

template <typename T>
Tensor<T> TransformerLayer<T>::forward(const Tensor<T>& x) {
  const VolumeShape vs = VolumeShape::of(x.shape());
  if (vs.c != cfg_.channels) {
    throw ShapeError("attention layer: expected " + std::to_string(cfg_.channels) + " channels, got " + to_string(vs));
  }
  check_memory(vs, cfg_.memory_cap);
  const Index r = cfg_.reduction;
  Cache& c = cache_;
  c = Cache{};
  c.shape = vs;
  c.t = channels_last(x);
  c.u = layer_norm(c.t, n1g_.value, n1s_.value, kNormEps);
  c.q = linear(c.u, attn_.wq.value, attn_.bq.value);
  if (r > 1) {
    const GridShape red = cfg_.reduced(GridShape::of(vs));
    c.red_in = channels_first(c.u, vs);
    Tensor<T> red_vol = cfg_.reduction_kind == ReductionKind::StridedConv
                            ? conv3d(c.red_in, ConvSpec::cubic(vs.c, vs.c, r, r, 0), sr_w_.value, sr_b_.value)
                            : avg_pool3d(c.red_in, r, VolumeShape{vs.c, red.d, red.h, red.w});
    c.red_out = channels_last(red_vol);
    c.kv_src = layer_norm(c.red_out, srn_g_.value, srn_s_.value, kNormEps);
  } else {
    c.kv_src = c.u;
  }
  c.k = linear(c.kv_src, attn_.wk.value, attn_.bk.value);
  c.v = linear(c.kv_src, attn_.wv.value, attn_.bv.value);
  last_extents_ = {c.q.extent(0), c.k.extent(0)};
  c.att = multi_head_attention(c.q, c.k, c.v, cfg_.heads, &c.probs);
  c.t1 = add(c.t, linear(c.att, attn_.wo.value, attn_.bo.value));
  c.u2 = layer_norm(c.t1, n2g_.value, n2s_.value, kNormEps);
  c.h_pre = linear(c.u2, ffn_.w1.value, ffn_.b1.value);
  c.h_act = silu(c.h_pre);
  const Tensor<T> t2 = add(c.t1, linear(c.h_act, ffn_.w2.value, ffn_.b2.value));
  return channels_first(t2, vs);
}

template <typename T>
Tensor<T> TransformerLayer<T>::backward(const Tensor<T>& dy) {
  Cache& c = cache_;
  require_cached(c.t, type());
  const VolumeShape vs = c.shape;
  const Index r = cfg_.reduction;
  Tensor<T> dt1 = channels_last(dy);

  ConvGrads<T> g2 = linear_backward(c.h_act, ffn_.w2.value, dt1, true);
  add_grad(ffn_.w2, g2.dw);
  add_grad(ffn_.b2, g2.db);
  ConvGrads<T> g1 = linear_backward(c.u2, ffn_.w1.value, silu_backward(c.h_pre, g2.dx), true);
  add_grad(ffn_.w1, g1.dw);
  add_grad(ffn_.b1, g1.db);
  AffineGrads<T> ln2 = layer_norm_backward(c.t1, n2g_.value, g1.dx, kNormEps);
  add_grad(n2g_, ln2.dgain);
  add_grad(n2s_, ln2.dshift);
  accumulate(dt1, ln2.dx);

  ConvGrads<T> go = linear_backward(c.att, attn_.wo.value, dt1, true);
  add_grad(attn_.wo, go.dw);
  add_grad(attn_.bo, go.db);
  AttentionGrads<T> ag = multi_head_attention_backward(c.q, c.k, c.v, cfg_.heads, c.probs, go.dx);
  ConvGrads<T> gq = linear_backward(c.u, attn_.wq.value, ag.dq, true);
  ConvGrads<T> gk = linear_backward(c.kv_src, attn_.wk.value, ag.dk, true);
  ConvGrads<T> gv = linear_backward(c.kv_src, attn_.wv.value, ag.dv, true);
  add_grad(attn_.wq, gq.dw);
  add_grad(attn_.bq, gq.db);
  add_grad(attn_.wk, gk.dw);
  add_grad(attn_.bk, gk.db);
  add_grad(attn_.wv, gv.dw);
  add_grad(attn_.bv, gv.db);
  Tensor<T> du = std::move(gq.dx);
  Tensor<T> dsrc = std::move(gk.dx);
  accumulate(dsrc, gv.dx);
  if (r > 1) {
    AffineGrads<T> lnr = layer_norm_backward(c.red_out, srn_g_.value, dsrc, kNormEps);
    add_grad(srn_g_, lnr.dgain);
    add_grad(srn_s_, lnr.dshift);
    const GridShape red = cfg_.reduced(GridShape::of(vs));
    const Tensor<T> dred = channels_first(lnr.dx, VolumeShape{vs.c, red.d, red.h, red.w});
    Tensor<T> dred_in;
    if (cfg_.reduction_kind == ReductionKind::StridedConv) {
      ConvGrads<T> gc = conv3d_backward(c.red_in, ConvSpec::cubic(vs.c, vs.c, r, r, 0), sr_w_.value, dred);
      add_grad(sr_w_, gc.dw);
      add_grad(sr_b_, gc.db);
      dred_in = std::move(gc.dx);
    } else {
      dred_in = avg_pool3d_backward(dred, r, vs);
    }
    accumulate(du, channels_last(dred_in));
  } else {
    accumulate(du, dsrc);
  }
  AffineGrads<T> ln1 = layer_norm_backward(c.t, n1g_.value, du, kNormEps);
  add_grad(n1g_, ln1.dgain);
  add_grad(n1s_, ln1.dshift);
  accumulate(dt1, ln1.dx);
  return channels_first(dt1, vs);
}

template <typename T>
void TransformerLayer<T>::collect(ParamList<T>& out, const std::string& prefix) {
  add_param(out, prefix, "norm1.gain", n1g_);
  add_param(out, prefix, "norm1.shift", n1s_);
  add_param(out, prefix, "reduce.weight", sr_w_);
  add_param(out, prefix, "reduce.bias", sr_b_);
  add_param(out, prefix, "reduce_norm.gain", srn_g_);
  add_param(out, prefix, "reduce_norm.shift", srn_s_);
  add_param(out, prefix, "q.weight", attn_.wq);
  add_param(out, prefix, "q.bias", attn_.bq);
  add_param(out, prefix, "k.weight", attn_.wk);
  add_param(out, prefix, "k.bias", attn_.bk);
  add_param(out, prefix, "v.weight", attn_.wv);
  add_param(out, prefix, "v.bias", attn_.bv);
  add_param(out, prefix, "o.weight", attn_.wo);
  add_param(out, prefix, "o.bias", attn_.bo);
  add_param(out, prefix, "norm2.gain", n2g_);
  add_param(out, prefix, "norm2.shift", n2s_);
  add_param(out, prefix, "ffn1.weight", ffn_.w1);
  add_param(out, prefix, "ffn1.bias", ffn_.b1);
  add_param(out, prefix, "ffn2.weight", ffn_.w2);
  add_param(out, prefix, "ffn2.bias", ffn_.b2);
}

template <typename T>
void TransformerLayer<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  const GridShape g = GridShape::of(in);
  const std::uint64_t l = u64(g.voxels()), m = u64(cfg_.reduced(g).voxels()), c = u64(cfg_.channels),
                      f = u64(cfg_.ffn_expansion * cfg_.channels), h = u64(cfg_.heads), r = u64(cfg_.reduction);
  CostRow row{prefix, type(), in, in};
  row.params = u64(cfg_.parameter_count());
  std::uint64_t macs = l * c * c + 2 * m * c * c + 2 * l * m * c + l * c * c + 2 * l * c * f;
  std::uint64_t elem = 2 * ew::kLayerNorm * l * c + (ew::kSoftmax + ew::kAdd) * h * l * m +
                       ew::kActivation * l * f + 2 * ew::kAdd * l * c;
  if (r > 1) {
    elem += ew::kLayerNorm * m * c;
    if (cfg_.reduction_kind == ReductionKind::StridedConv) {
      macs += m * c * c * r * r * r;
    } else {
      elem += ew::kAdd * m * c * r * r * r;
    }
  }
  row.macs = macs;
  row.elementwise = elem;
  row.attention_entries = h * l * m;
  rows.push_back(std::move(row));
}

// ---------------------------------------------------------------------------
// Factory and multi-scale blocks

template <typename T>
LayerPtr<T> make_seq_layer(const SeqLayerSpec& spec, Index channels, Rng& rng) {
  if (spec.kind == SeqKind::Mamba) {
    MambaLayerConfig cfg = spec.mamba;
    cfg.channels = channels;
    return std::make_unique<MambaLayer<T>>(cfg, rng);
  }
  AttentionConfig cfg = spec.attention;
  cfg.channels = channels;
  return std::make_unique<TransformerLayer<T>>(cfg, rng);
}

std::vector<Index> multiscale_kernels(MultiScaleKind kind) {
  switch (kind) {
    case MultiScaleKind::V1:
    case MultiScaleKind::V2: return {3, 7};
    case MultiScaleKind::V3: return {3, 5, 7};
  }
  return {};
}

template <typename T>
MultiScaleBlock<T>::MultiScaleBlock(MultiScaleKind kind, Index in_channels, Index out_channels, Index stride,
                                    const SeqLayerSpec& seq, Rng& rng)
    : kind_(kind), out_channels_(out_channels) {
  const std::vector<Index> ks = multiscale_kernels(kind);
  for (Index k : ks) convs_.push_back(make_conv_block<T>(in_channels, out_channels, k, stride, rng));
  if (kind == MultiScaleKind::V1) {
    for (std::size_t i = 0; i < ks.size(); ++i) seqs_.push_back(make_seq_layer<T>(seq, out_channels, rng));
  } else {
    const Index wide = out_channels * static_cast<Index>(ks.size());
    seqs_.push_back(make_seq_layer<T>(seq, wide, rng));
    proj_ = std::make_unique<Conv3dLayer<T>>(ConvSpec::cubic(wide, out_channels, 1), rng);
  }
}

template <typename T>
std::string MultiScaleBlock<T>::type() const {
  switch (kind_) {
    case MultiScaleKind::V1: return "msv1";
    case MultiScaleKind::V2: return "msv2";
    case MultiScaleKind::V3: return "msv3";
  }
  return "ms";
}

template <typename T>
VolumeShape MultiScaleBlock<T>::output_shape(const VolumeShape& in) const {
  return convs_.front()->output_shape(in);
}

template <typename T>
Tensor<T> MultiScaleBlock<T>::forward(const Tensor<T>& x) {
  if (kind_ == MultiScaleKind::V1) {
    Tensor<T> sum;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      Tensor<T> y = seqs_[i]->forward(convs_[i]->forward(x));
      if (sum.empty()) {
        sum = std::move(y);
      } else {
        accumulate(sum, y);
      }
    }
    return sum;
  }
  std::vector<Tensor<T>> parts;
  for (auto& c : convs_) parts.push_back(c->forward(x));
  return proj_->forward(seqs_[0]->forward(concat_channels<T>(parts)));
}

template <typename T>
Tensor<T> MultiScaleBlock<T>::backward(const Tensor<T>& dy) {
  Tensor<T> dx;
  auto add_dx = [&](Tensor<T> g) {
    if (dx.empty()) {
      dx = std::move(g);
    } else {
      accumulate(dx, g);
    }
  };
  if (kind_ == MultiScaleKind::V1) {
    for (std::size_t i = 0; i < convs_.size(); ++i) add_dx(convs_[i]->backward(seqs_[i]->backward(dy)));
    return dx;
  }
  const Tensor<T> dcat = seqs_[0]->backward(proj_->backward(dy));
  const std::vector<Index> counts(convs_.size(), out_channels_);
  std::vector<Tensor<T>> parts = split_channels(dcat, counts);
  for (std::size_t i = 0; i < convs_.size(); ++i) add_dx(convs_[i]->backward(parts[i]));
  return dx;
}

template <typename T>
void MultiScaleBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i]->collect(out, join_name(prefix, "path" + std::to_string(i)));
  if (kind_ == MultiScaleKind::V1) {
    for (std::size_t i = 0; i < seqs_.size(); ++i) seqs_[i]->collect(out, join_name(prefix, "seq" + std::to_string(i)));
  } else {
    seqs_[0]->collect(out, join_name(prefix, "seq"));
    proj_->collect(out, join_name(prefix, "proj"));
  }
}

template <typename T>
void MultiScaleBlock<T>::cost(const VolumeShape& in, const std::string& prefix, CostRows& rows) const {
  const VolumeShape mid = convs_.front()->output_shape(in);
  for (std::size_t i = 0; i < convs_.size(); ++i) convs_[i]->cost(in, join_name(prefix, "path" + std::to_string(i)), rows);
  if (kind_ == MultiScaleKind::V1) {
    for (std::size_t i = 0; i < seqs_.size(); ++i) seqs_[i]->cost(mid, join_name(prefix, "seq" + std::to_string(i)), rows);
    CostRow merge{join_name(prefix, "merge"), "sum", mid, mid};
    merge.elementwise = ew::kAdd * u64(mid.elements()) * (convs_.size() - 1);
    rows.push_back(std::move(merge));
  } else {
    VolumeShape wide = mid;
    wide.c = mid.c * static_cast<Index>(convs_.size());
    seqs_[0]->cost(wide, join_name(prefix, "seq"), rows);
    proj_->cost(wide, join_name(prefix, "proj"), rows);
  }
}

template <typename T>
void MultiScaleBlock<T>::check_memory(const VolumeShape& in, std::uint64_t cap) const {
  VolumeShape mid = convs_.front()->output_shape(in);
  if (kind_ != MultiScaleKind::V1) mid.c *= static_cast<Index>(convs_.size());
  for (const auto& s : seqs_) s->check_memory(mid, cap);
}

#define ULIKE_INSTANTIATE(T)                                                                           \
  template Tensor<T> multi_scan_merge(std::span<const Tensor<T>>);                                     \
  template Tensor<T> directional_ssm(const Tensor<T>&, std::span<const ScanOrder>,                     \
                                     std::span<const SSMParams<T>>, ScanAlgorithm, Discretization);    \
  template class MambaLayer<T>;                                                                        \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index, \
                                          std::vector<Tensor<T>>*);                                    \
  template AttentionGrads<T> multi_head_attention_backward(const Tensor<T>&, const Tensor<T>&,         \
                                                           const Tensor<T>&, Index,                    \
                                                           const std::vector<Tensor<T>>&,              \
                                                           const Tensor<T>&);                          \
  template Tensor<T> vanilla_attention(const Tensor<T>&, const AttentionWeights<T>&, Index);           \
  template Tensor<T> feed_forward(const Tensor<T>&, const FeedForwardWeights<T>&);                     \
  template class TransformerLayer<T>;                                                                  \
  template LayerPtr<T> make_seq_layer(const SeqLayerSpec&, Index, Rng&);                               \
  template class MultiScaleBlock<T>;

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

}  // namespace ulike
