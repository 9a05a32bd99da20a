#include "ulike/nn_ops.hpp"

#include <algorithm>
#include <cmath>

#include "ulike/instrument.hpp"

namespace ulike {

VolumeShape VolumeShape::of(const Extents& e) {
  if (e.size() != 4) throw ShapeError("expected a C×D×H×W volume, got " + to_string(e));
  return {e[0], e[1], e[2], e[3]};
}

std::string to_string(const VolumeShape& s) {
  return std::to_string(s.c) + "x" + std::to_string(s.d) + "x" + std::to_string(s.h) + "x" +
         std::to_string(s.w);
}

ConvSpec ConvSpec::cubic(Index in, Index out, Index k, Index s, Index p, Index groups) {
  ConvSpec spec;
  spec.in_channels = in;
  spec.out_channels = out;
  spec.kernel = Triple::cube(k);
  spec.stride = Triple::cube(s);
  spec.padding = Triple::cube(p);
  spec.groups = groups;
  return spec;
}

void ConvSpec::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("conv channels must be positive");
  if (groups < 1 || in_channels % groups != 0 || out_channels % groups != 0) {
    throw ConfigError("conv groups " + std::to_string(groups) + " must divide both " +
                      std::to_string(in_channels) + " and " + std::to_string(out_channels));
  }
  if (kernel.d < 1 || kernel.h < 1 || kernel.w < 1) throw ConfigError("conv kernel must be positive");
  if (stride.d < 1 || stride.h < 1 || stride.w < 1) throw ConfigError("conv stride must be positive");
  if (padding.d < 0 || padding.h < 0 || padding.w < 0) throw ConfigError("conv padding must be >= 0");
}

Extents ConvSpec::weight_shape() const {
  return {out_channels, in_channels / groups, kernel.d, kernel.h, kernel.w};
}

Extents ConvSpec::transposed_weight_shape() const {
  return {in_channels, out_channels / groups, kernel.d, kernel.h, kernel.w};
}

namespace {

Index conv_extent(Index in, Index k, Index s, Index p, const char* axis) {
  if (in + 2 * p < k) {
    throw ShapeError(std::string("conv kernel ") + std::to_string(k) + " larger than padded input " +
                     std::to_string(in + 2 * p) + " on axis " + axis);
  }
  return (in + 2 * p - k) / s + 1;
}

Index tconv_extent(Index in, Index k, Index s, Index p, const char* axis) {
  const Index out = (in - 1) * s - 2 * p + k;
  if (out < 1) {
    throw ShapeError(std::string("transposed conv output extent ") + std::to_string(out) +
                     " < 1 on axis " + axis);
  }
  return out;
}

}  // namespace

VolumeShape ConvSpec::output_shape(const VolumeShape& in) const {
  if (in.c != in_channels) {
    throw ShapeError("conv expects " + std::to_string(in_channels) + " input channels, got " +
                     std::to_string(in.c));
  }
  return {out_channels, conv_extent(in.d, kernel.d, stride.d, padding.d, "D"),
          conv_extent(in.h, kernel.h, stride.h, padding.h, "H"),
          conv_extent(in.w, kernel.w, stride.w, padding.w, "W")};
}

VolumeShape ConvSpec::transposed_output_shape(const VolumeShape& in) const {
  if (in.c != in_channels) {
    throw ShapeError("transposed conv expects " + std::to_string(in_channels) +
                     " input channels, got " + std::to_string(in.c));
  }
  return {out_channels, tconv_extent(in.d, kernel.d, stride.d, padding.d, "D"),
          tconv_extent(in.h, kernel.h, stride.h, padding.h, "H"),
          tconv_extent(in.w, kernel.w, stride.w, padding.w, "W")};
}

namespace {

// Shared correlation geometry. The "low" side is indexed by o, the "high"
// side by i = o·s − p + k. For conv3d the low side is the output; for
// tconv3d it is the input. Weights are laid out [low_ch][high_ch/groups][k].
struct Corr {
  Index low_c, high_c, groups;
  Triple k, s, p;
  VolumeShape low, high;
};

struct Range {
  Index lo, hi;
};

Range valid_range(Index low_n, Index high_n, Index s, Index p, Index k) {
  const Index num = p - k;
  Index lo = num <= 0 ? 0 : (num + s - 1) / s;
  const Index top = high_n - 1 + p - k;
  Index hi = top < 0 ? 0 : top / s + 1;
  hi = std::min(hi, low_n);
  return {lo, std::max(lo, hi)};
}

enum class CorrMode { LowFromHigh, HighFromLow, Weight };

template <typename T, CorrMode Mode>
void correlate(const Corr& g, const T* w, T* low, T* high, T* dw) {
  const Index low_g = g.low_c / g.groups;
  const Index high_g = g.high_c / g.groups;
  const Index kvol = g.k.volume();
  const Index LD = g.low.d, LH = g.low.h, LW = g.low.w;
  const Index HD = g.high.d, HH = g.high.h, HW = g.high.w;
  for (Index grp = 0; grp < g.groups; ++grp) {
    for (Index lc_l = 0; lc_l < low_g; ++lc_l) {
      const Index lc = grp * low_g + lc_l;
      for (Index hc_l = 0; hc_l < high_g; ++hc_l) {
        const Index hc = grp * high_g + hc_l;
        const Index wbase = (lc * high_g + hc_l) * kvol;
        for (Index kd = 0; kd < g.k.d; ++kd) {
          const Range rd = valid_range(LD, HD, g.s.d, g.p.d, kd);
          for (Index kh = 0; kh < g.k.h; ++kh) {
            const Range rh = valid_range(LH, HH, g.s.h, g.p.h, kh);
            for (Index kw = 0; kw < g.k.w; ++kw) {
              const Range rw = valid_range(LW, HW, g.s.w, g.p.w, kw);
              const Index widx = wbase + (kd * g.k.h + kh) * g.k.w + kw;
              const Index sw = g.s.w;
              const Index off = kw - g.p.w;
              T acc = 0;
              const T wv = Mode == CorrMode::Weight ? T(0) : w[widx];
              for (Index od = rd.lo; od < rd.hi; ++od) {
                const Index id = od * g.s.d - g.p.d + kd;
                for (Index oh = rh.lo; oh < rh.hi; ++oh) {
                  const Index ih = oh * g.s.h - g.p.h + kh;
                  T* lrow = low + ((lc * LD + od) * LH + oh) * LW;
                  T* hrow = high + ((hc * HD + id) * HH + ih) * HW;
                  if constexpr (Mode == CorrMode::LowFromHigh) {
                    if (sw == 1) {
                      for (Index ow = rw.lo; ow < rw.hi; ++ow) lrow[ow] += wv * hrow[ow + off];
                    } else {
                      for (Index ow = rw.lo; ow < rw.hi; ++ow) lrow[ow] += wv * hrow[ow * sw + off];
                    }
                  } else if constexpr (Mode == CorrMode::HighFromLow) {
                    if (sw == 1) {
                      for (Index ow = rw.lo; ow < rw.hi; ++ow) hrow[ow + off] += wv * lrow[ow];
                    } else {
                      for (Index ow = rw.lo; ow < rw.hi; ++ow) hrow[ow * sw + off] += wv * lrow[ow];
                    }
                  } else {
                    for (Index ow = rw.lo; ow < rw.hi; ++ow) acc += lrow[ow] * hrow[ow * sw + off];
                  }
                }
              }
              if constexpr (Mode == CorrMode::Weight) dw[widx] += acc;
            }
          }
        }
      }
    }
  }
  // Dense workload: every (low voxel, low channel, high channel in group,
  // kernel tap) pair, padded taps included.
  count_macs(static_cast<std::uint64_t>(g.low.voxels() * g.low_c * high_g * kvol));
}

template <typename T>
void check_weight(const Tensor<T>& w, const Extents& expected, const char* op) {
  if (w.shape() != expected) {
    throw ShapeError(std::string(op) + ": weight extents " + to_string(w.shape()) +
                     " do not match expected " + to_string(expected));
  }
}

template <typename T>
void check_bias(const Tensor<T>& b, bool has_bias, Index channels, const char* op) {
  if (!has_bias) {
    if (!b.empty()) throw ShapeError(std::string(op) + ": bias given but spec has bias disabled");
    return;
  }
  if (b.rank() != 1 || b.extent(0) != channels) {
    throw ShapeError(std::string(op) + ": bias extents " + to_string(b.shape()) + " expected [" +
                     std::to_string(channels) + "]");
  }
}

template <typename T>
Tensor<T> volume_with_bias(const VolumeShape& s, const Tensor<T>& bias) {
  Tensor<T> out(s.extents());
  if (!bias.empty()) {
    const Index v = s.voxels();
    for (Index c = 0; c < s.c; ++c) std::fill_n(out.raw() + c * v, v, bias[c]);
  }
  return out;
}

template <typename T>
Tensor<T> channel_sums(const Tensor<T>& dy) {
  const Index c = dy.extent(0);
  const Index v = dy.size() / c;
  Tensor<T> db({c});
  for (Index i = 0; i < c; ++i) {
    T s = 0;
    const T* p = dy.raw() + i * v;
    for (Index j = 0; j < v; ++j) s += p[j];
    db[i] = s;
  }
  return db;
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w, const Tensor<T>& bias) {
  spec.validate();
  const VolumeShape in = VolumeShape::of(x.shape());
  const VolumeShape out = spec.output_shape(in);
  check_weight(w, spec.weight_shape(), "conv3d");
  check_bias(bias, spec.bias, spec.out_channels, "conv3d");
  Tensor<T> y = volume_with_bias(out, bias);
  const Corr g{spec.out_channels, spec.in_channels, spec.groups, spec.kernel, spec.stride, spec.padding,
               out, in};
  correlate<T, CorrMode::LowFromHigh>(g, w.raw(), y.raw(), const_cast<T*>(x.raw()), nullptr);
  return y;
}

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w,
                             const Tensor<T>& dy) {
  spec.validate();
  const VolumeShape in = VolumeShape::of(x.shape());
  const VolumeShape out = spec.output_shape(in);
  check_weight(w, spec.weight_shape(), "conv3d_backward");
  if (dy.shape() != out.extents()) {
    throw ShapeError("conv3d_backward: upstream gradient " + to_string(dy.shape()) + " expected " +
                     to_string(out.extents()));
  }
  const Corr g{spec.out_channels, spec.in_channels, spec.groups, spec.kernel, spec.stride, spec.padding,
               out, in};
  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape()), {}};
  correlate<T, CorrMode::HighFromLow>(g, w.raw(), const_cast<T*>(dy.raw()), grads.dx.raw(), nullptr);
  correlate<T, CorrMode::Weight>(g, nullptr, const_cast<T*>(dy.raw()), const_cast<T*>(x.raw()),
                                 grads.dw.raw());
  if (spec.bias) grads.db = channel_sums(dy);
  return grads;
}

template <typename T>
Tensor<T> tconv3d(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w, const Tensor<T>& bias) {
  spec.validate();
  const VolumeShape in = VolumeShape::of(x.shape());
  const VolumeShape out = spec.transposed_output_shape(in);
  check_weight(w, spec.transposed_weight_shape(), "tconv3d");
  check_bias(bias, spec.bias, spec.out_channels, "tconv3d");
  Tensor<T> y = volume_with_bias(out, bias);
  const Corr g{spec.in_channels, spec.out_channels, spec.groups, spec.kernel, spec.stride, spec.padding,
               in, out};
  correlate<T, CorrMode::HighFromLow>(g, w.raw(), const_cast<T*>(x.raw()), y.raw(), nullptr);
  return y;
}

template <typename T>
ConvGrads<T> tconv3d_backward(const Tensor<T>& x, const ConvSpec& spec, const Tensor<T>& w,
                              const Tensor<T>& dy) {
  spec.validate();
  const VolumeShape in = VolumeShape::of(x.shape());
  const VolumeShape out = spec.transposed_output_shape(in);
  check_weight(w, spec.transposed_weight_shape(), "tconv3d_backward");
  if (dy.shape() != out.extents()) {
    throw ShapeError("tconv3d_backward: upstream gradient " + to_string(dy.shape()) + " expected " +
                     to_string(out.extents()));
  }
  const Corr g{spec.in_channels, spec.out_channels, spec.groups, spec.kernel, spec.stride, spec.padding,
               in, out};
  ConvGrads<T> grads{Tensor<T>(x.shape()), Tensor<T>(w.shape()), {}};
  correlate<T, CorrMode::LowFromHigh>(g, w.raw(), grads.dx.raw(), const_cast<T*>(dy.raw()), nullptr);
  correlate<T, CorrMode::Weight>(g, nullptr, const_cast<T*>(x.raw()), const_cast<T*>(dy.raw()),
                                 grads.dw.raw());
  if (spec.bias) grads.db = channel_sums(dy);
  return grads;
}

namespace {

template <typename T>
Index checked_left_pad(const Tensor<T>& x, const Tensor<T>& w, Index left_pad, const char* op) {
  if (x.rank() != 2) throw ShapeError(std::string(op) + ": expected C×L input, got " + to_string(x.shape()));
  if (w.rank() != 2 || w.extent(0) != x.extent(0)) {
    throw ShapeError(std::string(op) + ": weight " + to_string(w.shape()) + " expected [" +
                     std::to_string(x.extent(0)) + "xk]");
  }
  const Index k = w.extent(1);
  if (left_pad < 0) left_pad = k - 1;
  if (left_pad > k - 1) {
    throw ShapeError(std::string(op) + ": left padding " + std::to_string(left_pad) +
                     " exceeds kernel size − 1");
  }
  return left_pad;
}

}  // namespace

template <typename T>
Tensor<T> dwconv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Index left_pad) {
  left_pad = checked_left_pad(x, w, left_pad, "dwconv1d");
  const Index c = x.extent(0), l = x.extent(1), k = w.extent(1);
  check_bias(bias, !bias.empty(), c, "dwconv1d");
  Tensor<T> y({c, l});
  for (Index ch = 0; ch < c; ++ch) {
    const T* xs = x.raw() + ch * l;
    const T* ws = w.raw() + ch * k;
    T* ys = y.raw() + ch * l;
    const T b = bias.empty() ? T(0) : bias[ch];
    for (Index t = 0; t < l; ++t) {
      T s = b;
      for (Index j = 0; j < k; ++j) {
        const Index src = t - left_pad + j;
        if (src >= 0 && src < l) s += ws[j] * xs[src];
      }
      ys[t] = s;
    }
  }
  count_macs(static_cast<std::uint64_t>(c * l * k));
  return y;
}

template <typename T>
ConvGrads<T> dwconv1d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               bool has_bias, Index left_pad) {
  left_pad = checked_left_pad(x, w, left_pad, "dwconv1d_backward");
  require_same_shape(x, dy, "dwconv1d_backward");
  const Index c = x.extent(0), l = x.extent(1), k = w.extent(1);
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), {}};
  for (Index ch = 0; ch < c; ++ch) {
    const T* xs = x.raw() + ch * l;
    const T* ws = w.raw() + ch * k;
    const T* ds = dy.raw() + ch * l;
    T* dxs = g.dx.raw() + ch * l;
    T* dws = g.dw.raw() + ch * k;
    for (Index t = 0; t < l; ++t) {
      for (Index j = 0; j < k; ++j) {
        const Index src = t - left_pad + j;
        if (src >= 0 && src < l) {
          dxs[src] += ws[j] * ds[t];
          dws[j] += ds[t] * xs[src];
        }
      }
    }
  }
  if (has_bias) g.db = channel_sums(dy);
  return g;
}

namespace {

template <typename T>
Index checked_dw3_kernel(const Tensor<T>& x, const Tensor<T>& w, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected C×D×H×W input, got " + to_string(x.shape()));
  if (w.rank() != 4 || w.extent(0) != x.extent(0) || w.extent(1) != w.extent(2) ||
      w.extent(1) != w.extent(3)) {
    throw ShapeError(std::string(op) + ": weight " + to_string(w.shape()) + " expected [" +
                     std::to_string(x.extent(0)) + "xkxkxk]");
  }
  const Index k = w.extent(1);
  if (k % 2 == 0) {
    throw ShapeError(std::string(op) + ": kernel size " + std::to_string(k) +
                     " is even; symmetric padding cannot preserve the volume shape");
  }
  return k;
}

// Taps j in [lo, hi) such that 0 <= o − pad + j < n.
inline Range tap_range(Index o, Index pad, Index k, Index n) {
  return {std::max<Index>(0, pad - o), std::min<Index>(k, n + pad - o)};
}

}  // namespace

template <typename T>
Tensor<T> dwconv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  const Index k = checked_dw3_kernel(x, w, "dwconv3d");
  const VolumeShape s = VolumeShape::of(x.shape());
  check_bias(bias, !bias.empty(), s.c, "dwconv3d");
  const Index pad = (k - 1) / 2;
  Tensor<T> y(x.shape());
  const Index v = s.voxels();
  for (Index c = 0; c < s.c; ++c) {
    const T* xs = x.raw() + c * v;
    const T* ws = w.raw() + c * k * k * k;
    T* ys = y.raw() + c * v;
    const T b = bias.empty() ? T(0) : bias[c];
    for (Index od = 0; od < s.d; ++od) {
      const Range rd = tap_range(od, pad, k, s.d);
      for (Index oh = 0; oh < s.h; ++oh) {
        const Range rh = tap_range(oh, pad, k, s.h);
        for (Index ow = 0; ow < s.w; ++ow) {
          const Range rw = tap_range(ow, pad, k, s.w);
          T acc = b;
          for (Index jd = rd.lo; jd < rd.hi; ++jd) {
            for (Index jh = rh.lo; jh < rh.hi; ++jh) {
              const T* xrow = xs + ((od - pad + jd) * s.h + (oh - pad + jh)) * s.w;
              const T* wrow = ws + (jd * k + jh) * k;
              const Index off = ow - pad;
              for (Index jw = rw.lo; jw < rw.hi; ++jw) acc += wrow[jw] * xrow[jw + off];
            }
          }
          ys[(od * s.h + oh) * s.w + ow] = acc;
        }
      }
    }
  }
  count_macs(static_cast<std::uint64_t>(v * s.c * k * k * k));
  return y;
}

template <typename T>
ConvGrads<T> dwconv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               bool has_bias) {
  const Index k = checked_dw3_kernel(x, w, "dwconv3d_backward");
  require_same_shape(x, dy, "dwconv3d_backward");
  const VolumeShape s = VolumeShape::of(x.shape());
  const Index pad = (k - 1) / 2;
  const Index v = s.voxels();
  ConvGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), {}};
  for (Index c = 0; c < s.c; ++c) {
    const T* xs = x.raw() + c * v;
    const T* ws = w.raw() + c * k * k * k;
    const T* ds = dy.raw() + c * v;
    T* dxs = g.dx.raw() + c * v;
    T* dws = g.dw.raw() + c * k * k * k;
    for (Index od = 0; od < s.d; ++od) {
      const Range rd = tap_range(od, pad, k, s.d);
      for (Index oh = 0; oh < s.h; ++oh) {
        const Range rh = tap_range(oh, pad, k, s.h);
        for (Index ow = 0; ow < s.w; ++ow) {
          const Range rw = tap_range(ow, pad, k, s.w);
          const T go = ds[(od * s.h + oh) * s.w + ow];
          for (Index jd = rd.lo; jd < rd.hi; ++jd) {
            for (Index jh = rh.lo; jh < rh.hi; ++jh) {
              const Index base = ((od - pad + jd) * s.h + (oh - pad + jh)) * s.w;
              const Index off = ow - pad;
              T* dxrow = dxs + base;
              const T* wrow = ws + (jd * k + jh) * k;
              T* dwrow = dws + (jd * k + jh) * k;
              for (Index jw = rw.lo; jw < rw.hi; ++jw) {
                dxrow[jw + off] += wrow[jw] * go;
                dwrow[jw] += go * xs[base + jw + off];
              }
            }
          }
        }
      }
    }
  }
  if (has_bias) g.db = channel_sums(dy);
  return g;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.extent(1) != w.extent(0)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  Tensor<T> y = matmul(x, w);
  if (!bias.empty()) {
    check_bias(bias, true, w.extent(1), "linear");
    const Index n = w.extent(1);
    for (Index i = 0; i < x.extent(0); ++i) {
      T* row = y.raw() + i * n;
      for (Index j = 0; j < n; ++j) row[j] += bias[j];
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                             bool has_bias) {
  if (dy.rank() != 2 || dy.extent(0) != x.extent(0) || dy.extent(1) != w.extent(1)) {
    throw ShapeError("linear_backward: upstream gradient " + to_string(dy.shape()) + " mismatched");
  }
  ConvGrads<T> g{matmul_nt(dy, w), matmul_tn(x, dy), {}};
  if (has_bias) {
    const Index n = dy.extent(1);
    g.db = Tensor<T>({n});
    for (Index i = 0; i < dy.extent(0); ++i) {
      const T* row = dy.raw() + i * n;
      for (Index j = 0; j < n; ++j) g.db[j] += row[j];
    }
  }
  return g;
}

template <typename T>
Tensor<T> linear_cf(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() != 2 || w.rank() != 2 || x.extent(0) != w.extent(0)) {
    throw ShapeError("linear_cf: input " + to_string(x.shape()) + " incompatible with weight " +
                     to_string(w.shape()));
  }
  Tensor<T> y = matmul_tn(w, x);
  if (!bias.empty()) {
    check_bias(bias, true, w.extent(1), "linear_cf");
    const Index v = x.extent(1);
    for (Index c = 0; c < w.extent(1); ++c) {
      T* row = y.raw() + c * v;
      for (Index j = 0; j < v; ++j) row[j] += bias[c];
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> linear_cf_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                                bool has_bias) {
  if (dy.rank() != 2 || dy.extent(0) != w.extent(1) || dy.extent(1) != x.extent(1)) {
    throw ShapeError("linear_cf_backward: upstream gradient " + to_string(dy.shape()) + " mismatched");
  }
  ConvGrads<T> g{matmul(w, dy), matmul_nt(x, dy), {}};
  if (has_bias) g.db = channel_sums(dy);
  return g;
}

namespace {

template <typename T>
void check_norm_args(const Tensor<T>& gain, const Tensor<T>& shift, Index c, const char* op) {
  if (c == 0) throw ShapeError(std::string(op) + ": zero channels");
  if (gain.rank() != 1 || gain.extent(0) != c || shift.rank() != 1 || shift.extent(0) != c) {
    throw ShapeError(std::string(op) + ": gain/shift must have extent [" + std::to_string(c) + "]");
  }
}

}  // namespace

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, double eps) {
  if (x.rank() != 2) throw ShapeError("layer_norm: expected L×C, got " + to_string(x.shape()));
  const Index l = x.extent(0), c = x.extent(1);
  check_norm_args(gain, shift, c, "layer_norm");
  Tensor<T> y(x.shape());
  for (Index i = 0; i < l; ++i) {
    const T* row = x.raw() + i * c;
    T mean = 0;
    for (Index j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (Index j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    T* out = y.raw() + i * c;
    for (Index j = 0; j < c; ++j) out[j] = (row[j] - mean) * inv * gain[j] + shift[j];
  }
  return y;
}

template <typename T>
AffineGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy,
                                   double eps) {
  require_same_shape(x, dy, "layer_norm_backward");
  const Index l = x.extent(0), c = x.extent(1);
  AffineGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({c}), Tensor<T>({c})};
  std::vector<T> xhat(static_cast<std::size_t>(c)), dxhat(static_cast<std::size_t>(c));
  for (Index i = 0; i < l; ++i) {
    const T* row = x.raw() + i * c;
    const T* drow = dy.raw() + i * c;
    T mean = 0;
    for (Index j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<T>(c);
    T var = 0;
    for (Index j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    T m1 = 0, m2 = 0;
    for (Index j = 0; j < c; ++j) {
      const auto u = static_cast<std::size_t>(j);
      xhat[u] = (row[j] - mean) * inv;
      dxhat[u] = drow[j] * gain[j];
      m1 += dxhat[u];
      m2 += dxhat[u] * xhat[u];
      g.dgain[j] += drow[j] * xhat[u];
      g.dshift[j] += drow[j];
    }
    m1 /= static_cast<T>(c);
    m2 /= static_cast<T>(c);
    T* out = g.dx.raw() + i * c;
    for (Index j = 0; j < c; ++j) {
      const auto u = static_cast<std::size_t>(j);
      out[j] = inv * (dxhat[u] - m1 - xhat[u] * m2);
    }
  }
  return g;
}

namespace {

template <typename T>
struct CfStats {
  std::vector<T> mean, inv;
};

template <typename T>
CfStats<T> cf_stats(const Tensor<T>& x, double eps) {
  const Index c = x.extent(0);
  const Index v = x.size() / c;
  CfStats<T> st{std::vector<T>(static_cast<std::size_t>(v), T(0)),
                std::vector<T>(static_cast<std::size_t>(v), T(0))};
  for (Index ch = 0; ch < c; ++ch) {
    const T* p = x.raw() + ch * v;
    for (Index j = 0; j < v; ++j) st.mean[static_cast<std::size_t>(j)] += p[j];
  }
  for (T& m : st.mean) m /= static_cast<T>(c);
  for (Index ch = 0; ch < c; ++ch) {
    const T* p = x.raw() + ch * v;
    for (Index j = 0; j < v; ++j) {
      const T d = p[j] - st.mean[static_cast<std::size_t>(j)];
      st.inv[static_cast<std::size_t>(j)] += d * d;
    }
  }
  for (T& s : st.inv) s = T(1) / std::sqrt(s / static_cast<T>(c) + static_cast<T>(eps));
  return st;
}

}  // namespace

template <typename T>
Tensor<T> layer_norm_cf(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, double eps) {
  if (x.rank() < 2) throw ShapeError("layer_norm_cf: expected channel-first input, got " + to_string(x.shape()));
  const Index c = x.extent(0);
  check_norm_args(gain, shift, c, "layer_norm_cf");
  const Index v = x.size() / c;
  const CfStats<T> st = cf_stats(x, eps);
  Tensor<T> y(x.shape());
  for (Index ch = 0; ch < c; ++ch) {
    const T* p = x.raw() + ch * v;
    T* o = y.raw() + ch * v;
    const T gch = gain[ch], sch = shift[ch];
    for (Index j = 0; j < v; ++j) {
      const auto u = static_cast<std::size_t>(j);
      o[j] = (p[j] - st.mean[u]) * st.inv[u] * gch + sch;
    }
  }
  return y;
}

template <typename T>
AffineGrads<T> layer_norm_cf_backward(const Tensor<T>& x, const Tensor<T>& gain,
                                      const Tensor<T>& dy, double eps) {
  require_same_shape(x, dy, "layer_norm_cf_backward");
  const Index c = x.extent(0);
  const Index v = x.size() / c;
  const CfStats<T> st = cf_stats(x, eps);
  AffineGrads<T> g{Tensor<T>(x.shape()), Tensor<T>({c}), Tensor<T>({c})};
  std::vector<T> m1(static_cast<std::size_t>(v), T(0)), m2(static_cast<std::size_t>(v), T(0));
  for (Index ch = 0; ch < c; ++ch) {
    const T* p = x.raw() + ch * v;
    const T* d = dy.raw() + ch * v;
    T dg = 0, ds = 0;
    for (Index j = 0; j < v; ++j) {
      const auto u = static_cast<std::size_t>(j);
      const T xhat = (p[j] - st.mean[u]) * st.inv[u];
      const T dxhat = d[j] * gain[ch];
      m1[u] += dxhat;
      m2[u] += dxhat * xhat;
      dg += d[j] * xhat;
      ds += d[j];
    }
    g.dgain[ch] = dg;
    g.dshift[ch] = ds;
  }
  const T inv_c = T(1) / static_cast<T>(c);
  for (Index ch = 0; ch < c; ++ch) {
    const T* p = x.raw() + ch * v;
    const T* d = dy.raw() + ch * v;
    T* o = g.dx.raw() + ch * v;
    for (Index j = 0; j < v; ++j) {
      const auto u = static_cast<std::size_t>(j);
      const T xhat = (p[j] - st.mean[u]) * st.inv[u];
      o[j] = st.inv[u] * (d[j] * gain[ch] - m1[u] * inv_c - xhat * m2[u] * inv_c);
    }
  }
  return g;
}

template <typename T>
T sigmoid(T u) {
  if (u >= 0) return T(1) / (T(1) + std::exp(-u));
  const T e = std::exp(u);
  return e / (T(1) + e);
}

template <typename T>
T softplus(T u) {
  return std::max(u, T(0)) + std::log1p(std::exp(-std::abs(u)));
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid(x[i]);
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x, dy, "silu_backward");
  Tensor<T> dx(x.shape());
  for (Index i = 0; i < x.size(); ++i) {
    const T s = sigmoid(x[i]);
    dx[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
  return dx;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (Index i = 0; i < x.size(); ++i) y[i] = softplus(x[i]);
  return y;
}

template <typename T>
Tensor<T> softplus_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  require_same_shape(x, dy, "softplus_backward");
  Tensor<T> dx(x.shape());
  for (Index i = 0; i < x.size(); ++i) dx[i] = dy[i] * sigmoid(x[i]);
  return dx;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) throw ShapeError("softmax: rank-0 input");
  const Index n = x.extent(x.rank() - 1);
  const Index rows = x.size() / n;
  Tensor<T> y(x.shape());
  for (Index r = 0; r < rows; ++r) {
    const T* in = x.raw() + r * n;
    T* out = y.raw() + r * n;
    T m = in[0];
    for (Index j = 1; j < n; ++j) m = std::max(m, in[j]);
    T s = 0;
    for (Index j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - m);
      s += out[j];
    }
    for (Index j = 0; j < n; ++j) out[j] /= s;
  }
  return y;
}

template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy) {
  require_same_shape(y, dy, "softmax_backward");
  const Index n = y.extent(y.rank() - 1);
  const Index rows = y.size() / n;
  Tensor<T> dx(y.shape());
  for (Index r = 0; r < rows; ++r) {
    const T* py = y.raw() + r * n;
    const T* pd = dy.raw() + r * n;
    T s = 0;
    for (Index j = 0; j < n; ++j) s += pd[j] * py[j];
    T* o = dx.raw() + r * n;
    for (Index j = 0; j < n; ++j) o[j] = py[j] * (pd[j] - s);
  }
  return dx;
}

template <typename T>
Tensor<T> channels_last(const Tensor<T>& x) {
  const Index c = x.extent(0);
  return transpose2d(x.reshaped({c, x.size() / c}));
}

template <typename T>
Tensor<T> channels_first(const Tensor<T>& x, const VolumeShape& shape) {
  if (x.rank() != 2 || x.extent(0) != shape.voxels() || x.extent(1) != shape.c) {
    throw ShapeError("channels_first: sequence " + to_string(x.shape()) + " does not match volume " +
                     to_string(shape));
  }
  return transpose2d(x).reshaped(shape.extents());
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Extents shape = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    Extents tail(p.shape().begin() + 1, p.shape().end());
    Extents tail0(shape.begin() + 1, shape.end());
    if (tail != tail0) throw ShapeError("concat_channels: trailing extents differ");
    total += p.extent(0);
  }
  shape[0] = total;
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(element_count(shape)));
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& x, std::span<const Index> counts) {
  Index total = 0;
  for (Index c : counts) total += c;
  if (total != x.extent(0)) {
    throw ShapeError("split_channels: counts sum to " + std::to_string(total) + " but tensor has " +
                     std::to_string(x.extent(0)) + " channels");
  }
  const Index per = x.size() / x.extent(0);
  std::vector<Tensor<T>> out;
  Index offset = 0;
  for (Index c : counts) {
    Extents shape = x.shape();
    shape[0] = c;
    std::vector<T> data(x.raw() + offset * per, x.raw() + (offset + c) * per);
    out.emplace_back(std::move(shape), std::move(data));
    offset += c;
  }
  return out;
}

#define ULIKE_INSTANTIATE(T)                                                                        \
  template Tensor<T> conv3d(const Tensor<T>&, const ConvSpec&, const Tensor<T>&, const Tensor<T>&);  \
  template ConvGrads<T> conv3d_backward(const Tensor<T>&, const ConvSpec&, const Tensor<T>&,        \
                                        const Tensor<T>&);                                          \
  template Tensor<T> tconv3d(const Tensor<T>&, const ConvSpec&, const Tensor<T>&, const Tensor<T>&); \
  template ConvGrads<T> tconv3d_backward(const Tensor<T>&, const ConvSpec&, const Tensor<T>&,       \
                                         const Tensor<T>&);                                         \
  template Tensor<T> dwconv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Index);        \
  template ConvGrads<T> dwconv1d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          bool, Index);                                             \
  template Tensor<T> dwconv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template ConvGrads<T> dwconv3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                          bool);                                                    \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template ConvGrads<T> linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool); \
  template Tensor<T> linear_cf(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template ConvGrads<T> linear_cf_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                           bool);                                                   \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);     \
  template AffineGrads<T> layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                              double);                                              \
  template Tensor<T> layer_norm_cf(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);  \
  template AffineGrads<T> layer_norm_cf_backward(const Tensor<T>&, const Tensor<T>&,               \
                                                 const Tensor<T>&, double);                         \
  template T sigmoid(T);                                                                            \
  template T softplus(T);                                                                           \
  template Tensor<T> silu(const Tensor<T>&);                                                        \
  template Tensor<T> silu_backward(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> softplus(const Tensor<T>&);                                                    \
  template Tensor<T> softplus_backward(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> softmax(const Tensor<T>&);                                                     \
  template Tensor<T> softmax_backward(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> channels_last(const Tensor<T>&);                                               \
  template Tensor<T> channels_first(const Tensor<T>&, const VolumeShape&);                          \
  template Tensor<T> concat_channels(std::span<const Tensor<T>>);                                   \
  template std::vector<Tensor<T>> split_channels(const Tensor<T>&, std::span<const Index>);

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

}  // namespace ulike
