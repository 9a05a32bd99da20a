#include "ulike/ssm.hpp"

#include <algorithm>
#include <cmath>

#include "ulike/instrument.hpp"
#include "ulike/nn_ops.hpp"

namespace ulike {

template <typename T>
Tensor<T> SSMParams<T>::a() const {
  Tensor<T> out(a_log.shape());
  for (Index i = 0; i < a_log.size(); ++i) out[i] = -std::exp(a_log[i]);
  return out;
}

template <typename T>
void SSMParams<T>::validate() const {
  if (a_log.rank() != 2) throw ShapeError("SSMParams: a_log must be S×N, got " + to_string(a_log.shape()));
  const Index s = channels(), n = state_dim();
  auto expect = [](const Tensor<T>& t, const Extents& e, const char* name) {
    if (t.shape() != e) {
      throw ShapeError(std::string("SSMParams: ") + name + " has extents " + to_string(t.shape()) +
                       ", expected " + to_string(e));
    }
  };
  expect(d_skip, {s}, "d_skip");
  expect(w_delta, {s, s}, "w_delta");
  expect(b_delta, {s}, "b_delta");
  expect(w_b, {s, n}, "w_b");
  expect(w_c, {s, n}, "w_c");
}

template <typename T>
SSMParams<T> SSMParams<T>::zeros(Index channels, Index state_dim) {
  if (channels < 1 || state_dim < 1) throw ConfigError("SSM channels and state dimension must be >= 1");
  return {Tensor<T>({channels, state_dim}), Tensor<T>({channels}), Tensor<T>({channels, channels}),
          Tensor<T>({channels}), Tensor<T>({channels, state_dim}), Tensor<T>({channels, state_dim})};
}

template <typename T>
SSMParams<T> SSMParams<T>::init(Index channels, Index state_dim, Rng& rng) {
  SSMParams p = zeros(channels, state_dim);
  for (Index c = 0; c < channels; ++c) {
    for (Index n = 0; n < state_dim; ++n) p.a_log.at({c, n}) = static_cast<T>(std::log(double(n + 1)));
    p.d_skip[c] = T(1);
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.b_delta[c] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  for (T& v : p.w_delta.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  for (T& v : p.w_b.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  for (T& v : p.w_c.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return p;
}

namespace {

template <typename T>
void require_positive(const Tensor<T>& delta) {
  // NaN passes through so the caller's non-finite diagnostic can name its source.
  for (T v : delta.data()) {
    if (v <= T(0)) throw std::domain_error("discretize: step size delta must be > 0");
  }
}

// (exp(δA) − 1)/A, with the A → 0 limit δ.
template <typename T>
inline T zoh_factor(T delta, T a, T a_bar) {
  if (std::abs(a) < T(1e-12)) return delta;
  return (a_bar - T(1)) / a;
}

template <typename T>
void check_scan_inputs(const ScanInputs<T>& in) {
  if (in.x.rank() != 2) throw ShapeError("scan: x must be L×S, got " + to_string(in.x.shape()));
  const Index l = in.x.extent(0), s = in.x.extent(1);
  if (in.a.rank() != 2 || in.a.extent(0) != s) {
    throw ShapeError("scan: A must be S×N with S = " + std::to_string(s));
  }
  const Index n = in.a.extent(1);
  if (in.delta.shape() != Extents{l, s}) throw ShapeError("scan: delta must match x");
  if (in.b.shape() != Extents{l, n} || in.c.shape() != Extents{l, n}) {
    throw ShapeError("scan: B and C must be L×N = " + to_string(Extents{l, n}));
  }
  if (in.d.shape() != Extents{s}) throw ShapeError("scan: D must have extent [S]");
  require_positive(in.delta);
}

}  // namespace

template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b_seq,
                          Discretization mode) {
  if (delta.rank() != 2 || a.rank() != 2 || b_seq.rank() != 3) {
    throw ShapeError("discretize: expected delta L×C, A C×N, B L×C×N");
  }
  const Index l = delta.extent(0), c = delta.extent(1), n = a.extent(1);
  if (a.extent(0) != c || b_seq.shape() != Extents{l, c, n}) {
    throw ShapeError("discretize: extents disagree: delta " + to_string(delta.shape()) + ", A " +
                     to_string(a.shape()) + ", B " + to_string(b_seq.shape()));
  }
  require_positive(delta);
  Discretized<T> out{Tensor<T>({l, c, n}), Tensor<T>({l, c, n})};
  for (Index t = 0; t < l; ++t) {
    for (Index ch = 0; ch < c; ++ch) {
      const T dt = delta[t * c + ch];
      for (Index s = 0; s < n; ++s) {
        const Index i = (t * c + ch) * n + s;
        const T av = a[ch * n + s];
        const T abar = std::exp(dt * av);
        out.a_bar[i] = abar;
        out.b_bar[i] = mode == Discretization::EulerB ? dt * b_seq[i]
                                                      : zoh_factor(dt, av, abar) * b_seq[i];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> scan_core_seq(const ScanInputs<T>& in, Discretization mode) {
  check_scan_inputs(in);
  const Index l = in.x.extent(0), s = in.x.extent(1), n = in.a.extent(1);
  Tensor<T> y({l, s});
  std::vector<T> h(static_cast<std::size_t>(s * n), T(0));
  const T* A = in.a.raw();
  for (Index t = 0; t < l; ++t) {
    const T* bt = in.b.raw() + t * n;
    const T* ct = in.c.raw() + t * n;
    for (Index ch = 0; ch < s; ++ch) {
      const T xt = in.x[t * s + ch];
      const T dt = in.delta[t * s + ch];
      T* hc = h.data() + ch * n;
      const T* ac = A + ch * n;
      T acc = 0;
      for (Index k = 0; k < n; ++k) {
        const T abar = std::exp(dt * ac[k]);
        const T bbar = mode == Discretization::EulerB ? dt * bt[k] : zoh_factor(dt, ac[k], abar) * bt[k];
        hc[k] = abar * hc[k] + bbar * xt;
        acc += ct[k] * hc[k];
      }
      y[t * s + ch] = acc + in.d[ch] * xt;
    }
  }
  // Three MACs per (t, channel, state): discretization, state update, readout;
  // plus the skip term.
  count_macs(static_cast<std::uint64_t>(3 * l * s * n + l * s));
  return y;
}

namespace {

Index next_pow2(Index v) {
  Index p = 1;
  while (p < v) p <<= 1;
  return p;
}

// Inclusive scan of one lane in place; returns the number of compositions.
template <typename T>
std::uint64_t blelloch_inclusive(std::vector<ScanElement<T>>& e, Index len, std::vector<ScanElement<T>>& elems) {
  const Index p = static_cast<Index>(e.size());
  std::uint64_t combines = 0;
  for (Index stride = 1; stride < p; stride <<= 1) {
    for (Index i = 2 * stride - 1; i < p; i += 2 * stride) {
      e[static_cast<std::size_t>(i)] = compose(e[static_cast<std::size_t>(i - stride)], e[static_cast<std::size_t>(i)]);
      ++combines;
    }
  }
  e[static_cast<std::size_t>(p - 1)] = ScanElement<T>::identity();
  for (Index stride = p >> 1; stride >= 1; stride >>= 1) {
    for (Index i = 2 * stride - 1; i < p; i += 2 * stride) {
      const auto li = static_cast<std::size_t>(i - stride);
      const auto ri = static_cast<std::size_t>(i);
      const ScanElement<T> left_sum = e[li];
      e[li] = e[ri];
      e[ri] = compose(e[ri], left_sum);
      ++combines;
    }
  }
  // Exclusive prefix followed by the element itself.
  for (Index t = 0; t < len; ++t) {
    const auto u = static_cast<std::size_t>(t);
    e[u] = compose(e[u], elems[u]);
    ++combines;
  }
  return combines;
}

}  // namespace

template <typename T>
Tensor<T> scan_core_par(const ScanInputs<T>& in, Discretization mode, ScanWork* work) {
  check_scan_inputs(in);
  const Index l = in.x.extent(0), s = in.x.extent(1), n = in.a.extent(1);
  const Index p = next_pow2(l);
  Tensor<T> y({l, s});
  std::vector<ScanElement<T>> elems(static_cast<std::size_t>(l));
  std::vector<ScanElement<T>> tree(static_cast<std::size_t>(p));
  std::uint64_t combines = 0;
  for (Index ch = 0; ch < s; ++ch) {
    for (Index k = 0; k < n; ++k) {
      const T av = in.a[ch * n + k];
      for (Index t = 0; t < l; ++t) {
        const T dt = in.delta[t * s + ch];
        const T abar = std::exp(dt * av);
        const T bt = in.b[t * n + k];
        const T bbar = mode == Discretization::EulerB ? dt * bt : zoh_factor(dt, av, abar) * bt;
        elems[static_cast<std::size_t>(t)] = {abar, bbar * in.x[t * s + ch]};
      }
      std::copy(elems.begin(), elems.end(), tree.begin());
      std::fill(tree.begin() + l, tree.end(), ScanElement<T>::identity());
      combines += blelloch_inclusive(tree, l, elems);
      for (Index t = 0; t < l; ++t) y[t * s + ch] += in.c[t * n + k] * tree[static_cast<std::size_t>(t)].b;
    }
  }
  for (Index t = 0; t < l; ++t)
    for (Index ch = 0; ch < s; ++ch) y[t * s + ch] += in.d[ch] * in.x[t * s + ch];
  if (work != nullptr) work->combines += combines;
  count_macs(static_cast<std::uint64_t>(3 * l * s * n + l * s));
  return y;
}

template <typename T>
ScanCoreGrads<T> scan_core_backward(const ScanInputs<T>& in, const Tensor<T>& dy, Discretization mode,
                                    Index checkpoint_interval) {
  check_scan_inputs(in);
  const Index l = in.x.extent(0), s = in.x.extent(1), n = in.a.extent(1);
  if (dy.shape() != in.x.shape()) {
    throw ShapeError("scan backward: upstream gradient " + to_string(dy.shape()) + " expected " +
                     to_string(in.x.shape()));
  }
  const Index seg = checkpoint_interval > 0
                        ? checkpoint_interval
                        : std::max<Index>(1, static_cast<Index>(std::ceil(std::sqrt(double(l)))));
  const Index nseg = (l + seg - 1) / seg;
  const Index sn = s * n;
  const T* A = in.a.raw();
  const bool euler = mode == Discretization::EulerB;

  auto step = [&](Index t, T* h) {
    const T* bt = in.b.raw() + t * n;
    for (Index ch = 0; ch < s; ++ch) {
      const T xt = in.x[t * s + ch];
      const T dt = in.delta[t * s + ch];
      for (Index k = 0; k < n; ++k) {
        const T av = A[ch * n + k];
        const T abar = std::exp(dt * av);
        const T bbar = euler ? dt * bt[k] : zoh_factor(dt, av, abar) * bt[k];
        h[ch * n + k] = abar * h[ch * n + k] + bbar * xt;
      }
    }
  };

  // checkpoints[m] holds the state entering segment m.
  std::vector<T> checkpoints(static_cast<std::size_t>(nseg * sn), T(0));
  {
    std::vector<T> h(static_cast<std::size_t>(sn), T(0));
    for (Index m = 0; m < nseg; ++m) {
      std::copy(h.begin(), h.end(), checkpoints.begin() + m * sn);
      const Index end = std::min(l, (m + 1) * seg);
      for (Index t = m * seg; t < end; ++t) step(t, h.data());
    }
  }

  ScanCoreGrads<T> g{Tensor<T>(in.x.shape()), Tensor<T>(in.delta.shape()), Tensor<T>(in.a.shape()),
                     Tensor<T>(in.b.shape()), Tensor<T>(in.c.shape()), Tensor<T>(in.d.shape())};
  std::vector<T> gh(static_cast<std::size_t>(sn), T(0));  // adjoint carried from t+1: Ā_{t+1} ⊙ dL/dh_{t+1}
  std::vector<T> states(static_cast<std::size_t>((seg + 1) * sn));

  for (Index m = nseg - 1; m >= 0; --m) {
    const Index start = m * seg;
    const Index end = std::min(l, start + seg);
    std::copy_n(checkpoints.begin() + m * sn, sn, states.begin());
    for (Index t = start; t < end; ++t) {
      std::copy_n(states.begin() + (t - start) * sn, sn, states.begin() + (t - start + 1) * sn);
      step(t, states.data() + (t - start + 1) * sn);
    }
    for (Index t = end - 1; t >= start; --t) {
      const T* h_prev = states.data() + (t - start) * sn;
      const T* h_cur = states.data() + (t - start + 1) * sn;
      const T* bt = in.b.raw() + t * n;
      const T* ct = in.c.raw() + t * n;
      T* dbt = g.db.raw() + t * n;
      T* dct = g.dc.raw() + t * n;
      for (Index ch = 0; ch < s; ++ch) {
        const T xt = in.x[t * s + ch];
        const T dt = in.delta[t * s + ch];
        const T dyt = dy[t * s + ch];
        T dx_acc = dyt * in.d[ch];
        T ddelta_acc = 0;
        g.dd[ch] += dyt * xt;
        for (Index k = 0; k < n; ++k) {
          const Index i = ch * n + k;
          const T av = A[i];
          const T abar = std::exp(dt * av);
          const T ght = gh[static_cast<std::size_t>(i)] + ct[k] * dyt;  // dL/dh_t
          dct[k] += dyt * h_cur[i];
          const T da_bar = ght * h_prev[i];
          ddelta_acc += da_bar * abar * av;
          g.da[i] += da_bar * abar * dt;
          const T dbbar = ght * xt;
          if (euler) {
            dx_acc += ght * dt * bt[k];
            ddelta_acc += dbbar * bt[k];
            dbt[k] += dbbar * dt;
          } else {
            const T f = zoh_factor(dt, av, abar);
            dx_acc += ght * f * bt[k];
            ddelta_acc += dbbar * bt[k] * abar;
            if (std::abs(av) >= T(1e-12)) g.da[i] += dbbar * bt[k] * (dt * abar - f) / av;
            dbt[k] += dbbar * f;
          }
          gh[static_cast<std::size_t>(i)] = ght * abar;
        }
        g.dx[t * s + ch] = dx_acc;
        g.ddelta[t * s + ch] = ddelta_acc;
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SSMParams<T>& params, ScanAlgorithm algorithm,
                         Discretization mode, SelectiveScanCache<T>* cache, ScanWork* work) {
  params.validate();
  if (x.rank() != 2 || x.extent(1) != params.channels()) {
    throw ShapeError("selective_scan: input " + to_string(x.shape()) + " does not match " +
                     std::to_string(params.channels()) + " SSM channels");
  }
  Tensor<T> delta_pre = linear(x, params.w_delta, params.b_delta);
  Tensor<T> delta = softplus(delta_pre);
  Tensor<T> b = linear(x, params.w_b, Tensor<T>{});
  Tensor<T> c = linear(x, params.w_c, Tensor<T>{});
  const Tensor<T> a = params.a();
  const ScanInputs<T> in{x, delta, a, b, c, params.d_skip};
  Tensor<T> y = algorithm == ScanAlgorithm::Sequential ? scan_core_seq(in, mode) : scan_core_par(in, mode, work);
  if (cache != nullptr) {
    *cache = SelectiveScanCache<T>{x, std::move(delta_pre), std::move(delta), std::move(b), std::move(c), mode};
  }
  return y;
}

template <typename T>
SSMGrads<T> selective_scan_backward(const Tensor<T>& dy, const SelectiveScanCache<T>& cache,
                                    const SSMParams<T>& params) {
  if (!cache.valid()) throw StateError("selective_scan_backward: no saved forward activations");
  const Tensor<T> a = params.a();
  const ScanInputs<T> in{cache.x, cache.delta, a, cache.b, cache.c, params.d_skip};
  ScanCoreGrads<T> core = scan_core_backward(in, dy, cache.mode);

  SSMGrads<T> out;
  out.params = SSMParams<T>::zeros(params.channels(), params.state_dim());
  out.dx = std::move(core.dx);
  out.params.d_skip = std::move(core.dd);
  // A = −exp(a_log) ⇒ dA/da_log = A.
  for (Index i = 0; i < a.size(); ++i) out.params.a_log[i] = core.da[i] * a[i];

  const Tensor<T> ddelta_pre = softplus_backward(cache.delta_pre, core.ddelta);
  ConvGrads<T> gd = linear_backward(cache.x, params.w_delta, ddelta_pre, true);
  ConvGrads<T> gb = linear_backward(cache.x, params.w_b, core.db, false);
  ConvGrads<T> gc = linear_backward(cache.x, params.w_c, core.dc, false);
  accumulate(out.dx, gd.dx);
  accumulate(out.dx, gb.dx);
  accumulate(out.dx, gc.dx);
  out.params.w_delta = std::move(gd.dw);
  out.params.b_delta = std::move(gd.db);
  out.params.w_b = std::move(gb.dw);
  out.params.w_c = std::move(gc.dw);
  return out;
}

#define ULIKE_INSTANTIATE(T)                                                                         \
  template struct SSMParams<T>;                                                                      \
  template Discretized<T> discretize(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                     Discretization);                                                \
  template Tensor<T> scan_core_seq(const ScanInputs<T>&, Discretization);                            \
  template Tensor<T> scan_core_par(const ScanInputs<T>&, Discretization, ScanWork*);                 \
  template ScanCoreGrads<T> scan_core_backward(const ScanInputs<T>&, const Tensor<T>&,              \
                                               Discretization, Index);                               \
  template Tensor<T> selective_scan(const Tensor<T>&, const SSMParams<T>&, ScanAlgorithm,           \
                                    Discretization, SelectiveScanCache<T>*, ScanWork*);              \
  template SSMGrads<T> selective_scan_backward(const Tensor<T>&, const SelectiveScanCache<T>&,      \
                                               const SSMParams<T>&);

ULIKE_INSTANTIATE(float)
ULIKE_INSTANTIATE(double)

}  // namespace ulike
