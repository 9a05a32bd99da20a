#pragma once

#include <cstdint>

#include "ulike/rng.hpp"
#include "ulike/tensor.hpp"

namespace ulike {

/// How the continuous (A, B) pair is turned into per-step (Ā, B̄).
/// Ā = exp(ΔA) in both; B̄ = Δ·B (EulerB) or (ΔA)⁻¹(exp(ΔA) − 1)·ΔB (ZeroOrderHold).
enum class Discretization { EulerB, ZeroOrderHold };

/// Per-direction selective state-space parameters over S channels with
/// state dimension N. The state matrix is diagonal per channel:
/// A = −exp(a_log) is strictly negative.
template <typename T>
struct SSMParams {
  Tensor<T> a_log;    // S×N
  Tensor<T> d_skip;   // S
  Tensor<T> w_delta;  // S×S, pre-softplus step size projection
  Tensor<T> b_delta;  // S
  Tensor<T> w_b;      // S×N, input projection producing B_t
  Tensor<T> w_c;      // S×N, input projection producing C_t

  Index channels() const { return a_log.extent(0); }
  Index state_dim() const { return a_log.extent(1); }
  Tensor<T> a() const;
  void validate() const;

  static Index parameter_count(Index channels, Index state_dim) {
    return channels * state_dim * 3 + channels * channels + 2 * channels;
  }

  /// A_log[c, n] = log(n + 1); D = 1; softplus(b_delta) log-uniform in
  /// [1e-3, 1e-1]; projections fan-in uniform.
  static SSMParams init(Index channels, Index state_dim, Rng& rng);
  static SSMParams zeros(Index channels, Index state_dim);
};

template <typename T>
struct Discretized {
  Tensor<T> a_bar;  // L×C×N
  Tensor<T> b_bar;  // L×C×N
};

/// delta: L×C (strictly positive), a: C×N, b_seq: L×C×N.
template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a, const Tensor<T>& b_seq,
                          Discretization mode = Discretization::EulerB);

/// Element of the linear recurrence h ← a·h + b; composition applies the
/// left operand first.
template <typename T>
struct ScanElement {
  T a = T(1);
  T b = T(0);

  friend constexpr ScanElement compose(const ScanElement& first, const ScanElement& second) {
    return {first.a * second.a, second.a * first.b + second.b};
  }
  static constexpr ScanElement identity() { return {T(1), T(0)}; }
};

/// Counts ScanElement compositions performed by the parallel scan.
struct ScanWork {
  std::uint64_t combines = 0;
};

/// Projected inputs of the scan core (already through the projections).
template <typename T>
struct ScanInputs {
  const Tensor<T>& x;      // L×S
  const Tensor<T>& delta;  // L×S, > 0
  const Tensor<T>& a;      // S×N, < 0
  const Tensor<T>& b;      // L×N
  const Tensor<T>& c;      // L×N
  const Tensor<T>& d;      // S
};

/// h_t = Ā_t ⊙ h_{t−1} + B̄_t x_t, h_0 = 0; y_t = ⟨C_t, h_t⟩ + D ⊙ x_t.
/// Linear in L.
template <typename T>
Tensor<T> scan_core_seq(const ScanInputs<T>& in, Discretization mode = Discretization::EulerB);

/// Same outputs through a work-efficient up-sweep/down-sweep over
/// ScanElements, one lane per (channel, state) pair, padded to the next
/// power of two with identity elements.
template <typename T>
Tensor<T> scan_core_par(const ScanInputs<T>& in, Discretization mode = Discretization::EulerB,
                        ScanWork* work = nullptr);

template <typename T>
struct ScanCoreGrads {
  Tensor<T> dx, ddelta, da, db, dc, dd;
};

/// Reverse-time adjoint of the scan core. States are recomputed from
/// checkpoints taken every `checkpoint_interval` steps (0 → ⌈√L⌉).
template <typename T>
ScanCoreGrads<T> scan_core_backward(const ScanInputs<T>& in, const Tensor<T>& dy,
                                    Discretization mode = Discretization::EulerB,
                                    Index checkpoint_interval = 0);

// ---------------------------------------------------------------------------
// Full selective scan: projections then scan core.

enum class ScanAlgorithm { Sequential, Parallel };

/// Activations retained by the forward pass for the adjoint.
template <typename T>
struct SelectiveScanCache {
  Tensor<T> x;           // L×S
  Tensor<T> delta_pre;   // L×S
  Tensor<T> delta;       // L×S
  Tensor<T> b;           // L×N
  Tensor<T> c;           // L×N
  Discretization mode = Discretization::EulerB;

  bool valid() const { return !x.empty(); }
};

template <typename T>
struct SSMGrads {
  Tensor<T> dx;
  SSMParams<T> params;  // gradient for each parameter tensor
};

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SSMParams<T>& params,
                         ScanAlgorithm algorithm = ScanAlgorithm::Sequential,
                         Discretization mode = Discretization::EulerB,
                         SelectiveScanCache<T>* cache = nullptr, ScanWork* work = nullptr);

template <typename T>
Tensor<T> selective_scan_seq(const Tensor<T>& x, const SSMParams<T>& params,
                             Discretization mode = Discretization::EulerB) {
  return selective_scan(x, params, ScanAlgorithm::Sequential, mode);
}

template <typename T>
Tensor<T> selective_scan_par(const Tensor<T>& x, const SSMParams<T>& params,
                             Discretization mode = Discretization::EulerB, ScanWork* work = nullptr) {
  return selective_scan(x, params, ScanAlgorithm::Parallel, mode, static_cast<SelectiveScanCache<T>*>(nullptr), work);
}

/// Throws StateError when `cache` holds no forward activations.
template <typename T>
SSMGrads<T> selective_scan_backward(const Tensor<T>& dy, const SelectiveScanCache<T>& cache,
                                    const SSMParams<T>& params);

}  // namespace ulike
