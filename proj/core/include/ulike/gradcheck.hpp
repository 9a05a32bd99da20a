#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "ulike/tensor.hpp"

namespace ulike {

/// A differentiable function of some 64-bit tensors, with its adjoint.
/// backward(dy) returns one gradient per entry of `vars`, evaluated at the
/// current values.
struct GradProbe {
  std::string component;
  std::vector<std::string> names;
  std::vector<Tensor<double>*> vars;
  std::function<Tensor<double>()> forward;
  std::function<std::vector<Tensor<double>>(const Tensor<double>& dy)> backward;
  double tolerance = 1e-4;
  /// When > 0, this many coordinates are sampled across all groups instead
  /// of `samples_per_group` from each.
  Index total_samples = 0;
  std::shared_ptr<void> owner;  // keeps captured state alive
};

struct GradCheckGroup {
  std::string name;
  Index checked = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::string component;
  double tolerance = 0.0;
  std::vector<GradCheckGroup> groups;

  double max_error() const;
  bool pass() const { return max_error() <= tolerance; }
};

struct GradCheckOptions {
  double step = 1e-3;
  Index samples_per_group = 8;
  std::uint64_t seed = 0;
  /// Denominator floor of the relative error |a − n| / max(|a|, |n|, floor).
  double floor = 1e-6;
  /// Flips the sign of the first group's analytic gradient.
  bool inject_bug = false;
};

/// Central differences of ⟨r, f(x)⟩ for a random direction r, compared
/// against backward(r) on sampled coordinates. With dₕ = Σᵢ rᵢ (f₊ᵢ − f₋ᵢ) / (x₊ − x₋)
/// over the representable step, the numeric derivative is the fourth-order
/// combination (4·dₕ − d₂ₕ) / 3, exact for linear maps.
GradCheckReport run_grad_check(GradProbe& probe, const GradCheckOptions& opts = {});

/// Names accepted by grad_check, in suite order.
std::vector<std::string> gradcheck_components();
/// Builds the named probe (ConfigError for unknown or empty names).
GradProbe make_probe(std::string_view component, std::uint64_t seed = 0);
GradCheckReport grad_check(std::string_view component, const GradCheckOptions& opts = {});

}  // namespace ulike
