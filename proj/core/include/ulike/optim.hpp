#pragma once

#include <cstdint>
#include <vector>

#include "ulike/layers.hpp"

namespace ulike {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  void validate() const;
};

/// Adam with decoupled weight decay: p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε).
template <typename T>
class AdamW {
 public:
  AdamW(ParamList<T> params, AdamWConfig cfg);

  /// One update from the gradients currently held in the parameter list.
  void step();
  std::uint64_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  ParamList<T> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace ulike
