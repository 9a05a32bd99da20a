#include "ulike/optim.hpp"

#include <cmath>

#include "ulike/error.hpp"

namespace ulike {

void AdamWConfig::validate() const {
  if (!(lr >= 0)) throw ConfigError("optimizer: lr must be ≥ 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("optimizer: betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("optimizer: eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("optimizer: weight decay must be ≥ 0");
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  for (const auto& p : params_) {
    m_.emplace_back(p.value->shape());
    v_.emplace_back(p.value->shape());
  }
}

template <typename T>
void AdamW<T>::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const T decay = static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
  const T lr = static_cast<T>(cfg_.lr);
  const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
  const T c1 = static_cast<T>(1.0 / bc1), c2 = static_cast<T>(1.0 / bc2), eps = static_cast<T>(cfg_.eps);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    T* p = params_[i].value->raw();
    const T* g = params_[i].grad->raw();
    T* m = m_[i].raw();
    T* v = v_[i].raw();
    const Index n = params_[i].value->size();
    for (Index j = 0; j < n; ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T update = (m[j] * c1) / (std::sqrt(v[j] * c2) + eps);
      p[j] = p[j] * decay - lr * update;
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace ulike
