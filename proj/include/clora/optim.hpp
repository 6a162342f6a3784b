#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "clora/autodiff.hpp"
#include "clora/errors.hpp"

namespace clora {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Decoupled-weight-decay Adam. Moments are kept per registered parameter; a
/// parameter that is not trainable is never written, even if registered.
template <std::floating_point T>
class AdamW {
 public:
  AdamW(std::vector<Parameter<T>*> params, AdamWConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter<T>* p : params_) {
      m_.emplace_back(p->value.shape(), T{0});
      v_.emplace_back(p->value.shape(), T{0});
    }
  }

  const AdamWConfig& config() const noexcept { return cfg_; }
  std::int64_t steps() const noexcept { return t_; }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

  /// One update at learning rate `lr`. Consumes the gradients (has_grad is
  /// cleared). Throws NumericError, leaving every parameter untouched, if any
  /// gradient is non-finite.
  void step(double lr) {
    if (!(lr > 0.0)) throw DomainError("AdamW: learning rate must be positive, got " + std::to_string(lr));
    for (Parameter<T>* p : params_) {
      if (!p->trainable) continue;
      if (p->has_grad && p->grad.shape() != p->value.shape()) {
        throw ShapeError("AdamW: gradient shape of '" + p->name + "' does not match its value");
      }
      if (p->has_grad && !p->grad.all_finite()) {
        throw NumericError("AdamW: non-finite gradient in '" + p->name + "' at step " + std::to_string(t_ + 1));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(cfg_.eps);
    const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Parameter<T>& p = *params_[i];
      if (!p.trainable) continue;
      T* w = p.value.ptr();
      T* m = m_[i].ptr();
      T* v = v_[i].ptr();
      const T* g = p.has_grad ? p.grad.ptr() : nullptr;
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const T gj = g ? g[j] : T{0};
        m[j] = b1 * m[j] + (T(1) - b1) * gj;
        v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
        w[j] *= decay;
        w[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
      }
      p.zero_grad();
    }
  }

 private:
  std::vector<Parameter<T>*> params_;
  AdamWConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  std::int64_t t_ = 0;
};

/// Cosine annealing from base_lr at step 0 to exactly 0 at total_steps, no warmup.
inline double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps < 1) throw DomainError("cosine_lr: total_steps must be >= 1");
  if (step < 0 || step > total_steps) {
    throw DomainError("cosine_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(total_steps) + "]");
  }
  if (step == total_steps) return 0.0;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace clora
