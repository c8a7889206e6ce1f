#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "maskfill/nn/params.hpp"

namespace maskfill::nn {

/// Linear warmup followed by cosine decay to zero.
inline double cosine_lr(double base_lr, std::int64_t iter, std::int64_t total, double warmup_fraction = 0.05) {
  if (total <= 0) return base_lr;
  const auto warmup = static_cast<std::int64_t>(std::ceil(warmup_fraction * double(total)));
  if (iter < warmup) return base_lr * double(iter + 1) / double(warmup);
  const double span = double(std::max<std::int64_t>(total - warmup, 1));
  const double t = std::min(1.0, double(iter - warmup) / span);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adaptive-moment gradient descent with decoupled weight decay.
template <typename T>
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  Adam() = default;
  explicit Adam(const ParamStore<T>& store, Options opts = {}) : opts_(opts) {
    for (const auto& p : store) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  void step(ParamStore<T>& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, double(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& p = store[i];
      if (!p.trainable) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t k = 0; k < p.value.size(); ++k) {
        const double g = double(p.grad[k]);
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g;
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g * g;
        const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts_.eps);
        double w = double(p.value[k]);
        if (opts_.weight_decay > 0.0) w -= lr * opts_.weight_decay * w;
        p.value[k] = static_cast<T>(w - lr * update);
      }
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  Options opts_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace maskfill::nn
