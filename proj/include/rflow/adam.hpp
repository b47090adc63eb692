#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "rflow/error.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Learning rate ramps linearly from 0 over this many steps (0 disables).
  std::uint64_t warmup_steps = 0;
  double ema_decay = 0.9999;
  /// After warmup the rate follows a half cosine down to zero at this step (0 disables).
  std::uint64_t decay_steps = 0;
};

/// Adam moments plus an exponential moving average of the parameters.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::vector<Tensor> ema;

  static AdamState init(const std::vector<Tensor>& params, AdamConfig config) {
    if (config.ema_decay < 0.0 || config.ema_decay >= 1.0) {
      throw ShapeError("ema decay must lie in [0, 1)");
    }
    AdamState s;
    s.config = config;
    for (const Tensor& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    s.ema = params;
    return s;
  }

  double effective_learning_rate() const {
    double lr = config.learning_rate;
    if (config.warmup_steps > 0 && step < config.warmup_steps) {
      return lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
    }
    if (config.decay_steps > config.warmup_steps) {
      const double span = static_cast<double>(config.decay_steps - config.warmup_steps);
      const double u = std::min(1.0, static_cast<double>(step - config.warmup_steps) / span);
      lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * u));
    }
    return lr;
  }
};

/// One bias-corrected Adam update of `params` in place, followed by the EMA
/// update ema <- decay * ema + (1 - decay) * params.
inline void adam_step(AdamState& state, std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
  if (params.size() != grads.size() || params.size() != state.m.size()) {
    throw ShapeError("adam_step: parameter/gradient count mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i], grads[i], "adam_step");
    require_same_shape(params[i], state.m[i], "adam_step state");
  }
  ++state.step;
  const AdamConfig& c = state.config;
  const double lr = state.effective_learning_rate();
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    auto e = state.ema[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
      v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + c.eps);
      e[k] = c.ema_decay * e[k] + (1.0 - c.ema_decay) * p[k];
    }
  }
}

}  // namespace rflow
