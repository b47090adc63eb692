#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "rflow/error.hpp"
#include "rflow/gmm.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

enum class DiffusionKind { vp, ve };

inline const char* to_string(DiffusionKind k) { return k == DiffusionKind::vp ? "VP" : "VE"; }

/// VP signal coefficient alpha(t) = exp(-(1/2) int_0^t (19.9 s + 0.1) ds).
inline double vp_alpha(double t) { return std::exp(-(19.9 / 4.0) * t * t - 0.05 * t); }

/// Noise variance 1 - alpha(t)^2 of the VP kernel, without cancellation near t = 0.
inline double vp_noise_variance(double t) { return -std::expm1(-2.0 * ((19.9 / 4.0) * t * t + 0.05 * t)); }

/// Positive root of (19.9/4) t^2 + 0.05 t + ln y = 0, i.e. alpha^{-1}(y) for y in (0, 1].
inline double vp_alpha_inverse(double y) {
  if (!(y > 0.0 && y <= 1.0)) throw DomainError("vp_alpha_inverse: y must lie in (0, 1]");
  return (-0.05 + std::sqrt(0.0025 - 19.9 * std::log(y))) / 9.95;
}

struct TimeScale {
  double time;   // time fed to the source model
  double scale;  // factor applied to z_t before feeding it
};

/// Source-model time and input scale whose posterior matches the rectified-flow
/// kernel N((1-t) x, t^2 I) at time t.
///   VE: t' = t / (1-t),  s = 1 / (1-t)
///   VP: t' = alpha^{-1}((1-t) / sqrt((1-t)^2 + t^2)),  s = alpha(t') / (1-t)
inline TimeScale convert_time_scale(DiffusionKind kind, double t) {
  if (!(t > 0.0 && t < 1.0)) throw DomainError("convert_time_scale: t must lie in (0, 1)");
  const double u = 1.0 - t;
  if (kind == DiffusionKind::ve) return {t / u, 1.0 / u};
  const double t_vp = (-0.05 + std::sqrt(0.0025 - 19.9 * std::log(u / std::hypot(u, t)))) / 9.95;
  return {t_vp, vp_alpha(t_vp) / u};
}

/// (x_t, source time) -> E[x | x_t] under the source perturbation kernel.
using Denoiser = std::function<Tensor(const Tensor&, double)>;

/// A diffusion denoiser re-expressed as a rectified-flow posterior-mean predictor.
struct DiffusionConversion {
  DiffusionKind kind;
  Denoiser denoiser;
};

inline Tensor converted_posterior_mean(const DiffusionConversion& conv, const Tensor& z_t, double t) {
  const TimeScale ts = convert_time_scale(conv.kind, t);
  return conv.denoiser(ts.scale * z_t, ts.time);
}

/// Exact denoiser for GMM data under the VE kernel N(x, sigma^2 I), sigma = source time.
inline Denoiser ve_gmm_denoiser(GmmSpec spec) {
  return [spec = std::move(spec)](const Tensor& x_t, double sigma) {
    if (!(sigma > 0.0)) throw DomainError("VE denoiser: sigma must be positive");
    return gmm_posterior_mean_kernel(spec, x_t, 1.0, sigma);
  };
}

/// Exact denoiser for GMM data under the VP kernel N(alpha(t) x, (1 - alpha(t)^2) I).
inline Denoiser vp_gmm_denoiser(GmmSpec spec) {
  return [spec = std::move(spec)](const Tensor& x_t, double t) {
    if (!(t > 0.0)) throw DomainError("VP denoiser: t must be positive");
    return gmm_posterior_mean_kernel(spec, x_t, vp_alpha(t), std::sqrt(vp_noise_variance(t)));
  };
}

}  // namespace rflow
