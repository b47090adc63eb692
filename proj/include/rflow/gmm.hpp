#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "rflow/error.hpp"
#include "rflow/rng.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

/// Mixture of isotropic Gaussians sum_k pi_k N(mu_k, sigma_k^2 I).
struct GmmSpec {
  std::vector<double> weights;
  Tensor means;  // [K, d]
  std::vector<double> variances;

  std::size_t components() const noexcept { return weights.size(); }
  std::size_t dim() const noexcept { return means.cols(); }

  void validate() const {
    if (weights.empty()) throw ShapeError("gmm: no components");
    if (means.rank() != 2 || means.rows() != weights.size() || variances.size() != weights.size()) {
      throw ShapeError("gmm: weights, means and variances must have one entry per component");
    }
    double total = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw ShapeError("gmm: weights must be nonnegative");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ShapeError("gmm: weights must sum to 1");
    for (double v : variances) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ShapeError("gmm: variances must be finite and nonnegative");
    }
  }

  double mean_coordinate(std::size_t j) const {
    double m = 0.0;
    for (std::size_t k = 0; k < components(); ++k) m += weights[k] * means.at(k, j);
    return m;
  }

  /// E[x] as a rank-1 tensor.
  Tensor mean() const {
    std::vector<double> m(dim());
    for (std::size_t j = 0; j < dim(); ++j) m[j] = mean_coordinate(j);
    return Tensor::vector(std::move(m));
  }

  /// Row i is drawn from stream (seed, first_index + i).
  Tensor sample(std::size_t n, std::uint64_t seed, std::uint64_t first_index = 0) const {
    validate();
    Tensor out({n, dim()});
    for (std::size_t i = 0; i < n; ++i) {
      CounterRng rng(seed, first_index + i);
      double u = rng.uniform();
      std::size_t k = 0;
      while (k + 1 < components() && u >= weights[k]) u -= weights[k++];
      const double sd = std::sqrt(variances[k]);
      for (std::size_t j = 0; j < dim(); ++j) out.at(i, j) = means.at(k, j) + sd * rng.normal();
    }
    return out;
  }

  static GmmSpec standard_normal(std::size_t d) {
    return GmmSpec{{1.0}, Tensor({1, d}, 0.0), {1.0}};
  }

  static GmmSpec isotropic(const Tensor& mean, double variance) {
    return GmmSpec{{1.0}, Tensor({1, mean.size()}, mean.storage()), {variance}};
  }
};

/// Posterior mean E[x | x_t] for x ~ GMM under the kernel x_t ~ N(scale * x, noise_sd^2 I).
/// Per component the posterior is Gaussian with mean
///   mu_k + scale s_k^2 / (scale^2 s_k^2 + noise_sd^2) (x_t - scale mu_k)
/// and responsibility proportional to pi_k N(x_t; scale mu_k, (scale^2 s_k^2 + noise_sd^2) I).
inline Tensor gmm_posterior_mean_kernel(const GmmSpec& spec, const Tensor& x_t, double scale, double noise_sd) {
  if (x_t.last_dim() != spec.dim()) {
    throw ShapeError("gmm posterior: input dimension " + std::to_string(x_t.last_dim()) +
                     " does not match mixture dimension " + std::to_string(spec.dim()));
  }
  const std::size_t K = spec.components(), d = spec.dim();
  std::vector<double> var(K), gain(K), log_norm(K);
  for (std::size_t k = 0; k < K; ++k) {
    var[k] = scale * scale * spec.variances[k] + noise_sd * noise_sd;
    if (!(var[k] > 0.0)) throw DomainError("gmm posterior: degenerate marginal variance");
    gain[k] = scale * spec.variances[k] / var[k];
    log_norm[k] = std::log(spec.weights[k]) - 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * var[k]);
  }

  Tensor out(x_t.shape());
  std::vector<double> logw(K);
  for (std::size_t i = 0; i < x_t.rows(); ++i) {
    auto xr = x_t.row(i);
    double lmax = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) {
      double r2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = xr[j] - scale * spec.means.at(k, j);
        r2 += r * r;
      }
      logw[k] = log_norm[k] - 0.5 * r2 / var[k];
      lmax = std::max(lmax, logw[k]);
    }
    double wsum = 0.0;
    for (double& lw : logw) wsum += (lw = std::exp(lw - lmax));
    auto o = out.row(i);
    for (std::size_t k = 0; k < K; ++k) {
      const double w = logw[k] / wsum;
      if (w == 0.0) continue;
      for (std::size_t j = 0; j < d; ++j) {
        const double mu = spec.means.at(k, j);
        o[j] += w * (mu + gain[k] * (xr[j] - scale * mu));
      }
    }
  }
  return out;
}

/// E[x | x_t = z_t] under the rectified-flow kernel N((1-t) x, t^2 I).
inline Tensor gmm_posterior_mean(const GmmSpec& spec, const Tensor& x_t, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("gmm posterior: t must lie in (0, 1]");
  return gmm_posterior_mean_kernel(spec, x_t, 1.0 - t, t);
}

/// Velocity of the exact rectified flow for GMM data: (z_t - E[x | x_t = z_t]) / t.
inline Tensor analytic_velocity(const GmmSpec& spec, const Tensor& z_t, double t) {
  Tensor v = gmm_posterior_mean(spec, z_t, t);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (z_t[i] - v[i]) / t;
  return v;
}

inline nlohmann::json gmm_to_json(const GmmSpec& spec) {
  nlohmann::json means = nlohmann::json::array();
  for (std::size_t k = 0; k < spec.components(); ++k) {
    auto r = spec.means.row(k);
    means.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return {{"weights", spec.weights}, {"means", means}, {"variances", spec.variances}};
}

inline GmmSpec gmm_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("gmm: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "weights" && key != "means" && key != "variances") throw ConfigError("gmm: unknown key '" + key + "'");
  }
  try {
    GmmSpec spec;
    spec.weights = j.at("weights").get<std::vector<double>>();
    const auto rows = j.at("means").get<std::vector<std::vector<double>>>();
    spec.variances = j.at("variances").get<std::vector<double>>();
    if (rows.empty() || rows.front().empty()) throw ConfigError("gmm: means must be a nonempty matrix");
    std::vector<double> flat;
    for (const auto& r : rows) {
      if (r.size() != rows.front().size()) throw ConfigError("gmm: ragged means");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    spec.means = Tensor({rows.size(), rows.front().size()}, std::move(flat));
    spec.validate();
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("gmm: ") + e.what());
  } catch (const ShapeError& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace rflow
