#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "rflow/checkpoint.hpp"
#include "rflow/conversion.hpp"
#include "rflow/gmm.hpp"
#include "rflow/mlp.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

/// Timestep clamp used for training and sampling; fields divide by t.
inline constexpr double kTMin = 0.00001;
inline constexpr double kTMax = 0.99999;

/// x_t = (1 - t) x + t z
inline Tensor interpolate(const Tensor& x, const Tensor& z, double t) {
  require_same_shape(x, z, "interpolate");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolate: t must lie in [0, 1]");
  return lincomb(1.0 - t, x, t, z);
}

/// A velocity field v(z_t, t) over batches [n, d] sharing one time t.
/// Implementations are immutable after construction, so one instance may be
/// evaluated from several threads.
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual std::size_t dim() const = 0;
  virtual Tensor velocity(const Tensor& z_t, double t) const = 0;

  /// Fields that can also predict E[x | x_t] satisfy
  /// velocity(z, t) == (z - posterior_mean(z, t)) / t.
  virtual bool has_posterior_mean() const { return false; }
  virtual Tensor posterior_mean(const Tensor&, double) const {
    throw ContractError("this field does not expose a posterior mean");
  }
};

namespace detail {

inline Tensor velocity_from_mean(const Tensor& z, const Tensor& mean, double t) {
  Tensor v(z.shape());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (z[i] - mean[i]) / t;
  return v;
}

inline void require_dim(const Tensor& z, std::size_t d, const char* who) {
  if (z.last_dim() != d) {
    throw ShapeError(std::string(who) + ": state dimension " + std::to_string(z.last_dim()) +
                     " does not match field dimension " + std::to_string(d));
  }
}

}  // namespace detail

/// Exact rectified-flow field of GMM data under the independent coupling with N(0, I) noise.
class AnalyticGmmField final : public VelocityField {
 public:
  explicit AnalyticGmmField(GmmSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  std::size_t dim() const override { return spec_.dim(); }
  Tensor velocity(const Tensor& z_t, double t) const override {
    return detail::velocity_from_mean(z_t, posterior_mean(z_t, t), t);
  }
  bool has_posterior_mean() const override { return true; }
  Tensor posterior_mean(const Tensor& z_t, double t) const override { return gmm_posterior_mean(spec_, z_t, t); }

  const GmmSpec& spec() const noexcept { return spec_; }

 private:
  GmmSpec spec_;
};

/// Field driven by a converted VP/VE diffusion denoiser. Defined for t in (0, 1).
class ConvertedField final : public VelocityField {
 public:
  ConvertedField(DiffusionConversion conv, std::size_t dim) : conv_(std::move(conv)), dim_(dim) {}

  std::size_t dim() const override { return dim_; }
  Tensor velocity(const Tensor& z_t, double t) const override {
    return detail::velocity_from_mean(z_t, posterior_mean(z_t, t), t);
  }
  bool has_posterior_mean() const override { return true; }
  Tensor posterior_mean(const Tensor& z_t, double t) const override {
    detail::require_dim(z_t, dim_, "converted field");
    return converted_posterior_mean(conv_, z_t, t);
  }

 private:
  DiffusionConversion conv_;
  std::size_t dim_;
};

// Sinusoidal time features: sin and cos at 8 geometrically spaced frequencies.
inline constexpr std::size_t kTimeFrequencies = 8;
inline constexpr std::size_t kTimeFeatures = 2 * kTimeFrequencies;

inline void write_time_features(double t, std::span<double> out) {
  double f = 0.5;
  for (std::size_t k = 0; k < kTimeFrequencies; ++k, f *= 2.0) {
    out[2 * k] = std::sin(f * t);
    out[2 * k + 1] = std::cos(f * t);
  }
}

/// Network input rows concat(z_t[i], features(t[i])).
inline Tensor network_input(const Tensor& z_t, std::span<const double> t) {
  const std::size_t n = z_t.rows(), d = z_t.cols();
  if (t.size() != n) throw ShapeError("network_input: one time per row required");
  Tensor in({n, d + kTimeFeatures});
  for (std::size_t i = 0; i < n; ++i) {
    auto r = in.row(i);
    std::copy(z_t.row(i).begin(), z_t.row(i).end(), r.begin());
    write_time_features(t[i], r.subspan(d));
  }
  return in;
}

inline Tensor time_feature_rows(std::span<const double> t) {
  Tensor out({t.size(), kTimeFeatures});
  for (std::size_t i = 0; i < t.size(); ++i) write_time_features(t[i], out.row(i));
  return out;
}

/// Hidden widths -> full layer widths for a field over R^d.
inline std::vector<std::size_t> field_widths(std::size_t d, const std::vector<std::size_t>& hidden) {
  std::vector<std::size_t> w{d + kTimeFeatures};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(d);
  return w;
}

inline void require_clamped_time(double t) {
  if (!(t >= kTMin && t <= kTMax)) {
    throw DomainError("neural field: t=" + std::to_string(t) + " outside [0.00001, 0.99999]");
  }
}

/// v-pred: raw network output. x-pred: (z_t - net(z_t, t)) / t.
inline Tensor neural_velocity(const MlpParams& params, Parameterization p, const Tensor& z_t, double t) {
  require_clamped_time(t);
  const Tensor batch = as_batch(z_t);
  std::vector<double> ts(batch.rows(), t);
  Tensor net = forward_mlp(params, network_input(batch, ts));
  if (p == Parameterization::x_pred) net = detail::velocity_from_mean(batch, net, t);
  return Tensor(z_t.shape(), std::move(net.storage()));
}

class NeuralField final : public VelocityField {
 public:
  NeuralField(MlpParams params, Parameterization p) : params_(std::move(params)), param_(p) {
    if (params_.output_width() + kTimeFeatures != params_.input_width()) {
      throw ShapeError("neural field: input width must be output width + time features");
    }
  }

  /// Uses the EMA weights unless `use_ema` is false.
  static NeuralField from_checkpoint(const Checkpoint& c, bool use_ema = true) {
    return NeuralField(use_ema ? c.ema_params() : c.params, c.parameterization);
  }

  std::size_t dim() const override { return params_.output_width(); }

  Tensor velocity(const Tensor& z_t, double t) const override {
    detail::require_dim(z_t, dim(), "neural field");
    return neural_velocity(params_, param_, z_t, t);
  }

  bool has_posterior_mean() const override { return true; }

  Tensor posterior_mean(const Tensor& z_t, double t) const override {
    detail::require_dim(z_t, dim(), "neural field");
    require_clamped_time(t);
    const Tensor batch = as_batch(z_t);
    std::vector<double> ts(batch.rows(), t);
    Tensor net = forward_mlp(params_, network_input(batch, ts));
    if (param_ == Parameterization::v_pred) net = axpy(batch, -t, net);
    return Tensor(z_t.shape(), std::move(net.storage()));
  }

  const MlpParams& params() const noexcept { return params_; }
  Parameterization parameterization() const noexcept { return param_; }

 private:
  MlpParams params_;
  Parameterization param_;
};

/// Wraps a field and counts velocity evaluations (one per batched call).
class CountingField final : public VelocityField {
 public:
  explicit CountingField(const VelocityField& inner) : inner_(inner) {}

  std::size_t dim() const override { return inner_.dim(); }
  Tensor velocity(const Tensor& z_t, double t) const override {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.velocity(z_t, t);
  }
  bool has_posterior_mean() const override { return inner_.has_posterior_mean(); }
  Tensor posterior_mean(const Tensor& z_t, double t) const override { return inner_.posterior_mean(z_t, t); }

  std::size_t calls() const noexcept { return calls_.load(); }

 private:
  const VelocityField& inner_;
  mutable std::atomic<std::size_t> calls_{0};
};

}  // namespace rflow
