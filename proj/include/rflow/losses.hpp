#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

#include "rflow/autodiff.hpp"
#include "rflow/checkpoint.hpp"
#include "rflow/field.hpp"
#include "rflow/mlp.hpp"
#include "rflow/rng.hpp"

namespace rflow {

enum class Premetric { squared_l2, pseudo_huber, perceptual_huber, perceptual_huber_inv_t };
enum class Weighting { unit, inverse_t_squared };

inline const char* to_string(Premetric m) {
  switch (m) {
    case Premetric::squared_l2: return "squared_l2";
    case Premetric::pseudo_huber: return "pseudo_huber";
    case Premetric::perceptual_huber: return "perceptual_huber";
    case Premetric::perceptual_huber_inv_t: return "perceptual_huber_inv_t";
  }
  return "?";
}

inline const char* to_string(Weighting w) { return w == Weighting::unit ? "unit" : "inverse_t_squared"; }

/// Stand-in for a learned perceptual distance between a data point and its
/// one-step reconstruction. Must be evaluable both on plain vectors and on a tape.
class PerceptualDistance {
 public:
  virtual ~PerceptualDistance() = default;
  virtual double distance(std::span<const double> a, std::span<const double> b) const = 0;
  /// Row-wise distances of two [n, d] batches as an [n, 1] node.
  virtual Var distance(Tape& tape, Var a, Var b) const = 0;
};

/// ||M (a - b)||^2 for a fixed Gaussian feature matrix M [features, d] with
/// entries of variance 1/features. Injective when features >= d (almost surely),
/// hence a premetric.
class LinearFeatureDistance final : public PerceptualDistance {
 public:
  LinearFeatureDistance(std::size_t dim, std::size_t features, std::uint64_t seed)
      : map_({features, dim}), zero_bias_({features}) {
    CounterRng rng(seed, 0x5EA7);
    const double sd = 1.0 / std::sqrt(static_cast<double>(features));
    for (double& v : map_.storage()) v = sd * rng.normal();
  }

  double distance(std::span<const double> a, std::span<const double> b) const override {
    const std::size_t d = map_.cols();
    if (a.size() != d || b.size() != d) throw ShapeError("perceptual distance: dimension mismatch");
    double s = 0.0;
    for (std::size_t f = 0; f < map_.rows(); ++f) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += map_.at(f, j) * (a[j] - b[j]);
      s += acc * acc;
    }
    return s;
  }

  Var distance(Tape& tape, Var a, Var b) const override {
    Var diff = sub(tape, a, b);
    Var feats = affine(tape, diff, tape.constant(map_), tape.constant(zero_bias_));
    return row_sq_norm(tape, feats);
  }

  const Tensor& feature_map() const noexcept { return map_; }

 private:
  Tensor map_;
  Tensor zero_bias_;
};

struct LossSpec {
  Premetric premetric = Premetric::squared_l2;
  /// Objective view: x_pred compares data to x_theta (squared l2 only);
  /// v_pred compares z - x to v_theta with the chosen premetric.
  Parameterization parameterization = Parameterization::v_pred;
  Weighting weight = Weighting::unit;
  std::optional<double> huber_c;  // defaults to 0.00054 * d
  std::shared_ptr<const PerceptualDistance> perceptual;

  static double default_huber_c(std::size_t d) { return 0.00054 * static_cast<double>(d); }

  double resolved_c(std::size_t d) const { return huber_c.value_or(default_huber_c(d)); }

  bool is_perceptual() const {
    return premetric == Premetric::perceptual_huber || premetric == Premetric::perceptual_huber_inv_t;
  }

  void validate(std::size_t d) const {
    if (premetric != Premetric::squared_l2 && !(resolved_c(d) > 0.0)) {
      throw ConfigError("loss: huber constant c must be positive");
    }
    if (is_perceptual() && !perceptual) throw ConfigError("loss: perceptual premetric needs a distance hook");
    if (parameterization == Parameterization::x_pred && premetric != Premetric::squared_l2) {
      throw ConfigError("loss: the x-space objective is defined for squared_l2 only");
    }
  }
};

inline double loss_weight(Weighting w, double t) { return w == Weighting::unit ? 1.0 : 1.0 / (t * t); }

/// Premetric between the target velocity z - x and a predicted velocity for a
/// single sample, including the weight w(t). The one-step reconstruction
/// x_hat = x_t - t * predicted_v feeds the perceptual term and the x-space view.
inline double premetric_value(const LossSpec& spec, std::span<const double> target_v,
                              std::span<const double> predicted_v, std::span<const double> x,
                              std::span<const double> x_t, double t) {
  const std::size_t d = target_v.size();
  if (predicted_v.size() != d || x.size() != d || x_t.size() != d) {
    throw ShapeError("premetric_value: argument dimensions disagree");
  }
  spec.validate(d);
  std::vector<double> x_hat(d);
  for (std::size_t j = 0; j < d; ++j) x_hat[j] = x_t[j] - t * predicted_v[j];

  double m = 0.0;
  if (spec.parameterization == Parameterization::x_pred) {
    for (std::size_t j = 0; j < d; ++j) m += (x[j] - x_hat[j]) * (x[j] - x_hat[j]);
  } else {
    double r2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) r2 += (target_v[j] - predicted_v[j]) * (target_v[j] - predicted_v[j]);
    if (spec.premetric == Premetric::squared_l2) {
      m = r2;
    } else {
      const double c = spec.resolved_c(d);
      const double hub = std::sqrt(r2 + c * c) - c;
      if (spec.premetric == Premetric::pseudo_huber) {
        m = hub;
      } else {
        const double lp = spec.perceptual->distance(x, x_hat);
        m = (1.0 - t) * hub + (spec.premetric == Premetric::perceptual_huber ? lp : lp / t);
      }
    }
  }
  return loss_weight(spec.weight, t) * m;
}

/// Row-wise weighted premetric on a tape. `pred_v` and `x_hat` are the
/// differentiable predictions; everything else is data.
inline Var premetric_rows(Tape& tape, const LossSpec& spec, Var pred_v, Var x_hat, const Tensor& x,
                          const Tensor& z, std::span<const double> t) {
  const std::size_t n = x.rows(), d = x.cols();
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = loss_weight(spec.weight, t[i]);

  Var m;
  if (spec.parameterization == Parameterization::x_pred) {
    m = row_sq_norm(tape, sub(tape, tape.constant(x), x_hat));
  } else {
    Var r = sub(tape, tape.constant(z - x), pred_v);
    Var r2 = row_sq_norm(tape, r);
    if (spec.premetric == Premetric::squared_l2) {
      m = r2;
    } else {
      const double c = spec.resolved_c(d);
      Var hub = add_scalar(tape, sqrt(tape, add_scalar(tape, r2, c * c)), -c);
      if (spec.premetric == Premetric::pseudo_huber) {
        m = hub;
      } else {
        std::vector<double> one_minus_t(n), lp_w(n);
        for (std::size_t i = 0; i < n; ++i) {
          one_minus_t[i] = 1.0 - t[i];
          lp_w[i] = spec.premetric == Premetric::perceptual_huber ? 1.0 : 1.0 / t[i];
        }
        Var lp = spec.perceptual->distance(tape, tape.constant(x), x_hat);
        m = add(tape, scale_rows(tape, hub, std::move(one_minus_t)), scale_rows(tape, lp, std::move(lp_w)));
      }
    }
  }
  return scale_rows(tape, m, std::move(w));
}

struct ObjectiveResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // same layout as MlpParams::tensors
};

struct ObjectiveOptions {
  double dropout = 0.0;
  CounterRng* rng = nullptr;  // required when dropout > 0
};

/// Monte-Carlo objective over a batch of (x, z) pairs with one time per pair,
/// differentiated with respect to every network parameter.
inline ObjectiveResult objective_estimate(const MlpParams& params, Parameterization net_param,
                                          const LossSpec& spec, const Tensor& x, const Tensor& z,
                                          std::span<const double> t, ObjectiveOptions opts = {}) {
  const Tensor xb = as_batch(x), zb = as_batch(z);
  require_same_shape(xb, zb, "objective_estimate");
  const std::size_t n = xb.rows(), d = xb.cols();
  if (n == 0) throw ShapeError("objective_estimate: empty batch");
  if (t.size() != n) throw ShapeError("objective_estimate: one time per pair required");
  if (params.output_width() != d) throw ShapeError("objective_estimate: network output width != data dim");
  spec.validate(d);

  Tensor x_t(xb.shape());
  std::vector<double> inv_t(n), neg_t(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(t[i] > 0.0 && t[i] < 1.0)) throw DomainError("objective_estimate: t must lie in (0, 1)");
    for (std::size_t j = 0; j < d; ++j) x_t.at(i, j) = (1.0 - t[i]) * xb.at(i, j) + t[i] * zb.at(i, j);
    inv_t[i] = 1.0 / t[i];
    neg_t[i] = -t[i];
  }

  Tape tape;
  const std::vector<Var> pv = tape_parameters(tape, params);
  Var xt = tape.constant(x_t);
  Var net = forward_mlp(tape, params, pv, tape.constant(network_input(x_t, t)), opts.dropout, opts.rng);

  Var pred_v, x_hat;
  if (net_param == Parameterization::v_pred) {
    pred_v = net;
    x_hat = add(tape, xt, scale_rows(tape, net, std::move(neg_t)));
  } else {
    x_hat = net;
    pred_v = scale_rows(tape, sub(tape, xt, net), std::move(inv_t));
  }
  Var loss = mean(tape, premetric_rows(tape, spec, pred_v, x_hat, xb, zb, t));
  tape.backward(loss);

  ObjectiveResult r;
  r.loss = tape.value(loss)[0];
  r.grads.reserve(pv.size());
  for (Var v : pv) r.grads.push_back(tape.grad(v));
  return r;
}

enum class TimestepKind { uniform, u_shaped, logit_normal };

inline const char* to_string(TimestepKind k) {
  switch (k) {
    case TimestepKind::uniform: return "uniform";
    case TimestepKind::u_shaped: return "u_shaped";
    case TimestepKind::logit_normal: return "logit_normal";
  }
  return "?";
}

/// Training-time distribution of t, always clamped to [t_min, t_max].
/// u_shaped has density proportional to exp(a u) + exp(-a u) on [0, 1],
/// i.e. a cosh(a u) / sinh(a), with CDF sinh(a u) / sinh(a).
struct TimestepDistribution {
  TimestepKind kind = TimestepKind::uniform;
  double a = 4.0;
  double t_min = kTMin;
  double t_max = kTMax;
  double loc = 0.0;    // logit_normal location
  double scale = 1.0;  // logit_normal scale

  void validate() const {
    if (!(0.0 < t_min && t_min < t_max && t_max < 1.0)) throw ConfigError("timesteps: need 0 < t_min < t_max < 1");
    if (kind == TimestepKind::u_shaped && !(a > 0.0)) throw ConfigError("timesteps: u_shaped needs a > 0");
    if (kind == TimestepKind::logit_normal && !(scale > 0.0)) throw ConfigError("timesteps: logit_normal needs scale > 0");
  }

  double clamp(double u) const { return std::min(t_max, std::max(t_min, u)); }

  /// Unclamped density on [0, 1].
  double density(double u) const {
    switch (kind) {
      case TimestepKind::uniform: return 1.0;
      case TimestepKind::u_shaped: return a * std::cosh(a * u) / std::sinh(a);
      case TimestepKind::logit_normal: {
        const double l = std::log(u / (1.0 - u));
        const double zz = (l - loc) / scale;
        return std::exp(-0.5 * zz * zz) / (scale * std::sqrt(2.0 * std::numbers::pi) * u * (1.0 - u));
      }
    }
    return 0.0;
  }

  /// Unclamped CDF on [0, 1].
  double cdf(double u) const {
    switch (kind) {
      case TimestepKind::uniform: return u;
      case TimestepKind::u_shaped: return std::sinh(a * u) / std::sinh(a);
      case TimestepKind::logit_normal: {
        if (u <= 0.0) return 0.0;
        if (u >= 1.0) return 1.0;
        return 0.5 * std::erfc(-(std::log(u / (1.0 - u)) - loc) / (scale * std::sqrt(2.0)));
      }
    }
    return 0.0;
  }
};

/// Maps a uniform draw s in [0, 1] to a timestep by exact inverse CDF.
inline double sample_timestep(const TimestepDistribution& dist, double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw DomainError("sample_timestep: s must lie in [0, 1]");
  switch (dist.kind) {
    case TimestepKind::uniform: return dist.clamp(dist.t_min + s * (dist.t_max - dist.t_min));
    case TimestepKind::u_shaped: return dist.clamp(std::asinh(s * std::sinh(dist.a)) / dist.a);
    case TimestepKind::logit_normal: {
      if (s <= 0.0) return dist.t_min;
      if (s >= 1.0) return dist.t_max;
      const double zz = -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * s);
      return dist.clamp(1.0 / (1.0 + std::exp(-(dist.loc + dist.scale * zz))));
    }
  }
  return dist.t_min;
}

struct ProfileBin {
  double t_lo = 0.0, t_hi = 0.0, t = 0.0;
  double mean = 0.0, stddev = 0.0;
  std::size_t count = 0;
  std::optional<double> lower_bound;  // (1/t^2) E||x - E[x|x_t]||^2 when an oracle is supplied
};

/// E[x | x_t] oracle for the coupling that produced a dataset.
using PosteriorOracle = std::function<Tensor(const Tensor&, double)>;

/// Per-timestep training loss L(t) = (1/t^2) E||x - x_theta(x_t, t)||^2, which
/// equals E||(z - x) - v(x_t, t)||^2, evaluated at each bin centre over the
/// whole dataset.
inline std::vector<ProfileBin> loss_profile(const VelocityField& field, const Tensor& x, const Tensor& z,
                                            std::size_t n_bins, const TimestepDistribution& clamp = {},
                                            const PosteriorOracle& oracle = nullptr) {
  if (n_bins < 2) throw ShapeError("loss_profile: need at least 2 bins");
  const Tensor xb = as_batch(x), zb = as_batch(z);
  require_same_shape(xb, zb, "loss_profile");
  if (xb.rows() == 0) throw ShapeError("loss_profile: empty dataset");
  const std::size_t n = xb.rows(), d = xb.cols();
  const double width = (clamp.t_max - clamp.t_min) / static_cast<double>(n_bins);

  std::vector<ProfileBin> bins(n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    ProfileBin& bin = bins[b];
    bin.t_lo = clamp.t_min + width * static_cast<double>(b);
    bin.t_hi = bin.t_lo + width;
    bin.t = 0.5 * (bin.t_lo + bin.t_hi);
    bin.count = n;
    const double t = bin.t;
    const Tensor x_t = lincomb(1.0 - t, xb, t, zb);
    const Tensor v = field.velocity(x_t, t);
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double l = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = zb.at(i, j) - xb.at(i, j) - v.at(i, j);
        l += r * r;
      }
      s += l;
      s2 += l * l;
    }
    bin.mean = s / static_cast<double>(n);
    bin.stddev = std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - bin.mean * bin.mean));
    if (oracle) {
      const Tensor post = oracle(x_t, t);
      double lb = 0.0;
      for (std::size_t i = 0; i < xb.size(); ++i) lb += (xb[i] - post[i]) * (xb[i] - post[i]);
      bin.lower_bound = lb / (static_cast<double>(n) * t * t);
    }
  }
  return bins;
}

}  // namespace rflow
