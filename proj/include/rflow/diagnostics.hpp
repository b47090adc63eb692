#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <json.hpp>

#include "rflow/error.hpp"
#include "rflow/field.hpp"
#include "rflow/rng.hpp"
#include "rflow/samplers.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

/// Mean over rows of the chord deviation
///   int_0^1 ||z(s) - ((1-s) z(0) + s z(1))||^2 ds / ||z(1) - z(0)||^2
/// where s rescales the recorded times onto [0, 1]; trapezoid rule over the
/// recorded states. Zero exactly for states lying on their chord.
inline double straightness(const Trajectory& tr) {
  if (tr.states.size() < 3 || tr.times.size() != tr.states.size()) {
    throw ShapeError("straightness: need at least 3 recorded states with times");
  }
  const std::size_t K = tr.states.size();
  const auto [lo_it, hi_it] = std::minmax_element(tr.times.begin(), tr.times.end());
  const std::size_t lo = static_cast<std::size_t>(lo_it - tr.times.begin());
  const std::size_t hi = static_cast<std::size_t>(hi_it - tr.times.begin());
  const double span_t = tr.times[hi] - tr.times[lo];
  const Tensor& a = tr.states[lo];
  const Tensor& b = tr.states[hi];
  const std::size_t n = a.rows(), d = a.cols();

  double total = 0.0;
  std::vector<double> dev(K);
  for (std::size_t i = 0; i < n; ++i) {
    double chord2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) chord2 += (b.at(i, j) - a.at(i, j)) * (b.at(i, j) - a.at(i, j));
    if (!(chord2 > 0.0)) throw DomainError("straightness: trajectory endpoints coincide");
    for (std::size_t k = 0; k < K; ++k) {
      const double s = (tr.times[k] - tr.times[lo]) / span_t;
      double e = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double r = tr.states[k].at(i, j) - ((1.0 - s) * a.at(i, j) + s * b.at(i, j));
        e += r * r;
      }
      dev[k] = e;
    }
    double integral = 0.0;
    for (std::size_t k = 0; k + 1 < K; ++k) {
      integral += 0.5 * (dev[k] + dev[k + 1]) * std::abs(tr.times[k + 1] - tr.times[k]) / span_t;
    }
    total += integral / chord2;
  }
  return total / static_cast<double>(n);
}

/// R(l) = (1/(d-l)) sum_{k=1}^{d-l} u_k u_{k+l} for l = 1..max_lag.
inline std::vector<double> autocorrelation(std::span<const double> u, std::size_t max_lag) {
  const std::size_t d = u.size();
  if (max_lag == 0 || max_lag >= d) throw ShapeError("autocorrelation: need 1 <= max_lag < d");
  std::vector<double> r(max_lag);
  for (std::size_t l = 1; l <= max_lag; ++l) {
    double s = 0.0;
    for (std::size_t k = 0; k + l < d; ++k) s += u[k] * u[k + l];
    r[l - 1] = s / static_cast<double>(d - l);
  }
  return r;
}

/// Two-sided 99% quantile of the standard normal.
inline double normal_band_99() {
  static const double q = boost::math::quantile(boost::math::normal(), 0.995);
  return q;
}

struct ChiSquareAnnulus {
  double lo, hi;  // central 99% interval of chi^2_d
};

inline ChiSquareAnnulus chi_square_annulus(std::size_t d) {
  boost::math::chi_squared dist(static_cast<double>(d));
  return {boost::math::quantile(dist, 0.005), boost::math::quantile(dist, 0.995)};
}

struct ProbeResult {
  Tensor z_constructed;
  double sq_norm = 0.0;
  std::vector<double> autocorr;
};

/// Noise z'' = z' + ((1-t)/t)(x' - x'') that would make the straight paths of
/// (x', z') and (x'', z'') cross at time t.
inline ProbeResult intersection_probe(const Tensor& x1, const Tensor& z1, const Tensor& x2, double t,
                                      std::size_t max_lag = 1) {
  require_same_shape(x1, z1, "intersection_probe");
  require_same_shape(x1, x2, "intersection_probe");
  if (!(t > 0.0 && t < 1.0)) throw DomainError("intersection_probe: t must lie in (0, 1)");
  ProbeResult r;
  r.z_constructed = axpy(z1, (1.0 - t) / t, x1 - x2);
  r.sq_norm = squared_norm(r.z_constructed.data());
  if (max_lag > 0 && max_lag < r.z_constructed.size()) r.autocorr = autocorrelation(r.z_constructed.data(), max_lag);
  return r;
}

struct Histogram {
  std::vector<double> edges;
  std::vector<std::size_t> counts;
};

inline Histogram histogram(std::span<const double> values, double lo, double hi, std::size_t bins) {
  Histogram h;
  h.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
  for (double v : values) {
    if (v < lo || v > hi) continue;
    std::size_t b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
    h.counts[std::min(b, bins - 1)]++;
  }
  return h;
}

struct LagStat {
  std::size_t lag = 0;
  double mean = 0.0;
  double band_mean = 0.0;       // 99% band for the mean of n Gaussian draws
  double band_single = 0.0;     // 99% band for one Gaussian draw
  double exceed_fraction = 0.0; // fraction of vectors outside band_single
};

struct ProbeSummary {
  std::size_t count = 0, dim = 0;
  double t = 0.5;
  double mean_sq_norm = 0.0, sq_norm_stderr = 0.0;
  double reference_mean_sq_norm = 0.0;
  double chi2_mean = 0.0, chi2_sd = 0.0;
  ChiSquareAnnulus annulus{0.0, 0.0};
  double fraction_outside_annulus = 0.0;
  double reference_fraction_outside_annulus = 0.0;
  std::vector<LagStat> lags;
  Histogram constructed_hist, reference_hist;
};

namespace detail {

inline std::vector<LagStat> lag_statistics(const Tensor& vectors, std::size_t max_lag) {
  const std::size_t n = vectors.rows(), d = vectors.cols();
  std::vector<LagStat> lags(max_lag);
  for (std::size_t l = 1; l <= max_lag; ++l) {
    lags[l - 1].lag = l;
    lags[l - 1].band_single = normal_band_99() / std::sqrt(static_cast<double>(d - l));
    lags[l - 1].band_mean = lags[l - 1].band_single / std::sqrt(static_cast<double>(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = autocorrelation(vectors.row(i), max_lag);
    for (std::size_t l = 0; l < max_lag; ++l) {
      lags[l].mean += r[l];
      if (std::abs(r[l]) > lags[l].band_single) lags[l].exceed_fraction += 1.0;
    }
  }
  for (LagStat& s : lags) {
    s.mean /= static_cast<double>(n);
    s.exceed_fraction /= static_cast<double>(n);
  }
  return lags;
}

}  // namespace detail

/// Builds n_probes constructed noises from random pairs of distinct records
/// (x', z') and x'' and summarizes their norms and autocorrelation against the
/// standard Gaussian reference.
inline ProbeSummary probe_statistics(const Tensor& x, const Tensor& z, double t, std::size_t n_probes,
                                     std::uint64_t seed, std::size_t max_lag = 1) {
  require_same_shape(x, z, "probe_statistics");
  const std::size_t n = x.rows(), d = x.cols();
  if (n < 2) throw ShapeError("probe_statistics: need at least two pairs");
  if (n_probes == 0) throw ShapeError("probe_statistics: need at least one probe");
  if (max_lag >= d) throw ShapeError("probe_statistics: max_lag must be below the dimension");

  ProbeSummary s;
  s.count = n_probes;
  s.dim = d;
  s.t = t;
  s.chi2_mean = static_cast<double>(d);
  s.chi2_sd = std::sqrt(2.0 * static_cast<double>(d));
  s.annulus = chi_square_annulus(d);

  Tensor constructed({n_probes, d});
  Tensor reference({n_probes, d});
  std::vector<double> norms(n_probes), ref_norms(n_probes);
  CounterRng rng(seed, 0x9A1);
  for (std::size_t p = 0; p < n_probes; ++p) {
    const std::size_t i = rng.below(n);
    std::size_t j = rng.below(n - 1);
    if (j >= i) ++j;
    const Tensor x1 = Tensor({d}, std::vector<double>(x.row(i).begin(), x.row(i).end()));
    const Tensor z1 = Tensor({d}, std::vector<double>(z.row(i).begin(), z.row(i).end()));
    const Tensor x2 = Tensor({d}, std::vector<double>(x.row(j).begin(), x.row(j).end()));
    const ProbeResult r = intersection_probe(x1, z1, x2, t, 0);
    std::copy(r.z_constructed.storage().begin(), r.z_constructed.storage().end(), constructed.row(p).begin());
    std::copy(z1.storage().begin(), z1.storage().end(), reference.row(p).begin());
    norms[p] = r.sq_norm;
    ref_norms[p] = squared_norm(z1.data());
  }

  double sum = 0.0, sum2 = 0.0, ref_sum = 0.0;
  std::size_t outside = 0, ref_outside = 0;
  for (std::size_t p = 0; p < n_probes; ++p) {
    sum += norms[p];
    sum2 += norms[p] * norms[p];
    ref_sum += ref_norms[p];
    outside += (norms[p] < s.annulus.lo || norms[p] > s.annulus.hi);
    ref_outside += (ref_norms[p] < s.annulus.lo || ref_norms[p] > s.annulus.hi);
  }
  const double np = static_cast<double>(n_probes);
  s.mean_sq_norm = sum / np;
  s.sq_norm_stderr = std::sqrt(std::max(0.0, sum2 / np - s.mean_sq_norm * s.mean_sq_norm) / np);
  s.reference_mean_sq_norm = ref_sum / np;
  s.fraction_outside_annulus = static_cast<double>(outside) / np;
  s.reference_fraction_outside_annulus = static_cast<double>(ref_outside) / np;
  if (max_lag > 0) s.lags = detail::lag_statistics(constructed, max_lag);

  const double hist_hi = std::max(*std::max_element(norms.begin(), norms.end()), s.annulus.hi);
  s.constructed_hist = histogram(norms, 0.0, hist_hi, 40);
  s.reference_hist = histogram(ref_norms, 0.0, hist_hi, 40);
  return s;
}

/// How Gaussian a batch of (inverted) noise vectors looks.
struct NoiseStats {
  std::size_t count = 0, dim = 0;
  double mean_sq_norm = 0.0;
  double sq_norm_stderr = 0.0;  // sample standard error of the mean
  std::vector<LagStat> lags;

  /// |mean ||z||^2 - d| within k standard errors.
  bool norm_within(double k) const {
    return std::abs(mean_sq_norm - static_cast<double>(dim)) <= k * sq_norm_stderr;
  }
};

inline NoiseStats noise_statistics(const Tensor& z, std::size_t max_lag = 1) {
  const Tensor zb = as_batch(z);
  NoiseStats s;
  s.count = zb.rows();
  s.dim = zb.cols();
  if (s.count == 0) throw ShapeError("noise_statistics: no samples");
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < s.count; ++i) {
    const double q = squared_norm(zb.row(i));
    sum += q;
    sum2 += q * q;
  }
  const double n = static_cast<double>(s.count);
  s.mean_sq_norm = sum / n;
  s.sq_norm_stderr = std::sqrt(std::max(0.0, sum2 / n - s.mean_sq_norm * s.mean_sq_norm) / n);
  if (max_lag > 0 && max_lag < s.dim) s.lags = detail::lag_statistics(zb, max_lag);
  return s;
}

/// Inverts `samples` to noise with `nfe` evaluations, regenerates them with
/// `nfe` evaluations, and returns the per-coordinate mean squared error.
inline double reconstruction_error(const VelocityField& field, const Tensor& samples, std::size_t nfe,
                                   Solver solver = Solver::euler, std::size_t threads = 1) {
  if (samples.empty()) throw ShapeError("reconstruction_error: no samples");
  if (nfe == 0) throw ShapeError("reconstruction_error: nfe must be at least 1");
  const TimeSchedule gen = TimeSchedule::for_steps(steps_for_nfe(solver, nfe));
  SolverConfig inv_cfg{solver, UpdateRule::standard, Direction::invert};
  SolverConfig gen_cfg{solver, UpdateRule::standard, Direction::generate};
  const Tensor noise = integrate_parallel(field, samples, gen.reversed(), inv_cfg, threads).z;
  const Tensor back = integrate_parallel(field, noise, gen, gen_cfg, threads).z;
  return mean_squared_error(as_batch(samples), back);
}

/// Squared 2-Wasserstein distance between two 1-D empirical distributions,
/// computed exactly by walking the merged quantile breakpoints.
inline double wasserstein2_squared_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ShapeError("wasserstein: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const std::size_t n = a.size(), m = b.size();
  std::size_t i = 0, j = 0;
  double q = 0.0, acc = 0.0;
  while (i < n && j < m) {
    // Compare (i+1)/n with (j+1)/m exactly.
    const unsigned __int128 lhs = static_cast<unsigned __int128>(i + 1) * m;
    const unsigned __int128 rhs = static_cast<unsigned __int128>(j + 1) * n;
    const double next = lhs <= rhs ? static_cast<double>(i + 1) / static_cast<double>(n)
                                   : static_cast<double>(j + 1) / static_cast<double>(m);
    const double diff = a[i] - b[j];
    acc += (next - q) * diff * diff;
    q = next;
    if (lhs <= rhs) ++i;
    if (rhs <= lhs) ++j;
  }
  return acc;
}

/// Mean over seeded random unit directions of the 1-D 2-Wasserstein distance
/// between the projected samples.
inline double sliced_wasserstein(const Tensor& a, const Tensor& b, std::size_t n_projections, std::uint64_t seed) {
  const Tensor ab = as_batch(a), bb = as_batch(b);
  if (ab.cols() != bb.cols()) throw ShapeError("sliced_wasserstein: dimension mismatch");
  if (ab.rows() == 0 || bb.rows() == 0) throw ShapeError("sliced_wasserstein: empty sample set");
  if (n_projections == 0) throw ShapeError("sliced_wasserstein: need at least one projection");
  const std::size_t d = ab.cols();
  double total = 0.0;
  std::vector<double> dir(d), pa(ab.rows()), pb(bb.rows());
  for (std::size_t p = 0; p < n_projections; ++p) {
    CounterRng rng(seed, p);
    double norm2 = 0.0;
    do {
      norm2 = 0.0;
      for (double& v : dir) {
        v = rng.normal();
        norm2 += v * v;
      }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& v : dir) v *= inv;
    for (std::size_t i = 0; i < ab.rows(); ++i) pa[i] = dot(ab.row(i), dir);
    for (std::size_t i = 0; i < bb.rows(); ++i) pb[i] = dot(bb.row(i), dir);
    total += std::sqrt(wasserstein2_squared_1d(pa, pb));
  }
  return total / static_cast<double>(n_projections);
}

struct CountedValue {
  double value = 0.0;
  std::size_t count = 0;
};

struct ReconstructionPoint {
  std::size_t nfe = 0;
  double mse = 0.0;
  std::size_t count = 0;
};

struct DiagnosticsReport {
  std::string model_id;
  nlohmann::json seeds = nlohmann::json::object();
  std::optional<CountedValue> straightness;
  std::optional<CountedValue> sliced_wasserstein;
  std::size_t sw_reference_count = 0, sw_projections = 0;
  std::vector<ReconstructionPoint> reconstruction;
  std::optional<ProbeSummary> probe;
  std::optional<NoiseStats> noise;
};

namespace detail {

inline nlohmann::json lags_json(const std::vector<LagStat>& lags, std::size_t count) {
  nlohmann::json out = nlohmann::json::array();
  for (const LagStat& l : lags) {
    out.push_back({{"lag", l.lag}, {"mean", l.mean}, {"band_mean", l.band_mean}, {"band_single", l.band_single},
                   {"exceed_fraction", l.exceed_fraction}, {"count", count}});
  }
  return out;
}

}  // namespace detail

inline nlohmann::json report_to_json(const DiagnosticsReport& r) {
  using nlohmann::json;
  json j;
  j["schema"] = "rflow.diagnostics.v1";
  json counts = json::object();
  if (r.straightness) counts["straightness"] = r.straightness->count;
  if (r.sliced_wasserstein) counts["sliced_wasserstein"] = r.sliced_wasserstein->count;
  if (r.probe) counts["probe"] = r.probe->count;
  if (r.noise) counts["noise"] = r.noise->count;
  j["metadata"] = {{"model", r.model_id}, {"seeds", r.seeds}, {"sample_counts", counts}};

  j["straightness"] = r.straightness ? json{{"value", r.straightness->value}, {"count", r.straightness->count}} : json(nullptr);
  j["sliced_wasserstein"] = r.sliced_wasserstein
                                ? json{{"value", r.sliced_wasserstein->value},
                                       {"count", r.sliced_wasserstein->count},
                                       {"reference_count", r.sw_reference_count},
                                       {"projections", r.sw_projections}}
                                : json(nullptr);
  json rec = json::array();
  for (const auto& p : r.reconstruction) rec.push_back({{"nfe", p.nfe}, {"mse", p.mse}, {"count", p.count}});
  j["reconstruction"] = rec;

  if (r.probe) {
    const ProbeSummary& p = *r.probe;
    j["probe"] = {{"t", p.t},
                  {"count", p.count},
                  {"dim", p.dim},
                  {"mean_sq_norm", p.mean_sq_norm},
                  {"sq_norm_stderr", p.sq_norm_stderr},
                  {"reference_mean_sq_norm", p.reference_mean_sq_norm},
                  {"chi2_mean", p.chi2_mean},
                  {"chi2_sd", p.chi2_sd},
                  {"annulus", {p.annulus.lo, p.annulus.hi}},
                  {"fraction_outside_annulus", p.fraction_outside_annulus},
                  {"reference_fraction_outside_annulus", p.reference_fraction_outside_annulus},
                  {"autocorrelation", detail::lags_json(p.lags, p.count)},
                  {"histogram",
                   {{"edges", p.constructed_hist.edges},
                    {"constructed", p.constructed_hist.counts},
                    {"reference", p.reference_hist.counts},
                    {"count", p.count}}}};
  } else {
    j["probe"] = nullptr;
  }
  if (r.noise) {
    const NoiseStats& n = *r.noise;
    j["noise"] = {{"count", n.count},
                  {"dim", n.dim},
                  {"mean_sq_norm", n.mean_sq_norm},
                  {"sq_norm_stderr", n.sq_norm_stderr},
                  {"autocorrelation", detail::lags_json(n.lags, n.count)}};
  } else {
    j["noise"] = nullptr;
  }
  return j;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string reconstruction_csv(const DiagnosticsReport& r) {
  std::string s = "nfe,mse,count\n";
  for (const auto& p : r.reconstruction) {
    s += std::to_string(p.nfe) + "," + format_double(p.mse) + "," + std::to_string(p.count) + "\n";
  }
  return s;
}

inline std::string autocorrelation_csv(const std::vector<LagStat>& lags, std::size_t count) {
  std::string s = "lag,mean,band_mean,band_single,exceed_fraction,count\n";
  for (const LagStat& l : lags) {
    s += std::to_string(l.lag) + "," + format_double(l.mean) + "," + format_double(l.band_mean) + "," +
         format_double(l.band_single) + "," + format_double(l.exceed_fraction) + "," + std::to_string(count) + "\n";
  }
  return s;
}

inline std::string histogram_csv(const ProbeSummary& p) {
  std::string s = "bin_lo,bin_hi,constructed,reference\n";
  for (std::size_t b = 0; b < p.constructed_hist.counts.size(); ++b) {
    s += format_double(p.constructed_hist.edges[b]) + "," + format_double(p.constructed_hist.edges[b + 1]) + "," +
         std::to_string(p.constructed_hist.counts[b]) + "," + std::to_string(p.reference_hist.counts[b]) + "\n";
  }
  return s;
}

}  // namespace rflow
