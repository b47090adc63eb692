#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "rflow/binio.hpp"
#include "rflow/error.hpp"
#include "rflow/field.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

enum class Solver : std::uint32_t { euler = 0, heun = 1 };
enum class UpdateRule { standard, interpolating };
enum class Direction { generate, invert };

inline const char* to_string(Solver s) { return s == Solver::euler ? "euler" : "heun"; }
inline const char* to_string(UpdateRule r) { return r == UpdateRule::standard ? "default" : "new"; }

/// Strictly monotone list of times. Generation runs over a decreasing
/// schedule, inversion over an increasing one.
class TimeSchedule {
 public:
  explicit TimeSchedule(std::vector<double> times) : times_(std::move(times)) {
    if (times_.size() < 2) throw ShapeError("schedule: need at least two times");
    const bool dec = times_[0] > times_[1];
    for (std::size_t i = 0; i < times_.size(); ++i) {
      if (!(times_[i] >= 0.0 && times_[i] <= 1.0)) throw DomainError("schedule: times must lie in [0, 1]");
      if (i > 0 && (dec ? !(times_[i] < times_[i - 1]) : !(times_[i] > times_[i - 1]))) {
        throw ShapeError("schedule: times must be strictly monotone");
      }
    }
  }

  /// `steps` equal intervals from `from` to `to`.
  static TimeSchedule uniform(std::size_t steps, double from = kTMax, double to = kTMin) {
    if (steps == 0) throw ShapeError("schedule: need at least one step");
    std::vector<double> t(steps + 1);
    for (std::size_t i = 0; i <= steps; ++i) {
      t[i] = from + (to - from) * static_cast<double>(i) / static_cast<double>(steps);
    }
    t.back() = to;
    return TimeSchedule(std::move(t));
  }

  /// Default generation grid: two steps evaluate at 0.99999 and 0.8, any other
  /// count divides [0.00001, 0.99999] uniformly.
  static TimeSchedule for_steps(std::size_t steps) {
    if (steps == 2) return TimeSchedule({kTMax, 0.8, kTMin});
    return uniform(steps);
  }

  TimeSchedule reversed() const { return TimeSchedule(std::vector<double>(times_.rbegin(), times_.rend())); }

  const std::vector<double>& times() const noexcept { return times_; }
  std::size_t steps() const noexcept { return times_.size() - 1; }
  bool decreasing() const noexcept { return times_[0] > times_[1]; }
  double front() const noexcept { return times_.front(); }
  double back() const noexcept { return times_.back(); }

 private:
  std::vector<double> times_;
};

/// Heun skips its correction on the final step, so N steps cost 2N - 1 evaluations.
inline std::size_t nfe_for_steps(Solver s, std::size_t steps) { return s == Solver::euler ? steps : 2 * steps - 1; }

/// Largest step count whose evaluation cost fits in `nfe`.
inline std::size_t steps_for_nfe(Solver s, std::size_t nfe) {
  if (nfe == 0) throw ShapeError("nfe must be at least 1");
  return s == Solver::euler ? nfe : (nfe + 1) / 2;
}

struct SolverConfig {
  Solver solver = Solver::euler;
  UpdateRule rule = UpdateRule::standard;
  Direction direction = Direction::generate;
  bool record_trajectory = false;
  /// When false, non-finite rows are left in the output for the caller to filter.
  bool fail_on_nonfinite = true;
};

/// Recorded states: states[k] is the [n, d] batch at times[k].
struct Trajectory {
  std::vector<double> times;
  std::vector<Tensor> states;
};

struct IntegrationResult {
  Tensor z;
  std::size_t nfe = 0;
  std::optional<Trajectory> trajectory;
};

/// z + v(z, t) (t_next - t)
inline Tensor euler_step(const VelocityField& field, const Tensor& z, double t, double t_next) {
  if (t == t_next) throw DomainError("euler_step: t and t_next coincide");
  return axpy(z, t_next - t, field.velocity(z, t));
}

/// Euler predictor followed by a trapezoidal corrector.
inline Tensor heun_step(const VelocityField& field, const Tensor& z, double t, double t_next) {
  if (t == t_next) throw DomainError("heun_step: t and t_next coincide");
  const double dt = t_next - t;
  const Tensor v = field.velocity(z, t);
  const Tensor v_next = field.velocity(axpy(z, dt, v), t_next);
  return axpy(z, dt, lincomb(0.5, v, 0.5, v_next));
}

/// Interpolating update (1 - t_next) x_hat + t_next z_1 between the current
/// data estimate and the initial noise.
inline Tensor new_rule_step(const Tensor& x_hat, const Tensor& z1, double t_next) {
  return lincomb(1.0 - t_next, x_hat, t_next, z1);
}

namespace detail {

inline void check_finite(const Tensor& z, std::size_t step) {
  if (!z.all_finite()) throw NumericError("integration produced a non-finite state", step);
}

}  // namespace detail

/// Runs the configured solver over the schedule. Mirrors the reference
/// generation loop: with the interpolating rule the data estimate
/// x_hat = z - t v is recomputed from the (possibly Heun-averaged) velocity.
inline IntegrationResult integrate(const VelocityField& field, const Tensor& z_start, const TimeSchedule& schedule,
                                   const SolverConfig& config = {}) {
  if (z_start.last_dim() != field.dim()) throw ShapeError("integrate: start state dimension does not match field");
  const bool generate = config.direction == Direction::generate;
  if (schedule.decreasing() != generate) {
    throw ShapeError(generate ? "integrate: generation needs a decreasing schedule"
                              : "integrate: inversion needs an increasing schedule");
  }
  if (!generate && config.rule == UpdateRule::interpolating) {
    throw ConfigError("integrate: the interpolating update rule is defined for generation only");
  }

  const auto& ts = schedule.times();
  const std::size_t steps = schedule.steps();
  IntegrationResult res;
  res.z = z_start;
  if (config.record_trajectory) {
    res.trajectory.emplace();
    res.trajectory->times = ts;
    res.trajectory->states.push_back(z_start);
  }
  const Tensor& z1 = z_start;
  const bool interp = config.rule == UpdateRule::interpolating;

  for (std::size_t i = 0; i < steps; ++i) {
    const double t = ts[i], t_next = ts[i + 1], dt = t_next - t;
    Tensor& z = res.z;
    Tensor v = field.velocity(z, t);
    ++res.nfe;
    if (config.solver == Solver::heun && i + 1 < steps) {
      const Tensor z_pred = interp ? new_rule_step(axpy(z, -t, v), z1, t_next) : axpy(z, dt, v);
      const Tensor v_next = field.velocity(z_pred, t_next);
      ++res.nfe;
      v = lincomb(0.5, v, 0.5, v_next);
    }
    z = interp ? new_rule_step(axpy(z, -t, v), z1, t_next) : axpy(z, dt, v);
    if (config.fail_on_nonfinite) detail::check_finite(z, i);
    if (res.trajectory) res.trajectory->states.push_back(z);
  }
  return res;
}

/// Splits the batch into contiguous row blocks integrated on separate threads.
/// Rows never interact, so the result is identical to a single-threaded run.
inline IntegrationResult integrate_parallel(const VelocityField& field, const Tensor& z_start,
                                            const TimeSchedule& schedule, const SolverConfig& config,
                                            std::size_t threads) {
  const Tensor batch = as_batch(z_start);
  const std::size_t n = batch.rows();
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) return integrate(field, z_start, schedule, config);

  std::vector<IntegrationResult> parts(threads);
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < threads; ++k) {
    pool.emplace_back([&, k] {
      try {
        const std::size_t b = n * k / threads, e = n * (k + 1) / threads;
        parts[k] = integrate(field, slice_rows(batch, b, e), schedule, config);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& err : errors) {
    if (err) std::rethrow_exception(err);
  }

  auto concat = [&](auto get) {
    std::vector<double> all;
    all.reserve(batch.size());
    for (auto& p : parts) {
      const Tensor& t = get(p);
      all.insert(all.end(), t.storage().begin(), t.storage().end());
    }
    return Tensor({n, batch.cols()}, std::move(all));
  };
  IntegrationResult res;
  res.nfe = parts[0].nfe;
  res.z = concat([](IntegrationResult& p) -> const Tensor& { return p.z; });
  if (config.record_trajectory) {
    res.trajectory.emplace();
    res.trajectory->times = schedule.times();
    for (std::size_t s = 0; s <= schedule.steps(); ++s) {
      res.trajectory->states.push_back(concat([s](IntegrationResult& p) -> const Tensor& { return p.trajectory->states[s]; }));
    }
  }
  return res;
}

inline constexpr std::string_view kTrajectoryMagic = "RFTR1";

/// Layout: "RFTR1", u32 dim, u64 count, u32 state count, f64 times[state count],
/// then one record per state of count*dim f64 values. Little-endian.
inline std::vector<std::uint8_t> encode_trajectory(const Trajectory& tr) {
  if (tr.states.empty() || tr.states.size() != tr.times.size()) throw ShapeError("trajectory: states/times mismatch");
  const Tensor first = as_batch(tr.states.front());
  ByteWriter w;
  w.magic(kTrajectoryMagic);
  w.u32(static_cast<std::uint32_t>(first.cols()));
  w.u64(first.rows());
  w.u32(static_cast<std::uint32_t>(tr.times.size()));
  w.f64s(tr.times);
  for (const Tensor& s : tr.states) {
    if (s.size() != first.size()) throw ShapeError("trajectory: inconsistent state sizes");
    w.f64s(s.data());
  }
  return w.bytes();
}

inline Trajectory decode_trajectory(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic(kTrajectoryMagic);
  const std::size_t dim = r.u32();
  const std::size_t count = r.u64();
  const std::size_t states = r.u32();
  if (dim == 0 || count == 0 || states < 2) throw IoError("trajectory: empty header fields");
  if (r.remaining() != 8 * (states + states * count * dim)) throw IoError("trajectory: size does not match header");
  Trajectory tr;
  tr.times.resize(states);
  r.f64s(tr.times);
  for (std::size_t s = 0; s < states; ++s) {
    Tensor st({count, dim});
    r.f64s(st.data());
    tr.states.push_back(std::move(st));
  }
  return tr;
}

inline void save_trajectory(const std::filesystem::path& path, const Trajectory& tr) {
  write_file_bytes(path, encode_trajectory(tr));
}

inline Trajectory load_trajectory(const std::filesystem::path& path) { return decode_trajectory(read_file_bytes(path)); }

}  // namespace rflow
