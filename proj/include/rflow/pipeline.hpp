#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rflow/adam.hpp"
#include "rflow/binio.hpp"
#include "rflow/checkpoint.hpp"
#include "rflow/diagnostics.hpp"
#include "rflow/error.hpp"
#include "rflow/field.hpp"
#include "rflow/gmm.hpp"
#include "rflow/losses.hpp"
#include "rflow/mlp.hpp"
#include "rflow/rng.hpp"
#include "rflow/samplers.hpp"
#include "rflow/tensor.hpp"

namespace rflow {

enum class PairOrigin : std::uint32_t { generated = 0, real_inverted = 1 };

/// (x, z) couples of a deterministic coupling. For generated pairs z[i] is the
/// integration start of x[i]; for inverted pairs it is the inversion end.
struct PairDataset {
  std::size_t nfe = 0;
  Solver solver = Solver::heun;
  std::uint64_t source_checksum = 0;
  std::uint64_t seed = 0;  // stream key of generated noise
  PairOrigin origin = PairOrigin::generated;
  Tensor x, z;
  std::vector<std::uint64_t> index;  // noise of record i came from stream (seed, index[i]); may be empty

  std::size_t dim() const { return x.cols(); }
  std::size_t count() const { return x.empty() ? 0 : x.rows(); }

  void validate() const {
    if (x.empty() || z.empty()) throw ShapeError("pair dataset: count must be positive");
    require_same_shape(x, z, "pair dataset");
    if (x.rank() != 2) throw ShapeError("pair dataset: records must be [n, d]");
    if (!index.empty() && index.size() != count()) throw ShapeError("pair dataset: one stream index per record");
  }

  /// Compares headers and records; stream indices are bookkeeping only.
  friend bool operator==(const PairDataset& a, const PairDataset& b) {
    return a.nfe == b.nfe && a.solver == b.solver && a.source_checksum == b.source_checksum && a.seed == b.seed &&
           a.origin == b.origin && a.x == b.x && a.z == b.z;
  }
};

inline constexpr std::string_view kPairMagic = "RFPR1";
inline constexpr std::uint32_t kPairFlagNoiseOmitted = 1u;
inline constexpr std::uint32_t kPairFlagRealInverted = 2u;

/// Layout: "RFPR1", u32 flags, u32 d, u64 n, u32 nfe, u32 solver id,
/// u64 source checksum, u64 noise seed, then n records. A record is x then z
/// (d f64 each) or, with the noise-omitted flag, x then the u64 stream index
/// from which z is regenerated. Little-endian.
inline std::vector<std::uint8_t> encode_pairs(const PairDataset& p, bool omit_noise = false) {
  p.validate();
  if (omit_noise && (p.origin != PairOrigin::generated || p.index.size() != p.count())) {
    throw ShapeError("pair dataset: only generated noise with known stream indices can be omitted");
  }
  std::uint32_t flags = 0;
  if (omit_noise) flags |= kPairFlagNoiseOmitted;
  if (p.origin == PairOrigin::real_inverted) flags |= kPairFlagRealInverted;
  const std::size_t d = p.dim();
  ByteWriter w;
  w.magic(kPairMagic);
  w.u32(flags);
  w.u32(static_cast<std::uint32_t>(d));
  w.u64(p.count());
  w.u32(static_cast<std::uint32_t>(p.nfe));
  w.u32(static_cast<std::uint32_t>(p.solver));
  w.u64(p.source_checksum);
  w.u64(p.seed);
  for (std::size_t i = 0; i < p.count(); ++i) {
    w.f64s(p.x.row(i));
    if (omit_noise) {
      w.u64(p.index[i]);
    } else {
      w.f64s(p.z.row(i));
    }
  }
  return w.bytes();
}

inline PairDataset decode_pairs(std::vector<std::uint8_t> bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic(kPairMagic);
  const std::uint32_t flags = r.u32();
  if (flags & ~(kPairFlagNoiseOmitted | kPairFlagRealInverted)) throw IoError("pairs: unknown header flags");
  const bool omitted = flags & kPairFlagNoiseOmitted;
  PairDataset p;
  p.origin = (flags & kPairFlagRealInverted) ? PairOrigin::real_inverted : PairOrigin::generated;
  if (omitted && p.origin != PairOrigin::generated) throw IoError("pairs: inverted noise cannot be omitted");
  const std::size_t d = r.u32();
  const std::size_t n = r.u64();
  p.nfe = r.u32();
  const std::uint32_t solver = r.u32();
  if (solver > 1) throw IoError("pairs: unknown solver id");
  p.solver = static_cast<Solver>(solver);
  p.source_checksum = r.u64();
  p.seed = r.u64();
  if (d == 0 || n == 0) throw IoError("pairs: empty dataset");
  const std::size_t record = omitted ? 8 * (d + 1) : 16 * d;
  if (r.remaining() != n * record) throw IoError("pairs: size does not match header");
  p.x = Tensor({n, d});
  p.z = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    r.f64s(p.x.row(i));
    if (omitted) {
      const std::uint64_t idx = r.u64();
      const Tensor zi = standard_normal_rows(1, d, p.seed, idx);
      std::copy(zi.storage().begin(), zi.storage().end(), p.z.row(i).begin());
      p.index.push_back(idx);
    } else {
      r.f64s(p.z.row(i));
    }
  }
  return p;
}

inline void save_pairs(const std::filesystem::path& path, const PairDataset& p, bool omit_noise = false) {
  write_file_bytes(path, encode_pairs(p, omit_noise));
}

inline PairDataset load_pairs(const std::filesystem::path& path) { return decode_pairs(read_file_bytes(path)); }

inline std::uint64_t pairs_checksum(const PairDataset& p) { return fnv1a64(encode_pairs(p)); }

struct PairGeneration {
  PairDataset pairs;
  std::size_t skipped = 0;  // records whose integration left the finite range
};

namespace detail {

inline Tensor keep_rows(const Tensor& a, const std::vector<std::size_t>& rows) { return gather_rows(a, rows); }

inline std::vector<std::size_t> finite_rows(const Tensor& a) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    bool ok = true;
    for (double v : a.row(i)) ok = ok && std::isfinite(v);
    if (ok) keep.push_back(i);
  }
  return keep;
}

}  // namespace detail

/// Draws z[i] from stream (seed, i), integrates each to t_min, and stores
/// (endpoint, z). Non-finite endpoints are skipped.
inline PairGeneration generate_pairs(const VelocityField& field, std::size_t n, std::size_t nfe, Solver solver,
                                     std::uint64_t seed, std::size_t threads = 1,
                                     std::uint64_t source_checksum = 0) {
  if (n == 0) throw ShapeError("generate_pairs: n must be at least 1");
  const std::size_t steps = steps_for_nfe(solver, nfe);
  const Tensor z = standard_normal_rows(n, field.dim(), seed, 0);
  SolverConfig cfg{solver, UpdateRule::standard, Direction::generate};
  cfg.fail_on_nonfinite = false;
  const IntegrationResult res = integrate_parallel(field, z, TimeSchedule::for_steps(steps), cfg, threads);

  const std::vector<std::size_t> keep = detail::finite_rows(res.z);
  if (keep.empty()) throw NumericError("generate_pairs: every record failed to integrate", 0);
  PairGeneration out;
  out.skipped = n - keep.size();
  PairDataset& p = out.pairs;
  p.nfe = res.nfe;
  p.solver = solver;
  p.source_checksum = source_checksum;
  p.seed = seed;
  p.origin = PairOrigin::generated;
  p.x = detail::keep_rows(res.z, keep);
  p.z = detail::keep_rows(z, keep);
  p.index.assign(keep.begin(), keep.end());
  return out;
}

struct InversionOutcome {
  PairDataset pairs;
  NoiseStats noise;
  std::size_t skipped = 0;
};

/// Integrates real samples from t_min up to t_max and pairs each sample with
/// its inverted noise.
inline InversionOutcome invert_real_data(const VelocityField& field, const Tensor& samples, std::size_t nfe,
                                         Solver solver, std::size_t threads = 1, std::uint64_t source_checksum = 0,
                                         std::size_t max_lag = 1) {
  const Tensor x = as_batch(samples);
  if (x.cols() != field.dim()) throw ShapeError("invert_real_data: sample dimension does not match field");
  const std::size_t steps = steps_for_nfe(solver, nfe);
  SolverConfig cfg{solver, UpdateRule::standard, Direction::invert};
  cfg.fail_on_nonfinite = false;
  const IntegrationResult res =
      integrate_parallel(field, x, TimeSchedule::for_steps(steps).reversed(), cfg, threads);
  const std::vector<std::size_t> keep = detail::finite_rows(res.z);
  if (keep.empty()) throw NumericError("invert_real_data: every record failed to integrate", 0);

  InversionOutcome out;
  out.skipped = x.rows() - keep.size();
  PairDataset& p = out.pairs;
  p.nfe = res.nfe;
  p.solver = solver;
  p.source_checksum = source_checksum;
  p.origin = PairOrigin::real_inverted;
  p.x = detail::keep_rows(x, keep);
  p.z = detail::keep_rows(res.z, keep);
  out.noise = noise_statistics(p.z, std::min(max_lag, p.dim() - 1));
  return out;
}

enum class CouplingKind { independent, paired, real_inverted };

/// Source of training couples. Independent draws x from the target and z from
/// N(0, I) on separate streams; paired replays stored couples; real_inverted
/// mixes (real, inverted noise) couples with stored synthetic couples, taking a
/// synthetic couple with probability `mix_p`.
struct Coupling {
  CouplingKind kind = CouplingKind::independent;
  std::optional<GmmSpec> target;
  std::shared_ptr<const PairDataset> pairs;      // paired: the couples; real_inverted: the real couples
  std::shared_ptr<const PairDataset> synthetic;  // real_inverted only
  double mix_p = 0.0;

  static Coupling independent(GmmSpec spec) {
    Coupling c;
    c.target = std::move(spec);
    return c;
  }
  static Coupling paired(std::shared_ptr<const PairDataset> p) {
    Coupling c;
    c.kind = CouplingKind::paired;
    c.pairs = std::move(p);
    return c;
  }
  static Coupling mixed(std::shared_ptr<const PairDataset> real, std::shared_ptr<const PairDataset> synth, double p) {
    Coupling c;
    c.kind = CouplingKind::real_inverted;
    c.pairs = std::move(real);
    c.synthetic = std::move(synth);
    c.mix_p = p;
    return c;
  }

  std::size_t dim() const {
    if (kind == CouplingKind::independent) return target->dim();
    if (kind == CouplingKind::real_inverted && (!pairs || pairs->count() == 0)) return synthetic->dim();
    return pairs->dim();
  }

  void validate() const {
    switch (kind) {
      case CouplingKind::independent:
        if (!target) throw ConfigError("coupling: independent coupling needs a target");
        target->validate();
        break;
      case CouplingKind::paired:
        if (!pairs || pairs->count() == 0) throw ConfigError("coupling: empty pair set");
        break;
      case CouplingKind::real_inverted:
        if (!(mix_p >= 0.0 && mix_p <= 1.0)) throw ConfigError("coupling: mixing probability must lie in [0, 1]");
        if (!pairs || pairs->count() == 0) {
          if (mix_p < 1.0) throw ConfigError("coupling: empty real pair set");
        }
        if (mix_p > 0.0 && (!synthetic || synthetic->count() == 0)) {
          throw ConfigError("coupling: mixing needs a nonempty synthetic pair set");
        }
        if (pairs && synthetic && pairs->count() && synthetic->count() && pairs->dim() != synthetic->dim()) {
          throw ConfigError("coupling: real and synthetic pairs differ in dimension");
        }
        break;
    }
  }
};

namespace detail {

/// Walks a pair set in epochs, each a fresh Fisher-Yates permutation keyed by
/// (seed, epoch). Records are moved as whole (x, z) couples.
class EpochWalker {
 public:
  EpochWalker(const PairDataset* pairs, std::uint64_t seed) : pairs_(pairs), seed_(seed) {}

  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    order_.resize(pairs_->count());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    CounterRng rng(seed_, epoch_++);
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
    pos_ = 0;
  }

  const PairDataset* pairs_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

class BatchSource {
 public:
  BatchSource(const Coupling& c, std::uint64_t seed)
      : c_(c),
        x_seed_(derive_seed(seed, 1)),
        z_seed_(derive_seed(seed, 2)),
        mix_seed_(derive_seed(seed, 5)),
        primary_(c.kind == CouplingKind::real_inverted ? c.synthetic.get() : c.pairs.get(), derive_seed(seed, 3)),
        real_(c.pairs.get(), derive_seed(seed, 4)) {}

  void next(std::size_t batch, std::uint64_t iteration, Tensor& x, Tensor& z) {
    const std::size_t d = c_.dim();
    if (c_.kind == CouplingKind::independent) {
      x = c_.target->sample(batch, x_seed_, iteration * batch);
      z = standard_normal_rows(batch, d, z_seed_, iteration * batch);
      return;
    }
    x = Tensor({batch, d});
    z = Tensor({batch, d});
    CounterRng mix(mix_seed_, iteration);
    for (std::size_t i = 0; i < batch; ++i) {
      const PairDataset* src = c_.pairs.get();
      std::size_t r;
      if (c_.kind == CouplingKind::paired) {
        r = primary_.next();
      } else if (mix.uniform() < c_.mix_p) {
        src = c_.synthetic.get();
        r = primary_.next();
      } else {
        r = real_.next();
      }
      std::copy(src->x.row(r).begin(), src->x.row(r).end(), x.row(i).begin());
      std::copy(src->z.row(r).begin(), src->z.row(r).end(), z.row(i).begin());
    }
  }

 private:
  const Coupling& c_;
  std::uint64_t x_seed_, z_seed_, mix_seed_;
  EpochWalker primary_, real_;
};

}  // namespace detail

struct ModelConfig {
  std::vector<std::size_t> hidden{64, 64, 64};
  Activation activation = Activation::tanh;
  Parameterization parameterization = Parameterization::v_pred;
};

struct TrainConfig {
  std::size_t batch = 256;
  std::size_t iterations = 2000;
  std::uint64_t seed = 0;
  LossSpec loss;
  TimestepDistribution timesteps;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 100, 0.999};
  double dropout = 0.0;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  ModelConfig model;

  void validate(std::size_t d) const {
    if (batch == 0) throw ConfigError("train: batch size must be at least 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("train: dropout must lie in [0, 1)");
    if (!(adam.learning_rate > 0.0)) throw ConfigError("train: learning rate must be positive");
    if (!(adam.ema_decay >= 0.0 && adam.ema_decay < 1.0)) throw ConfigError("train: ema decay must lie in [0, 1)");
    for (std::size_t h : model.hidden) {
      if (h == 0) throw ConfigError("train: hidden widths must be positive");
    }
    timesteps.validate();
    loss.validate(d);
  }
};

/// Warm start for training: an existing checkpoint, or a teacher field (for
/// instance a converted diffusion model) distilled into fresh weights by
/// velocity regression before the main loop.
struct TrainInit {
  std::optional<Checkpoint> checkpoint;
  const VelocityField* teacher = nullptr;
  std::size_t distill_iterations = 0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> loss_history;
  std::vector<double> distill_history;
};

using CheckpointCallback = std::function<void(std::size_t iteration, const Checkpoint&)>;

inline constexpr double kDivergenceLoss = 1e6;

namespace detail {

inline std::vector<double> draw_timesteps(const TimestepDistribution& dist, std::size_t n, std::uint64_t seed,
                                          std::uint64_t iteration) {
  CounterRng rng(seed, iteration);
  std::vector<double> t(n);
  for (double& v : t) v = sample_timestep(dist, rng.uniform());
  return t;
}

inline void check_loss(double loss, std::size_t iteration) {
  if (std::isnan(loss)) throw NumericError("training loss is NaN at iteration " + std::to_string(iteration), iteration);
  if (!(loss <= kDivergenceLoss)) {
    throw NumericError("training diverged (loss " + std::to_string(loss) + ") at iteration " + std::to_string(iteration),
                       iteration);
  }
}

/// Mean squared distance between the network's velocity and the teacher's,
/// with gradients.
inline ObjectiveResult distill_objective(const MlpParams& params, Parameterization param, const VelocityField& teacher,
                                         const Tensor& x_t, std::span<const double> t) {
  const std::size_t n = x_t.rows(), d = x_t.cols();
  Tensor target({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor row({1, d}, std::vector<double>(x_t.row(i).begin(), x_t.row(i).end()));
    const Tensor v = teacher.velocity(row, t[i]);
    std::copy(v.storage().begin(), v.storage().end(), target.row(i).begin());
  }
  Tape tape;
  const std::vector<Var> pv = tape_parameters(tape, params);
  Var net = forward_mlp(tape, params, pv, tape.constant(network_input(x_t, t)), 0.0, nullptr);
  if (param == Parameterization::x_pred) {
    std::vector<double> inv_t(n);
    for (std::size_t i = 0; i < n; ++i) inv_t[i] = 1.0 / t[i];
    net = scale_rows(tape, sub(tape, tape.constant(x_t), net), std::move(inv_t));
  }
  Var loss = mean(tape, row_sq_norm(tape, sub(tape, net, tape.constant(target))));
  tape.backward(loss);
  ObjectiveResult r;
  r.loss = tape.value(loss)[0];
  for (Var v : pv) r.grads.push_back(tape.grad(v));
  return r;
}

}  // namespace detail

/// Minimizes the configured objective over couples drawn from `coupling`.
/// Returns raw and EMA weights plus the per-iteration loss.
inline TrainResult train_flow(const Coupling& coupling, const TrainConfig& config, const TrainInit& init = {},
                              const CheckpointCallback& on_checkpoint = nullptr) {
  coupling.validate();
  const std::size_t d = coupling.dim();
  config.validate(d);

  TrainResult out;
  if (init.checkpoint) {
    const Checkpoint& c = *init.checkpoint;
    if (c.params.output_width() != d) throw ConfigError("train: init checkpoint dimension does not match the data");
    if (c.params.widths != field_widths(d, config.model.hidden) || c.params.activation != config.model.activation ||
        c.parameterization != config.model.parameterization) {
      throw ConfigError("train: init checkpoint architecture differs from the configured model");
    }
    out.checkpoint = c;
  } else {
    out.checkpoint = Checkpoint::from_params(
        MlpParams::init(field_widths(d, config.model.hidden), config.model.activation, derive_seed(config.seed, 0)),
        config.model.parameterization);
  }

  MlpParams& params = out.checkpoint.params;
  const Parameterization param = out.checkpoint.parameterization;
  detail::BatchSource source(coupling, config.seed);
  const std::uint64_t t_seed = derive_seed(config.seed, 6);
  Tensor x, z;

  if (init.teacher && !init.checkpoint && init.distill_iterations > 0) {
    if (init.teacher->dim() != d) throw ConfigError("train: teacher dimension does not match the data");
    AdamState st = AdamState::init(params.tensors, config.adam);
    for (std::size_t it = 0; it < init.distill_iterations; ++it) {
      source.next(config.batch, it, x, z);
      const std::vector<double> t = detail::draw_timesteps(config.timesteps, config.batch, derive_seed(t_seed, 1), it);
      Tensor x_t(x.shape());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        for (std::size_t j = 0; j < d; ++j) x_t.at(i, j) = (1.0 - t[i]) * x.at(i, j) + t[i] * z.at(i, j);
      }
      ObjectiveResult r = detail::distill_objective(params, param, *init.teacher, x_t, t);
      detail::check_loss(r.loss, it);
      adam_step(st, params.tensors, r.grads);
      out.distill_history.push_back(r.loss);
    }
    out.checkpoint.ema = params.tensors;
  }
  if (config.iterations == 0) return out;

  AdamState state = AdamState::init(params.tensors, config.adam);
  state.ema = out.checkpoint.ema;
  const std::uint64_t drop_seed = derive_seed(config.seed, 7);
  const std::uint64_t offset = init.teacher ? init.distill_iterations : 0;
  out.loss_history.reserve(config.iterations);
  for (std::size_t it = 0; it < config.iterations; ++it) {
    source.next(config.batch, offset + it, x, z);
    const std::vector<double> t = detail::draw_timesteps(config.timesteps, config.batch, t_seed, it);
    CounterRng drop(drop_seed, it);
    ObjectiveResult r = objective_estimate(params, param, config.loss, x, z, t, {config.dropout, &drop});
    detail::check_loss(r.loss, it);
    adam_step(state, params.tensors, r.grads);
    out.loss_history.push_back(r.loss);
    if (config.checkpoint_every && on_checkpoint && (it + 1) % config.checkpoint_every == 0 &&
        it + 1 < config.iterations) {
      out.checkpoint.ema = state.ema;
      on_checkpoint(it + 1, out.checkpoint);
    }
  }
  out.checkpoint.ema = state.ema;
  return out;
}

/// Continues training on (real, inverted noise) couples, mixing in stored
/// synthetic couples with probability p.
inline TrainResult finetune_with_real(const Checkpoint& checkpoint, std::shared_ptr<const PairDataset> real,
                                      std::shared_ptr<const PairDataset> synthetic, double p,
                                      const TrainConfig& config) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("finetune: mixing probability must lie in [0, 1]");
  if (p < 1.0 && (!real || real->count() == 0)) throw ConfigError("finetune: empty real pair set");
  TrainInit init;
  init.checkpoint = checkpoint;
  return train_flow(Coupling::mixed(std::move(real), std::move(synthetic), p), config, init);
}

struct ReflowConfig {
  GmmSpec target;
  TrainConfig first;   // 1-rectified flow on the independent coupling
  TrainConfig later;   // every subsequent stage
  std::size_t pairs = 100000;
  std::size_t pair_nfe = 64;
  Solver pair_solver = Solver::heun;
  std::uint64_t pair_seed = 1;
  bool init_from_previous = true;
  std::size_t threads = 1;
};

struct StageResult {
  std::size_t stage = 0;  // k of the k-rectified flow
  Checkpoint checkpoint;
  std::vector<double> loss_history;
  std::shared_ptr<const PairDataset> trained_on;  // null for stage 1
  std::size_t skipped_pairs = 0;
};

using StageCallback = std::function<void(const StageResult&)>;

/// Stage seeds for k >= 2; stage 1 uses the configured seeds directly.
inline std::uint64_t stage_train_seed(const ReflowConfig& c, std::size_t k) {
  return k == 1 ? c.first.seed : derive_seed(c.later.seed, k);
}
inline std::uint64_t stage_pair_seed(const ReflowConfig& c, std::size_t k) { return derive_seed(c.pair_seed, k); }

namespace detail {

template <class F>
auto run_stage(std::size_t k, F&& f) {
  const std::string tag = "stage " + std::to_string(k) + ": ";
  try {
    return f();
  } catch (const NumericError& e) {
    throw NumericError(tag + e.what(), e.index());
  } catch (const ConfigError& e) {
    throw ConfigError(tag + e.what());
  } catch (const IoError& e) {
    throw IoError(tag + e.what());
  }
}

}  // namespace detail

/// Trains the 1-rectified flow, then for k = 2..K generates pairs with the
/// previous stage's EMA field and trains the k-rectified flow on them,
/// initialized from the previous weights.
inline std::vector<StageResult> reflow(const ReflowConfig& config, std::size_t K,
                                       const StageCallback& on_stage = nullptr) {
  if (K == 0) throw ConfigError("reflow: need at least one round");
  config.target.validate();
  std::vector<StageResult> stages;

  StageResult first = detail::run_stage(1, [&] {
    StageResult s;
    s.stage = 1;
    TrainResult r = train_flow(Coupling::independent(config.target), config.first);
    s.checkpoint = std::move(r.checkpoint);
    s.loss_history = std::move(r.loss_history);
    return s;
  });
  if (on_stage) on_stage(first);
  stages.push_back(std::move(first));

  for (std::size_t k = 2; k <= K; ++k) {
    StageResult s = detail::run_stage(k, [&] {
      const Checkpoint& prev = stages.back().checkpoint;
      const NeuralField teacher = NeuralField::from_checkpoint(prev);
      PairGeneration gen = generate_pairs(teacher, config.pairs, config.pair_nfe, config.pair_solver,
                                          stage_pair_seed(config, k), config.threads, checkpoint_checksum(prev));
      auto pairs = std::make_shared<const PairDataset>(std::move(gen.pairs));

      TrainConfig tc = config.later;
      tc.seed = stage_train_seed(config, k);
      TrainInit init;
      if (config.init_from_previous) init.checkpoint = prev;
      TrainResult r = train_flow(Coupling::paired(pairs), tc, init);

      StageResult out;
      out.stage = k;
      out.checkpoint = std::move(r.checkpoint);
      out.loss_history = std::move(r.loss_history);
      out.trained_on = std::move(pairs);
      out.skipped_pairs = gen.skipped;
      return out;
    });
    if (on_stage) on_stage(s);
    stages.push_back(std::move(s));
  }
  return stages;
}

}  // namespace rflow
