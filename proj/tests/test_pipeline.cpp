#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

#include "oracles.hpp"
#include "rflow/pipeline.hpp"

using namespace rflow;

namespace {

double max_abs(const Tensor& a) {
  double m = 0;
  for (double v : a.storage()) m = std::max(m, std::abs(v));
  return m;
}

TrainConfig small_config(std::size_t iterations, std::uint64_t seed = 1) {
  TrainConfig c;
  c.batch = 64;
  c.iterations = iterations;
  c.seed = seed;
  c.model.hidden = {16, 16};
  return c;
}

std::shared_ptr<const PairDataset> straight_pairs(std::size_t n, double sigma, double mu, std::uint64_t seed) {
  auto p = std::make_shared<PairDataset>();
  p->seed = seed;
  p->z = standard_normal_rows(n, 2, seed);
  p->x = sigma * p->z;
  for (double& v : p->x.storage()) v += mu;
  return p;
}

/// NaN for rows whose first coordinate is positive.
class HalfBroken final : public VelocityField {
 public:
  std::size_t dim() const override { return 2; }
  Tensor velocity(const Tensor& z, double) const override {
    Tensor v(z.shape());
    for (std::size_t i = 0; i < z.rows(); ++i) {
      if (z.at(i, 0) > 0.0) v.at(i, 0) = std::numeric_limits<double>::quiet_NaN();
    }
    return v;
  }
};

}  // namespace

TEST(BatchSource, EpochVisitsEveryCoupleOnceAndKeepsPairs) {
  auto p = straight_pairs(10, 3.0, 0.5, 2);
  const Coupling c = Coupling::paired(p);
  detail::BatchSource src(c, 7);
  for (std::uint64_t it = 0; it < 3; ++it) {
    Tensor x, z;
    src.next(10, it, x, z);
    std::map<double, int> seen;
    for (std::size_t i = 0; i < 10; ++i) {
      EXPECT_EQ(x.at(i, 0), 3.0 * z.at(i, 0) + 0.5);
      EXPECT_EQ(x.at(i, 1), 3.0 * z.at(i, 1) + 0.5);
      ++seen[z.at(i, 0)];
    }
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(BatchSource, IndependentCouplingUsesSeparateStreams) {
  const Coupling c = Coupling::independent(GmmSpec::standard_normal(2));
  detail::BatchSource src(c, 8);
  Tensor x, z;
  src.next(20000, 0, x, z);
  double xz = 0;
  for (std::size_t i = 0; i < x.size(); ++i) xz += x[i] * z[i];
  EXPECT_LT(std::abs(xz / x.size()), 4.0 / std::sqrt(double(x.size())));
  Tensor x2, z2;
  src.next(20000, 1, x2, z2);
  EXPECT_NE(x, x2);
}

TEST(TrainFlow, ZeroIterationsReturnsInitialization) {
  const Coupling c = Coupling::independent(rflow::testing::toy_gmm());
  const TrainResult fresh = train_flow(c, small_config(0));
  EXPECT_EQ(fresh.checkpoint.params, MlpParams::init(field_widths(2, {16, 16}), Activation::tanh, derive_seed(1, 0)));
  EXPECT_EQ(fresh.checkpoint.ema, fresh.checkpoint.params.tensors);
  EXPECT_TRUE(fresh.loss_history.empty());

  Checkpoint init = fresh.checkpoint;
  init.ema[0][0] += 1.0;
  TrainInit ti;
  ti.checkpoint = init;
  EXPECT_EQ(train_flow(c, small_config(0), ti).checkpoint, init);
}

TEST(TrainFlow, RejectsMismatchedInitArchitecture) {
  const Coupling c = Coupling::independent(rflow::testing::toy_gmm());
  TrainInit ti;
  ti.checkpoint = Checkpoint::from_params(MlpParams::init(field_widths(2, {8}), Activation::tanh, 1),
                                          Parameterization::v_pred);
  EXPECT_THROW(train_flow(c, small_config(1), ti), ConfigError);
}

TEST(TrainFlow, NanAndDivergenceAbortWithIteration) {
  GmmSpec huge = GmmSpec::isotropic(Tensor::vector({1e5, 0.0}), 1.0);
  try {
    train_flow(Coupling::independent(huge), small_config(5));
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.index(), 0u);
    EXPECT_NE(std::string(e.what()).find("diverged"), std::string::npos);
  }
  GmmSpec nan = GmmSpec::isotropic(Tensor::vector({std::numeric_limits<double>::quiet_NaN(), 0.0}), 1.0);
  try {
    train_flow(Coupling::independent(nan), small_config(5));
    FAIL() << "expected NaN abort";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("NaN"), std::string::npos);
  }
}

TEST(TrainFlow, DeterministicAndCheckpointCadence) {
  const Coupling c = Coupling::independent(rflow::testing::toy_gmm());
  TrainConfig cfg = small_config(6);
  cfg.checkpoint_every = 2;
  std::vector<std::size_t> at;
  const TrainResult a = train_flow(c, cfg, {}, [&](std::size_t it, const Checkpoint&) { at.push_back(it); });
  const TrainResult b = train_flow(c, cfg);
  EXPECT_EQ(a.checkpoint, b.checkpoint);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(at, (std::vector<std::size_t>{2, 4}));
}

TEST(TrainFlow, LearnsIdentityTransportVelocity) {
  const std::size_t d = 2;
  TrainConfig cfg = small_config(5000, 3);
  cfg.batch = 128;
  cfg.adam.decay_steps = cfg.iterations;
  const TrainResult r = train_flow(Coupling::independent(GmmSpec::standard_normal(d)), cfg);
  const NeuralField learned = NeuralField::from_checkpoint(r.checkpoint);
  const GmmSpec g = GmmSpec::standard_normal(d);
  double se = 0;
  std::size_t n = 0;
  for (int k = 1; k <= 9; ++k) {
    const double t = 0.1 * k;
    const Tensor z = standard_normal_rows(200, d, 99, 1000 * k);
    const Tensor zt = std::sqrt((1 - t) * (1 - t) + t * t) * z;  // held-out z_t from the marginal
    se += mean_squared_error(learned.velocity(zt, t), analytic_velocity(g, zt, t)) * zt.size();
    n += zt.size();
  }
  EXPECT_LT(se / n, 1e-2);
}

TEST(TrainFlow, StraightCouplingGivesStepCountInvariantEndpoint) {
  auto pairs = straight_pairs(4000, 0.5, 1.0, 4);
  TrainConfig cfg = small_config(3000, 5);
  cfg.batch = 128;
  cfg.adam.decay_steps = cfg.iterations;
  const TrainResult r = train_flow(Coupling::paired(pairs), cfg);
  const NeuralField f = NeuralField::from_checkpoint(r.checkpoint);
  const Tensor z = standard_normal_rows(2000, 2, 6);
  Tensor truth = 0.5 * z;
  for (double& v : truth.storage()) v += 1.0;
  const double e1 = mean_squared_error(integrate(f, z, TimeSchedule::for_steps(1)).z, truth);
  const double e64 = mean_squared_error(integrate(f, z, TimeSchedule::for_steps(64)).z, truth);
  // The exact flow of the independent coupling maps every z to the mean in one
  // step, an error of sigma^2 = 0.25 per coordinate.
  EXPECT_LT(e1, 0.5 * 0.25) << "e64 " << e64;
  EXPECT_LT(e64, 0.1 * 0.25);
}

TEST(GeneratePairs, IdentityAndScalingOracles) {
  const AnalyticGmmField id(GmmSpec::standard_normal(2));
  const PairGeneration a = generate_pairs(id, 200, 64, Solver::heun, 11);
  EXPECT_EQ(a.skipped, 0u);
  EXPECT_EQ(a.pairs.nfe, 63u);
  // The last Heun step is an uncorrected Euler step of local error ~ h^2 |z| / 2.
  const double h = 1.0 / 32;
  EXPECT_LT(max_abs_diff(a.pairs.x, a.pairs.z), h * h * max_abs(a.pairs.z));
  EXPECT_EQ(a.pairs.z, standard_normal_rows(200, 2, 11));

  const AnalyticGmmField wide(GmmSpec::isotropic(Tensor::vector({0.0, 0.0}), 4.0));
  const PairGeneration b = generate_pairs(wide, 200, 255, Solver::heun, 12);
  EXPECT_EQ(b.pairs.nfe, 255u);
  EXPECT_LT(max_abs_diff(b.pairs.x, 2.0 * b.pairs.z), 1e-3);
}

TEST(GeneratePairs, DeterministicAndParallelInvariant) {
  const AnalyticGmmField f(rflow::testing::toy_gmm());
  const PairGeneration a = generate_pairs(f, 50, 8, Solver::heun, 13);
  const PairGeneration b = generate_pairs(f, 50, 8, Solver::heun, 13, 3);
  EXPECT_EQ(encode_pairs(a.pairs), encode_pairs(b.pairs));
  EXPECT_NE(generate_pairs(f, 50, 8, Solver::heun, 14).pairs, a.pairs);
  EXPECT_THROW(generate_pairs(f, 0, 8, Solver::heun, 1), ShapeError);
}

TEST(GeneratePairs, NonFiniteRecordsAreSkipped) {
  const HalfBroken f;
  const PairGeneration g = generate_pairs(f, 100, 4, Solver::euler, 15);
  const Tensor z = standard_normal_rows(100, 2, 15);
  std::size_t positive = 0;
  for (std::size_t i = 0; i < 100; ++i) positive += z.at(i, 0) > 0.0;
  EXPECT_EQ(g.skipped, positive);
  EXPECT_EQ(g.pairs.count(), 100 - positive);
  for (std::size_t k = 0; k < g.pairs.count(); ++k) {
    EXPECT_EQ(g.pairs.z.at(k, 0), z.at(g.pairs.index[k], 0));
  }
  // Omitted-noise files rebuild z from the surviving stream indices.
  EXPECT_EQ(decode_pairs(encode_pairs(g.pairs, true)), g.pairs);
}

TEST(InvertRealData, IdentityFieldAndPreconditions) {
  const AnalyticGmmField id(GmmSpec::standard_normal(2));
  const Tensor x = standard_normal_rows(300, 2, 16);
  const InversionOutcome out = invert_real_data(id, x, 64, Solver::heun);
  EXPECT_LT(max_abs_diff(out.pairs.z, x), 1.0 / (32 * 32) * max_abs(x));
  EXPECT_EQ(out.pairs.origin, PairOrigin::real_inverted);
  EXPECT_EQ(out.noise.count, 300u);
  EXPECT_THROW(invert_real_data(id, x, 0, Solver::heun), ShapeError);
  EXPECT_THROW(invert_real_data(id, standard_normal_rows(3, 3, 1), 4, Solver::heun), ShapeError);
}

TEST(Finetune, ZeroIterationsLeaveCheckpointUnchanged) {
  const Coupling c = Coupling::independent(rflow::testing::toy_gmm());
  const Checkpoint ck = train_flow(c, small_config(3)).checkpoint;
  auto real = straight_pairs(20, 1.0, 0.0, 17);
  EXPECT_EQ(finetune_with_real(ck, real, nullptr, 0.0, small_config(0)).checkpoint, ck);
  EXPECT_THROW(finetune_with_real(ck, nullptr, nullptr, 0.0, small_config(1)), ConfigError);
  EXPECT_THROW(finetune_with_real(ck, real, nullptr, 0.5, small_config(1)), ConfigError);
  EXPECT_THROW(finetune_with_real(ck, real, nullptr, 1.5, small_config(1)), ConfigError);
}

TEST(Finetune, FullSyntheticMixingEqualsPairedTraining) {
  const Coupling c = Coupling::independent(rflow::testing::toy_gmm());
  const Checkpoint ck = train_flow(c, small_config(3)).checkpoint;
  auto real = straight_pairs(30, 1.0, 0.0, 18);
  auto synth = straight_pairs(40, 0.5, 1.0, 19);
  const TrainConfig cfg = small_config(20, 20);
  TrainInit init;
  init.checkpoint = ck;
  const TrainResult paired = train_flow(Coupling::paired(synth), cfg, init);
  EXPECT_EQ(finetune_with_real(ck, real, synth, 1.0, cfg).checkpoint, paired.checkpoint);
  EXPECT_EQ(finetune_with_real(ck, nullptr, synth, 1.0, cfg).checkpoint, paired.checkpoint);
}

TEST(Reflow, SingleRoundTrainsOnlyTheFirstFlow) {
  ReflowConfig rc;
  rc.target = rflow::testing::toy_gmm();
  rc.first = small_config(4);
  rc.later = small_config(4);
  rc.pairs = 50;
  std::size_t calls = 0;
  const auto stages = reflow(rc, 1, [&](const StageResult&) { ++calls; });
  ASSERT_EQ(stages.size(), 1u);
  EXPECT_EQ(calls, 1u);
  EXPECT_EQ(stages[0].trained_on, nullptr);
  EXPECT_THROW(reflow(rc, 0), ConfigError);
}

TEST(Reflow, TwoRoundsAreReproducibleAndChained) {
  ReflowConfig rc;
  rc.target = rflow::testing::toy_gmm();
  rc.first = small_config(10);
  rc.later = small_config(10, 9);
  rc.pairs = 64;
  rc.pair_nfe = 4;
  const auto a = reflow(rc, 2);
  const auto b = reflow(rc, 2);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[1].checkpoint, b[1].checkpoint);
  EXPECT_EQ(*a[1].trained_on, *b[1].trained_on);
  EXPECT_EQ(a[1].trained_on->source_checksum, checkpoint_checksum(a[0].checkpoint));
  EXPECT_EQ(a[1].trained_on->seed, stage_pair_seed(rc, 2));
}

TEST(Reflow, StageFailureNamesTheStage) {
  ReflowConfig rc;
  rc.target = GmmSpec::isotropic(Tensor::vector({1e5, 0.0}), 1.0);
  rc.first = small_config(4);
  rc.later = small_config(4);
  try {
    reflow(rc, 2);
    FAIL() << "expected failure";
  } catch (const NumericError& e) {
    EXPECT_EQ(std::string(e.what()).rfind("stage 1: ", 0), 0u);
  }
}
