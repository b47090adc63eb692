// rflow: command-line front end for training, reflow, sampling, inversion and diagnostics.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <system_error>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rflow/config.hpp"
#include "rflow/diagnostics.hpp"
#include "rflow/pipeline.hpp"
#include "rflow/samplers.hpp"

namespace fs = std::filesystem;
using namespace rflow;

#ifndef RFLOW_VERSION
#define RFLOW_VERSION "dev"
#endif

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

struct Options {
  std::string command;
  fs::path config_path;
  std::optional<fs::path> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
};

/// Exclusive ownership of an output directory for the lifetime of a run.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".rflow.lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw IoError("output directory '" + dir.string() + "' is locked by another run (remove " +
                          path_.string() + " if stale)");
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

std::string loss_csv(const std::vector<double>& history) {
  std::string s = "iteration,loss\n";
  for (std::size_t i = 0; i < history.size(); ++i) s += std::to_string(i + 1) + "," + format_double(history[i]) + "\n";
  return s;
}

std::string matrix_csv(const Tensor& a) {
  std::string s;
  for (std::size_t j = 0; j < a.cols(); ++j) s += (j ? ",x" : "x") + std::to_string(j);
  s += "\n";
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) s += (j ? "," : "") + format_double(a.at(i, j));
    s += "\n";
  }
  return s;
}

/// Collects artifacts and metadata for manifest.json.
class Run {
 public:
  Run(std::string command, fs::path out, json config, std::size_t threads)
      : command_(std::move(command)), out_(std::move(out)), config_(std::move(config)), threads_(threads) {}

  const fs::path& out() const { return out_; }
  std::size_t threads() const { return threads_; }
  json& seeds() { return seeds_; }
  json& extra() { return extra_; }

  fs::path file(const std::string& rel) {
    const fs::path p = out_ / rel;
    fs::create_directories(p.parent_path());
    files_.push_back(rel);
    return p;
  }

  void text(const std::string& rel, const std::string& body) { write_text(file(rel), body); }

  void finish() {
    const std::string cfg = config_.dump(2) + "\n";
    text("config.json", cfg);
    json m;
    m["tool"] = "rflow";
    m["version"] = RFLOW_VERSION;
    m["command"] = command_;
    m["config_hash"] = hex64(fnv1a64(cfg));
    m["seeds"] = seeds_;
    json files = json::object();
    for (const std::string& rel : files_) files[rel] = hex64(fnv1a64(read_file_bytes(out_ / rel)));
    m["files"] = files;
    for (auto& [k, v] : extra_.items()) m[k] = v;
    write_text(out_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  std::string command_;
  fs::path out_;
  json config_;
  std::size_t threads_;
  json seeds_ = json::object();
  json extra_ = json::object();
  std::vector<std::string> files_;
};

/// Parsed top-level config shared by every subcommand.
struct Context {
  json raw;
  json resolved = json::object();
  fs::path base;  // relative input paths resolve against the config file's directory
  std::uint64_t seed = 0;
  std::optional<GmmSpec> target;
};

std::optional<GmmSpec> maybe_target(ConfigReader& r) {
  if (!r.has("target")) return std::nullopt;
  return read_target(r);
}

// --- train ----------------------------------------------------------------

struct CouplingSource {
  Coupling coupling;
  json info;
};

CouplingSource read_coupling(ConfigReader r, const Context& ctx) {
  const std::string kind = r.get<std::string>("kind", "independent");
  CouplingSource out;
  if (kind == "independent") {
    if (!ctx.target) throw ConfigError("config: the independent coupling needs a target");
    out.coupling = Coupling::independent(*ctx.target);
  } else if (kind == "paired") {
    auto p = std::make_shared<const PairDataset>(load_pairs(ctx.base / r.require<std::string>("pairs")));
    out.info["pairs_checksum"] = hex64(pairs_checksum(*p));
    out.coupling = Coupling::paired(p);
  } else if (kind == "real_inverted") {
    const double mix = r.get<double>("mix_p", 0.0);
    std::shared_ptr<const PairDataset> real, synth;
    if (auto path = r.optional<std::string>("pairs")) {
      real = std::make_shared<const PairDataset>(load_pairs(ctx.base / *path));
      out.info["pairs_checksum"] = hex64(pairs_checksum(*real));
    }
    if (auto path = r.optional<std::string>("synthetic")) {
      synth = std::make_shared<const PairDataset>(load_pairs(ctx.base / *path));
      out.info["synthetic_checksum"] = hex64(pairs_checksum(*synth));
    }
    out.coupling = Coupling::mixed(real, synth, mix);
  } else {
    throw ConfigError("coupling.kind: unknown value '" + kind + "' (expected independent, paired, real_inverted)");
  }
  r.finish();
  out.coupling.validate();
  return out;
}

void cmd_train(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  ConfigReader r = top.section("train");
  const CouplingSource cs = read_coupling(r.section("coupling"), ctx);
  const std::size_t d = cs.coupling.dim();
  const ModelConfig model = read_model(top.section("model"));
  const std::uint64_t seed = section_seed(r, ctx.seed, 1);
  TrainConfig tc = read_train_fields(r, d, seed, model);

  TrainInit init;
  std::optional<LoadedField> teacher;
  if (auto path = r.optional<std::string>("init_checkpoint")) init.checkpoint = load_checkpoint(ctx.base / *path);
  if (r.has("init_field")) {
    ConfigReader ir = r.section("init_field");
    teacher = load_field(read_field_source(ir.section("field"), ctx.base), ctx.target);
    init.distill_iterations = ir.get<std::size_t>("distill_iterations", 500);
    ir.finish();
    init.teacher = teacher->field.get();
  }
  r.finish();
  top.finish();

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  run.seeds()["train"] = seed;
  run.extra()["coupling"] = cs.info;
  TrainResult res = train_flow(cs.coupling, tc, init, [&](std::size_t it, const Checkpoint& c) {
    save_checkpoint(run.file("checkpoint_" + std::to_string(it) + ".rfpp"), c);
  });
  save_checkpoint(run.file("checkpoint.rfpp"), res.checkpoint);
  run.text("loss.csv", loss_csv(res.loss_history));
  if (!res.distill_history.empty()) run.text("distill_loss.csv", loss_csv(res.distill_history));
  run.extra()["iterations"] = res.loss_history.size();
  run.extra()["checkpoint_checksum"] = hex64(checkpoint_checksum(res.checkpoint));
}

// --- reflow ---------------------------------------------------------------

struct StageEval {
  std::size_t samples = 4000, trajectories = 500, trajectory_steps = 32, projections = 64;
  std::uint64_t seed = 0;
};

StageEval read_stage_eval(ConfigReader r, std::uint64_t global) {
  StageEval e;
  e.seed = section_seed(r, global, 4);
  e.samples = r.get<std::size_t>("samples", e.samples);
  e.trajectories = std::min(e.samples, r.get<std::size_t>("trajectories", e.trajectories));
  e.trajectory_steps = r.get<std::size_t>("trajectory_steps", e.trajectory_steps);
  e.projections = r.get<std::size_t>("projections", e.projections);
  r.finish();
  return e;
}

/// One-step sliced-Wasserstein distance and straightness of a trained stage.
json stage_metrics(const Checkpoint& c, const GmmSpec& target, const StageEval& e, std::size_t threads,
                   DiagnosticsReport& report) {
  const NeuralField f = NeuralField::from_checkpoint(c);
  const Tensor z = standard_normal_rows(e.samples, target.dim(), derive_seed(e.seed, 1), 0);
  const Tensor ref = target.sample(e.samples, derive_seed(e.seed, 2));
  const Tensor one = integrate_parallel(f, z, TimeSchedule::for_steps(1), {}, threads).z;
  SolverConfig sc;
  sc.record_trajectory = true;
  const auto tr =
      integrate_parallel(f, slice_rows(z, 0, e.trajectories), TimeSchedule::uniform(e.trajectory_steps), sc, threads);
  const double st = straightness(*tr.trajectory);
  const double sw = sliced_wasserstein(one, ref, e.projections, derive_seed(e.seed, 3));
  report.straightness = CountedValue{st, e.trajectories};
  report.sliced_wasserstein = CountedValue{sw, e.samples};
  report.sw_reference_count = e.samples;
  report.sw_projections = e.projections;
  report.seeds = {{"evaluation", e.seed}};
  return {{"straightness", st}, {"sliced_wasserstein_1nfe", sw}, {"count", e.samples}};
}

void cmd_reflow(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  if (!ctx.target) throw ConfigError("config: reflow needs a target");
  const std::size_t d = ctx.target->dim();
  ConfigReader r = top.section("reflow");
  const ModelConfig model = read_model(top.section("model"));
  ReflowConfig rc;
  rc.target = *ctx.target;
  const std::size_t K = r.get<std::size_t>("rounds", 2);
  rc.pairs = r.get<std::size_t>("pairs", 20000);
  rc.pair_nfe = r.get<std::size_t>("pair_nfe", 64);
  rc.pair_solver = parse_solver(r.get<std::string>("pair_solver", "heun"));
  rc.pair_seed = r.get<std::uint64_t>("pair_seed", derive_seed(ctx.seed, 3));
  rc.init_from_previous = r.get<bool>("init_from_previous", true);
  const bool omit_noise = r.get<bool>("omit_noise", false);
  {
    ConfigReader f = r.section("first");
    rc.first = read_train_fields(f, d, section_seed(f, ctx.seed, 1), model);
    f.finish();
  }
  {
    ConfigReader l = r.section("later");
    rc.later = read_train_fields(l, d, section_seed(l, ctx.seed, 2), model);
    l.finish();
  }
  const StageEval eval = read_stage_eval(r.section("evaluation"), ctx.seed);
  r.finish();
  top.finish();

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  rc.threads = run.threads();
  run.seeds()["first"] = rc.first.seed;
  run.seeds()["later"] = rc.later.seed;
  run.seeds()["pairs"] = rc.pair_seed;
  run.seeds()["evaluation"] = eval.seed;
  json stages = json::array();
  reflow(rc, K, [&](const StageResult& s) {
    const std::string dir = "stage_" + std::to_string(s.stage) + "/";
    save_checkpoint(run.file(dir + "checkpoint.rfpp"), s.checkpoint);
    run.text(dir + "loss.csv", loss_csv(s.loss_history));
    json info = {{"stage", s.stage},
                 {"train_seed", stage_train_seed(rc, s.stage)},
                 {"checkpoint_checksum", hex64(checkpoint_checksum(s.checkpoint))}};
    if (s.trained_on) {
      save_pairs(run.file(dir + "pairs.rfpr"), *s.trained_on, omit_noise);
      info["pair_seed"] = stage_pair_seed(rc, s.stage);
      info["pairs"] = s.trained_on->count();
      info["pair_nfe"] = s.trained_on->nfe;
      info["skipped_pairs"] = s.skipped_pairs;
      info["pairs_checksum"] = hex64(pairs_checksum(*s.trained_on));
    }
    DiagnosticsReport report;
    report.model_id = "stage_" + std::to_string(s.stage) + ":" + hex64(checkpoint_checksum(s.checkpoint));
    info["metrics"] = stage_metrics(s.checkpoint, rc.target, eval, rc.threads, report);
    run.text(dir + "report.json", report_to_json(report).dump(2) + "\n");
    stages.push_back(info);
  });
  run.extra()["stages"] = stages;
  run.text("reflow_summary.json", stages.dump(2) + "\n");
}

// --- generate-pairs ---------------------------------------------------------

void cmd_generate_pairs(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  ConfigReader r = top.section("generate_pairs");
  const FieldSource src = read_field_source(r.section("field"), ctx.base);
  const std::size_t n = r.get<std::size_t>("count", 10000);
  const std::size_t nfe = r.get<std::size_t>("nfe", 64);
  const Solver solver = parse_solver(r.get<std::string>("solver", "heun"));
  const std::uint64_t seed = section_seed(r, ctx.seed, 3);
  const bool omit = r.get<bool>("omit_noise", false);
  r.finish();
  top.finish();
  const LoadedField lf = load_field(src, ctx.target);

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  run.seeds()["pairs"] = seed;
  const PairGeneration gen = generate_pairs(*lf.field, n, nfe, solver, seed, run.threads(), lf.checksum);
  if (gen.skipped) std::cerr << "generate-pairs: skipped " << gen.skipped << " non-finite records\n";
  save_pairs(run.file("pairs.rfpr"), gen.pairs, omit);
  run.extra()["nfe"] = gen.pairs.nfe;
  run.extra()["count"] = gen.pairs.count();
  run.extra()["skipped"] = gen.skipped;
  run.extra()["model"] = lf.id;
}

// --- sample -----------------------------------------------------------------

void cmd_sample(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  ConfigReader r = top.section("sample");
  const FieldSource src = read_field_source(r.section("field"), ctx.base);
  const std::size_t n = r.get<std::size_t>("count", 1000);
  const std::size_t nfe = r.get<std::size_t>("nfe", 1);
  SolverConfig sc;
  sc.solver = parse_solver(r.get<std::string>("solver", "euler"));
  sc.rule = parse_rule(r.get<std::string>("rule", "default"));
  sc.record_trajectory = r.get<bool>("record_trajectory", false);
  const auto times = r.optional<std::vector<double>>("times");
  const std::uint64_t seed = section_seed(r, ctx.seed, 5);
  r.finish();
  top.finish();
  const LoadedField lf = load_field(src, ctx.target);
  const TimeSchedule schedule = times ? TimeSchedule(*times) : TimeSchedule::for_steps(steps_for_nfe(sc.solver, nfe));

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  run.seeds()["noise"] = seed;
  const Tensor z = standard_normal_rows(n, lf.field->dim(), seed, 0);
  // Count evaluations on one batch: each velocity call covers the whole batch.
  CountingField counted(*lf.field);
  const IntegrationResult res = integrate(counted, z, schedule, sc);
  if (counted.calls() != res.nfe) throw ContractError("sample: evaluation count disagrees with the solver");
  run.text("samples.csv", matrix_csv(res.z));
  if (res.trajectory) save_trajectory(run.file("trajectory.rftr"), *res.trajectory);
  run.extra()["nfe"] = res.nfe;
  run.extra()["field_evaluations"] = counted.calls();
  run.extra()["count"] = n;
  run.extra()["model"] = lf.id;
}

// --- invert -----------------------------------------------------------------

void cmd_invert(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  ConfigReader r = top.section("invert");
  const FieldSource src = read_field_source(r.section("field"), ctx.base);
  const std::size_t nfe = r.require<std::size_t>("nfe");
  if (nfe == 0) throw ConfigError("invert: nfe must be at least 1");
  const Solver solver = parse_solver(r.get<std::string>("solver", "heun"));
  const std::size_t max_lag = r.get<std::size_t>("max_lag", 1);
  Tensor samples;
  std::uint64_t seed = 0;
  if (auto path = r.optional<std::string>("samples_pairs")) {
    samples = load_pairs(ctx.base / *path).x;
  } else {
    if (!ctx.target) throw ConfigError("invert: needs samples_pairs or a target to draw real samples from");
    const std::size_t n = r.get<std::size_t>("count", 10000);
    seed = section_seed(r, ctx.seed, 6);
    samples = ctx.target->sample(n, seed);
  }
  r.finish();
  top.finish();
  const LoadedField lf = load_field(src, ctx.target);

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  run.seeds()["samples"] = seed;
  const InversionOutcome inv = invert_real_data(*lf.field, samples, nfe, solver, run.threads(), lf.checksum, max_lag);
  if (inv.skipped) std::cerr << "invert: skipped " << inv.skipped << " non-finite records\n";
  save_pairs(run.file("inverted.rfpr"), inv.pairs);
  DiagnosticsReport report;
  report.model_id = lf.id;
  report.seeds = {{"samples", seed}};
  report.noise = inv.noise;
  run.text("report.json", report_to_json(report).dump(2) + "\n");
  run.text("noise_autocorrelation.csv", autocorrelation_csv(inv.noise.lags, inv.noise.count));
  run.extra()["nfe"] = inv.pairs.nfe;
  run.extra()["count"] = inv.pairs.count();
  run.extra()["skipped"] = inv.skipped;
  run.extra()["model"] = lf.id;
}

// --- diagnose ---------------------------------------------------------------

void cmd_diagnose(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  ConfigReader r = top.section("diagnose");
  const std::uint64_t seed = section_seed(r, ctx.seed, 7);
  DiagnosticsReport report;
  report.seeds = {{"diagnose", seed}};

  std::optional<Trajectory> traj;
  if (auto path = r.optional<std::string>("trajectory")) traj = load_trajectory(ctx.base / *path);

  std::optional<FieldSource> src;
  std::vector<std::size_t> recon_nfe;
  std::size_t recon_count = 0, sw_count = 0, sw_nfe = 1, sw_proj = 64;
  if (r.has("field")) {
    src = read_field_source(r.section("field"), ctx.base);
    recon_nfe = r.get<std::vector<std::size_t>>("reconstruction_nfe", {1, 2, 4, 8});
    recon_count = r.get<std::size_t>("reconstruction_count", 2000);
    sw_count = r.get<std::size_t>("sw_count", 4000);
    sw_nfe = r.get<std::size_t>("sw_nfe", 1);
    sw_proj = r.get<std::size_t>("sw_projections", 64);
  }
  std::optional<PairDataset> probe_pairs;
  double probe_t = 0.5;
  std::size_t probes = 0, max_lag = 1;
  if (auto path = r.optional<std::string>("probe_pairs")) {
    probe_pairs = load_pairs(ctx.base / *path);
    probe_t = r.get<double>("probe_t", 0.5);
    probes = r.get<std::size_t>("probes", 10000);
    max_lag = r.get<std::size_t>("max_lag", 1);
  }
  std::optional<PairDataset> inverted;
  if (auto path = r.optional<std::string>("inverted_pairs")) inverted = load_pairs(ctx.base / *path);
  r.finish();
  top.finish();

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  run.seeds()["diagnose"] = seed;
  if (traj) report.straightness = CountedValue{straightness(*traj), as_batch(traj->states.front()).rows()};
  if (src) {
    if (!ctx.target) throw ConfigError("diagnose: field diagnostics need a target");
    const LoadedField lf = load_field(*src, ctx.target);
    report.model_id = lf.id;
    const Tensor real = ctx.target->sample(std::max(recon_count, sw_count), derive_seed(seed, 1));
    for (std::size_t nfe : recon_nfe) {
      report.reconstruction.push_back(
          {nfe, reconstruction_error(*lf.field, slice_rows(real, 0, recon_count), nfe, Solver::euler, run.threads()),
           recon_count});
    }
    const Tensor z = standard_normal_rows(sw_count, lf.field->dim(), derive_seed(seed, 2), 0);
    const Tensor gen =
        integrate_parallel(*lf.field, z, TimeSchedule::for_steps(sw_nfe), {}, run.threads()).z;
    report.sliced_wasserstein =
        CountedValue{sliced_wasserstein(gen, slice_rows(real, 0, sw_count), sw_proj, derive_seed(seed, 3)), sw_count};
    report.sw_reference_count = sw_count;
    report.sw_projections = sw_proj;
    run.text("reconstruction.csv", reconstruction_csv(report));
  }
  if (probe_pairs) {
    report.probe = probe_statistics(probe_pairs->x, probe_pairs->z, probe_t, probes, derive_seed(seed, 4), max_lag);
    run.text("probe_autocorrelation.csv", autocorrelation_csv(report.probe->lags, report.probe->count));
    run.text("probe_histogram.csv", histogram_csv(*report.probe));
  }
  if (inverted) {
    report.noise = noise_statistics(inverted->z, std::min<std::size_t>(max_lag, inverted->dim() - 1));
    run.text("noise_autocorrelation.csv", autocorrelation_csv(report.noise->lags, report.noise->count));
  }
  run.text("report.json", report_to_json(report).dump(2) + "\n");
}

// --- profile-loss -----------------------------------------------------------

void cmd_profile_loss(Context& ctx, ConfigReader& top, Run*& run_out, const std::function<Run&(json)>& open_run) {
  ConfigReader r = top.section("profile_loss");
  const FieldSource src = read_field_source(r.section("field"), ctx.base);
  const std::size_t bins = r.get<std::size_t>("bins", 50);
  const TimestepDistribution range = read_timesteps(r.section("range"));
  Tensor x, z;
  std::uint64_t seed = 0;
  bool independent = true;
  if (auto path = r.optional<std::string>("pairs")) {
    const PairDataset p = load_pairs(ctx.base / *path);
    x = p.x;
    z = p.z;
    independent = false;
  } else {
    if (!ctx.target) throw ConfigError("profile-loss: needs pairs or a target");
    const std::size_t n = r.get<std::size_t>("count", 4000);
    seed = section_seed(r, ctx.seed, 8);
    x = ctx.target->sample(n, derive_seed(seed, 1));
    z = standard_normal_rows(n, ctx.target->dim(), derive_seed(seed, 2), 0);
  }
  r.finish();
  top.finish();
  const LoadedField lf = load_field(src, ctx.target);

  Run& run = open_run(ctx.resolved);
  run_out = &run;
  run.seeds()["profile"] = seed;
  PosteriorOracle oracle;
  if (independent) {
    const GmmSpec g = *ctx.target;
    oracle = [g](const Tensor& xt, double t) { return gmm_posterior_mean(g, xt, t); };
  }
  const auto prof = loss_profile(*lf.field, x, z, bins, range, oracle);
  std::string s = "t_lo,t_hi,t,mean,stddev,count,lower_bound\n";
  for (const ProfileBin& b : prof) {
    s += format_double(b.t_lo) + "," + format_double(b.t_hi) + "," + format_double(b.t) + "," + format_double(b.mean) +
         "," + format_double(b.stddev) + "," + std::to_string(b.count) + "," +
         (b.lower_bound ? format_double(*b.lower_bound) : std::string()) + "\n";
  }
  run.text("loss_profile.csv", s);
  run.extra()["model"] = lf.id;
}

using Command = void (*)(Context&, ConfigReader&, Run*&, const std::function<Run&(json)>&);

int run_command(const Options& opt) {
  static const std::map<std::string, Command> commands = {
      {"train", cmd_train},       {"reflow", cmd_reflow}, {"generate-pairs", cmd_generate_pairs},
      {"sample", cmd_sample},     {"invert", cmd_invert}, {"diagnose", cmd_diagnose},
      {"profile-loss", cmd_profile_loss}};

  Context ctx;
  ctx.raw = read_json_file(opt.config_path);
  if (!ctx.raw.is_object()) throw ConfigError("config: top level must be an object");
  ctx.base = opt.config_path.has_parent_path() ? opt.config_path.parent_path() : fs::path(".");

  // Output directory and thread count describe the environment, not the
  // experiment; they are taken out before the rest is resolved and hashed.
  fs::path out = "rflow_out";
  std::size_t threads = 1;
  try {
    if (ctx.raw.contains("output_dir")) out = ctx.base / ctx.raw.at("output_dir").get<std::string>();
    if (ctx.raw.contains("threads")) threads = ctx.raw.at("threads").get<std::size_t>();
  } catch (const json::exception&) {
    throw ConfigError("config: output_dir must be a string and threads an integer");
  }
  ctx.raw.erase("output_dir");
  ctx.raw.erase("threads");
  if (const char* e = std::getenv("RFLOW_OUT"); e && *e) out = e;
  if (const char* e = std::getenv("RFLOW_THREADS"); e && *e) {
    try {
      threads = std::stoul(e);
    } catch (const std::exception&) {
      throw ConfigError("RFLOW_THREADS must be a positive integer");
    }
  }
  if (opt.out) out = *opt.out;
  if (opt.threads) threads = *opt.threads;
  if (threads == 0) throw ConfigError("thread count must be at least 1");

  // Sections of the other subcommands may share the file; anything else is a typo.
  static const std::map<std::string, std::string> sections = {
      {"train", "train"},   {"reflow", "reflow"}, {"generate-pairs", "generate_pairs"},
      {"sample", "sample"}, {"invert", "invert"}, {"diagnose", "diagnose"},
      {"profile-loss", "profile_loss"}};
  for (const auto& [key, _] : ctx.raw.items()) {
    bool known = key == "seed" || key == "target" || key == "model";
    for (const auto& [cmd, sec] : sections) known = known || key == sec;
    if (!known) throw ConfigError("unknown config key '" + key + "'");
  }
  ConfigReader top(ctx.raw, "", ctx.resolved);
  for (const auto& [cmd, sec] : sections) {
    if (cmd != opt.command) top.ignore(sec);
  }
  if (opt.command != "train" && opt.command != "reflow") top.ignore("model");
  ctx.seed = top.get<std::uint64_t>("seed", 0);
  if (opt.seed) {
    ctx.seed = *opt.seed;
    ctx.resolved["seed"] = ctx.seed;
  }
  ctx.target = maybe_target(top);

  std::optional<DirLock> lock;
  std::optional<Run> run;
  Run* active = nullptr;
  auto open_run = [&](json resolved) -> Run& {
    fs::create_directories(out);
    lock.emplace(out);
    run.emplace(opt.command, out, std::move(resolved), threads);
    return *run;
  };
  commands.at(opt.command)(ctx, top, active, open_run);
  if (active) active->finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rflow: rectified flow training, reflow, sampling, inversion and diagnostics"};
  app.set_version_flag("--version", std::string("rflow ") + RFLOW_VERSION);
  app.require_subcommand(1, 1);
  Options opt;
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  const std::vector<std::pair<const char*, const char*>> subs = {
      {"train", "train a rectified flow"},
      {"reflow", "train 1-RF, generate pairs, train k-RF"},
      {"generate-pairs", "integrate noise to data and store (x, z) pairs"},
      {"sample", "generate samples from a field"},
      {"invert", "integrate data back to noise"},
      {"diagnose", "straightness, reconstruction, probes and noise statistics"},
      {"profile-loss", "per-timestep loss profile"}};
  for (const auto& [name, help] : subs) {
    CLI::App* sc = app.add_subcommand(name, help);
    sc->add_option("--config", config, "config file (JSON)")->required();
    sc->add_option("--out", out, "output directory");
    sc->add_option("--seed", seed, "override the global seed");
    sc->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }
  for (const auto& [name, _] : subs) {
    CLI::App* sc = app.get_subcommand(name);
    if (sc->parsed()) {
      opt.command = name;
      if (sc->count("--out")) opt.out = out;
      if (sc->count("--seed")) opt.seed = seed;
      if (sc->count("--threads")) opt.threads = threads;
    }
  }
  opt.config_path = config;

  try {
    return run_command(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ShapeError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DomainError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
