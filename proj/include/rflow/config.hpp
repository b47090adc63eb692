#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rflow/conversion.hpp"
#include "rflow/error.hpp"
#include "rflow/field.hpp"
#include "rflow/gmm.hpp"
#include "rflow/losses.hpp"
#include "rflow/pipeline.hpp"
#include "rflow/samplers.hpp"

namespace rflow {

using nlohmann::json;

/// Reads one JSON object, recording every key it hands out together with the
/// value actually used (default or given). `finish` rejects leftovers, so a
/// misspelled key is an error instead of a silently ignored setting.
class ConfigReader {
 public:
  ConfigReader(const json& j, std::string path, json& resolved) : j_(j), path_(std::move(path)), out_(resolved) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
    if (!out_.is_object()) out_ = json::object();
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    T v = j_.contains(key) ? convert<T>(key) : std::move(fallback);
    used_.insert(key);
    out_[key] = v;
    return v;
  }

  template <class T>
  T require(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where() + "missing required key '" + key + "'");
    T v = convert<T>(key);
    used_.insert(key);
    out_[key] = v;
    return v;
  }

  template <class T>
  std::optional<T> optional(const std::string& key) {
    if (!j_.contains(key) || j_.at(key).is_null()) {
      used_.insert(key);
      return std::nullopt;
    }
    return require<T>(key);
  }

  /// Raw sub-document, recorded verbatim.
  const json& raw(const std::string& key) {
    if (!j_.contains(key)) throw ConfigError(where() + "missing required key '" + key + "'");
    used_.insert(key);
    out_[key] = j_.at(key);
    return j_.at(key);
  }

  /// Marks a key as handled elsewhere; it is neither validated nor recorded.
  void ignore(const std::string& key) { used_.insert(key); }

  /// Nested object; an absent key reads as an empty object (all defaults).
  ConfigReader section(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    const json& sub = j_.contains(key) ? j_.at(key) : empty;
    return ConfigReader(sub, path_ + key + ".", out_[key]);
  }

  void finish() const {
    for (const auto& [key, _] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown config key '" + path_ + key + "'");
    }
  }

  std::string where() const { return path_.empty() ? std::string("config: ") : "config " + path_ + " "; }

 private:
  template <class T>
  T convert(const std::string& key) const {
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where() + "key '" + key + "' has the wrong type");
    }
  }

  const json& j_;
  std::string path_;
  json& out_;
  std::set<std::string> used_;
};

template <class E>
E parse_enum(const std::string& value, std::initializer_list<std::pair<const char*, E>> options, const std::string& what) {
  std::string allowed;
  for (const auto& [name, e] : options) {
    if (value == name) return e;
    allowed += allowed.empty() ? name : std::string(", ") + name;
  }
  throw ConfigError(what + ": unknown value '" + value + "' (expected one of " + allowed + ")");
}

inline Solver parse_solver(const std::string& s) {
  return parse_enum<Solver>(s, {{"euler", Solver::euler}, {"heun", Solver::heun}}, "solver");
}

inline UpdateRule parse_rule(const std::string& s) {
  return parse_enum<UpdateRule>(s, {{"default", UpdateRule::standard}, {"new", UpdateRule::interpolating}}, "rule");
}

inline Parameterization parse_parameterization(const std::string& s) {
  return parse_enum<Parameterization>(s, {{"x_pred", Parameterization::x_pred}, {"v_pred", Parameterization::v_pred}},
                                      "parameterization");
}

inline const char* config_name(Parameterization p) { return p == Parameterization::x_pred ? "x_pred" : "v_pred"; }

/// Seed of a section: explicit value, or derived from the global seed and a tag.
inline std::uint64_t section_seed(ConfigReader& r, std::uint64_t global, std::uint64_t tag) {
  return r.get<std::uint64_t>("seed", derive_seed(global, tag));
}

inline GmmSpec read_target(ConfigReader& r) {
  const json& t = r.raw("target");
  try {
    return gmm_from_json(t);
  } catch (const ShapeError& e) {
    throw ConfigError(std::string("config target: ") + e.what());
  }
}

inline TimestepDistribution read_timesteps(ConfigReader r) {
  TimestepDistribution d;
  d.kind = parse_enum<TimestepKind>(r.get<std::string>("kind", "uniform"),
                                    {{"uniform", TimestepKind::uniform},
                                     {"u_shaped", TimestepKind::u_shaped},
                                     {"logit_normal", TimestepKind::logit_normal}},
                                    "timesteps.kind");
  d.a = r.get<double>("a", d.a);
  d.t_min = r.get<double>("t_min", d.t_min);
  d.t_max = r.get<double>("t_max", d.t_max);
  d.loc = r.get<double>("loc", d.loc);
  d.scale = r.get<double>("scale", d.scale);
  r.finish();
  d.validate();
  return d;
}

inline LossSpec read_loss(ConfigReader r, std::size_t d, std::uint64_t seed) {
  LossSpec s;
  s.premetric = parse_enum<Premetric>(r.get<std::string>("premetric", "squared_l2"),
                                      {{"squared_l2", Premetric::squared_l2},
                                       {"pseudo_huber", Premetric::pseudo_huber},
                                       {"perceptual_huber", Premetric::perceptual_huber},
                                       {"perceptual_huber_inv_t", Premetric::perceptual_huber_inv_t}},
                                      "loss.premetric");
  s.parameterization = parse_parameterization(r.get<std::string>("view", "v_pred"));
  s.weight = parse_enum<Weighting>(r.get<std::string>("weighting", "unit"),
                                   {{"unit", Weighting::unit}, {"inverse_t_squared", Weighting::inverse_t_squared}},
                                   "loss.weighting");
  s.huber_c = r.get<double>("huber_c", LossSpec::default_huber_c(d));
  const auto features = r.get<std::size_t>("perceptual_features", 16);
  const auto pseed = r.get<std::uint64_t>("perceptual_seed", derive_seed(seed, 0x9E));
  if (s.is_perceptual()) s.perceptual = std::make_shared<LinearFeatureDistance>(d, features, pseed);
  r.finish();
  s.validate(d);
  return s;
}

inline ModelConfig read_model(ConfigReader r) {
  ModelConfig m;
  m.hidden = r.get<std::vector<std::size_t>>("hidden", m.hidden);
  m.activation = parse_enum<Activation>(r.get<std::string>("activation", "tanh"),
                                        {{"tanh", Activation::tanh}, {"relu", Activation::relu}}, "model.activation");
  m.parameterization = parse_parameterization(r.get<std::string>("parameterization", "v_pred"));
  r.finish();
  return m;
}

/// Fields of TrainConfig other than the model, which is shared across stages.
/// Unconsumed keys are left for the caller's finish().
inline TrainConfig read_train_fields(ConfigReader& r, std::size_t d, std::uint64_t seed, const ModelConfig& model) {
  TrainConfig c;
  c.seed = seed;
  c.model = model;
  c.batch = r.get<std::size_t>("batch", c.batch);
  c.iterations = r.get<std::size_t>("iterations", c.iterations);
  c.adam.learning_rate = r.get<double>("learning_rate", c.adam.learning_rate);
  c.adam.beta1 = r.get<double>("beta1", c.adam.beta1);
  c.adam.beta2 = r.get<double>("beta2", c.adam.beta2);
  c.adam.eps = r.get<double>("eps", c.adam.eps);
  c.adam.warmup_steps = r.get<std::uint64_t>("warmup_steps", c.adam.warmup_steps);
  c.adam.decay_steps = r.get<std::uint64_t>("decay_steps", c.iterations);
  c.adam.ema_decay = r.get<double>("ema_decay", c.adam.ema_decay);
  c.dropout = r.get<double>("dropout", c.dropout);
  c.checkpoint_every = r.get<std::size_t>("checkpoint_every", c.checkpoint_every);
  c.timesteps = read_timesteps(r.section("timesteps"));
  c.loss = read_loss(r.section("loss"), d, seed);
  c.validate(d);
  return c;
}

/// Where a velocity field comes from.
struct FieldSource {
  enum class Kind { checkpoint, analytic, converted_vp, converted_ve } kind = Kind::checkpoint;
  std::filesystem::path path;
  bool use_ema = true;
};

inline FieldSource read_field_source(ConfigReader r, const std::filesystem::path& base) {
  FieldSource f;
  f.kind = parse_enum<FieldSource::Kind>(r.get<std::string>("kind", "checkpoint"),
                                         {{"checkpoint", FieldSource::Kind::checkpoint},
                                          {"analytic", FieldSource::Kind::analytic},
                                          {"converted_vp", FieldSource::Kind::converted_vp},
                                          {"converted_ve", FieldSource::Kind::converted_ve}},
                                         "field.kind");
  if (f.kind == FieldSource::Kind::checkpoint) {
    f.path = base / r.require<std::string>("checkpoint");
    f.use_ema = r.get<bool>("use_ema", true);
  }
  r.finish();
  return f;
}

struct LoadedField {
  std::unique_ptr<VelocityField> field;
  std::uint64_t checksum = 0;  // checkpoint checksum, 0 for analytic fields
  std::string id;
};

/// Analytic and converted fields need the target GMM.
inline LoadedField load_field(const FieldSource& src, const std::optional<GmmSpec>& target) {
  LoadedField out;
  if (src.kind == FieldSource::Kind::checkpoint) {
    const Checkpoint c = load_checkpoint(src.path);
    out.checksum = checkpoint_checksum(c);
    out.field = std::make_unique<NeuralField>(NeuralField::from_checkpoint(c, src.use_ema));
    out.id = "checkpoint:" + hex64(out.checksum);
    return out;
  }
  if (!target) throw ConfigError("config: analytic and converted fields need a target");
  switch (src.kind) {
    case FieldSource::Kind::analytic:
      out.field = std::make_unique<AnalyticGmmField>(*target);
      out.id = "analytic_gmm";
      break;
    case FieldSource::Kind::converted_vp:
      out.field = std::make_unique<ConvertedField>(DiffusionConversion{DiffusionKind::vp, vp_gmm_denoiser(*target)},
                                                   target->dim());
      out.id = "converted_vp_gmm";
      break;
    default:
      out.field = std::make_unique<ConvertedField>(DiffusionConversion{DiffusionKind::ve, ve_gmm_denoiser(*target)},
                                                   target->dim());
      out.id = "converted_ve_gmm";
      break;
  }
  return out;
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in '" + path.string() + "': " + e.what());
  }
}

}  // namespace rflow
