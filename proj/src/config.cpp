#include "ncdssm/config.hpp"

#include <fstream>

namespace ncdssm::config {

namespace {

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
  throw ConfigError("config key '" + key + "': " + why);
}

template <typename T>
T get_or(const Json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    bad_key(key, "wrong type");
  }
}

void reject_unknown(const Json& j, const std::string& scope,
                    std::initializer_list<const char*> known) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) ok = true;
    if (!ok) bad_key(scope.empty() ? key : scope + "." + key, "unknown key");
  }
}

nn::Activation parse_activation(const std::string& s, const std::string& key) {
  if (s == "tanh") return nn::Activation::Tanh;
  if (s == "softplus") return nn::Activation::Softplus;
  if (s == "none") return nn::Activation::None;
  bad_key(key, "expected tanh | softplus | none, got '" + s + "'");
}

std::string activation_name(nn::Activation a) {
  switch (a) {
    case nn::Activation::Tanh: return "tanh";
    case nn::Activation::Softplus: return "softplus";
    case nn::Activation::None: return "none";
  }
  return "none";
}

nn::InitScheme parse_init(const std::string& s, const std::string& key) {
  if (s == "orthogonal") return nn::InitScheme::Orthogonal;
  if (s == "skew-symmetric-expm-seed") return nn::InitScheme::SkewSymmetricExpmSeed;
  if (s == "zero-last-layer") return nn::InitScheme::ZeroLastLayer;
  if (s == "default-uniform") return nn::InitScheme::DefaultUniform;
  bad_key(key, "unknown init scheme '" + s + "'");
}

std::string init_name(nn::InitScheme s) {
  switch (s) {
    case nn::InitScheme::Orthogonal: return "orthogonal";
    case nn::InitScheme::SkewSymmetricExpmSeed: return "skew-symmetric-expm-seed";
    case nn::InitScheme::ZeroLastLayer: return "zero-last-layer";
    case nn::InitScheme::DefaultUniform: return "default-uniform";
  }
  return "default-uniform";
}

model::CodecConfig parse_codec(const Json& j, const std::string& scope) {
  model::CodecConfig c;
  reject_unknown(j, scope, {"kind", "hidden", "activation", "init_std", "std_floor"});
  const std::string kind = get_or<std::string>(j, "kind", "identity");
  if (kind == "identity")
    c.kind = model::CodecKind::Identity;
  else if (kind == "mlp")
    c.kind = model::CodecKind::Mlp;
  else
    bad_key(scope + ".kind", "expected identity | mlp, got '" + kind + "'");
  c.hidden = get_or<std::vector<int>>(j, "hidden", {});
  c.activation = parse_activation(get_or<std::string>(j, "activation", "softplus"),
                                  scope + ".activation");
  c.init_std = get_or<double>(j, "init_std", 0.1);
  c.std_floor = get_or<double>(j, "std_floor", 1e-3);
  if (c.init_std <= c.std_floor) bad_key(scope + ".init_std", "must exceed std_floor");
  return c;
}

Json codec_to_json(const model::CodecConfig& c) {
  Json j;
  j["kind"] = c.kind == model::CodecKind::Identity ? "identity" : "mlp";
  j["hidden"] = c.hidden;
  j["activation"] = activation_name(c.activation);
  j["init_std"] = c.init_std;
  j["std_floor"] = c.std_floor;
  return j;
}

}  // namespace

model::ModelConfig model_config_from_json(const Json& j) {
  model::ModelConfig cfg;
  reject_unknown(j, "model",
                 {"dynamics", "m", "h", "d", "transition_init", "drift_hidden",
                  "drift_activation", "drift_activation_after_last", "drift_spectral_norm",
                  "drift_init", "base_count", "alpha_hidden", "recognition", "emission",
                  "learn_H", "q_init", "r_init", "integrator", "eta"});
  const std::string dynamics = get_or<std::string>(j, "dynamics", "lti");
  if (dynamics == "lti")
    cfg.dynamics = dyn::Kind::Lti;
  else if (dynamics == "nonlinear")
    cfg.dynamics = dyn::Kind::Nonlinear;
  else if (dynamics == "locally-linear")
    cfg.dynamics = dyn::Kind::LocallyLinear;
  else
    bad_key("model.dynamics", "expected lti | nonlinear | locally-linear, got '" + dynamics + "'");

  cfg.m = get_or<int>(j, "m", 1);
  cfg.h = get_or<int>(j, "h", 1);
  cfg.d = get_or<int>(j, "d", 1);
  cfg.transition_init =
      parse_init(get_or<std::string>(j, "transition_init", "orthogonal"), "model.transition_init");
  cfg.drift_hidden = get_or<std::vector<int>>(j, "drift_hidden", {64});
  cfg.drift_activation = parse_activation(get_or<std::string>(j, "drift_activation", "softplus"),
                                          "model.drift_activation");
  cfg.drift_activation_after_last = get_or<bool>(j, "drift_activation_after_last", false);
  cfg.drift_spectral_norm = get_or<bool>(j, "drift_spectral_norm", false);
  cfg.drift_init =
      parse_init(get_or<std::string>(j, "drift_init", "zero-last-layer"), "model.drift_init");
  cfg.base_count = get_or<int>(j, "base_count", 5);
  cfg.alpha_hidden = get_or<std::vector<int>>(j, "alpha_hidden", {64});
  if (j.contains("recognition")) cfg.recognition = parse_codec(j.at("recognition"), "model.recognition");
  if (j.contains("emission")) cfg.emission = parse_codec(j.at("emission"), "model.emission");
  cfg.learn_H = get_or<bool>(j, "learn_H", false);
  cfg.q_init = get_or<double>(j, "q_init", 0.1);
  cfg.r_init = get_or<double>(j, "r_init", 0.1);

  const std::string integrator = get_or<std::string>(j, "integrator", "rk4");
  if (integrator == "rk4") {
    cfg.solver = integrate::Solver::Rk4;
    cfg.analytic_lti = false;
  } else if (integrator == "euler") {
    cfg.solver = integrate::Solver::Euler;
    cfg.analytic_lti = false;
  } else if (integrator == "analytic-lti") {
    cfg.solver = integrate::Solver::Rk4;
    cfg.analytic_lti = true;
  } else {
    bad_key("model.integrator", "expected rk4 | euler | analytic-lti, got '" + integrator + "'");
  }
  cfg.eta = get_or<double>(j, "eta", 0.05);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
  return cfg;
}

Json model_config_to_json(const model::ModelConfig& cfg) {
  Json j;
  switch (cfg.dynamics) {
    case dyn::Kind::Lti: j["dynamics"] = "lti"; break;
    case dyn::Kind::Nonlinear: j["dynamics"] = "nonlinear"; break;
    case dyn::Kind::LocallyLinear: j["dynamics"] = "locally-linear"; break;
  }
  j["m"] = cfg.m;
  j["h"] = cfg.h;
  j["d"] = cfg.d;
  j["transition_init"] = init_name(cfg.transition_init);
  j["drift_hidden"] = cfg.drift_hidden;
  j["drift_activation"] = activation_name(cfg.drift_activation);
  j["drift_activation_after_last"] = cfg.drift_activation_after_last;
  j["drift_spectral_norm"] = cfg.drift_spectral_norm;
  j["drift_init"] = init_name(cfg.drift_init);
  j["base_count"] = cfg.base_count;
  j["alpha_hidden"] = cfg.alpha_hidden;
  j["recognition"] = codec_to_json(cfg.recognition);
  j["emission"] = codec_to_json(cfg.emission);
  j["learn_H"] = cfg.learn_H;
  j["q_init"] = cfg.q_init;
  j["r_init"] = cfg.r_init;
  j["integrator"] = cfg.analytic_lti
                        ? "analytic-lti"
                        : (cfg.solver == integrate::Solver::Rk4 ? "rk4" : "euler");
  j["eta"] = cfg.eta;
  return j;
}

RunConfig parse_run_config(const Json& j) {
  RunConfig cfg;
  reject_unknown(j, "", {"model", "train", "generator", "splits", "data", "seed", "out_dir"});
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));

  if (j.contains("train")) {
    const Json& t = j.at("train");
    reject_unknown(t, "train",
                   {"learning_rate", "decay_rate", "decay_every", "batch_size", "elbo_samples",
                    "steps", "freeze_ssm_steps", "checkpoint_every", "threads"});
    cfg.train.learning_rate = get_or<double>(t, "learning_rate", 0.01);
    cfg.train.decay_rate = get_or<double>(t, "decay_rate", 0.9);
    cfg.train.decay_every = get_or<long>(t, "decay_every", 500);
    cfg.train.batch_size = get_or<int>(t, "batch_size", 64);
    cfg.train.elbo_samples = get_or<int>(t, "elbo_samples", 1);
    cfg.train.steps = get_or<long>(t, "steps", 2000);
    cfg.train.freeze_ssm_steps = get_or<long>(t, "freeze_ssm_steps", 0);
    cfg.train.checkpoint_every = get_or<long>(t, "checkpoint_every", 500);
    cfg.train.threads = get_or<int>(t, "threads", 0);
    if (cfg.train.learning_rate <= 0.0) bad_key("train.learning_rate", "must be positive");
    if (cfg.train.decay_rate <= 0.0 || cfg.train.decay_rate > 1.0)
      bad_key("train.decay_rate", "must lie in (0, 1]");
    if (cfg.train.decay_every < 1) bad_key("train.decay_every", "must be >= 1");
    if (cfg.train.batch_size < 1) bad_key("train.batch_size", "must be >= 1");
    if (cfg.train.elbo_samples < 1) bad_key("train.elbo_samples", "must be >= 1");
    if (cfg.train.steps < 0) bad_key("train.steps", "must be >= 0");
    if (cfg.train.freeze_ssm_steps < 0) bad_key("train.freeze_ssm_steps", "must be >= 0");
  }

  if (j.contains("generator")) {
    const Json& g = j.at("generator");
    reject_unknown(g, "generator",
                   {"dataset", "length", "dt", "noise_std", "missing_fraction", "lgssm_f",
                    "lgssm_q", "lgssm_r"});
    cfg.generator.dataset = get_or<std::string>(g, "dataset", "damped-pendulum");
    cfg.generator.length = get_or<double>(g, "length", 15.0);
    cfg.generator.dt = get_or<double>(g, "dt", 0.1);
    cfg.generator.noise_std = get_or<double>(g, "noise_std", 0.05);
    cfg.generator.missing_fraction = get_or<double>(g, "missing_fraction", 0.0);
    cfg.generator.lgssm_f = get_or<double>(g, "lgssm_f", -0.5);
    cfg.generator.lgssm_q = get_or<double>(g, "lgssm_q", 0.2);
    cfg.generator.lgssm_r = get_or<double>(g, "lgssm_r", 0.1);
    if (cfg.generator.dt <= 0.0) bad_key("generator.dt", "must be positive");
    if (cfg.generator.missing_fraction < 0.0 || cfg.generator.missing_fraction >= 1.0)
      bad_key("generator.missing_fraction", "must lie in [0, 1)");
  }

  if (j.contains("splits")) {
    for (const auto& [name, count] : j.at("splits").items()) {
      if (!count.is_number_integer() || count.get<int>() < 1)
        bad_key("splits." + name, "must be a positive sequence count");
      cfg.splits.push_back({name, count.get<int>()});
    }
  } else if (cfg.generator.dataset == "bouncing-ball") {
    cfg.splits = {{"train", 5000}, {"val", 500}, {"test", 500}};
  } else if (cfg.generator.dataset == "scalar-lgssm") {
    cfg.splits = {{"train", 500}, {"val", 100}, {"test", 100}};
  } else {
    cfg.splits = {{"train", 5000}, {"val", 1000}, {"test", 1000}};
  }

  if (j.contains("data")) {
    const Json& d = j.at("data");
    reject_unknown(d, "data", {"manifest", "split", "context_seconds", "horizon_seconds"});
    cfg.data.manifest = get_or<std::string>(d, "manifest", "");
    cfg.data.split = get_or<std::string>(d, "split", "train");
    cfg.data.context_seconds = get_or<double>(d, "context_seconds", 5.0);
    cfg.data.horizon_seconds = get_or<double>(d, "horizon_seconds", 10.0);
  }

  cfg.seed = get_or<std::uint64_t>(j, "seed", 0);
  cfg.out_dir = get_or<std::string>(j, "out_dir", "runs/out");
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  Json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

Json to_json(const RunConfig& cfg) {
  Json j;
  j["model"] = model_config_to_json(cfg.model);
  Json t;
  t["learning_rate"] = cfg.train.learning_rate;
  t["decay_rate"] = cfg.train.decay_rate;
  t["decay_every"] = cfg.train.decay_every;
  t["batch_size"] = cfg.train.batch_size;
  t["elbo_samples"] = cfg.train.elbo_samples;
  t["steps"] = cfg.train.steps;
  t["freeze_ssm_steps"] = cfg.train.freeze_ssm_steps;
  t["checkpoint_every"] = cfg.train.checkpoint_every;
  t["threads"] = cfg.train.threads;
  j["train"] = t;
  Json g;
  g["dataset"] = cfg.generator.dataset;
  g["length"] = cfg.generator.length;
  g["dt"] = cfg.generator.dt;
  g["noise_std"] = cfg.generator.noise_std;
  g["missing_fraction"] = cfg.generator.missing_fraction;
  g["lgssm_f"] = cfg.generator.lgssm_f;
  g["lgssm_q"] = cfg.generator.lgssm_q;
  g["lgssm_r"] = cfg.generator.lgssm_r;
  j["generator"] = g;
  Json s;
  for (const auto& sp : cfg.splits) s[sp.name] = sp.count;
  j["splits"] = s;
  Json d;
  d["manifest"] = cfg.data.manifest;
  d["split"] = cfg.data.split;
  d["context_seconds"] = cfg.data.context_seconds;
  d["horizon_seconds"] = cfg.data.horizon_seconds;
  j["data"] = d;
  j["seed"] = cfg.seed;
  j["out_dir"] = cfg.out_dir;
  return j;
}

}  // namespace ncdssm::config
