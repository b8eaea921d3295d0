#include "ncdssm/model.hpp"
#include <limits>

#include <algorithm>
#include <cmath>
#include <thread>

namespace ncdssm::model {

namespace {

Mat rectangular_identity(int rows, int cols) {
  Mat h = Mat::Zero(rows, cols);
  for (int i = 0; i < std::min(rows, cols); ++i) h(i, i) = 1.0;
  return h;
}

double inverse_softplus(double y) { return std::log(std::expm1(y)); }

}  // namespace

void ModelConfig::validate() const {
  if (m < 1 || h < 1 || d < 1) throw ConfigError("dims m, h, d must be >= 1");
  if (analytic_lti && dynamics != dyn::Kind::Lti)
    throw ConfigError("analytic-lti integrator requires lti dynamics");
  if (recognition.kind == CodecKind::Identity && d != h)
    throw ConfigError("identity recognition requires d == h");
  if (emission.kind == CodecKind::Identity && d != h)
    throw ConfigError("identity emission requires d == h");
  if (dynamics == dyn::Kind::LocallyLinear && base_count < 1)
    throw ConfigError("locally-linear dynamics needs base_count >= 1");
  if (eta <= 0.0) throw ConfigError("eta must be positive");
  if (q_init <= 0.0 || r_init <= 0.0) throw ConfigError("q_init and r_init must be positive");
}

Model::Model(ModelConfig cfg, std::uint64_t seed)
    : cfg_(std::move(cfg)), diffusion_("diffusion.q_raw", cfg_.m, cfg_.q_init) {
  cfg_.validate();
  Rng rng(seed);

  params_.add("mu0", Mat::Zero(cfg_.m, 1), ParamGroup::Ssm);
  params_.add("sigma0.tril_raw", Mat::Zero(cfg_.m, cfg_.m), ParamGroup::Ssm);
  params_.add("sigma0.diag_raw", Mat::Constant(cfg_.m, 1, inverse_softplus(1.0)), ParamGroup::Ssm);

  switch (cfg_.dynamics) {
    case dyn::Kind::Lti:
      dynamics_ = std::make_shared<dyn::LtiDynamics>("dyn.F", cfg_.m, cfg_.transition_init);
      break;
    case dyn::Kind::Nonlinear: {
      std::vector<int> widths = {cfg_.m};
      widths.insert(widths.end(), cfg_.drift_hidden.begin(), cfg_.drift_hidden.end());
      widths.push_back(cfg_.m);
      nn::Mlp net("dyn.net",
                  {widths, cfg_.drift_activation, cfg_.drift_activation_after_last,
                   cfg_.drift_spectral_norm});
      dynamics_ = std::make_shared<dyn::NonlinearDynamics>(std::move(net), cfg_.drift_init);
      break;
    }
    case dyn::Kind::LocallyLinear: {
      std::vector<int> widths = {cfg_.m};
      widths.insert(widths.end(), cfg_.alpha_hidden.begin(), cfg_.alpha_hidden.end());
      widths.push_back(cfg_.base_count);
      nn::Mlp alpha("dyn.alpha", {widths, nn::Activation::Softplus, false, false});
      dynamics_ = std::make_shared<dyn::LocallyLinearDynamics>(
          "dyn.base", cfg_.m, cfg_.base_count, std::move(alpha), cfg_.transition_init);
      break;
    }
  }
  dynamics_->register_params(params_, rng);
  diffusion_.register_params(params_);

  if (cfg_.learn_H)
    params_.add("H", rectangular_identity(cfg_.h, cfg_.m), ParamGroup::Ssm);
  params_.add("r_raw", Mat::Constant(cfg_.h, 1, inverse_softplus(cfg_.r_init)), ParamGroup::Ssm);

  if (cfg_.recognition.kind == CodecKind::Mlp) {
    std::vector<int> widths = {cfg_.d};
    widths.insert(widths.end(), cfg_.recognition.hidden.begin(), cfg_.recognition.hidden.end());
    widths.push_back(2 * cfg_.h);
    recognition_net_.emplace("recog.net",
                             nn::MlpConfig{widths, cfg_.recognition.activation, false, false},
                             ParamGroup::Recognition);
    recognition_net_->register_params(params_, nn::InitScheme::DefaultUniform, rng);
  } else {
    params_.add("recog.std_raw",
                Mat::Constant(cfg_.h, 1, inverse_softplus(cfg_.recognition.init_std)),
                ParamGroup::Recognition);
  }
  if (cfg_.emission.kind == CodecKind::Mlp) {
    std::vector<int> widths = {cfg_.h};
    widths.insert(widths.end(), cfg_.emission.hidden.begin(), cfg_.emission.hidden.end());
    widths.push_back(cfg_.d);
    emission_net_.emplace("emis.net",
                          nn::MlpConfig{widths, cfg_.emission.activation, false, false},
                          ParamGroup::Emission);
    emission_net_->register_params(params_, nn::InitScheme::DefaultUniform, rng);
  }
  params_.add("emis.std_raw", Mat::Constant(cfg_.d, 1, inverse_softplus(cfg_.emission.init_std)),
              ParamGroup::Emission);
}

void Model::refresh_spectral_state() {
  dynamics_->refresh_spectral_state(params_);
  if (recognition_net_) recognition_net_->refresh_spectral_state(params_);
  if (emission_net_) emission_net_->refresh_spectral_state(params_);
}

filt::SsmView Model::ssm_view(Binding& b) const {
  ad::Tape& t = *b.tape;
  filt::SsmView v;
  v.dynamics = dynamics_.get();
  v.diffusion = &diffusion_;
  v.solver = cfg_.solver;
  v.eta = cfg_.eta;
  v.analytic_lti = cfg_.analytic_lti;
  v.mu0 = b["mu0"];

  auto it = b.memo.find("sigma0.sqrt");
  if (it != b.memo.end()) {
    v.sigma0_sqrt = it->second;
  } else {
    Mat strict = Mat::Ones(cfg_.m, cfg_.m);
    strict.triangularView<Eigen::Upper>().setZero();
    ad::Var lower = t.mul(b["sigma0.tril_raw"], t.constant(strict));
    ad::Var diag = t.add(t.softplus(b["sigma0.diag_raw"]),
                         t.constant(Mat::Constant(cfg_.m, 1, 1e-3)));
    v.sigma0_sqrt = t.add(lower, t.diag_embed(diag));
    b.memo["sigma0.sqrt"] = v.sigma0_sqrt;
  }

  if (cfg_.learn_H) {
    v.H = b["H"];
  } else {
    auto hit = b.memo.find("H.fixed");
    if (hit != b.memo.end()) {
      v.H = hit->second;
    } else {
      v.H = t.constant(rectangular_identity(cfg_.h, cfg_.m));
      b.memo["H.fixed"] = v.H;
    }
  }

  auto rit = b.memo.find("r.sqrt");
  if (rit != b.memo.end()) {
    v.r_sqrt = rit->second;
  } else {
    ad::Var rdiag = t.add(t.softplus(b["r_raw"]), t.constant(Mat::Constant(cfg_.h, 1, 1e-6)));
    v.r_sqrt = t.diag_embed(t.sqrt(rdiag));
    b.memo["r.sqrt"] = v.r_sqrt;
  }
  return v;
}

Model::DiagGaussian Model::recognize(Binding& b, const Vec& y) const {
  ad::Tape& t = *b.tape;
  if (y.size() != cfg_.d) throw std::invalid_argument("recognize: observation width mismatch");
  nn::DiagGaussianHead head{cfg_.recognition.std_floor};
  if (cfg_.recognition.kind == CodecKind::Identity) {
    return {t.constant(y), head.std_from_raw(t, b["recog.std_raw"])};
  }
  ad::Var out = recognition_net_->forward(b, t.constant(y));
  ad::Var mean = t.slice(out, 0, 0, cfg_.h, 1);
  ad::Var raw = t.slice(out, cfg_.h, 0, cfg_.h, 1);
  return {mean, head.std_from_raw(t, raw)};
}

Model::DiagGaussian Model::emit(Binding& b, ad::Var a) const {
  ad::Tape& t = *b.tape;
  nn::DiagGaussianHead head{cfg_.emission.std_floor};
  ad::Var stddev;
  auto it = b.memo.find("emis.std");
  if (it != b.memo.end()) {
    stddev = it->second;
  } else {
    stddev = head.std_from_raw(t, b["emis.std_raw"]);
    b.memo["emis.std"] = stddev;
  }
  if (cfg_.emission.kind == CodecKind::Identity) return {a, stddev};
  return {emission_net_->forward(b, a), stddev};
}

ElboReport Model::elbo(Binding& b, const data::IrregularSeries& series, Rng& noise,
                       int n_samples) const {
  if (n_samples < 1) throw std::invalid_argument("elbo: n_samples must be >= 1");
  if (n_samples > 1) {
    ElboReport avg = elbo(b, series, noise, 1);
    ad::Tape& t = *b.tape;
    for (int s = 1; s < n_samples; ++s) {
      ElboReport one = elbo(b, series, noise, 1);
      avg.total = t.add(avg.total, one.total);
      avg.reconstruction = t.add(avg.reconstruction, one.reconstruction);
      avg.prior = t.add(avg.prior, one.prior);
      avg.entropy = t.add(avg.entropy, one.entropy);
    }
    const double inv = 1.0 / n_samples;
    avg.total = t.scale(avg.total, inv);
    avg.reconstruction = t.scale(avg.reconstruction, inv);
    avg.prior = t.scale(avg.prior, inv);
    avg.entropy = t.scale(avg.entropy, inv);
    avg.total_value = t.value(avg.total)(0, 0);
    avg.reconstruction_value = t.value(avg.reconstruction)(0, 0);
    avg.prior_value = t.value(avg.prior)(0, 0);
    avg.entropy_value = t.value(avg.entropy)(0, 0);
    return avg;
  }
  ad::Tape& t = *b.tape;
  const data::IrregularSeries obs = series.observed_view();
  if (obs.size() == 0) throw std::invalid_argument("elbo: series has no observed timesteps");

  std::vector<ad::Var> aux;
  aux.reserve(obs.size());
  ad::Var recon, entropy;
  for (std::size_t k = 0; k < obs.size(); ++k) {
    DiagGaussian q = recognize(b, obs.values[k]);
    ad::Var sample = nn::DiagGaussianHead::sample(t, q.mean, q.stddev, noise.normal_vec(cfg_.h));
    aux.push_back(sample);

    ad::Var logq = t.gaussian_logpdf(sample, q.mean, t.diag_embed(q.stddev));
    entropy = k == 0 ? t.scale(logq, -1.0) : t.sub(entropy, logq);

    DiagGaussian p = emit(b, sample);
    ad::Var logp = t.gaussian_logpdf(t.constant(obs.values[k]), p.mean, t.diag_embed(p.stddev));
    recon = k == 0 ? logp : t.add(recon, logp);
  }

  auto view = ssm_view(b);
  auto fr = filt::filter(view, b, obs.times, aux);

  ElboReport report;
  report.reconstruction = recon;
  report.prior = fr.loglik;
  report.entropy = entropy;
  report.total = t.add(t.add(recon, fr.loglik), entropy);
  report.total_value = t.value(report.total)(0, 0);
  report.reconstruction_value = t.value(recon)(0, 0);
  report.prior_value = t.value(fr.loglik)(0, 0);
  report.entropy_value = t.value(entropy)(0, 0);
  return report;
}

std::vector<ad::Var> Model::recognition_means(Binding& b, const data::IrregularSeries& obs) const {
  std::vector<ad::Var> aux;
  aux.reserve(obs.size());
  for (std::size_t k = 0; k < obs.size(); ++k) aux.push_back(recognize(b, obs.values[k]).mean);
  return aux;
}

ImputeQueryResult Model::impute_one(Binding& b, const smoothing::SmoothResult& sm, double time,
                                    int n_samples, Rng& noise) const {
  ad::Tape& t = *b.tape;
  auto view = ssm_view(b);
  const auto& step = sm.at(time);
  ad::Var a_mean = t.matmul(view.H, step.smoothed.mean);
  ad::Var s_sqrt = integrate::sum_sqrt_factors(t, t.matmul(view.H, step.smoothed.factor),
                                               view.r_sqrt);
  ImputeQueryResult out;
  out.time = time;
  out.mean = t.value(emit(b, a_mean).mean).col(0);
  for (int s = 0; s < n_samples; ++s) {
    ad::Var a_draw = t.add(a_mean, t.matmul(s_sqrt, t.constant(noise.normal_vec(cfg_.h))));
    DiagGaussian p = emit(b, a_draw);
    ad::Var y_draw = nn::DiagGaussianHead::sample(t, p.mean, p.stddev, noise.normal_vec(cfg_.d));
    out.samples.push_back(t.value(y_draw).col(0));
  }
  return out;
}

std::vector<ImputeQueryResult> Model::impute(const data::IrregularSeries& series,
                                             const std::vector<double>& query_times,
                                             int n_samples, Rng& noise) const {
  const data::IrregularSeries obs = series.observed_view();
  if (obs.size() == 0) throw std::invalid_argument("impute: series has no observed timesteps");
  for (double q : query_times)
    if (q < obs.times.front() - 1e-12 || q > obs.times.back() + 1e-12)
      throw std::invalid_argument("impute: query time outside the observed span");

  ad::Tape tape;
  Binding b = bind(params_, tape);
  auto view = ssm_view(b);
  auto aux = recognition_means(b, obs);
  auto fr = filt::filter(view, b, obs.times, aux, query_times);
  auto sm = smoothing::smooth(view, b, fr);

  std::vector<ImputeQueryResult> out;
  out.reserve(query_times.size());
  for (double q : query_times) out.push_back(impute_one(b, sm, q, n_samples, noise));
  return out;
}

ForecastResult Model::forecast(const data::IrregularSeries& context,
                               const std::vector<double>& horizon_times, int n_samples,
                               Rng& noise) const {
  const data::IrregularSeries obs = context.observed_view();
  if (obs.size() == 0) throw std::invalid_argument("forecast: empty context");
  for (double ht : horizon_times)
    if (!(ht > obs.times.back()))
      throw std::invalid_argument("forecast: horizon times must follow the context");
  for (std::size_t i = 1; i < horizon_times.size(); ++i)
    if (!(horizon_times[i] > horizon_times[i - 1]))
      throw std::invalid_argument("forecast: horizon times must be increasing");

  ad::Tape tape;
  Binding b = bind(params_, tape);
  ad::Tape& t = tape;
  auto view = ssm_view(b);
  auto aux = recognition_means(b, obs);
  auto fr = filt::filter(view, b, obs.times, aux);
  const filt::Belief last = fr.steps.back().filtered;

  ForecastResult out;
  out.times = horizon_times;

  // Pointwise predictive means from the rolled-forward belief.
  {
    filt::Belief cur = last;
    double t_prev = obs.times.back();
    for (double ht : horizon_times) {
      auto pred = view.predict(b, cur, t_prev, ht);
      cur = pred.predicted;
      t_prev = ht;
      out.means.push_back(t.value(emit(b, t.matmul(view.H, cur.mean)).mean).col(0));
      ad::Var s_sqrt =
          integrate::sum_sqrt_factors(t, t.matmul(view.H, cur.factor), view.r_sqrt);
      const Mat sv = t.value(s_sqrt);
      out.aux_stds.push_back((sv * sv.transpose()).diagonal().cwiseSqrt());
    }
  }

  const ad::Var zero_factor = t.constant(Mat::Zero(cfg_.m, cfg_.m));
  for (int s = 0; s < n_samples; ++s) {
    ad::Var z = t.add(last.mean, t.matmul(last.factor, t.constant(noise.normal_vec(cfg_.m))));
    std::vector<Vec> path;
    double t_prev = obs.times.back();
    for (double ht : horizon_times) {
      auto pred = view.predict(b, filt::Belief{z, zero_factor}, t_prev, ht);
      z = t.add(pred.predicted.mean,
                t.matmul(pred.predicted.factor, t.constant(noise.normal_vec(cfg_.m))));
      ad::Var a = t.add(t.matmul(view.H, z),
                        t.matmul(view.r_sqrt, t.constant(noise.normal_vec(cfg_.h))));
      DiagGaussian p = emit(b, a);
      path.push_back(
          t.value(nn::DiagGaussianHead::sample(t, p.mean, p.stddev, noise.normal_vec(cfg_.d)))
              .col(0));
      t_prev = ht;
    }
    out.sample_paths.push_back(std::move(path));
  }
  return out;
}

void train(Model& model, const std::vector<data::IrregularSeries>& dataset,
           const TrainConfig& cfg, Rng& rng,
           const std::function<void(const StepMetrics&)>& on_metrics,
           const std::function<void(long step)>& on_checkpoint) {
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  if (cfg.batch_size < 1 || cfg.steps < 0) throw ConfigError("train: invalid batch/steps");

  const int n_threads =
      cfg.threads > 0 ? cfg.threads
                      : std::max(1u, std::thread::hardware_concurrency());
  std::vector<std::unique_ptr<ad::Tape>> tapes;
  for (int i = 0; i < n_threads; ++i) tapes.push_back(std::make_unique<ad::Tape>());

  struct ElemOut {
    double elbo = 0.0, recon = 0.0, prior = 0.0, entropy = 0.0;
    std::unordered_map<std::string, Mat> grads;
    std::string error;
  };

  ParamStore& params = model.params();

  for (long step = cfg.start_step; step < cfg.steps; ++step) {
    model.refresh_spectral_state();

    std::vector<std::size_t> batch(cfg.batch_size);
    std::vector<std::uint64_t> noise_seeds(cfg.batch_size);
    for (int i = 0; i < cfg.batch_size; ++i) {
      batch[i] = static_cast<std::size_t>(rng.below(dataset.size()));
      noise_seeds[i] = rng.below(std::numeric_limits<std::uint64_t>::max());
    }

    std::vector<ElemOut> results(cfg.batch_size);
    auto worker = [&](int wid) {
      ad::Tape& tape = *tapes[wid];
      for (int i = wid; i < cfg.batch_size; i += n_threads) {
        try {
          tape.clear();
          Binding b = bind(params, tape);
          Rng noise(noise_seeds[i]);
          auto report = model.elbo(b, dataset[batch[i]], noise, cfg.elbo_samples);
          tape.backward(report.total);
          results[i].grads = collect_gradients(params, b);
          results[i].elbo = report.total_value;
          results[i].recon = report.reconstruction_value;
          results[i].prior = report.prior_value;
          results[i].entropy = report.entropy_value;
        } catch (const std::exception& e) {
          results[i].error = e.what();
        }
      }
    };
    if (n_threads == 1) {
      worker(0);
    } else {
      std::vector<std::thread> pool;
      for (int w = 0; w < n_threads; ++w) pool.emplace_back(worker, w);
      for (auto& th : pool) th.join();
    }

    StepMetrics metrics;
    metrics.step = step;
    std::unordered_map<std::string, Mat> grad;
    for (int i = 0; i < cfg.batch_size; ++i) {
      if (!results[i].error.empty())
        throw NumericalError("train: step " + std::to_string(step) + ": " + results[i].error);
      metrics.elbo += results[i].elbo;
      metrics.reconstruction += results[i].recon;
      metrics.prior += results[i].prior;
      metrics.entropy += results[i].entropy;
      for (auto& [name, g] : results[i].grads) {
        auto it = grad.find(name);
        if (it == grad.end())
          grad.emplace(name, g);
        else
          it->second += g;
      }
    }
    const double inv_b = 1.0 / cfg.batch_size;
    metrics.elbo *= inv_b;
    metrics.reconstruction *= inv_b;
    metrics.prior *= inv_b;
    metrics.entropy *= inv_b;
    for (auto& [name, g] : grad) g *= inv_b;

    if (!std::isfinite(metrics.elbo))
      throw NumericalError("train: non-finite objective at step " + std::to_string(step));
    metrics.grad_norm = ParamStore::grad_norm(grad);
    if (!std::isfinite(metrics.grad_norm))
      throw NumericalError("train: non-finite gradient at step " + std::to_string(step));

    const double lr =
        cfg.learning_rate * std::pow(cfg.decay_rate, static_cast<double>(step / cfg.decay_every));
    metrics.learning_rate = lr;

    const bool freeze_ssm = step < cfg.freeze_ssm_steps;
    for (const auto& name : params.names()) {
      Param& p = params.at(name);
      if (!p.trainable) continue;
      if (freeze_ssm && p.group == ParamGroup::Ssm) continue;
      auto it = grad.find(name);
      if (it == grad.end()) continue;
      const Mat& g = it->second;
      p.adam_steps += 1;
      p.adam_m = cfg.adam_beta1 * p.adam_m + (1.0 - cfg.adam_beta1) * g;
      p.adam_v = cfg.adam_beta2 * p.adam_v + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(p.adam_steps));
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(p.adam_steps));
      const Mat mhat = p.adam_m / bc1;
      const Mat vhat = p.adam_v / bc2;
      // Ascent on the ELBO.
      p.value += lr * (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps)).matrix();
    }

    if (on_metrics) on_metrics(metrics);
    if (on_checkpoint && cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      on_checkpoint(step + 1);
  }
  if (on_checkpoint && (cfg.steps == cfg.start_step || cfg.checkpoint_every <= 0 ||
                        cfg.steps % cfg.checkpoint_every != 0))
    on_checkpoint(cfg.steps);
}

}  // namespace ncdssm::model
