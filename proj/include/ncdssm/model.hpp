#pragma once

#include "ncdssm/data.hpp"
#include "ncdssm/dynamics.hpp"
#include "ncdssm/filter.hpp"
#include "ncdssm/nn.hpp"
#include "ncdssm/smoother.hpp"

#include <functional>
#include <memory>
#include <optional>

namespace ncdssm::model {

enum class CodecKind { Identity, Mlp };

/// Recognition / emission configuration. Identity codecs carry only a learned
/// constant standard deviation; MLP recognition emits mean and raw scale, MLP
/// emission emits the mean with a learned constant scale.
struct CodecConfig {
  CodecKind kind = CodecKind::Identity;
  std::vector<int> hidden;
  nn::Activation activation = nn::Activation::Softplus;
  double init_std = 0.1;
  double std_floor = 1e-3;
};

struct ModelConfig {
  int m = 1;  // state
  int h = 1;  // auxiliary
  int d = 1;  // observation
  dyn::Kind dynamics = dyn::Kind::Lti;
  // LTI / LL transition initialization
  nn::InitScheme transition_init = nn::InitScheme::Orthogonal;
  // NL drift net
  std::vector<int> drift_hidden = {64};
  nn::Activation drift_activation = nn::Activation::Softplus;
  bool drift_activation_after_last = false;
  bool drift_spectral_norm = false;
  nn::InitScheme drift_init = nn::InitScheme::ZeroLastLayer;
  int base_count = 5;  // LL
  std::vector<int> alpha_hidden = {64};

  CodecConfig recognition;
  CodecConfig emission;
  bool learn_H = false;
  double q_init = 0.1;
  double r_init = 0.1;

  integrate::Solver solver = integrate::Solver::Rk4;
  double eta = 0.05;
  bool analytic_lti = false;

  void validate() const;
};

struct ElboReport {
  ad::Var total;
  ad::Var reconstruction;
  ad::Var prior;
  ad::Var entropy;
  double total_value = 0.0;
  double reconstruction_value = 0.0;
  double prior_value = 0.0;
  double entropy_value = 0.0;
};

struct TrainConfig {
  double learning_rate = 0.01;
  double decay_rate = 0.9;
  long decay_every = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 64;
  int elbo_samples = 1;
  long steps = 2000;
  long start_step = 0;  // resume offset; steps counts the global target
  long freeze_ssm_steps = 0;
  long checkpoint_every = 500;
  std::uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
};

struct StepMetrics {
  long step = 0;
  double elbo = 0.0;
  double reconstruction = 0.0;
  double prior = 0.0;
  double entropy = 0.0;
  double learning_rate = 0.0;
  double grad_norm = 0.0;
};

struct ImputeQueryResult {
  double time = 0.0;
  Vec mean;                 // predictive mean of y
  std::vector<Vec> samples;
};

struct ForecastResult {
  std::vector<double> times;
  std::vector<Vec> means;                       // pointwise predictive means
  std::vector<Vec> aux_stds;                    // sqrt diag(H P H^T + R) per time
  std::vector<std::vector<Vec>> sample_paths;   // [sample][time]
};

/// Generative model + inference networks and everything needed to run the
/// filter/smoother over them.
class Model {
public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const dyn::Dynamics& dynamics() const { return *dynamics_; }

  /// Power-iteration refresh for all spectral-normalized nets.
  void refresh_spectral_state();

  filt::SsmView ssm_view(Binding& b) const;

  struct DiagGaussian {
    ad::Var mean;
    ad::Var stddev;
  };

  /// q(a_k | y_k). For identity recognition the mean is y itself.
  DiagGaussian recognize(Binding& b, const Vec& y) const;
  /// p(y | a): mean through the emission net (or identity) with a learned
  /// constant scale.
  DiagGaussian emit(Binding& b, ad::Var a) const;

  /// Reparameterized ELBO over the observed timesteps; n_samples > 1
  /// averages independent draws (the default follows the one-sample
  /// learning recipe).
  ElboReport elbo(Binding& b, const data::IrregularSeries& series, Rng& noise,
                  int n_samples = 1) const;

  ImputeQueryResult impute_one(Binding& b, const smoothing::SmoothResult& sm, double time,
                               int n_samples, Rng& noise) const;

  /// Smoothing-based imputation at the query times.
  std::vector<ImputeQueryResult> impute(const data::IrregularSeries& series,
                                        const std::vector<double>& query_times, int n_samples,
                                        Rng& noise) const;

  /// Filter the context, then roll the prediction forward over the horizon.
  /// Sample paths draw a state at the context end and propagate it through
  /// per-interval linearized Gaussian transitions.
  ForecastResult forecast(const data::IrregularSeries& context,
                          const std::vector<double>& horizon_times, int n_samples,
                          Rng& noise) const;

private:
  std::vector<ad::Var> recognition_means(Binding& b, const data::IrregularSeries& obs) const;

  ModelConfig cfg_;
  ParamStore params_;
  std::shared_ptr<dyn::Dynamics> dynamics_;
  dyn::DiffusionSpec diffusion_;
  std::optional<nn::Mlp> recognition_net_;
  std::optional<nn::Mlp> emission_net_;
};

/// Adam ascent on the mini-batch mean ELBO. SSM parameters stay untouched for
/// the first freeze_ssm_steps. Batch members are evaluated on worker threads
/// and their gradients reduced in batch order, so results do not depend on
/// scheduling. Throws NumericalError on a non-finite objective (the last
/// checkpoint handed to on_checkpoint stays on disk).
void train(Model& model, const std::vector<data::IrregularSeries>& dataset,
           const TrainConfig& cfg, Rng& rng,
           const std::function<void(const StepMetrics&)>& on_metrics = {},
           const std::function<void(long step)>& on_checkpoint = {});

}  // namespace ncdssm::model
