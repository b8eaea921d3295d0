#pragma once

#include "ncdssm/integrate.hpp"

#include <optional>
#include <vector>

namespace ncdssm::filt {

using integrate::Belief;

/// Generative SSM pieces bound to one tape, as the filter consumes them.
struct SsmView {
  const dyn::Dynamics* dynamics = nullptr;
  const dyn::DiffusionSpec* diffusion = nullptr;
  ad::Var mu0;
  ad::Var sigma0_sqrt;
  ad::Var H;
  ad::Var r_sqrt;
  integrate::Solver solver = integrate::Solver::Rk4;
  double eta = 0.05;
  bool analytic_lti = false;

  integrate::PredictOutput predict(Binding& b, const Belief& belief, double t0, double t1) const;
};

struct UpdateResult {
  Belief posterior;
  ad::Var predicted_obs;   // H m^-
  ad::Var innovation_sqrt; // lower-triangular factor of S
  ad::Var loglik;
};

/// Square-root measurement update: QR of the transposed block factor
/// [[R^1/2, H P^1/2], [0, P^1/2]] yields the innovation factor, the gain and
/// the posterior factor in one decomposition.
UpdateResult update(ad::Tape& t, ad::Var obs, const Belief& prior, ad::Var H, ad::Var r_sqrt);

/// Explicit Kalman gain K = Y X^{-1}; only needed by diagnostics and tests.
ad::Var kalman_gain(ad::Tape& t, const Belief& prior, ad::Var H, ad::Var r_sqrt);

struct FilterStep {
  double time = 0.0;
  bool observed = false;
  int obs_index = -1;
  Belief predicted;
  Belief filtered;
  // Valid when observed:
  ad::Var predicted_obs;
  ad::Var innovation_sqrt;
  ad::Var loglik;
  // Prediction cache over the interval ending at this step (absent at t0).
  std::optional<integrate::PredictOutput> arrival;
};

struct FilterResult {
  std::vector<FilterStep> steps;
  ad::Var loglik;  // log p(a_{0:T})
  int observed_count = 0;
};

/// Runs the predict/update recursion over strictly increasing times. Entries
/// of `aux` are the (fully observed) auxiliary vectors. Extra query times
/// inside the span get their predicted beliefs cached as unobserved steps so
/// the smoother can serve them later.
FilterResult filter(const SsmView& ssm, Binding& b, const std::vector<double>& times,
                    const std::vector<ad::Var>& aux, const std::vector<double>& query_times = {});

}  // namespace ncdssm::filt
