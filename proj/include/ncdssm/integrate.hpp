#pragma once

#include "ncdssm/dynamics.hpp"
#include "ncdssm/tape.hpp"

#include <vector>

namespace ncdssm::integrate {

enum class Solver { Euler, Rk4 };

/// Integration nodes covering [t0, t1] with step eta; the last substep may be
/// shorter so the grid lands exactly on t1.
struct SubGrid {
  std::vector<double> nodes;

  double start() const { return nodes.front(); }
  double end() const { return nodes.back(); }
  int substeps() const { return static_cast<int>(nodes.size()) - 1; }
};

SubGrid make_subgrid(double t0, double t1, double eta);

/// A Gaussian belief on the tape: mean and lower-triangular covariance factor.
struct Belief {
  ad::Var mean;    // m x 1
  ad::Var factor;  // m x m lower triangular
};

/// Result of one continuous-time prediction over a subgrid. Node-aligned
/// means and fundamental matrices are kept for the smoother.
struct PredictOutput {
  Belief predicted;
  std::vector<double> node_times;
  std::vector<ad::Var> node_means;        // \tilde m_j, j = 1..n
  std::vector<ad::Var> node_transitions;  // \tilde Phi_j from the grid start
};

/// Integrates dm/dt = f(m) and dPhi/dt = Fz(m) Phi jointly (Phi starts at I)
/// and assembles the predicted covariance factor from the trapezoid-weighted
/// diffusion terms. Throws DivergedIntegration when a node value stops being
/// finite.
PredictOutput predict_moments(const dyn::Dynamics& dynamics, const dyn::DiffusionSpec& diffusion,
                              Binding& b, const Belief& belief, const SubGrid& grid,
                              Solver solver);

/// Closed-form prediction for LTI dynamics over a gap dt: the transition and
/// the integrated process noise come from one block matrix exponential.
PredictOutput analytic_predict_lti(const dyn::LtiDynamics& dynamics,
                                   const dyn::DiffusionSpec& diffusion, Binding& b,
                                   const Belief& belief, double dt);

/// Trapezoid weights for a node list (halved endpoints on a uniform grid).
std::vector<double> trapezoid_weights(const std::vector<double>& nodes);

/// sum_matrix_sqrts on the tape: factor of A A^T + B B^T via one QR.
ad::Var sum_sqrt_factors(ad::Tape& t, ad::Var a_sqrt, ad::Var b_sqrt);

/// Left fold of sum_sqrt_factors.
ad::Var reduce_sum_sqrt_factors(ad::Tape& t, const std::vector<ad::Var>& factors);

}  // namespace ncdssm::integrate
