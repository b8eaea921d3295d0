#include "ncdssm/smoother.hpp"

#include <cmath>

namespace ncdssm::smoothing {

const SmoothedStep& SmoothResult::at(double time) const {
  for (const auto& s : steps)
    if (std::abs(s.time - time) <= 1e-12) return s;
  throw std::invalid_argument("smooth: no cached belief at t=" + std::to_string(time));
}

namespace {

// Filtered mean, drift at the mean, and the smoother gain matrix
// C = Fz(m) + D P^{-1}, all bound to one replay node.
struct NodeData {
  ad::Var mean;
  ad::Var drift;
  ad::Var c;
};

NodeData make_node(const filt::SsmView& ssm, Binding& b, const Belief& belief, double t) {
  ad::Tape& tape = *b.tape;
  const auto fv = tape.value(belief.factor);
  for (int i = 0; i < belief.factor.rows; ++i)
    if (fv(i, i) < 1e-12)
      throw SingularFilteredCovariance("smoother: filtered covariance factor is singular");
  NodeData nd;
  nd.mean = belief.mean;
  nd.drift = ssm.dynamics->drift(b, belief.mean, t);
  ad::Var j = ssm.dynamics->jacobian(b, belief.mean, t);
  ad::Var q = ssm.diffusion->q_matrix(b);
  // D P^{-1} through two triangular solves on the factor.
  ad::Var s1 = tape.tri_solve(belief.factor, q);
  ad::Var s2 = tape.tri_solve(belief.factor, s1, true);
  nd.c = tape.add(j, tape.transpose(s2));
  return nd;
}

struct BackState {
  ad::Var mean;
  ad::Var phi;
};

// dm/dt = f(m~) + C (m - m~), dPhi/dt = C Phi, evaluated at one replay node.
BackState back_rhs(ad::Tape& t, const NodeData& nd, const BackState& s) {
  BackState d;
  d.mean = t.add(nd.drift, t.matmul(nd.c, t.sub(s.mean, nd.mean)));
  d.phi = t.matmul(nd.c, s.phi);
  return d;
}

BackState back_axpy(ad::Tape& t, const BackState& base, double c, const BackState& k) {
  return {t.add(base.mean, t.scale(k.mean, c)), t.add(base.phi, t.scale(k.phi, c))};
}

}  // namespace

Belief smooth_step(const filt::SsmView& ssm, Binding& b, const Belief& smoothed_at_end,
                   const Belief& filtered_at_start, double t_start, double t_end) {
  ad::Tape& t = *b.tape;
  const int m = ssm.dynamics->state_dim();
  const auto grid = integrate::make_subgrid(t_start, t_end, ssm.eta);
  const int n_sub = grid.substeps();

  // Forward replay on a half-step grid; index 2j is grid node j.
  std::vector<NodeData> nodes;
  nodes.reserve(2 * n_sub + 1);
  Belief replay = filtered_at_start;
  nodes.push_back(make_node(ssm, b, replay, grid.nodes[0]));
  for (int j = 0; j < n_sub; ++j) {
    const double a = grid.nodes[j];
    const double c = grid.nodes[j + 1];
    const double mid = 0.5 * (a + c);
    const double legs[2][2] = {{a, mid}, {mid, c}};
    for (const auto& leg_times : legs) {
      integrate::SubGrid leg;
      leg.nodes = {leg_times[0], leg_times[1]};
      auto out =
          integrate::predict_moments(*ssm.dynamics, *ssm.diffusion, b, replay, leg, ssm.solver);
      replay = out.predicted;
      nodes.push_back(make_node(ssm, b, replay, leg_times[1]));
    }
  }

  // Backward sweep from t_end to t_start with RK4 stages at the half nodes.
  // Each substep also yields its own transition matrix of the backward flow,
  // so the Lyapunov quadrature can use the transition from every node down to
  // t_start (the variation-of-constants form).
  const ad::Var ident = t.constant(Mat::Identity(m, m));
  BackState s{smoothed_at_end.mean, ident};
  std::vector<ad::Var> leg(n_sub);  // transition tau_j <- tau_{j+1}
  for (int j = n_sub - 1; j >= 0; --j) {
    const double h = grid.nodes[j] - grid.nodes[j + 1];  // negative
    const NodeData& end = nodes[2 * j + 2];
    const NodeData& mid = nodes[2 * j + 1];
    const NodeData& start = nodes[2 * j];
    s.phi = ident;
    if (ssm.solver == integrate::Solver::Euler) {
      s = back_axpy(t, s, h, back_rhs(t, end, s));
    } else {
      const BackState k1 = back_rhs(t, end, s);
      const BackState k2 = back_rhs(t, mid, back_axpy(t, s, h / 2, k1));
      const BackState k3 = back_rhs(t, mid, back_axpy(t, s, h / 2, k2));
      const BackState k4 = back_rhs(t, start, back_axpy(t, s, h, k3));
      ad::Var dm = t.add(t.add(k1.mean, t.scale(t.add(k2.mean, k3.mean), 2.0)), k4.mean);
      ad::Var dp = t.add(t.add(k1.phi, t.scale(t.add(k2.phi, k3.phi), 2.0)), k4.phi);
      s = {t.add(s.mean, t.scale(dm, h / 6.0)), t.add(s.phi, t.scale(dp, h / 6.0))};
    }
    if (!t.value(s.mean).allFinite() || !t.value(s.phi).allFinite())
      throw DivergedIntegration("smoother diverged", grid.nodes[j]);
    leg[j] = s.phi;
  }

  // Prefix products: trans[j] carries node j to the interval start.
  std::vector<ad::Var> trans(n_sub + 1);
  trans[0] = ident;
  for (int j = 1; j <= n_sub; ++j) trans[j] = t.matmul(trans[j - 1], leg[j - 1]);

  const std::vector<double> w = integrate::trapezoid_weights(grid.nodes);
  std::vector<ad::Var> factors;
  factors.reserve(n_sub + 2);
  factors.push_back(t.matmul(trans[n_sub], smoothed_at_end.factor));
  for (int j = 0; j <= n_sub; ++j) {
    ad::Var droot = ssm.diffusion->diffusion_sqrt(b, nodes[2 * j].mean, grid.nodes[j]);
    ad::Var term = j == 0 ? droot : t.matmul(trans[j], droot);
    factors.push_back(t.scale(term, std::sqrt(w[j])));
  }
  return Belief{s.mean, integrate::reduce_sum_sqrt_factors(t, factors)};
}

SmoothResult smooth(const filt::SsmView& ssm, Binding& b, const filt::FilterResult& fr) {
  if (fr.steps.empty()) throw std::invalid_argument("smooth: empty filter result");
  SmoothResult result;
  result.steps.resize(fr.steps.size());

  const auto& last = fr.steps.back();
  result.steps.back() = {last.time, last.observed, last.filtered};
  for (int k = static_cast<int>(fr.steps.size()) - 1; k > 0; --k) {
    const auto& cur = result.steps[k];
    const auto& prev_f = fr.steps[k - 1];
    Belief sm = smooth_step(ssm, b, cur.smoothed, prev_f.filtered, prev_f.time, fr.steps[k].time);
    result.steps[k - 1] = {prev_f.time, prev_f.observed, sm};
  }
  return result;
}

}  // namespace ncdssm::smoothing
