#include "ncdssm/integrate.hpp"

#include <cmath>
#include <cstdio>

namespace ncdssm::integrate {

SubGrid make_subgrid(double t0, double t1, double eta) {
  if (!(t1 > t0)) throw std::invalid_argument("make_subgrid: need t1 > t0");
  if (!(eta > 0.0)) throw std::invalid_argument("make_subgrid: need eta > 0");
  const double gap = t1 - t0;
  const int substeps = std::max(1, static_cast<int>(std::ceil(gap / eta - 1e-9)));
  SubGrid grid;
  grid.nodes.reserve(substeps + 1);
  for (int i = 0; i < substeps; ++i) grid.nodes.push_back(t0 + i * eta);
  grid.nodes.push_back(t1);
  return grid;
}

std::vector<double> trapezoid_weights(const std::vector<double>& nodes) {
  const int n = static_cast<int>(nodes.size());
  std::vector<double> w(n, 0.0);
  for (int j = 0; j + 1 < n; ++j) {
    const double h = std::abs(nodes[j + 1] - nodes[j]);
    w[j] += 0.5 * h;
    w[j + 1] += 0.5 * h;
  }
  return w;
}

ad::Var sum_sqrt_factors(ad::Tape& t, ad::Var a_sqrt, ad::Var b_sqrt) {
  if (a_sqrt.rows != b_sqrt.rows)
    throw std::invalid_argument("sum_sqrt_factors: row counts differ");
  const int n = a_sqrt.rows;
  ad::Var stacked = t.concat_rows(t.transpose(a_sqrt), t.transpose(b_sqrt));
  if (stacked.rows < n) {
    ad::Var pad = t.constant(Mat::Zero(n - stacked.rows, n));
    stacked = t.concat_rows(stacked, pad);
  }
  return t.transpose(t.qr_r_factor(stacked));
}

ad::Var reduce_sum_sqrt_factors(ad::Tape& t, const std::vector<ad::Var>& factors) {
  if (factors.empty())
    throw std::invalid_argument("reduce_sum_sqrt_factors: empty factor list");
  if (factors.size() == 1) {
    const int n = factors[0].rows;
    return sum_sqrt_factors(t, factors[0], t.constant(Mat::Zero(n, 1)));
  }
  ad::Var acc = factors[0];
  for (std::size_t i = 1; i < factors.size(); ++i) acc = sum_sqrt_factors(t, acc, factors[i]);
  return acc;
}

namespace {

struct JointState {
  ad::Var mean;
  ad::Var phi;
};

JointState joint_rhs(const dyn::Dynamics& dynamics, Binding& b, const JointState& s, double t) {
  ad::Tape& tape = *b.tape;
  JointState d;
  d.mean = dynamics.drift(b, s.mean, t);
  d.phi = tape.matmul(dynamics.jacobian(b, s.mean, t), s.phi);
  return d;
}

JointState axpy(ad::Tape& t, const JointState& base, double c, const JointState& k) {
  return {t.add(base.mean, t.scale(k.mean, c)), t.add(base.phi, t.scale(k.phi, c))};
}

}  // namespace

PredictOutput predict_moments(const dyn::Dynamics& dynamics, const dyn::DiffusionSpec& diffusion,
                              Binding& b, const Belief& belief, const SubGrid& grid,
                              Solver solver) {
  ad::Tape& t = *b.tape;
  const int m = dynamics.state_dim();

  JointState s{belief.mean, t.constant(Mat::Identity(m, m))};
  PredictOutput out;
  out.node_times = grid.nodes;
  out.node_means.push_back(s.mean);
  out.node_transitions.push_back(s.phi);

  for (int j = 0; j + 1 < static_cast<int>(grid.nodes.size()); ++j) {
    const double t0 = grid.nodes[j];
    const double t1 = grid.nodes[j + 1];
    const double h = t1 - t0;
    if (solver == Solver::Euler) {
      const JointState k1 = joint_rhs(dynamics, b, s, t0);
      s = axpy(t, s, h, k1);
    } else {
      const JointState k1 = joint_rhs(dynamics, b, s, t0);
      const JointState k2 = joint_rhs(dynamics, b, axpy(t, s, h / 2, k1), t0 + h / 2);
      const JointState k3 = joint_rhs(dynamics, b, axpy(t, s, h / 2, k2), t0 + h / 2);
      const JointState k4 = joint_rhs(dynamics, b, axpy(t, s, h, k3), t1);
      ad::Var dm = t.add(t.add(k1.mean, t.scale(t.add(k2.mean, k3.mean), 2.0)), k4.mean);
      ad::Var dp = t.add(t.add(k1.phi, t.scale(t.add(k2.phi, k3.phi), 2.0)), k4.phi);
      s = {t.add(s.mean, t.scale(dm, h / 6.0)), t.add(s.phi, t.scale(dp, h / 6.0))};
    }
    if (!t.value(s.mean).allFinite() || !t.value(s.phi).allFinite())
      throw DivergedIntegration("predict diverged", t1);
    out.node_means.push_back(s.mean);
    out.node_transitions.push_back(s.phi);
  }

  const std::vector<double> w = trapezoid_weights(grid.nodes);
  std::vector<ad::Var> factors;
  factors.reserve(grid.nodes.size() + 1);
  factors.push_back(t.matmul(s.phi, belief.factor));
  for (std::size_t j = 0; j < grid.nodes.size(); ++j) {
    ad::Var droot = diffusion.diffusion_sqrt(b, out.node_means[j], grid.nodes[j]);
    ad::Var term = j == 0 ? droot : t.matmul(out.node_transitions[j], droot);
    factors.push_back(t.scale(term, std::sqrt(w[j])));
  }
  out.predicted = Belief{s.mean, reduce_sum_sqrt_factors(t, factors)};
  return out;
}

PredictOutput analytic_predict_lti(const dyn::LtiDynamics& dynamics,
                                   const dyn::DiffusionSpec& diffusion, Binding& b,
                                   const Belief& belief, double dt) {
  ad::Tape& t = *b.tape;
  const int m = dynamics.state_dim();

  // The block exponential depends only on (F, Q, dt), so it is shared across
  // intervals of equal length within one tape.
  char key[64];
  std::snprintf(key, sizeof(key), "vanloan:%s:%a", dynamics.param_name().c_str(), dt);
  ad::Var phi, qroot;
  auto it = b.memo.find(std::string(key) + ":phi");
  if (it != b.memo.end()) {
    phi = it->second;
    qroot = b.memo.at(std::string(key) + ":qroot");
  } else {
    ad::Var f = dynamics.transition_matrix(b);
    ad::Var q = diffusion.q_matrix(b);
    ad::Var zero = t.constant(Mat::Zero(m, m));
    ad::Var top = t.concat_cols(t.scale(f, -1.0), q);
    ad::Var bottom = t.concat_cols(zero, t.transpose(f));
    ad::Var block = t.scale(t.concat_rows(top, bottom), dt);
    ad::Var e = t.matrix_exponential(block);
    ad::Var g1 = t.slice(e, 0, m, m, m);
    ad::Var f2 = t.slice(e, m, m, m, m);
    phi = t.transpose(f2);
    ad::Var qd = t.matmul(phi, g1);
    ad::Var qd_sym = t.scale(t.add(qd, t.transpose(qd)), 0.5);
    qroot = t.cholesky(qd_sym);
    b.memo[std::string(key) + ":phi"] = phi;
    b.memo[std::string(key) + ":qroot"] = qroot;
  }

  PredictOutput out;
  out.predicted.mean = t.matmul(phi, belief.mean);
  if (!t.value(out.predicted.mean).allFinite())
    throw DivergedIntegration("analytic predict diverged", dt);
  out.predicted.factor = sum_sqrt_factors(t, t.matmul(phi, belief.factor), qroot);
  out.node_times = {0.0, dt};
  out.node_means = {belief.mean, out.predicted.mean};
  out.node_transitions = {t.constant(Mat::Identity(m, m)), phi};
  return out;
}

}  // namespace ncdssm::integrate
