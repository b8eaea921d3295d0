#include "ncdssm/dynamics.hpp"

#include <cmath>

namespace ncdssm::dyn {

void LtiDynamics::register_params(ParamStore& store, Rng& rng) const {
  Mat f;
  switch (init_) {
    case nn::InitScheme::Orthogonal: f = nn::orthogonal_matrix(rng, m_); break;
    case nn::InitScheme::SkewSymmetricExpmSeed: f = nn::skew_symmetric(rng, m_); break;
    case nn::InitScheme::ZeroLastLayer: f = Mat::Zero(m_, m_); break;
    case nn::InitScheme::DefaultUniform: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(m_));
      f = Mat::NullaryExpr(m_, m_,
                           [&](Eigen::Index, Eigen::Index) { return rng.uniform(-bound, bound); });
      break;
    }
  }
  store.add(name_, f, ParamGroup::Ssm);
}

ad::Var LtiDynamics::drift(Binding& b, ad::Var z, double) const {
  return b.tape->matmul(b[name_], z);
}

ad::Var LtiDynamics::jacobian(Binding& b, ad::Var, double) const { return b[name_]; }

void NonlinearDynamics::register_params(ParamStore& store, Rng& rng) const {
  net_.register_params(store, init_, rng);
}

ad::Var NonlinearDynamics::drift(Binding& b, ad::Var z, double) const {
  return net_.forward(b, z);
}

ad::Var NonlinearDynamics::jacobian(Binding& b, ad::Var z, double) const {
  return net_.input_jacobian(b, z);
}

LocallyLinearDynamics::LocallyLinearDynamics(std::string name, int m, int k, nn::Mlp alpha_net,
                                             nn::InitScheme base_init)
    : name_(std::move(name)), m_(m), k_(k), alpha_net_(std::move(alpha_net)),
      base_init_(base_init) {
  if (k_ < 1) throw std::invalid_argument("locally-linear dynamics: need K >= 1");
  if (alpha_net_.input_width() != m_ || alpha_net_.output_width() != k_)
    throw std::invalid_argument("locally-linear dynamics: alpha net must map m -> K");
}

void LocallyLinearDynamics::register_params(ParamStore& store, Rng& rng) const {
  for (int j = 0; j < k_; ++j) {
    Mat f = base_init_ == nn::InitScheme::SkewSymmetricExpmSeed ? nn::skew_symmetric(rng, m_)
                                                                : nn::orthogonal_matrix(rng, m_);
    store.add(name_ + ".F" + std::to_string(j), f, ParamGroup::Ssm);
  }
  alpha_net_.register_params(store, nn::InitScheme::DefaultUniform, rng);
}

ad::Var LocallyLinearDynamics::mixed_matrix(Binding& b, ad::Var z) const {
  ad::Tape& t = *b.tape;
  ad::Var logits = alpha_net_.forward(b, z);                    // K x 1
  ad::Var alpha = t.softmax_rows(t.transpose(logits));          // 1 x K
  ad::Var mix = t.scale_by(b[name_ + ".F0"], t.slice(alpha, 0, 0, 1, 1));
  for (int j = 1; j < k_; ++j) {
    ad::Var w = t.slice(alpha, 0, j, 1, 1);
    mix = t.add(mix, t.scale_by(b[name_ + ".F" + std::to_string(j)], w));
  }
  return mix;
}

ad::Var LocallyLinearDynamics::drift(Binding& b, ad::Var z, double) const {
  return b.tape->matmul(mixed_matrix(b, z), z);
}

ad::Var LocallyLinearDynamics::jacobian(Binding& b, ad::Var z, double) const {
  // Deliberate approximation: the mixing weights are treated as locally
  // constant, so the Jacobian is the mixed matrix itself.
  return mixed_matrix(b, z);
}

void DiffusionSpec::register_params(ParamStore& store) const {
  // softplus(raw) = init_q  =>  raw = log(exp(init_q) - 1)
  const double raw = std::log(std::expm1(init_q_));
  store.add(name_, Mat::Constant(m_, 1, raw), ParamGroup::Ssm);
}

ad::Var DiffusionSpec::q_diagonal(Binding& b) const {
  ad::Tape& t = *b.tape;
  return t.add(t.softplus(b[name_]), t.constant(Mat::Constant(m_, 1, floor_)));
}

ad::Var DiffusionSpec::diffusion_sqrt(Binding& b, ad::Var, double) const {
  const std::string key = name_ + ".sqrt";
  auto it = b.memo.find(key);
  if (it != b.memo.end()) return it->second;
  ad::Tape& t = *b.tape;
  ad::Var root = t.diag_embed(t.sqrt(q_diagonal(b)));
  b.memo[key] = root;
  return root;
}

ad::Var DiffusionSpec::q_matrix(Binding& b) const {
  const std::string key = name_ + ".mat";
  auto it = b.memo.find(key);
  if (it != b.memo.end()) return it->second;
  ad::Var q = b.tape->diag_embed(q_diagonal(b));
  b.memo[key] = q;
  return q;
}

}  // namespace ncdssm::dyn
