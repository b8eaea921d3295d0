#pragma once

#include "ncdssm/nn.hpp"
#include "ncdssm/params.hpp"
#include "ncdssm/tape.hpp"

#include <memory>
#include <string>
#include <vector>

namespace ncdssm::dyn {

enum class Kind { Lti, Nonlinear, LocallyLinear };

/// Drift f(z, t) and its (approximate) state Jacobian for the three
/// parameterizations. All variants are time-invariant; t is accepted for
/// signature generality.
class Dynamics {
public:
  virtual ~Dynamics() = default;
  virtual Kind kind() const = 0;
  virtual int state_dim() const = 0;
  virtual void register_params(ParamStore& store, Rng& rng) const = 0;
  virtual void refresh_spectral_state(ParamStore& store) const {}
  virtual ad::Var drift(Binding& b, ad::Var z, double t) const = 0;
  virtual ad::Var jacobian(Binding& b, ad::Var z, double t) const = 0;
};

/// dz = F z dt + dB.
class LtiDynamics final : public Dynamics {
public:
  LtiDynamics(std::string name, int m, nn::InitScheme init = nn::InitScheme::Orthogonal)
      : name_(std::move(name)), m_(m), init_(init) {}
  Kind kind() const override { return Kind::Lti; }
  int state_dim() const override { return m_; }
  void register_params(ParamStore& store, Rng& rng) const override;
  ad::Var drift(Binding& b, ad::Var z, double t) const override;
  ad::Var jacobian(Binding& b, ad::Var z, double t) const override;
  ad::Var transition_matrix(Binding& b) const { return b[name_]; }
  const std::string& param_name() const { return name_; }

private:
  std::string name_;
  int m_;
  nn::InitScheme init_;
};

/// dz = net(z) dt + dB with an MLP drift.
class NonlinearDynamics final : public Dynamics {
public:
  NonlinearDynamics(nn::Mlp net, nn::InitScheme init = nn::InitScheme::ZeroLastLayer)
      : net_(std::move(net)), init_(init) {
    if (net_.input_width() != net_.output_width())
      throw std::invalid_argument("nonlinear dynamics: drift net must map m -> m");
  }
  Kind kind() const override { return Kind::Nonlinear; }
  int state_dim() const override { return net_.input_width(); }
  void register_params(ParamStore& store, Rng& rng) const override;
  void refresh_spectral_state(ParamStore& store) const override {
    net_.refresh_spectral_state(store);
  }
  ad::Var drift(Binding& b, ad::Var z, double t) const override;
  ad::Var jacobian(Binding& b, ad::Var z, double t) const override;
  const nn::Mlp& net() const { return net_; }

private:
  nn::Mlp net_;
  nn::InitScheme init_;
};

/// dz = F(z) z dt + dB with F(z) a softmax-weighted combination of K base
/// matrices. The Jacobian is approximated by F(z) itself.
class LocallyLinearDynamics final : public Dynamics {
public:
  LocallyLinearDynamics(std::string name, int m, int k, nn::Mlp alpha_net,
                        nn::InitScheme base_init = nn::InitScheme::Orthogonal);
  Kind kind() const override { return Kind::LocallyLinear; }
  int state_dim() const override { return m_; }
  int base_count() const { return k_; }
  void register_params(ParamStore& store, Rng& rng) const override;
  void refresh_spectral_state(ParamStore& store) const override {
    alpha_net_.refresh_spectral_state(store);
  }
  ad::Var drift(Binding& b, ad::Var z, double t) const override;
  ad::Var jacobian(Binding& b, ad::Var z, double t) const override;
  /// The state-dependent transition matrix F(z).
  ad::Var mixed_matrix(Binding& b, ad::Var z) const;

private:
  std::string name_;
  int m_;
  int k_;
  nn::Mlp alpha_net_;
  nn::InitScheme base_init_;
};

/// Diffusion D = G Q G^T with G = I and Q diagonal, learned through a
/// softplus with a PSD floor.
class DiffusionSpec {
public:
  DiffusionSpec() = default;
  DiffusionSpec(std::string name, int m, double init_q = 0.1, double floor = 1e-6)
      : name_(std::move(name)), m_(m), init_q_(init_q), floor_(floor) {}
  int state_dim() const { return m_; }
  void register_params(ParamStore& store) const;
  /// Q as a vector of diagonal entries.
  ad::Var q_diagonal(Binding& b) const;
  /// D^{1/2} = diag(sqrt(q_ii)); state-independent, memoized per tape.
  ad::Var diffusion_sqrt(Binding& b, ad::Var z, double t) const;
  ad::Var q_matrix(Binding& b) const;

private:
  std::string name_ = "diffusion.q_raw";
  int m_ = 0;
  double init_q_ = 0.1;
  double floor_ = 1e-6;
};

}  // namespace ncdssm::dyn
