#pragma once

#include "ncdssm/params.hpp"
#include "ncdssm/rng.hpp"
#include "ncdssm/tape.hpp"

#include <string>
#include <vector>

namespace ncdssm::nn {

enum class Activation { None, Tanh, Softplus };

enum class InitScheme { DefaultUniform, Orthogonal, SkewSymmetricExpmSeed, ZeroLastLayer };

/// Random orthogonal matrix (QR of a Gaussian draw, sign-normalized).
Mat orthogonal_matrix(Rng& rng, int n);

/// Random skew-symmetric matrix (G - G^T)/2; its exponential is orthogonal.
Mat skew_symmetric(Rng& rng, int n);

/// Plain-value spectral normalization w / max(1, sigma) with a persistent
/// right-vector estimate refined by `iters` power steps.
Mat spectral_normalize(const Mat& w, Vec& v, int iters = 1);

struct MlpConfig {
  std::vector<int> widths;  // input width, hidden..., output width
  Activation activation = Activation::Softplus;
  bool activation_after_last = false;
  bool spectral_normalize = false;
};

/// Fully-connected stack. Parameters live in a ParamStore under
/// "<prefix>.w<i>" / "<prefix>.b<i>"; spectral-normalization state in
/// "<prefix>.w<i>.sn_u" / ".sn_v" buffers.
class Mlp {
public:
  Mlp() = default;
  Mlp(std::string prefix, MlpConfig cfg, ParamGroup group = ParamGroup::Ssm);

  int input_width() const { return cfg_.widths.front(); }
  int output_width() const { return cfg_.widths.back(); }
  int layers() const { return static_cast<int>(cfg_.widths.size()) - 1; }
  const MlpConfig& config() const { return cfg_; }
  const std::string& prefix() const { return prefix_; }

  /// Creates parameter tensors. Orthogonal / skew schemes fall back to the
  /// default uniform init on non-square layers.
  void register_params(ParamStore& store, InitScheme scheme, Rng& rng) const;

  /// One power-iteration refresh per spectral-normalized layer; call between
  /// training steps, never during recording.
  void refresh_spectral_state(ParamStore& store) const;

  ad::Var forward(Binding& b, ad::Var x) const;

  /// Exact input Jacobian of the net at x, recorded so that it stays
  /// differentiable with respect to the weights.
  ad::Var input_jacobian(Binding& b, ad::Var x) const;

  /// Effective (possibly normalized) weight of one layer, memoized per tape.
  ad::Var weight(Binding& b, int layer) const;

private:
  ad::Var activation_derivative(ad::Tape& t, ad::Var pre, ad::Var post) const;
  ad::Var forward_impl(Binding& b, ad::Var x, std::vector<ad::Var>* pre,
                       std::vector<ad::Var>* post) const;

  std::string prefix_;
  MlpConfig cfg_;
  ParamGroup group_ = ParamGroup::Ssm;
};

/// Diagonal-Gaussian output head: std = softplus(raw) + floor.
struct DiagGaussianHead {
  double floor = 1e-3;

  ad::Var std_from_raw(ad::Tape& t, ad::Var raw) const;

  /// Reparameterized draw mean + std o noise with the noise fixed as a leaf
  /// constant.
  static ad::Var sample(ad::Tape& t, ad::Var mean, ad::Var stddev, const Vec& noise);
};

}  // namespace ncdssm::nn
